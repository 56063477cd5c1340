//! Residual relighting network: a convolutional encoder–decoder whose output
//! is added to the input image, so the network learns an illumination
//! correction rather than a full image.
//!
//! Geometry: four conv stages (two of them stride-2), a run of residual
//! blocks at the bottleneck, and two stride-2 transposed-conv stages back to
//! 3 channels. Spatial dims are preserved end-to-end for inputs divisible
//! by 4; anything else is rejected.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::netcore::{
    ConvBnAct, ConvSpec, Mode, NetError, ParamSlot, Parameterized, ResidualBlock, Result,
};
use crate::tensor::{Scalar, TensorImage};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelightConfig {
    pub base_channels: usize,
    pub num_res_blocks: usize,
    /// Start from the exact identity: zero the last transposed conv so the
    /// residual is zero until training moves it.
    pub zero_init_last: bool,
}

impl Default for RelightConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_res_blocks: 3,
            zero_init_last: true,
        }
    }
}

impl RelightConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(NetError::InvalidConfig("base_channels must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct RelightNet<T> {
    pub config: RelightConfig,
    stem: Vec<ConvBnAct<T>>,
    blocks: Vec<ResidualBlock<T>>,
    up1: ConvBnAct<T>,
    up2: ConvBnAct<T>,
}

impl<T: Scalar> RelightNet<T> {
    /// Deterministic construction: the same seed yields identical parameters.
    pub fn new(config: &RelightConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let stem = vec![
            ConvBnAct::new(ConvSpec::conv(3, c, 3, 1, 1), true, &mut rng),
            ConvBnAct::new(ConvSpec::conv(c, 2 * c, 3, 2, 1), true, &mut rng),
            ConvBnAct::new(ConvSpec::conv(2 * c, 4 * c, 3, 2, 1), true, &mut rng),
            ConvBnAct::new(ConvSpec::conv(4 * c, 4 * c, 3, 1, 1), true, &mut rng),
        ];
        let blocks = (0..config.num_res_blocks)
            .map(|_| ResidualBlock::new(4 * c, &mut rng))
            .collect();
        let up1 = ConvBnAct::new(ConvSpec::transposed(4 * c, 2 * c, 4, 2, 1), true, &mut rng);
        let mut up2 = ConvBnAct::new(ConvSpec::transposed(2 * c, 3, 4, 2, 1), false, &mut rng);
        if config.zero_init_last {
            up2.conv.zero_weights();
        }
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            up1,
            up2,
        })
    }

    /// Stages carrying weights: 4 stem convs, the residual blocks, 2 upsamplers.
    pub fn weighted_stage_count(&self) -> usize {
        self.stem.len() + self.blocks.len() + 2
    }

    fn check_input(x: &TensorImage<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(NetError::ChannelMismatch { expected: 3, got: c });
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(NetError::Shape(format!(
                "input {h}x{w} not divisible by 4; the encoder/decoder would not round-trip"
            )));
        }
        Ok(())
    }

    /// The correction the network proposes, before the skip connection.
    pub fn residual(&mut self, x: &TensorImage<T>, mode: Mode, keep_cache: bool) -> Result<TensorImage<T>> {
        Self::check_input(x)?;
        let mut h = x.clone();
        for stage in &mut self.stem {
            h = stage.forward(&h, mode, keep_cache)?;
        }
        for block in &mut self.blocks {
            h = block.forward(&h, mode, keep_cache)?;
        }
        let h = self.up1.forward(&h, mode, keep_cache)?;
        self.up2.forward(&h, mode, keep_cache)
    }

    /// Relit image: input + residual. No clamping — the result feeds the
    /// segmenter, and clamping would zero gradients.
    pub fn forward(&mut self, x: &TensorImage<T>, mode: Mode, keep_cache: bool) -> Result<TensorImage<T>> {
        let r = self.residual(x, mode, keep_cache)?;
        Ok(x + &r)
    }

    /// Backward through `forward`: the skip adds `gy` to the stack's input
    /// gradient. Parameter gradients accumulate into the layers.
    pub fn backward(&mut self, gy: &TensorImage<T>) -> TensorImage<T> {
        let mut g = self.up2.backward(gy);
        g = self.up1.backward(&g);
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g);
        }
        for stage in self.stem.iter_mut().rev() {
            g = stage.backward(&g);
        }
        g + gy
    }
}

impl<T: Scalar> Parameterized<T> for RelightNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        let join = |name: String| {
            if prefix.is_empty() {
                name
            } else {
                format!("{prefix}.{name}")
            }
        };
        for (i, stage) in self.stem.iter_mut().enumerate() {
            stage.visit_params(&join(format!("stem{i}")), f);
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&join(format!("block{i}")), f);
        }
        self.up1.visit_params(&join("up0".into()), f);
        self.up2.visit_params(&join("up1".into()), f);
    }
}
