//! Multi-resolution segmentation network: a stride-4 stem, four stages of
//! parallel branches at 1/4..1/32 of the input resolution, transition layers
//! that add one lower-resolution branch per stage, fusion modules that
//! exchange information across resolutions, and a concatenation head that
//! emits per-class logits at the input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::netcore::{
    bilinear_resize, bilinear_resize_backward, concat_channels, split_channels, Conv2d, ConvBnAct,
    ConvSpec, Mode, NetError, ParamSlot, Parameterized, Relu, ResidualBlock, Result,
};
use crate::tensor::{Scalar, TensorImage};

pub const STAGES: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub stem_channels: usize,
    pub branch_channels: [usize; STAGES],
    pub blocks_per_branch: usize,
    pub modules_per_stage: [usize; STAGES],
    pub head_mid_channels: usize,
    pub num_classes: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            stem_channels: 64,
            branch_channels: [32, 64, 128, 256],
            blocks_per_branch: 2,
            modules_per_stage: [1, 1, 2, 1],
            head_mid_channels: 128,
            num_classes: 19,
        }
    }
}

impl SegConfig {
    /// Reduced geometry for tests and benches: same topology, fewer channels.
    pub fn small() -> Self {
        Self {
            stem_channels: 8,
            branch_channels: [4, 8, 16, 32],
            blocks_per_branch: 1,
            modules_per_stage: [1, 1, 1, 1],
            head_mid_channels: 16,
            num_classes: 19,
        }
    }

    pub fn concat_width(&self) -> usize {
        self.branch_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels < 1 || self.head_mid_channels < 1 || self.blocks_per_branch < 1 {
            return Err(NetError::InvalidConfig(
                "stem/head channels and blocks_per_branch must be >= 1".into(),
            ));
        }
        if !self.branch_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(NetError::InvalidConfig(format!(
                "branch_channels must be strictly increasing, got {:?}",
                self.branch_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(NetError::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.modules_per_stage.iter().any(|&m| m < 1) {
            return Err(NetError::InvalidConfig(
                "every stage needs at least one module".into(),
            ));
        }
        Ok(())
    }
}

/// One cross-resolution connector inside a fusion module.
enum FusePath<T> {
    /// Same branch: pass through untouched.
    Identity,
    /// Higher → lower resolution: a chain of stride-2 conv+norm links with
    /// ReLU between links but none after the last.
    Down(Vec<ConvBnAct<T>>),
    /// Lower → higher resolution: 1x1 conv+norm to match channels, then
    /// bilinear upsampling to the target branch's dims.
    Up(ConvBnAct<T>),
}

impl<T: Scalar> FusePath<T> {
    fn forward(
        &mut self,
        x: &TensorImage<T>,
        target_hw: (usize, usize),
        mode: Mode,
        keep_cache: bool,
    ) -> Result<TensorImage<T>> {
        match self {
            FusePath::Identity => Ok(x.clone()),
            FusePath::Down(links) => {
                let mut h = x.clone();
                for link in links {
                    h = link.forward(&h, mode, keep_cache)?;
                }
                Ok(h)
            }
            FusePath::Up(link) => {
                let h = link.forward(x, mode, keep_cache)?;
                Ok(bilinear_resize(&h, target_hw.0, target_hw.1))
            }
        }
    }

    fn backward(&mut self, gy: &TensorImage<T>, source_hw: (usize, usize)) -> TensorImage<T> {
        match self {
            FusePath::Identity => gy.clone(),
            FusePath::Down(links) => {
                let mut g = gy.clone();
                for link in links.iter_mut().rev() {
                    g = link.backward(&g);
                }
                g
            }
            FusePath::Up(link) => {
                let g = bilinear_resize_backward(gy, source_hw.0, source_hw.1);
                link.backward(&g)
            }
        }
    }
}

/// Full pairwise exchange for one stage: output j = ReLU(sum_i path[j][i](x_i)).
struct FuseModule<T> {
    /// paths[j][i] transforms branch i into branch j's geometry.
    paths: Vec<Vec<FusePath<T>>>,
    relus: Vec<Relu<T>>,
}

impl<T: Scalar> FuseModule<T> {
    fn new(channels: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let b = channels.len();
        let mut paths = Vec::with_capacity(b);
        for j in 0..b {
            let mut row = Vec::with_capacity(b);
            for i in 0..b {
                row.push(if i == j {
                    FusePath::Identity
                } else if i < j {
                    let hops = j - i;
                    let links = (0..hops)
                        .map(|t| {
                            // Channels stay at the source width until the
                            // final link adapts to the target branch.
                            let out_c = if t == hops - 1 { channels[j] } else { channels[i] };
                            ConvBnAct::new(ConvSpec::conv(channels[i], out_c, 3, 2, 1), t != hops - 1, rng)
                        })
                        .collect();
                    FusePath::Down(links)
                } else {
                    FusePath::Up(ConvBnAct::new(
                        ConvSpec::conv(channels[i], channels[j], 1, 1, 0),
                        false,
                        rng,
                    ))
                });
            }
            paths.push(row);
        }
        Self {
            paths,
            relus: (0..b).map(|_| Relu::new()).collect(),
        }
    }

    fn forward(
        &mut self,
        branches: &[TensorImage<T>],
        mode: Mode,
        keep_cache: bool,
    ) -> Result<Vec<TensorImage<T>>> {
        let b = branches.len();
        assert_eq!(b, self.paths.len(), "fuse module arity mismatch");
        let mut out = Vec::with_capacity(b);
        for j in 0..b {
            let (_, _, th, tw) = branches[j].dim();
            let mut acc: Option<TensorImage<T>> = None;
            for i in 0..b {
                let t = self.paths[j][i].forward(&branches[i], (th, tw), mode, keep_cache)?;
                acc = Some(match acc {
                    None => t,
                    Some(a) => a + &t,
                });
            }
            out.push(self.relus[j].forward(&acc.unwrap(), keep_cache));
        }
        Ok(out)
    }

    fn backward(&mut self, gys: &[TensorImage<T>], in_dims: &[(usize, usize)]) -> Vec<TensorImage<T>> {
        let b = gys.len();
        let mut dbranches: Vec<Option<TensorImage<T>>> = (0..b).map(|_| None).collect();
        for j in 0..b {
            let g = self.relus[j].backward(&gys[j]);
            for i in 0..b {
                let di = self.paths[j][i].backward(&g, in_dims[i]);
                dbranches[i] = Some(match dbranches[i].take() {
                    None => di,
                    Some(a) => a + &di,
                });
            }
        }
        dbranches.into_iter().map(|d| d.unwrap()).collect()
    }
}

impl<T: Scalar> Parameterized<T> for FuseModule<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        for (j, row) in self.paths.iter_mut().enumerate() {
            for (i, path) in row.iter_mut().enumerate() {
                match path {
                    FusePath::Identity => {}
                    FusePath::Down(links) => {
                        for (t, link) in links.iter_mut().enumerate() {
                            link.visit_params(&format!("{prefix}.to{j}from{i}.link{t}"), f);
                        }
                    }
                    FusePath::Up(link) => {
                        link.visit_params(&format!("{prefix}.to{j}from{i}"), f);
                    }
                }
            }
        }
    }
}

/// One exchange module: residual blocks per branch, then fusion.
struct ExchangeModule<T> {
    branch_blocks: Vec<Vec<ResidualBlock<T>>>,
    fuse: FuseModule<T>,
}

impl<T: Scalar> ExchangeModule<T> {
    fn new(channels: &[usize], blocks_per_branch: usize, rng: &mut ChaCha8Rng) -> Self {
        let branch_blocks = channels
            .iter()
            .map(|&c| (0..blocks_per_branch).map(|_| ResidualBlock::new(c, rng)).collect())
            .collect();
        Self {
            branch_blocks,
            fuse: FuseModule::new(channels, rng),
        }
    }

    fn forward(
        &mut self,
        branches: &[TensorImage<T>],
        mode: Mode,
        keep_cache: bool,
    ) -> Result<Vec<TensorImage<T>>> {
        let mut mid = Vec::with_capacity(branches.len());
        for (x, blocks) in branches.iter().zip(&mut self.branch_blocks) {
            let mut h = x.clone();
            for block in blocks {
                h = block.forward(&h, mode, keep_cache)?;
            }
            mid.push(h);
        }
        self.fuse.forward(&mid, mode, keep_cache)
    }

    fn backward(&mut self, gys: &[TensorImage<T>]) -> Vec<TensorImage<T>> {
        let dims: Vec<(usize, usize)> = gys
            .iter()
            .map(|g| {
                let (_, _, h, w) = g.dim();
                (h, w)
            })
            .collect();
        let mid = self.fuse.backward(gys, &dims);
        mid.into_iter()
            .zip(&mut self.branch_blocks)
            .map(|(mut g, blocks)| {
                for block in blocks.iter_mut().rev() {
                    g = block.backward(&g);
                }
                g
            })
            .collect()
    }
}

impl<T: Scalar> Parameterized<T> for ExchangeModule<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        for (b, blocks) in self.branch_blocks.iter_mut().enumerate() {
            for (k, block) in blocks.iter_mut().enumerate() {
                block.visit_params(&format!("{prefix}.branch{b}.block{k}"), f);
            }
        }
        self.fuse.visit_params(&format!("{prefix}.fuse"), f);
    }
}

pub struct SegNet<T> {
    pub config: SegConfig,
    stem1: ConvBnAct<T>,
    stem2: ConvBnAct<T>,
    entry: ConvBnAct<T>,
    stages: Vec<Vec<ExchangeModule<T>>>,
    /// transitions[s] spawns the new branch after stage s from its
    /// lowest-resolution branch; existing branches pass through unchanged
    /// because branch channels never change between stages.
    transitions: Vec<ConvBnAct<T>>,
    head_mix: ConvBnAct<T>,
    head_out: Conv2d<T>,
    /// Input spatial dims of the last cached forward, for backward resizes.
    cached_input_hw: Option<(usize, usize)>,
}

impl<T: Scalar> SegNet<T> {
    pub fn new(config: &SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sc = config.stem_channels;
        let bc = config.branch_channels;

        let stem1 = ConvBnAct::new(ConvSpec::conv(3, sc, 3, 2, 1), true, &mut rng);
        let stem2 = ConvBnAct::new(ConvSpec::conv(sc, sc, 3, 2, 1), true, &mut rng);
        let entry = ConvBnAct::new(ConvSpec::conv(sc, bc[0], 1, 1, 0), true, &mut rng);

        let mut stages = Vec::with_capacity(STAGES);
        let mut transitions = Vec::with_capacity(STAGES - 1);
        for s in 0..STAGES {
            let channels = &bc[..=s];
            let modules = (0..config.modules_per_stage[s])
                .map(|_| ExchangeModule::new(channels, config.blocks_per_branch, &mut rng))
                .collect();
            stages.push(modules);
            if s + 1 < STAGES {
                transitions.push(ConvBnAct::new(
                    ConvSpec::conv(bc[s], bc[s + 1], 3, 2, 1),
                    true,
                    &mut rng,
                ));
            }
        }

        let head_mix = ConvBnAct::new(
            ConvSpec::conv(config.concat_width(), config.head_mid_channels, 1, 1, 0),
            true,
            &mut rng,
        );
        let head_out = Conv2d::new(
            ConvSpec::conv(config.head_mid_channels, config.num_classes, 1, 1, 0).with_bias(),
            &mut rng,
        );

        Ok(Self {
            config: config.clone(),
            stem1,
            stem2,
            entry,
            stages,
            transitions,
            head_mix,
            head_out,
            cached_input_hw: None,
        })
    }

    fn check_input(x: &TensorImage<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(NetError::ChannelMismatch { expected: 3, got: c });
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(NetError::Shape(format!(
                "input {h}x{w} not divisible by 32; branch resolutions would not align"
            )));
        }
        Ok(())
    }

    /// Spatial dims of branch `j` for an input of `(h, w)`.
    pub fn branch_dims(input_hw: (usize, usize), j: usize) -> (usize, usize) {
        let div = 4 << j;
        (input_hw.0 / div, input_hw.1 / div)
    }

    /// Runs the trunk and returns the four final branch tensors.
    pub fn forward_branches(
        &mut self,
        x: &TensorImage<T>,
        mode: Mode,
        keep_cache: bool,
    ) -> Result<Vec<TensorImage<T>>> {
        Self::check_input(x)?;
        let mut h = self.stem1.forward(x, mode, keep_cache)?;
        h = self.stem2.forward(&h, mode, keep_cache)?;
        h = self.entry.forward(&h, mode, keep_cache)?;

        let mut branches = vec![h];
        for s in 0..STAGES {
            for module in &mut self.stages[s] {
                branches = module.forward(&branches, mode, keep_cache)?;
            }
            if s + 1 < STAGES {
                let new = self.transitions[s].forward(branches.last().unwrap(), mode, keep_cache)?;
                branches.push(new);
            }
        }
        Ok(branches)
    }

    /// Concatenation head: branches resized to the first branch's dims,
    /// concatenated in order, mixed by a 1x1 conv stage, projected to
    /// per-class logits, and upsampled to `(out_h, out_w)`.
    pub fn head_forward(
        &mut self,
        branches: &[TensorImage<T>],
        out_h: usize,
        out_w: usize,
        mode: Mode,
        keep_cache: bool,
    ) -> Result<TensorImage<T>> {
        if branches.len() != STAGES {
            return Err(NetError::Shape(format!(
                "head expects {STAGES} branches, got {}",
                branches.len()
            )));
        }
        let (_, _, h1, w1) = branches[0].dim();
        let resized: Vec<TensorImage<T>> = branches
            .iter()
            .map(|b| bilinear_resize(b, h1, w1))
            .collect();
        let refs: Vec<&TensorImage<T>> = resized.iter().collect();
        let cat = concat_channels(&refs)?;
        let mixed = self.head_mix.forward(&cat, mode, keep_cache)?;
        let logits = self.head_out.forward(&mixed, keep_cache)?;
        Ok(bilinear_resize(&logits, out_h, out_w))
    }

    /// Full forward pass: logits with the input's spatial dims.
    pub fn forward(&mut self, x: &TensorImage<T>, mode: Mode, keep_cache: bool) -> Result<TensorImage<T>> {
        let (_, _, h, w) = x.dim();
        let branches = self.forward_branches(x, mode, keep_cache)?;
        if keep_cache {
            self.cached_input_hw = Some((h, w));
        }
        self.head_forward(&branches, h, w, mode, keep_cache)
    }

    /// Backward through the cached forward; returns the input-image gradient.
    pub fn backward(&mut self, gy: &TensorImage<T>) -> TensorImage<T> {
        let (h, w) = self.cached_input_hw.expect("forward(keep_cache) before backward");
        let hw1 = Self::branch_dims((h, w), 0);

        // Head, in reverse.
        let g = bilinear_resize_backward(gy, hw1.0, hw1.1);
        let g = self.head_out.backward(&g);
        let g = self.head_mix.backward(&g);
        let widths = self.config.branch_channels.to_vec();
        let parts = split_channels(&g, &widths);
        let mut grads: Vec<TensorImage<T>> = parts
            .iter()
            .enumerate()
            .map(|(j, gj)| {
                let (bh, bw) = Self::branch_dims((h, w), j);
                bilinear_resize_backward(gj, bh, bw)
            })
            .collect();

        // Stages, in reverse.
        for s in (0..STAGES).rev() {
            if s + 1 < STAGES {
                let gnew = grads.pop().unwrap();
                let dlast = self.transitions[s].backward(&gnew);
                let last = grads.last_mut().unwrap();
                *last = &*last + &dlast;
            }
            for module in self.stages[s].iter_mut().rev() {
                grads = module.backward(&grads);
            }
        }

        let g = grads.pop().unwrap();
        let g = self.entry.backward(&g);
        let g = self.stem2.backward(&g);
        self.stem1.backward(&g)
    }
}

impl<T: Scalar> Parameterized<T> for SegNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        let join = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.stem1.visit_params(&join("stem1"), f);
        self.stem2.visit_params(&join("stem2"), f);
        self.entry.visit_params(&join("entry"), f);
        for (s, modules) in self.stages.iter_mut().enumerate() {
            for (m, module) in modules.iter_mut().enumerate() {
                module.visit_params(&join(&format!("stage{}.module{m}", s + 1)), f);
            }
        }
        for (s, t) in self.transitions.iter_mut().enumerate() {
            t.visit_params(&join(&format!("transition{}", s + 1)), f);
        }
        self.head_mix.visit_params(&join("head_mix"), f);
        self.head_out.visit_params(&join("head_out"), f);
    }
}
