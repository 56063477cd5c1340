//! Adversarial domain adaptation in output space: a fully convolutional
//! discriminator classifies softmax probability maps as source-like or
//! target-like; the segmenter earns an extra loss for target maps the
//! discriminator can tell apart.

use super::Result;
use crate::netcore::{Conv2d, ConvSpec, LeakyRelu, ParamSlot, Parameterized};
use crate::tensor::{Scalar, TensorImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Weight of the adversarial term in the segmenter's loss.
    pub adv_weight: f64,
    pub disc_lr: f64,
    pub disc_channels: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            adv_weight: 0.001,
            disc_lr: 1e-4,
            disc_channels: 64,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.adv_weight < 0.0 {
            return Err("adv_weight must be non-negative".into());
        }
        if self.disc_lr <= 0.0 {
            return Err("disc_lr must be positive".into());
        }
        if self.disc_channels == 0 {
            return Err("disc_channels must be at least 1".into());
        }
        Ok(())
    }
}

const LEAKY_SLOPE: f64 = 0.2;

/// Five stride-2 4x4 convolutions (channels in → d → 2d → 4d → 8d → 1)
/// with leaky ReLU between them and none after the last. No normalization
/// layers: probability maps are already bounded inputs.
pub struct Discriminator<T> {
    convs: Vec<Conv2d<T>>,
    acts: Vec<LeakyRelu<T>>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(in_channels: usize, base_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = base_channels;
        let plan = [in_channels, d, 2 * d, 4 * d, 8 * d, 1];
        let convs = plan
            .windows(2)
            .map(|io| Conv2d::new(ConvSpec::conv(io[0], io[1], 4, 2, 1).with_bias(), &mut rng))
            .collect();
        let acts = (0..4).map(|_| LeakyRelu::new(LEAKY_SLOPE)).collect();
        Self { convs, acts }
    }

    /// Input: (B, K, H, W) probability maps with H, W divisible by 32.
    /// Output: (B, 1, H/32, W/32) source-vs-target logits.
    pub fn forward(&mut self, x: &TensorImage<T>, keep_cache: bool) -> Result<TensorImage<T>> {
        let mut h = x.clone();
        for i in 0..self.convs.len() {
            h = self.convs[i].forward(&h, keep_cache)?;
            if i + 1 < self.convs.len() {
                h = self.acts[i].forward(&h, keep_cache);
            }
        }
        Ok(h)
    }

    pub fn backward(&mut self, gy: &TensorImage<T>) -> TensorImage<T> {
        let mut g = gy.clone();
        for i in (0..self.convs.len()).rev() {
            if i + 1 < self.convs.len() {
                g = self.acts[i].backward(&g);
            }
            g = self.convs[i].backward(&g);
        }
        g
    }
}

impl<T: Scalar> Parameterized<T> for Discriminator<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            let name = if prefix.is_empty() {
                format!("conv{i}")
            } else {
                format!("{prefix}.conv{i}")
            };
            conv.visit_params(&name, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, probe_weights, weighted_sum, FD_EPSILON};
    use crate::netcore::SnapshotExt;
    use rand::Rng;

    fn rand_input(shape: (usize, usize, usize, usize), seed: u64) -> TensorImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorImage::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn output_shape_downscales_by_32() {
        let mut d = Discriminator::<f32>::new(19, 8, 0);
        let x = TensorImage::<f32>::zeros((2, 19, 64, 32));
        let y = d.forward(&x, false).unwrap();
        assert_eq!(y.dim(), (2, 1, 2, 1));
    }

    #[test]
    fn channel_plan_follows_doubling_ladder() {
        let mut d = Discriminator::<f32>::new(4, 8, 1);
        let mut names = Vec::new();
        d.visit_params("", &mut |slot| names.push((slot.name, slot.value.len())));
        // conv0: 4->8, conv1: 8->16, conv2: 16->32, conv3: 32->64, conv4: 64->1.
        let weights: Vec<usize> = names
            .iter()
            .filter(|(n, _)| n.ends_with("weight"))
            .map(|&(_, len)| len)
            .collect();
        assert_eq!(
            weights,
            vec![8 * 4 * 16, 16 * 8 * 16, 32 * 16 * 16, 64 * 32 * 16, 64 * 16]
        );
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = Discriminator::<f32>::new(4, 4, 7).snapshot();
        let b = Discriminator::<f32>::new(4, 4, 7).snapshot();
        assert_eq!(a, b);
    }

    // Seeds are chosen so no sampled coordinate sits within the finite-
    // difference step of a leaky-ReLU kink; a crossing would inflate the
    // numeric estimate even though the analytic gradient is right.
    #[test]
    fn gradients_match_finite_differences() {
        let mut d = Discriminator::<f64>::new(3, 2, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_input((1, 3, 32, 32), 15);
        let y = d.forward(&x, true).unwrap();
        let probe = probe_weights::<f64>(y.dim(), &mut rng);
        d.zero_grads();
        d.backward(&probe);
        let p2 = probe.clone();
        let report = check_param_gradients(
            &mut d,
            |n| weighted_sum(&n.forward(&x, false).unwrap(), &p2),
            FD_EPSILON,
            4,
            &mut rng,
        );
        report.assert_below(1e-4);
    }
}
