//! Parameter traversal and the composite building blocks shared by both
//! networks.

use ndarray::Array1;
use rand::Rng;

use super::conv::Conv2d;
use super::norm::BatchNorm2d;
use super::ops::Relu;
use super::{ConvSpec, Mode, NetError, Result};
use crate::tensor::{Scalar, TensorImage};

/// One named tensor surfaced during a parameter walk. Entries without a
/// gradient are persistent state (running statistics), not trainable weights.
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: Option<&'a mut [T]>,
    /// Whether weight decay applies; off for norm affines and biases.
    pub decay: bool,
}

/// Visitor over every named tensor of a module tree, in a fixed order.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        f(ParamSlot {
            name: join(prefix, "weight"),
            value: self.weight.as_slice_mut().unwrap(),
            grad: Some(self.grad_weight.as_slice_mut().unwrap()),
            decay: true,
        });
        if let (Some(b), Some(gb)) = (&mut self.bias, &mut self.grad_bias) {
            f(ParamSlot {
                name: join(prefix, "bias"),
                value: b.as_slice_mut().unwrap(),
                grad: Some(gb.as_slice_mut().unwrap()),
                decay: false,
            });
        }
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        f(ParamSlot {
            name: join(prefix, "scale"),
            value: self.state.scale.as_slice_mut().unwrap(),
            grad: Some(self.grad_scale.as_slice_mut().unwrap()),
            decay: false,
        });
        f(ParamSlot {
            name: join(prefix, "shift"),
            value: self.state.shift.as_slice_mut().unwrap(),
            grad: Some(self.grad_shift.as_slice_mut().unwrap()),
            decay: false,
        });
        f(ParamSlot {
            name: join(prefix, "running_mean"),
            value: self.state.running_mean.as_slice_mut().unwrap(),
            grad: None,
            decay: false,
        });
        f(ParamSlot {
            name: join(prefix, "running_var"),
            value: self.state.running_var.as_slice_mut().unwrap(),
            grad: None,
            decay: false,
        });
    }
}

/// Convenience walks over any `Parameterized` tree.
pub trait SnapshotExt<T: Scalar>: Parameterized<T> {
    fn zero_grads(&mut self) {
        self.visit_params("", &mut |slot| {
            if let Some(g) = slot.grad {
                g.fill(T::zero());
            }
        });
    }

    /// Number of trainable scalars.
    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |slot| {
            if slot.grad.is_some() {
                n += slot.value.len();
            }
        });
        n
    }

    /// All tensors (trainable and state) as owned name/value pairs.
    fn snapshot(&mut self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |slot| {
            out.push((slot.name, slot.value.to_vec()));
        });
        out
    }

    fn grad_snapshot(&mut self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |slot| {
            if let Some(g) = slot.grad {
                out.push((slot.name, g.to_vec()));
            }
        });
        out
    }

    /// Restores only the persistent state entries (those without gradients),
    /// leaving trainable weights untouched. Lets repeated train-mode passes
    /// start from identical running statistics.
    fn restore_state(&mut self, snap: &[(String, Vec<T>)]) {
        let mut i = 0;
        self.visit_params("", &mut |slot| {
            if let Some((name, values)) = snap.get(i) {
                debug_assert_eq!(*name, slot.name, "snapshot/module walk order diverged");
                if slot.grad.is_none() && values.len() == slot.value.len() {
                    slot.value.copy_from_slice(values);
                }
            }
            i += 1;
        });
    }

    /// Loads a snapshot produced by a structurally identical module.
    fn restore(&mut self, snap: &[(String, Vec<T>)]) -> Result<()> {
        let mut err = None;
        let mut i = 0;
        self.visit_params("", &mut |slot| {
            if err.is_some() {
                return;
            }
            match snap.get(i) {
                Some((name, values)) if *name == slot.name && values.len() == slot.value.len() => {
                    slot.value.copy_from_slice(values);
                }
                Some((name, values)) => {
                    err = Some(NetError::Shape(format!(
                        "snapshot entry {i} is {name}[{}], module expects {}[{}]",
                        values.len(),
                        slot.name,
                        slot.value.len()
                    )));
                }
                None => err = Some(NetError::Shape("snapshot has too few entries".into())),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != snap.len() {
            return Err(NetError::Shape(format!(
                "snapshot has {} entries, module visited {i}",
                snap.len()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar, N: Parameterized<T> + ?Sized> SnapshotExt<T> for N {}

/// Convolution -> batch norm -> optional ReLU. The norm's shift makes a conv
/// bias redundant, so the convolution always runs bias-free.
pub struct ConvBnAct<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: bool,
    relu: Relu<T>,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(spec: ConvSpec, act: bool, rng: &mut impl Rng) -> Self {
        let spec = ConvSpec {
            has_bias: false,
            ..spec
        };
        let out_channels = spec.out_channels;
        Self {
            conv: Conv2d::new(spec, rng),
            bn: BatchNorm2d::new(out_channels),
            act,
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &TensorImage<T>, mode: Mode, keep_cache: bool) -> Result<TensorImage<T>> {
        let y = self.conv.forward(x, keep_cache)?;
        let y = self.bn.forward(&y, mode, keep_cache)?;
        Ok(if self.act {
            self.relu.forward(&y, keep_cache)
        } else {
            y
        })
    }

    pub fn backward(&mut self, gy: &TensorImage<T>) -> TensorImage<T> {
        let g = if self.act {
            self.relu.backward(gy)
        } else {
            gy.clone()
        };
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }
}

impl<T: Scalar> Parameterized<T> for ConvBnAct<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
}

/// Basic residual block: two 3x3 conv+norm stages and an identity skip,
/// with ReLU after the first stage and after the addition.
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    relu_out: Relu<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let spec = ConvSpec::conv(channels, channels, 3, 1, 1);
        Self {
            conv1: Conv2d::new(spec.clone(), rng),
            bn1: BatchNorm2d::new(channels),
            relu1: Relu::new(),
            conv2: Conv2d::new(spec, rng),
            bn2: BatchNorm2d::new(channels),
            relu_out: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &TensorImage<T>, mode: Mode, keep_cache: bool) -> Result<TensorImage<T>> {
        let h = self.conv1.forward(x, keep_cache)?;
        let h = self.bn1.forward(&h, mode, keep_cache)?;
        let h = self.relu1.forward(&h, keep_cache);
        let h = self.conv2.forward(&h, keep_cache)?;
        let h = self.bn2.forward(&h, mode, keep_cache)?;
        let y = &h + x;
        Ok(self.relu_out.forward(&y, keep_cache))
    }

    pub fn backward(&mut self, gy: &TensorImage<T>) -> TensorImage<T> {
        let g = self.relu_out.backward(gy);
        let gm = self.bn2.backward(&g);
        let gm = self.conv2.backward(&gm);
        let gm = self.relu1.backward(&gm);
        let gm = self.bn1.backward(&gm);
        let gm = self.conv1.backward(&gm);
        gm + g
    }
}

impl<T: Scalar> Parameterized<T> for ResidualBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
    }
}

/// Broadcast-adds a per-channel bias, used by a couple of standalone heads.
pub fn add_channel_bias<T: Scalar>(x: &mut TensorImage<T>, bias: &Array1<T>) {
    let (_, c_n, h_n, w_n) = x.dim();
    assert_eq!(c_n, bias.len());
    let plane = h_n * w_n;
    let xs = x.as_slice_mut().unwrap();
    crate::par::for_each_plane_mut(xs, plane, |idx, p| {
        let b = bias[idx % c_n];
        for v in p.iter_mut() {
            *v += b;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_gradient, check_param_gradients, probe_weights, weighted_sum, FD_EPSILON};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: (usize, usize, usize, usize), seed: u64) -> TensorImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorImage::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_bn_act_is_always_bias_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let block = ConvBnAct::<f32>::new(ConvSpec::conv(3, 8, 3, 1, 1).with_bias(), true, &mut rng);
        assert!(block.conv.bias.is_none());
    }

    #[test]
    fn param_walk_visits_fixed_names_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut block = ConvBnAct::<f32>::new(ConvSpec::conv(3, 8, 3, 1, 1), true, &mut rng);
        let mut names = Vec::new();
        block.visit_params("stem", &mut |slot| names.push((slot.name, slot.grad.is_some(), slot.decay)));
        assert_eq!(
            names,
            vec![
                ("stem.conv.weight".to_string(), true, true),
                ("stem.bn.scale".to_string(), true, false),
                ("stem.bn.shift".to_string(), true, false),
                ("stem.bn.running_mean".to_string(), false, false),
                ("stem.bn.running_var".to_string(), false, false),
            ]
        );
    }

    #[test]
    fn residual_block_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let mut block = ResidualBlock::<f32>::new(16, &mut rng);
        // Two 3x3 convs (16*16*9 each) plus two norms (scale+shift, 16 each).
        assert_eq!(block.param_count(), 2 * 16 * 16 * 9 + 2 * 2 * 16);
    }

    #[test]
    fn zeroed_residual_block_reduces_to_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut block = ResidualBlock::<f32>::new(4, &mut rng);
        block.conv1.zero_weights();
        block.conv2.zero_weights();
        let x = rand_tensor((1, 4, 5, 5), 65).mapv(|v| v as f32);
        let y = block.forward(&x, Mode::Eval, false).unwrap();
        let expect = crate::netcore::relu(&x);
        assert_eq!(y, expect);
    }

    #[test]
    fn snapshot_restore_round_trips_and_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut block = ResidualBlock::<f32>::new(4, &mut rng);
        let snap = block.snapshot();
        block.conv1.weight.fill(9.0);
        block.bn1.state.running_mean.fill(5.0);
        block.restore(&snap).unwrap();
        assert_eq!(block.snapshot(), snap);

        let mut other = ResidualBlock::<f32>::new(8, &mut rng);
        assert!(other.restore(&snap).is_err());
    }

    #[test]
    fn conv_bn_act_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let mut block = ConvBnAct::<f64>::new(ConvSpec::conv(2, 3, 3, 2, 1), true, &mut rng);
        let x = rand_tensor((2, 2, 6, 6), 68);
        let y = block.forward(&x, Mode::Train, true).unwrap();
        let probe = probe_weights::<f64>(y.dim(), &mut rng);

        block.zero_grads();
        let dx = block.backward(&probe);

        let frozen: Vec<(String, Vec<f64>)> = block.snapshot();
        let p2 = probe.clone();
        let report = check_param_gradients(
            &mut block,
            |net| {
                // Running stats drift with each train-mode pass; pin them.
                net.restore_state(&frozen);
                weighted_sum(&net.forward(&x, Mode::Train, false).unwrap(), &p2)
            },
            FD_EPSILON,
            4,
            &mut rng,
        );
        report.assert_below(1e-6);

        let report = check_input_gradient(
            &x,
            &dx,
            |xp| weighted_sum(&block.forward(xp, Mode::Train, false).unwrap(), &probe),
            FD_EPSILON,
            30,
            &mut rng,
        );
        report.assert_below(1e-6);
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let mut block = ResidualBlock::<f64>::new(3, &mut rng);
        let x = rand_tensor((1, 3, 5, 5), 70);
        let y = block.forward(&x, Mode::Train, true).unwrap();
        let probe = probe_weights::<f64>(y.dim(), &mut rng);

        block.zero_grads();
        let dx = block.backward(&probe);

        let frozen = block.snapshot();
        let p2 = probe.clone();
        let report = check_param_gradients(
            &mut block,
            |net| {
                net.restore_state(&frozen);
                weighted_sum(&net.forward(&x, Mode::Train, false).unwrap(), &p2)
            },
            FD_EPSILON,
            4,
            &mut rng,
        );
        report.assert_below(1e-5);

        let report = check_input_gradient(
            &x,
            &dx,
            |xp| weighted_sum(&block.forward(xp, Mode::Train, false).unwrap(), &probe),
            FD_EPSILON,
            30,
            &mut rng,
        );
        report.assert_below(1e-5);
    }

    #[test]
    fn channel_bias_broadcast() {
        let mut x = TensorImage::<f32>::zeros((2, 2, 2, 2));
        add_channel_bias(&mut x, &ndarray::array![1.0f32, -2.0]);
        assert!(x.slice(ndarray::s![.., 0, .., ..]).iter().all(|v| *v == 1.0));
        assert!(x.slice(ndarray::s![.., 1, .., ..]).iter().all(|v| *v == -2.0));
    }
}
