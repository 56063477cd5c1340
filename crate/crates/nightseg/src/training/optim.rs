//! SGD with momentum, weight decay, and the polynomial learning-rate
//! schedule. Momentum buffers are keyed by parameter name, so they survive
//! checkpointing and are independent of traversal details.

use crate::netcore::Parameterized;
use crate::tensor::Scalar;
use std::collections::BTreeMap;

/// `base_lr · (1 − iteration/max_iterations)^power`, clamped at 0 when the
/// schedule is exhausted.
pub fn poly_lr(iteration: usize, max_iterations: usize, base_lr: f64, power: f64) -> f64 {
    if max_iterations == 0 || iteration >= max_iterations {
        return 0.0;
    }
    let progress = iteration as f64 / max_iterations as f64;
    base_lr * (1.0 - progress).powf(power)
}

#[derive(Debug, Clone)]
pub struct SgdOptimizer<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> SgdOptimizer<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        assert!(weight_decay >= 0.0, "weight decay must be non-negative");
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// One update: `buffer ← momentum·buffer + grad + weight_decay·param`
    /// then `param ← param − lr·buffer`. Weight decay is skipped for slots
    /// flagged decay-free (norm scale/shift and biases); slots without
    /// gradients (running statistics) are never touched.
    pub fn step<N: Parameterized<T>>(&mut self, net: &mut N, lr: f64) {
        let m = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        net.visit_params("", &mut |slot| {
            let Some(grad) = slot.grad else { return };
            let wd = if slot.decay {
                T::from_f64(self.weight_decay)
            } else {
                T::zero()
            };
            let buffer = self
                .buffers
                .entry(slot.name.clone())
                .or_insert_with(|| vec![T::zero(); slot.value.len()]);
            debug_assert_eq!(buffer.len(), slot.value.len(), "{}", slot.name);
            for ((b, &g), p) in buffer.iter_mut().zip(grad.iter()).zip(slot.value.iter_mut()) {
                *b = m * *b + g + wd * *p;
                *p -= lr * *b;
            }
        });
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<T>> {
        &self.buffers
    }

    /// Replaces the buffer table wholesale (checkpoint restore).
    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Vec<T>>) {
        self.buffers = buffers;
    }
}
