//! Finite-difference validation of hand-written backward passes.
//!
//! Checks run in `f64`: central differences there resolve derivatives to
//! ~1e-10 absolute, so disagreement beyond the tolerances points at a wrong
//! backward, not at float noise.

use rand::seq::index::sample;
use rand::Rng;

use crate::netcore::Parameterized;
use crate::tensor::{Scalar, TensorImage};

/// Default central-difference step for `f64` checks.
pub const FD_EPSILON: f64 = 1e-5;

/// Worst disagreement seen across all checked coordinates.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_err: f64,
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_err: 0.0,
            worst: String::new(),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        }
    }

    fn record(&mut self, name: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = grad_error(analytic, numeric);
        if err > self.max_err {
            self.max_err = err;
            self.worst = name;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }

    pub fn assert_below(&self, tolerance: f64) {
        assert!(
            self.max_err < tolerance,
            "gradient check failed: {} coords checked, worst {} has analytic {:.6e} vs numeric {:.6e} (err {:.3e} >= {tolerance:.1e})",
            self.checked,
            self.worst,
            self.worst_analytic,
            self.worst_numeric,
            self.max_err,
        );
    }
}

/// Relative disagreement with an absolute floor, so near-zero gradients are
/// judged absolutely instead of through an exploding ratio.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn read_param<T: Scalar, N: Parameterized<T> + ?Sized>(net: &mut N, name: &str, idx: usize) -> T {
    let mut out = None;
    net.visit_params("", &mut |slot| {
        if slot.name == name {
            out = Some(slot.value[idx]);
        }
    });
    out.unwrap_or_else(|| panic!("no parameter named {name}"))
}

fn write_param<T: Scalar, N: Parameterized<T> + ?Sized>(
    net: &mut N,
    name: &str,
    idx: usize,
    value: T,
) {
    let mut found = false;
    net.visit_params("", &mut |slot| {
        if slot.name == name {
            slot.value[idx] = value;
            found = true;
        }
    });
    assert!(found, "no parameter named {name}");
}

fn read_grad<T: Scalar, N: Parameterized<T> + ?Sized>(net: &mut N, name: &str, idx: usize) -> T {
    let mut out = None;
    net.visit_params("", &mut |slot| {
        if slot.name == name {
            out = slot.grad.map(|g| g[idx]);
        }
    });
    out.unwrap_or_else(|| panic!("no gradient for {name}"))
}

/// Compares stored parameter gradients against central differences of `loss`.
///
/// The caller must already have run a forward/backward so the gradient
/// accumulators hold exactly one evaluation's gradients; `loss` must rerun the
/// same forward (same inputs, same mode) and return the scalar loss without
/// touching the accumulators. Per trainable tensor, up to `per_tensor`
/// coordinates are sampled.
pub fn check_param_gradients<T, N, F>(
    net: &mut N,
    mut loss: F,
    epsilon: f64,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    T: Scalar,
    N: Parameterized<T> + ?Sized,
    F: FnMut(&mut N) -> f64,
{
    let mut tensors: Vec<(String, usize)> = Vec::new();
    net.visit_params("", &mut |slot| {
        if slot.grad.is_some() {
            tensors.push((slot.name, slot.value.len()));
        }
    });

    let eps = T::from_f64(epsilon);
    let mut report = GradCheckReport::new();
    for (name, len) in tensors {
        let count = per_tensor.min(len);
        let picks = sample(rng, len, count);
        for idx in picks {
            let base = read_param(net, &name, idx);
            write_param(net, &name, idx, base + eps);
            let up = loss(net);
            write_param(net, &name, idx, base - eps);
            let down = loss(net);
            write_param(net, &name, idx, base);
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = read_grad(net, &name, idx).to_f64();
            report.record(format!("{name}[{idx}]"), analytic, numeric);
        }
    }
    report
}

/// Compares an input gradient against central differences of `loss`.
pub fn check_input_gradient<T, F>(
    x: &TensorImage<T>,
    analytic: &TensorImage<T>,
    mut loss: F,
    epsilon: f64,
    max_samples: usize,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    T: Scalar,
    F: FnMut(&TensorImage<T>) -> f64,
{
    assert_eq!(x.dim(), analytic.dim());
    let n = x.len();
    let eps = T::from_f64(epsilon);
    let mut probe = x.clone();
    let a = analytic.as_slice().unwrap();

    let mut report = GradCheckReport::new();
    for idx in sample(rng, n, max_samples.min(n)) {
        let base = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = base + eps;
        let up = loss(&probe);
        probe.as_slice_mut().unwrap()[idx] = base - eps;
        let down = loss(&probe);
        probe.as_slice_mut().unwrap()[idx] = base;
        let numeric = (up - down) / (2.0 * epsilon);
        report.record(format!("input[{idx}]"), a[idx].to_f64(), numeric);
    }
    report
}

/// Sum of `weights * output` — a fixed linear functional turning a tensor
/// output into the scalar the checks differentiate.
pub fn weighted_sum<T: Scalar>(y: &TensorImage<T>, weights: &TensorImage<T>) -> f64 {
    assert_eq!(y.dim(), weights.dim());
    y.iter()
        .zip(weights.iter())
        .map(|(a, b)| (*a * *b).to_f64())
        .sum()
}

/// Fills a probe-weight tensor with pseudo-random coefficients in [-1, 1] so
/// every output coordinate influences the scalar loss.
pub fn probe_weights<T: Scalar>(
    shape: (usize, usize, usize, usize),
    rng: &mut impl Rng,
) -> TensorImage<T> {
    TensorImage::from_shape_simple_fn(shape, || T::from_f64(rng.gen_range(-1.0..1.0)))
}
