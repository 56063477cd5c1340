//! Per-channel batch normalization over (batch, height, width).
//!
//! Training mode normalizes with biased batch statistics and folds them into
//! the running estimates as `running = (1 - momentum) * running + momentum *
//! batch`; eval mode normalizes with the running estimates alone.

use ndarray::Array1;

use super::{Mode, NetError, Result};
use crate::par::for_each_plane_mut;
use crate::tensor::{Scalar, TensorImage};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Learned affine plus running statistics for one normalization layer.
#[derive(Debug, Clone)]
pub struct NormState<T> {
    pub scale: Array1<T>,
    pub shift: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Scalar> NormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Array1::from_elem(channels, T::one()),
            shift: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, T::one()),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

struct BnCache<T> {
    /// Normalized input, before scale/shift.
    xhat: TensorImage<T>,
    /// 1 / sqrt(var + eps) per channel, for whichever stats were used.
    inv_std: Array1<T>,
    mode: Mode,
}

/// Batch statistics (biased mean/variance) per channel, computed in a fixed
/// order so the result is independent of threading.
fn batch_stats<T: Scalar>(x: &TensorImage<T>) -> (Array1<T>, Array1<T>) {
    let (bsz, c_n, h_n, w_n) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let plane = h_n * w_n;
    let count = T::from_f64((bsz * plane) as f64);

    let mut mean = Array1::<T>::zeros(c_n);
    {
        let ms = mean.as_slice_mut().unwrap();
        for_each_plane_mut(ms, 1, |c, out| {
            let mut acc = T::zero();
            for b in 0..bsz {
                let base = (b * c_n + c) * plane;
                for v in &xs[base..base + plane] {
                    acc += *v;
                }
            }
            out[0] = acc / count;
        });
    }
    let mut var = Array1::<T>::zeros(c_n);
    {
        let mean = &mean;
        let vs = var.as_slice_mut().unwrap();
        for_each_plane_mut(vs, 1, |c, out| {
            let m = mean[c];
            let mut acc = T::zero();
            for b in 0..bsz {
                let base = (b * c_n + c) * plane;
                for v in &xs[base..base + plane] {
                    let d = *v - m;
                    acc += d * d;
                }
            }
            out[0] = acc / count;
        });
    }
    (mean, var)
}

fn normalize<T: Scalar>(
    x: &TensorImage<T>,
    mean: &Array1<T>,
    inv_std: &Array1<T>,
    scale: &Array1<T>,
    shift: &Array1<T>,
) -> (TensorImage<T>, TensorImage<T>) {
    let (_, c_n, h_n, w_n) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let plane = h_n * w_n;

    let mut xhat = TensorImage::<T>::zeros(x.raw_dim());
    {
        let xh = xhat.as_slice_mut().unwrap();
        for_each_plane_mut(xh, plane, |idx, hplane| {
            let c = idx % c_n;
            let (m, i) = (mean[c], inv_std[c]);
            let base = idx * plane;
            for (h, v) in hplane.iter_mut().zip(&xs[base..base + plane]) {
                *h = (*v - m) * i;
            }
        });
    }
    let xh = xhat.as_slice().unwrap();
    let mut y = TensorImage::<T>::zeros(x.raw_dim());
    {
        let ys = y.as_slice_mut().unwrap();
        for_each_plane_mut(ys, plane, |idx, yplane| {
            let c = idx % c_n;
            let (g, b) = (scale[c], shift[c]);
            let base = idx * plane;
            for (o, h) in yplane.iter_mut().zip(&xh[base..base + plane]) {
                *o = g * *h + b;
            }
        });
    }
    (y, xhat)
}

/// One normalization pass. Training mode mutates the running statistics.
pub fn batchnorm_forward<T: Scalar>(
    x: &TensorImage<T>,
    state: &mut NormState<T>,
    mode: Mode,
) -> Result<TensorImage<T>> {
    let (y, _) = batchnorm_forward_cached(x, state, mode)?;
    Ok(y)
}

fn batchnorm_forward_cached<T: Scalar>(
    x: &TensorImage<T>,
    state: &mut NormState<T>,
    mode: Mode,
) -> Result<(TensorImage<T>, BnCache<T>)> {
    let (_, c_n, _, _) = x.dim();
    if c_n != state.channels() {
        return Err(NetError::ChannelMismatch {
            expected: state.channels(),
            got: c_n,
        });
    }
    let eps = T::from_f64(state.epsilon);
    let (mean, var) = match mode {
        Mode::Train => {
            let (mean, var) = batch_stats(x);
            let m = T::from_f64(state.momentum);
            let keep = T::one() - m;
            for c in 0..c_n {
                state.running_mean[c] = keep * state.running_mean[c] + m * mean[c];
                state.running_var[c] = keep * state.running_var[c] + m * var[c];
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let (y, xhat) = normalize(x, &mean, &inv_std, &state.scale, &state.shift);
    Ok((y, BnCache { xhat, inv_std, mode }))
}

/// A normalization layer holding its state, gradient accumulators, and the
/// cache for backward.
pub struct BatchNorm2d<T> {
    pub state: NormState<T>,
    pub grad_scale: Array1<T>,
    pub grad_shift: Array1<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            state: NormState::new(channels),
            grad_scale: Array1::zeros(channels),
            grad_shift: Array1::zeros(channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &TensorImage<T>, mode: Mode, keep_cache: bool) -> Result<TensorImage<T>> {
        let (y, cache) = batchnorm_forward_cached(x, &mut self.state, mode)?;
        if keep_cache {
            self.cache = Some(cache);
        }
        Ok(y)
    }

    /// Accumulates scale/shift gradients and returns the input gradient.
    ///
    /// Training mode accounts for the dependence of the batch statistics on
    /// the input: dx = scale*inv_std * (gy - mean(gy) - xhat*mean(gy*xhat)).
    pub fn backward(&mut self, gy: &TensorImage<T>) -> TensorImage<T> {
        let cache = self.cache.as_ref().expect("forward(keep_cache) before backward");
        let (bsz, c_n, h_n, w_n) = gy.dim();
        let plane = h_n * w_n;
        let gys = gy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().unwrap();
        let count = T::from_f64((bsz * plane) as f64);

        // Per-channel reductions: sum(gy) and sum(gy * xhat).
        let mut sum_gy = Array1::<T>::zeros(c_n);
        let mut sum_gy_xhat = Array1::<T>::zeros(c_n);
        {
            let sums: Vec<(T, T)> = crate::par::map_indexed(c_n, |c| {
                let mut a = T::zero();
                let mut b = T::zero();
                for bi in 0..bsz {
                    let base = (bi * c_n + c) * plane;
                    for (g, h) in gys[base..base + plane].iter().zip(&xh[base..base + plane]) {
                        a += *g;
                        b += *g * *h;
                    }
                }
                (a, b)
            });
            for (c, (a, b)) in sums.into_iter().enumerate() {
                sum_gy[c] = a;
                sum_gy_xhat[c] = b;
            }
        }
        for c in 0..c_n {
            self.grad_shift[c] += sum_gy[c];
            self.grad_scale[c] += sum_gy_xhat[c];
        }

        let mut dx = TensorImage::<T>::zeros(gy.raw_dim());
        {
            let scale = &self.state.scale;
            let inv_std = &cache.inv_std;
            let train = cache.mode == Mode::Train;
            let dxs = dx.as_slice_mut().unwrap();
            for_each_plane_mut(dxs, plane, |idx, dplane| {
                let c = idx % c_n;
                let g = scale[c] * inv_std[c];
                let base = idx * plane;
                if train {
                    let mg = sum_gy[c] / count;
                    let mgh = sum_gy_xhat[c] / count;
                    for ((d, gyv), hv) in dplane
                        .iter_mut()
                        .zip(&gys[base..base + plane])
                        .zip(&xh[base..base + plane])
                    {
                        *d = g * (*gyv - mg - *hv * mgh);
                    }
                } else {
                    for (d, gyv) in dplane.iter_mut().zip(&gys[base..base + plane]) {
                        *d = g * *gyv;
                    }
                }
            });
        }
        dx
    }

    pub fn channels(&self) -> usize {
        self.state.channels()
    }
}
