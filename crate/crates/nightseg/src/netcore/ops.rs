//! Pointwise activations, channel softmax, and channel concat/split.

use super::{NetError, Result};
use crate::par::for_each_plane_mut;
use crate::tensor::{Scalar, TensorImage};

pub fn relu<T: Scalar>(x: &TensorImage<T>) -> TensorImage<T> {
    let mut y = x.clone();
    let plane = {
        let (_, _, h, w) = x.dim();
        h * w
    };
    let ys = y.as_slice_mut().unwrap();
    for_each_plane_mut(ys, plane, |_, p| {
        for v in p.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    });
    y
}

pub fn leaky_relu<T: Scalar>(x: &TensorImage<T>, negative_slope: f64) -> TensorImage<T> {
    let slope = T::from_f64(negative_slope);
    let mut y = x.clone();
    let plane = {
        let (_, _, h, w) = x.dim();
        h * w
    };
    let ys = y.as_slice_mut().unwrap();
    for_each_plane_mut(ys, plane, |_, p| {
        for v in p.iter_mut() {
            if *v < T::zero() {
                *v *= slope;
            }
        }
    });
    y
}

/// ReLU layer caching its output (the sign pattern backward needs).
pub struct Relu<T> {
    cache: Option<TensorImage<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &TensorImage<T>, keep_cache: bool) -> TensorImage<T> {
        let y = relu(x);
        if keep_cache {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &TensorImage<T>) -> TensorImage<T> {
        let y = self.cache.as_ref().expect("forward(keep_cache) before backward");
        let mut dx = gy.clone();
        ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
            if yv <= T::zero() {
                *d = T::zero();
            }
        });
        dx
    }
}

impl<T: Scalar> Default for Relu<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// LeakyReLU layer. Output sign matches input sign for positive slopes, so
/// caching the output is enough for backward.
pub struct LeakyRelu<T> {
    pub negative_slope: f64,
    cache: Option<TensorImage<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(negative_slope: f64) -> Self {
        Self {
            negative_slope,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &TensorImage<T>, keep_cache: bool) -> TensorImage<T> {
        let y = leaky_relu(x, self.negative_slope);
        if keep_cache {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &TensorImage<T>) -> TensorImage<T> {
        let y = self.cache.as_ref().expect("forward(keep_cache) before backward");
        let slope = T::from_f64(self.negative_slope);
        let mut dx = gy.clone();
        ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
            if yv <= T::zero() {
                *d *= slope;
            }
        });
        dx
    }
}

/// Numerically-stable softmax over the channel axis, per pixel.
pub fn softmax_channels<T: Scalar>(x: &TensorImage<T>) -> TensorImage<T> {
    let (_, c_n, h_n, w_n) = x.dim();
    let plane = h_n * w_n;
    let xs = x.as_slice().expect("standard layout");

    let mut y = TensorImage::<T>::zeros(x.raw_dim());
    let ys = y.as_slice_mut().unwrap();
    // One task per batch item: the channel reduction crosses plane boundaries.
    for_each_plane_mut(ys, c_n * plane, |b, yb| {
        let xb = &xs[b * c_n * plane..(b + 1) * c_n * plane];
        for px in 0..plane {
            let mut max = xb[px];
            for c in 1..c_n {
                let v = xb[c * plane + px];
                if v > max {
                    max = v;
                }
            }
            let mut denom = T::zero();
            for c in 0..c_n {
                let e = (xb[c * plane + px] - max).exp();
                yb[c * plane + px] = e;
                denom += e;
            }
            for c in 0..c_n {
                yb[c * plane + px] /= denom;
            }
        }
    });
    y
}

/// Gradient of `softmax_channels` given its output `y`:
/// dx_c = y_c * (gy_c - sum_j gy_j * y_j).
pub fn softmax_channels_backward<T: Scalar>(
    y: &TensorImage<T>,
    gy: &TensorImage<T>,
) -> TensorImage<T> {
    let (_, c_n, h_n, w_n) = y.dim();
    let plane = h_n * w_n;
    let ys = y.as_slice().expect("standard layout");
    let gys = gy.as_slice().expect("standard layout");

    let mut dx = TensorImage::<T>::zeros(y.raw_dim());
    let dxs = dx.as_slice_mut().unwrap();
    for_each_plane_mut(dxs, c_n * plane, |b, db| {
        let base = b * c_n * plane;
        for px in 0..plane {
            let mut dot = T::zero();
            for c in 0..c_n {
                let i = c * plane + px;
                dot += gys[base + i] * ys[base + i];
            }
            for c in 0..c_n {
                let i = c * plane + px;
                db[i] = ys[base + i] * (gys[base + i] - dot);
            }
        }
    });
    dx
}

/// Concatenates feature maps along the channel axis. All inputs must share
/// batch and spatial dimensions.
pub fn concat_channels<T: Scalar>(parts: &[&TensorImage<T>]) -> Result<TensorImage<T>> {
    let first = parts
        .first()
        .ok_or_else(|| NetError::InvalidConfig("concat of zero tensors".into()))?;
    let (bsz, _, h_n, w_n) = first.dim();
    let mut c_total = 0;
    for p in parts {
        let (b, c, h, w) = p.dim();
        if (b, h, w) != (bsz, h_n, w_n) {
            return Err(NetError::Shape(format!(
                "concat expects matching batch/spatial dims, got ({b},{c},{h},{w}) vs batch={bsz} {h_n}x{w_n}"
            )));
        }
        c_total += c;
    }
    let plane = h_n * w_n;
    let mut out = TensorImage::<T>::zeros((bsz, c_total, h_n, w_n));
    {
        let os = out.as_slice_mut().unwrap();
        // Channel offsets of each part within the output.
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0;
        for p in parts {
            offsets.push(off);
            off += p.dim().1;
        }
        let slices: Vec<&[T]> = parts.iter().map(|p| p.as_slice().unwrap()).collect();
        for_each_plane_mut(os, plane, |idx, oplane| {
            let b = idx / c_total;
            let c = idx % c_total;
            // Find which part owns channel c.
            let part = match offsets.binary_search(&c) {
                Ok(i) => i,
                Err(i) => i - 1,
            };
            let local_c = c - offsets[part];
            let pc = parts[part].dim().1;
            let src = (b * pc + local_c) * plane;
            oplane.copy_from_slice(&slices[part][src..src + plane]);
        });
    }
    Ok(out)
}

/// Splits a channel-concatenated gradient back into per-part tensors.
pub fn split_channels<T: Scalar>(gy: &TensorImage<T>, widths: &[usize]) -> Vec<TensorImage<T>> {
    let (bsz, c_total, h_n, w_n) = gy.dim();
    assert_eq!(
        widths.iter().sum::<usize>(),
        c_total,
        "split widths must cover all channels"
    );
    let plane = h_n * w_n;
    let gys = gy.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(widths.len());
    let mut off = 0;
    for &w in widths {
        let mut part = TensorImage::<T>::zeros((bsz, w, h_n, w_n));
        {
            let ps = part.as_slice_mut().unwrap();
            for_each_plane_mut(ps, plane, |idx, pplane| {
                let b = idx / w;
                let c = idx % w;
                let src = (b * c_total + off + c) * plane;
                pplane.copy_from_slice(&gys[src..src + plane]);
            });
        }
        out.push(part);
        off += w;
    }
    out
}
