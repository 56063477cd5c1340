//! Direct 2-D convolution and transposed convolution kernels.
//!
//! Weight layout is `(out, in, k, k)` for regular convolutions and
//! `(in, out, k, k)` for transposed ones. Kernels parallelize over output
//! planes; each plane is written by one task with a fixed inner loop order,
//! so results do not depend on the thread count.

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{conv_output_shape, transconv_output_shape, ConvSpec, NetError, Result};
use crate::par::for_each_plane_mut;
use crate::tensor::{Scalar, TensorImage, TensorShape};

/// Range of output positions `o` with `0 <= o*stride + k - padding < limit`,
/// clamped to `0..o_n`. Empty ranges come back as `(1, 0)`.
#[inline]
fn valid_range(o_n: usize, limit: usize, stride: usize, padding: usize, k: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k + stride - 1) / stride
    };
    if limit - 1 + padding < k {
        return (1, 0);
    }
    let hi = ((limit - 1 + padding - k) / stride).min(o_n - 1);
    if lo > hi {
        (1, 0)
    } else {
        (lo, hi)
    }
}

fn check_weight_dims<T>(weight: &Array4<T>, spec: &ConvSpec) {
    let expect = if spec.transposed {
        (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
    } else {
        (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    };
    assert_eq!(weight.dim(), expect, "weight tensor does not match its spec");
}

/// out[b,oc,oh,ow] = sum_{ic,kh,kw} x[b,ic,oh*s+kh-p,ow*s+kw-p] * w[oc,ic,kh,kw]
pub fn conv2d_forward<T: Scalar>(
    x: &TensorImage<T>,
    weight: &Array4<T>,
    bias: Option<&Array1<T>>,
    spec: &ConvSpec,
) -> Result<TensorImage<T>> {
    check_weight_dims(weight, spec);
    let out_shape = conv_output_shape(TensorShape::of(x), spec)?;
    let (bsz, ic_n, ih_n, iw_n) = x.dim();
    let (oh_n, ow_n) = (out_shape.height, out_shape.width);
    let oc_n = spec.out_channels;
    let (s, p, k) = (spec.stride, spec.padding, spec.kernel);
    let xs = x.as_slice().expect("standard layout");
    let ws = weight.as_slice().expect("standard layout");

    let mut out = TensorImage::<T>::zeros((bsz, oc_n, oh_n, ow_n));
    let out_slice = out.as_slice_mut().unwrap();
    for_each_plane_mut(out_slice, oh_n * ow_n, |idx, oplane| {
        let b = idx / oc_n;
        let oc = idx % oc_n;
        for ic in 0..ic_n {
            let xbase = (b * ic_n + ic) * ih_n * iw_n;
            let wbase = (oc * ic_n + ic) * k * k;
            for kh in 0..k {
                let (oh_lo, oh_hi) = valid_range(oh_n, ih_n, s, p, kh);
                if oh_lo > oh_hi {
                    continue;
                }
                for kw in 0..k {
                    let w = ws[wbase + kh * k + kw];
                    let (ow_lo, ow_hi) = valid_range(ow_n, iw_n, s, p, kw);
                    if ow_lo > ow_hi {
                        continue;
                    }
                    for oh in oh_lo..=oh_hi {
                        let ih = oh * s + kh - p;
                        let xrow = xbase + ih * iw_n + (ow_lo * s + kw - p);
                        let orow = oh * ow_n;
                        if s == 1 {
                            let xwin = &xs[xrow..xrow + (ow_hi - ow_lo + 1)];
                            let owin = &mut oplane[orow + ow_lo..=orow + ow_hi];
                            for (o, &xv) in owin.iter_mut().zip(xwin) {
                                *o += w * xv;
                            }
                        } else {
                            let mut ix = xrow;
                            for ow in ow_lo..=ow_hi {
                                oplane[orow + ow] += w * xs[ix];
                                ix += s;
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let b = bias[oc];
            for v in oplane.iter_mut() {
                *v += b;
            }
        }
    });
    Ok(out)
}

/// Gradients of `conv2d_forward` w.r.t. input, weight, and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &TensorImage<T>,
    weight: &Array4<T>,
    gy: &TensorImage<T>,
    spec: &ConvSpec,
) -> (TensorImage<T>, Array4<T>, Option<Array1<T>>) {
    check_weight_dims(weight, spec);
    let (bsz, ic_n, ih_n, iw_n) = x.dim();
    let (_, oc_n, oh_n, ow_n) = gy.dim();
    let (s, p, k) = (spec.stride, spec.padding, spec.kernel);
    let xs = x.as_slice().expect("standard layout");
    let ws = weight.as_slice().expect("standard layout");
    let gys = gy.as_slice().expect("standard layout");

    // dx: gather per (b, ic) plane, scattering gy through the kernel.
    let mut dx = TensorImage::<T>::zeros((bsz, ic_n, ih_n, iw_n));
    {
        let dx_slice = dx.as_slice_mut().unwrap();
        for_each_plane_mut(dx_slice, ih_n * iw_n, |idx, xplane| {
            let b = idx / ic_n;
            let ic = idx % ic_n;
            for oc in 0..oc_n {
                let gbase = (b * oc_n + oc) * oh_n * ow_n;
                let wbase = (oc * ic_n + ic) * k * k;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(oh_n, ih_n, s, p, kh);
                    if oh_lo > oh_hi {
                        continue;
                    }
                    for kw in 0..k {
                        let w = ws[wbase + kh * k + kw];
                        let (ow_lo, ow_hi) = valid_range(ow_n, iw_n, s, p, kw);
                        if ow_lo > ow_hi {
                            continue;
                        }
                        for oh in oh_lo..=oh_hi {
                            let ih = oh * s + kh - p;
                            let grow = gbase + oh * ow_n;
                            let xrow = ih * iw_n + (ow_lo * s + kw - p);
                            if s == 1 {
                                let gwin = &gys[grow + ow_lo..=grow + ow_hi];
                                let xwin = &mut xplane[xrow..xrow + (ow_hi - ow_lo + 1)];
                                for (xg, &g) in xwin.iter_mut().zip(gwin) {
                                    *xg += w * g;
                                }
                            } else {
                                let mut ix = xrow;
                                for ow in ow_lo..=ow_hi {
                                    xplane[ix] += w * gys[grow + ow];
                                    ix += s;
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    // dw: one task per (oc, ic) kernel patch.
    let mut dw = Array4::<T>::zeros((oc_n, ic_n, k, k));
    {
        let dw_slice = dw.as_slice_mut().unwrap();
        for_each_plane_mut(dw_slice, k * k, |idx, wplane| {
            let oc = idx / ic_n;
            let ic = idx % ic_n;
            for kh in 0..k {
                let (oh_lo, oh_hi) = valid_range(oh_n, ih_n, s, p, kh);
                if oh_lo > oh_hi {
                    continue;
                }
                for kw in 0..k {
                    let (ow_lo, ow_hi) = valid_range(ow_n, iw_n, s, p, kw);
                    if ow_lo > ow_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for b in 0..bsz {
                        let gbase = (b * oc_n + oc) * oh_n * ow_n;
                        let xbase = (b * ic_n + ic) * ih_n * iw_n;
                        for oh in oh_lo..=oh_hi {
                            let ih = oh * s + kh - p;
                            let grow = gbase + oh * ow_n;
                            let xrow = xbase + ih * iw_n + (ow_lo * s + kw - p);
                            let mut ix = xrow;
                            for ow in ow_lo..=ow_hi {
                                acc += gys[grow + ow] * xs[ix];
                                ix += s;
                            }
                        }
                    }
                    wplane[kh * k + kw] += acc;
                }
            }
        });
    }

    let db = spec.has_bias.then(|| {
        let mut db = Array1::<T>::zeros(oc_n);
        let db_slice = db.as_slice_mut().unwrap();
        for_each_plane_mut(db_slice, 1, |oc, out| {
            let mut acc = T::zero();
            for b in 0..bsz {
                let gbase = (b * oc_n + oc) * oh_n * ow_n;
                for g in &gys[gbase..gbase + oh_n * ow_n] {
                    acc += *g;
                }
            }
            out[0] = acc;
        });
        db
    });

    (dx, dw, db)
}

/// out[b,oc,oh,ow] = sum over (ic,kh,kw,ih,iw) with oh = ih*s + kh - p of
/// x[b,ic,ih,iw] * w[ic,oc,kh,kw]
pub fn transconv2d_forward<T: Scalar>(
    x: &TensorImage<T>,
    weight: &Array4<T>,
    bias: Option<&Array1<T>>,
    spec: &ConvSpec,
) -> Result<TensorImage<T>> {
    check_weight_dims(weight, spec);
    let out_shape = transconv_output_shape(TensorShape::of(x), spec)?;
    let (bsz, ic_n, ih_n, iw_n) = x.dim();
    let (oh_n, ow_n) = (out_shape.height, out_shape.width);
    let oc_n = spec.out_channels;
    let (s, p, k) = (spec.stride, spec.padding, spec.kernel);
    let xs = x.as_slice().expect("standard layout");
    let ws = weight.as_slice().expect("standard layout");

    let mut out = TensorImage::<T>::zeros((bsz, oc_n, oh_n, ow_n));
    let out_slice = out.as_slice_mut().unwrap();
    for_each_plane_mut(out_slice, oh_n * ow_n, |idx, oplane| {
        let b = idx / oc_n;
        let oc = idx % oc_n;
        for ic in 0..ic_n {
            let xbase = (b * ic_n + ic) * ih_n * iw_n;
            let wbase = (ic * oc_n + oc) * k * k;
            for kh in 0..k {
                // input rows whose contribution lands inside the output
                let (ih_lo, ih_hi) = valid_range(ih_n, oh_n, s, p, kh);
                if ih_lo > ih_hi {
                    continue;
                }
                for kw in 0..k {
                    let w = ws[wbase + kh * k + kw];
                    let (iw_lo, iw_hi) = valid_range(iw_n, ow_n, s, p, kw);
                    if iw_lo > iw_hi {
                        continue;
                    }
                    for ih in ih_lo..=ih_hi {
                        let oh = ih * s + kh - p;
                        let xrow = xbase + ih * iw_n;
                        let orow = oh * ow_n + (iw_lo * s + kw - p);
                        let mut io = orow;
                        for iw in iw_lo..=iw_hi {
                            oplane[io] += w * xs[xrow + iw];
                            io += s;
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let b = bias[oc];
            for v in oplane.iter_mut() {
                *v += b;
            }
        }
    });
    Ok(out)
}

/// Gradients of `transconv2d_forward` w.r.t. input, weight, and bias.
pub fn transconv2d_backward<T: Scalar>(
    x: &TensorImage<T>,
    weight: &Array4<T>,
    gy: &TensorImage<T>,
    spec: &ConvSpec,
) -> (TensorImage<T>, Array4<T>, Option<Array1<T>>) {
    check_weight_dims(weight, spec);
    let (bsz, ic_n, ih_n, iw_n) = x.dim();
    let (_, oc_n, oh_n, ow_n) = gy.dim();
    let (s, p, k) = (spec.stride, spec.padding, spec.kernel);
    let xs = x.as_slice().expect("standard layout");
    let ws = weight.as_slice().expect("standard layout");
    let gys = gy.as_slice().expect("standard layout");

    // dx[b,ic,ih,iw] = sum_{oc,kh,kw} gy[b,oc,ih*s+kh-p,iw*s+kw-p] * w[ic,oc,kh,kw]
    let mut dx = TensorImage::<T>::zeros((bsz, ic_n, ih_n, iw_n));
    {
        let dx_slice = dx.as_slice_mut().unwrap();
        for_each_plane_mut(dx_slice, ih_n * iw_n, |idx, xplane| {
            let b = idx / ic_n;
            let ic = idx % ic_n;
            for oc in 0..oc_n {
                let gbase = (b * oc_n + oc) * oh_n * ow_n;
                let wbase = (ic * oc_n + oc) * k * k;
                for kh in 0..k {
                    let (ih_lo, ih_hi) = valid_range(ih_n, oh_n, s, p, kh);
                    if ih_lo > ih_hi {
                        continue;
                    }
                    for kw in 0..k {
                        let w = ws[wbase + kh * k + kw];
                        let (iw_lo, iw_hi) = valid_range(iw_n, ow_n, s, p, kw);
                        if iw_lo > iw_hi {
                            continue;
                        }
                        for ih in ih_lo..=ih_hi {
                            let oh = ih * s + kh - p;
                            let grow = gbase + oh * ow_n + (iw_lo * s + kw - p);
                            let xrow = ih * iw_n;
                            let mut ig = grow;
                            for iw in iw_lo..=iw_hi {
                                xplane[xrow + iw] += w * gys[ig];
                                ig += s;
                            }
                        }
                    }
                }
            }
        });
    }

    // dw[ic,oc,kh,kw] = sum_{b,ih,iw} x[b,ic,ih,iw] * gy[b,oc,ih*s+kh-p,iw*s+kw-p]
    let mut dw = Array4::<T>::zeros((ic_n, oc_n, k, k));
    {
        let dw_slice = dw.as_slice_mut().unwrap();
        for_each_plane_mut(dw_slice, k * k, |idx, wplane| {
            let ic = idx / oc_n;
            let oc = idx % oc_n;
            for kh in 0..k {
                let (ih_lo, ih_hi) = valid_range(ih_n, oh_n, s, p, kh);
                if ih_lo > ih_hi {
                    continue;
                }
                for kw in 0..k {
                    let (iw_lo, iw_hi) = valid_range(iw_n, ow_n, s, p, kw);
                    if iw_lo > iw_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for b in 0..bsz {
                        let xbase = (b * ic_n + ic) * ih_n * iw_n;
                        let gbase = (b * oc_n + oc) * oh_n * ow_n;
                        for ih in ih_lo..=ih_hi {
                            let oh = ih * s + kh - p;
                            let xrow = xbase + ih * iw_n;
                            let grow = gbase + oh * ow_n + (iw_lo * s + kw - p);
                            let mut ig = grow;
                            for iw in iw_lo..=iw_hi {
                                acc += xs[xrow + iw] * gys[ig];
                                ig += s;
                            }
                        }
                    }
                    wplane[kh * k + kw] += acc;
                }
            }
        });
    }

    let db = spec.has_bias.then(|| {
        let mut db = Array1::<T>::zeros(oc_n);
        let db_slice = db.as_slice_mut().unwrap();
        for_each_plane_mut(db_slice, 1, |oc, out| {
            let mut acc = T::zero();
            for b in 0..bsz {
                let gbase = (b * oc_n + oc) * oh_n * ow_n;
                for g in &gys[gbase..gbase + oh_n * ow_n] {
                    acc += *g;
                }
            }
            out[0] = acc;
        });
        db
    });

    (dx, dw, db)
}

/// A convolution layer (regular or transposed per its spec) with gradient
/// accumulators and the input cache its backward needs.
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Array4<T>,
    pub bias: Option<Array1<T>>,
    pub grad_weight: Array4<T>,
    pub grad_bias: Option<Array1<T>>,
    cache: Option<TensorImage<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Fan-in-scaled normal initialization; biases start at zero.
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let dims = if spec.transposed {
            (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
        } else {
            (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        };
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0f64, std).unwrap();
        let weight = Array4::from_shape_simple_fn(dims, || T::from_f64(normal.sample(rng)));
        let bias = spec.has_bias.then(|| Array1::zeros(spec.out_channels));
        Self {
            grad_weight: Array4::zeros(dims),
            grad_bias: spec.has_bias.then(|| Array1::zeros(spec.out_channels)),
            spec,
            weight,
            bias,
            cache: None,
        }
    }

    pub fn zero_weights(&mut self) {
        self.weight.fill(T::zero());
        if let Some(b) = &mut self.bias {
            b.fill(T::zero());
        }
    }

    pub fn forward(&mut self, x: &TensorImage<T>, keep_cache: bool) -> Result<TensorImage<T>> {
        if keep_cache {
            self.cache = Some(x.clone());
        }
        if self.spec.transposed {
            transconv2d_forward(x, &self.weight, self.bias.as_ref(), &self.spec)
        } else {
            conv2d_forward(x, &self.weight, self.bias.as_ref(), &self.spec)
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &TensorImage<T>) -> TensorImage<T> {
        let x = self.cache.as_ref().expect("forward(keep_cache) before backward");
        let (dx, dw, db) = if self.spec.transposed {
            transconv2d_backward(x, &self.weight, gy, &self.spec)
        } else {
            conv2d_backward(x, &self.weight, gy, &self.spec)
        };
        self.grad_weight += &dw;
        if let (Some(gb), Some(db)) = (&mut self.grad_bias, db) {
            *gb += &db;
        }
        dx
    }

    pub fn output_shape(&self, in_shape: TensorShape) -> Result<TensorShape> {
        if self.spec.transposed {
            transconv_output_shape(in_shape, &self.spec)
        } else {
            conv_output_shape(in_shape, &self.spec)
        }
    }

    pub fn check_channels(&self, got: usize) -> Result<()> {
        if got != self.spec.in_channels {
            return Err(NetError::ChannelMismatch {
                expected: self.spec.in_channels,
                got,
            });
        }
        Ok(())
    }
}
