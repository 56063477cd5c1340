//! Bilinear resizing with half-pixel centers (align_corners = false).
//!
//! Interpolation uses the lerp form `a + t*(b - a)`, which reproduces
//! constant inputs exactly. Resizing to the identical size clones the input
//! so no-op resizes are bitwise transparent.

use crate::par::for_each_plane_mut;
use crate::tensor::{Scalar, TensorImage};

/// Per-axis sample plan: source indices of the two taps and the blend factor.
fn axis_taps<T: Scalar>(out_n: usize, in_n: usize) -> Vec<(usize, usize, T)> {
    let ratio = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let src = src.max(0.0);
            let i0 = (src.floor() as usize).min(in_n - 1);
            let i1 = (i0 + 1).min(in_n - 1);
            let t = src - i0 as f64;
            (i0, i1, T::from_f64(t))
        })
        .collect()
}

pub fn bilinear_resize<T: Scalar>(x: &TensorImage<T>, out_h: usize, out_w: usize) -> TensorImage<T> {
    let (bsz, c_n, ih_n, iw_n) = x.dim();
    assert!(out_h >= 1 && out_w >= 1, "target size must be positive");
    if out_h == ih_n && out_w == iw_n {
        return x.clone();
    }
    let rows = axis_taps::<T>(out_h, ih_n);
    let cols = axis_taps::<T>(out_w, iw_n);
    let xs = x.as_slice().expect("standard layout");
    let in_plane = ih_n * iw_n;

    let mut out = TensorImage::<T>::zeros((bsz, c_n, out_h, out_w));
    let out_slice = out.as_slice_mut().unwrap();
    for_each_plane_mut(out_slice, out_h * out_w, |idx, oplane| {
        let base = idx * in_plane;
        for (oh, &(y0, y1, fy)) in rows.iter().enumerate() {
            let top = base + y0 * iw_n;
            let bot = base + y1 * iw_n;
            let orow = oh * out_w;
            for (ow, &(x0, x1, fx)) in cols.iter().enumerate() {
                let t = {
                    let a = xs[top + x0];
                    a + fx * (xs[top + x1] - a)
                };
                let b = {
                    let a = xs[bot + x0];
                    a + fx * (xs[bot + x1] - a)
                };
                oplane[orow + ow] = t + fy * (b - t);
            }
        }
    });
    out
}

/// Scatters output gradients back through the interpolation taps.
pub fn bilinear_resize_backward<T: Scalar>(
    gy: &TensorImage<T>,
    in_h: usize,
    in_w: usize,
) -> TensorImage<T> {
    let (bsz, c_n, oh_n, ow_n) = gy.dim();
    if oh_n == in_h && ow_n == in_w {
        return gy.clone();
    }
    let rows = axis_taps::<T>(oh_n, in_h);
    let cols = axis_taps::<T>(ow_n, in_w);
    let gys = gy.as_slice().expect("standard layout");
    let out_plane = oh_n * ow_n;

    let mut dx = TensorImage::<T>::zeros((bsz, c_n, in_h, in_w));
    let dx_slice = dx.as_slice_mut().unwrap();
    for_each_plane_mut(dx_slice, in_h * in_w, |idx, dplane| {
        let base = idx * out_plane;
        let one = T::one();
        for (oh, &(y0, y1, fy)) in rows.iter().enumerate() {
            let grow = base + oh * ow_n;
            let top = y0 * in_w;
            let bot = y1 * in_w;
            for (ow, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = gys[grow + ow];
                dplane[top + x0] += g * (one - fy) * (one - fx);
                dplane[top + x1] += g * (one - fy) * fx;
                dplane[bot + x0] += g * fy * (one - fx);
                dplane[bot + x1] += g * fy * fx;
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_gradient, probe_weights, weighted_sum, FD_EPSILON};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: (usize, usize, usize, usize), seed: u64) -> TensorImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorImage::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn upsample_2x2_to_4x4_half_pixel_oracle() {
        let x = TensorImage::from_shape_vec((1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4);
        let expect = [
            [1.0, 1.25, 1.75, 2.0],
            [1.5, 1.75, 2.25, 2.5],
            [2.5, 2.75, 3.25, 3.5],
            [3.0, 3.25, 3.75, 4.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_abs_diff_eq!(y[[0, 0, r, c]], expect[r][c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn downsample_4x4_to_2x2_oracle() {
        let x = TensorImage::from_shape_vec((1, 1, 4, 4), (0..16).map(|v| v as f64).collect()).unwrap();
        let y = bilinear_resize(&x, 2, 2);
        assert_abs_diff_eq!(y[[0, 0, 0, 0]], 2.5);
        assert_abs_diff_eq!(y[[0, 0, 0, 1]], 4.5);
        assert_abs_diff_eq!(y[[0, 0, 1, 0]], 10.5);
        assert_abs_diff_eq!(y[[0, 0, 1, 1]], 12.5);
    }

    /// The lerp form keeps constant inputs bitwise constant.
    #[test]
    fn constant_input_stays_exactly_constant() {
        let v = 7.25f32;
        let x = TensorImage::from_elem((2, 3, 5, 9), v);
        for (h, w) in [(10, 18), (3, 4), (64, 64), (7, 7)] {
            let y = bilinear_resize(&x, h, w);
            assert!(y.iter().all(|q| *q == v), "{}x{} broke constancy", h, w);
        }
    }

    #[test]
    fn same_size_resize_is_bitwise_identity() {
        let x = rand_tensor((2, 4, 6, 5), 41);
        let y = bilinear_resize(&x, 6, 5);
        assert_eq!(x, y);
    }

    /// Resizing is linear; its backward must be the exact adjoint.
    #[test]
    fn backward_is_adjoint_of_forward() {
        let x = rand_tensor((2, 3, 7, 5), 42);
        for (h, w) in [(14, 10), (3, 3), (28, 9)] {
            let y = bilinear_resize(&x, h, w);
            let gy = rand_tensor(y.dim(), 43);
            let dx = bilinear_resize_backward(&gy, 7, 5);
            let lhs: f64 = y.iter().zip(gy.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = dx.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let x = rand_tensor((1, 2, 5, 4), 45);
        let probe = probe_weights::<f64>((1, 2, 8, 11), &mut rng);
        let y = bilinear_resize(&x, 8, 11);
        assert_eq!(y.dim(), probe.dim());
        let dx = {
            let gy = probe.clone();
            bilinear_resize_backward(&gy, 5, 4)
        };
        let report = check_input_gradient(
            &x,
            &dx,
            |xp| weighted_sum(&bilinear_resize(xp, 8, 11), &probe),
            FD_EPSILON,
            40,
            &mut rng,
        );
        report.assert_below(1e-8);
    }
}
