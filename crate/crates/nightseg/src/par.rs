//! Data-parallel loop helpers with a sequential fallback.
//!
//! All heavy kernels in this crate iterate over independent output planes
//! (one `(batch, channel)` slice of a NCHW tensor, or one row of a weight
//! gradient). Each plane is written by exactly one task and every task uses
//! a fixed sequential reduction order, so the parallel and sequential paths
//! produce bitwise-identical results.
//!
//! The `parallel` cargo feature selects the rayon path at compile time; the
//! runtime switch [`set_parallel`] exists so benchmarks can compare both
//! paths inside one binary.

#[cfg(feature = "parallel")]
mod switch {
    use std::sync::atomic::{AtomicBool, Ordering};

    static ENABLED: AtomicBool = AtomicBool::new(true);

    pub fn set_parallel(on: bool) {
        ENABLED.store(on, Ordering::Relaxed);
    }

    pub fn parallel_enabled() -> bool {
        ENABLED.load(Ordering::Relaxed)
    }
}

#[cfg(not(feature = "parallel"))]
mod switch {
    pub fn set_parallel(_on: bool) {}

    pub fn parallel_enabled() -> bool {
        false
    }
}

pub use switch::{parallel_enabled, set_parallel};

/// Apply `f` to each contiguous chunk of `plane` elements of `data`,
/// passing the chunk index. Chunks are disjoint, so this parallelizes
/// without changing results.
pub fn for_each_plane_mut<T, F>(data: &mut [T], plane: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(plane > 0 && data.len() % plane == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    for (i, chunk) in data.chunks_mut(plane).enumerate() {
        f(i, chunk);
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_iteration_covers_all_chunks_in_order() {
        let mut data = vec![0usize; 12];
        for_each_plane_mut(&mut data, 3, |idx, chunk| {
            for v in chunk.iter_mut() {
                *v = idx + 1;
            }
        });
        assert_eq!(data, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]);
    }

    #[test]
    fn map_indexed_preserves_index_order() {
        let out = map_indexed(5, |i| i * i);
        assert_eq!(out, vec![0, 1, 4, 9, 16]);
    }

    /// The runtime switch must not change results, only scheduling.
    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        use crate::netcore::{batchnorm_forward, conv2d_forward, ConvSpec, Mode, NormState};
        use crate::tensor::TensorImage;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = TensorImage::<f32>::from_shape_simple_fn((2, 5, 13, 11), || rng.gen_range(-1.0..1.0));
        let w = ndarray::Array4::from_shape_simple_fn((4, 5, 3, 3), || rng.gen_range(-0.5f32..0.5));
        let spec = ConvSpec::conv(5, 4, 3, 2, 1);

        set_parallel(true);
        let y_par = conv2d_forward(&x, &w, None, &spec).unwrap();
        let mut st_par = NormState::<f32>::new(4);
        let n_par = batchnorm_forward(&y_par, &mut st_par, Mode::Train).unwrap();

        set_parallel(false);
        let y_seq = conv2d_forward(&x, &w, None, &spec).unwrap();
        let mut st_seq = NormState::<f32>::new(4);
        let n_seq = batchnorm_forward(&y_seq, &mut st_seq, Mode::Train).unwrap();
        set_parallel(true);

        assert_eq!(y_par, y_seq);
        assert_eq!(n_par, n_seq);
        assert_eq!(st_par.running_var, st_seq.running_var);
    }
}
