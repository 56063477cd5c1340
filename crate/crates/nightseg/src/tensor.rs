//! Tensor plumbing: the scalar trait, NCHW image batches, and shapes.

use ndarray::Array4;

/// Floating-point element type for network computation.
///
/// Production code runs in `f32`; gradient-check tests switch to `f64`
/// because central finite differences are unreliable in single precision.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A batch of images or feature maps in `(batch, channels, height, width)`
/// layout.
pub type TensorImage<T = f32> = Array4<T>;

/// Dimensional bookkeeping for NCHW tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorShape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    /// All fields must be at least 1.
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        assert!(
            batch >= 1 && channels >= 1 && height >= 1 && width >= 1,
            "degenerate tensor shape {batch}x{channels}x{height}x{width}"
        );
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn of<T>(x: &Array4<T>) -> Self {
        let (b, c, h, w) = x.dim();
        Self::new(b, c, h, w)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.batch, self.channels, self.height, self.width
        )
    }
}
