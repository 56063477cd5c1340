//! Shape algebra and layer kernels shared by the relighting and
//! segmentation networks.
//!
//! Everything here is a plain CPU implementation over `ndarray` buffers
//! with hand-written backward passes. Layers cache what their backward
//! needs during a train-mode forward; eval-mode forwards are pure apart
//! from that cache.

mod blocks;
mod conv;
mod norm;
mod ops;
mod resize;

pub use blocks::{add_channel_bias, ConvBnAct, ParamSlot, Parameterized, ResidualBlock, SnapshotExt};
pub use conv::{
    conv2d_backward, conv2d_forward, transconv2d_backward, transconv2d_forward, Conv2d,
};
pub use norm::{batchnorm_forward, BatchNorm2d, NormState, BN_EPSILON, BN_MOMENTUM};
pub use ops::{
    concat_channels, leaky_relu, relu, softmax_channels, softmax_channels_backward,
    split_channels, LeakyRelu, Relu,
};
pub use resize::{bilinear_resize, bilinear_resize_backward};

use crate::tensor::TensorShape;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("convolution output would be {height}x{width} for input {input}")]
    NonPositiveOutput {
        input: TensorShape,
        height: i64,
        width: i64,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Whether a forward pass uses batch statistics (and updates running ones)
/// or frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Geometry of one (possibly transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be >= 1");
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            transposed: false,
            has_bias: false,
        }
    }

    pub fn transposed(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be >= 1");
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            transposed: true,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.has_bias = true;
        self
    }
}

/// Output shape of a regular convolution:
/// `out = floor((in + 2*padding - kernel) / stride) + 1` per spatial dim.
pub fn conv_output_shape(in_shape: TensorShape, spec: &ConvSpec) -> Result<TensorShape> {
    if spec.transposed {
        return Err(NetError::InvalidConfig(
            "conv_output_shape called with a transposed spec".into(),
        ));
    }
    if in_shape.channels != spec.in_channels {
        return Err(NetError::ChannelMismatch {
            expected: spec.in_channels,
            got: in_shape.channels,
        });
    }
    let out_dim = |d: usize| -> i64 {
        let padded = d as i64 + 2 * spec.padding as i64;
        if padded < spec.kernel as i64 {
            // the kernel does not fit even once
            return 0;
        }
        (padded - spec.kernel as i64) / spec.stride as i64 + 1
    };
    let h = out_dim(in_shape.height);
    let w = out_dim(in_shape.width);
    if h < 1 || w < 1 {
        return Err(NetError::NonPositiveOutput {
            input: in_shape,
            height: h,
            width: w,
        });
    }
    Ok(TensorShape::new(
        in_shape.batch,
        spec.out_channels,
        h as usize,
        w as usize,
    ))
}

/// Output shape of a transposed convolution:
/// `out = (in - 1) * stride - 2*padding + kernel` per spatial dim.
pub fn transconv_output_shape(in_shape: TensorShape, spec: &ConvSpec) -> Result<TensorShape> {
    if !spec.transposed {
        return Err(NetError::InvalidConfig(
            "transconv_output_shape called with a non-transposed spec".into(),
        ));
    }
    if in_shape.channels != spec.in_channels {
        return Err(NetError::ChannelMismatch {
            expected: spec.in_channels,
            got: in_shape.channels,
        });
    }
    let out_dim = |d: usize| -> i64 {
        (d as i64 - 1) * spec.stride as i64 - 2 * spec.padding as i64 + spec.kernel as i64
    };
    let h = out_dim(in_shape.height);
    let w = out_dim(in_shape.width);
    if h < 1 || w < 1 {
        return Err(NetError::NonPositiveOutput {
            input: in_shape,
            height: h,
            width: w,
        });
    }
    Ok(TensorShape::new(
        in_shape.batch,
        spec.out_channels,
        h as usize,
        w as usize,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(b: usize, c: usize, h: usize, w: usize) -> TensorShape {
        TensorShape::new(b, c, h, w)
    }

    #[test]
    fn conv_shape_same_padding_identity() {
        let spec = ConvSpec::conv(3, 16, 3, 1, 1);
        let out = conv_output_shape(shape(1, 3, 64, 64), &spec).unwrap();
        assert_eq!(out, shape(1, 16, 64, 64));
    }

    #[test]
    fn conv_shape_stride_two() {
        // floor((64 + 2 - 3)/2) + 1 = 32
        let spec = ConvSpec::conv(3, 8, 3, 2, 1);
        let out = conv_output_shape(shape(1, 3, 64, 64), &spec).unwrap();
        assert_eq!(out, shape(1, 8, 32, 32));
    }

    #[test]
    fn conv_shape_kernel_too_large() {
        let spec = ConvSpec::conv(3, 8, 7, 1, 0);
        let err = conv_output_shape(shape(1, 3, 5, 5), &spec).unwrap_err();
        assert!(matches!(err, NetError::NonPositiveOutput { .. }));
    }

    #[test]
    fn conv_shape_channel_mismatch() {
        let spec = ConvSpec::conv(4, 8, 3, 1, 1);
        let err = conv_output_shape(shape(1, 3, 8, 8), &spec).unwrap_err();
        assert!(matches!(err, NetError::ChannelMismatch { expected: 4, got: 3 }));
    }

    #[test]
    fn transconv_shape_doubling() {
        // (16-1)*2 - 2 + 4 = 32
        let spec = ConvSpec::transposed(128, 64, 4, 2, 1);
        let out = transconv_output_shape(shape(1, 128, 16, 16), &spec).unwrap();
        assert_eq!(out, shape(1, 64, 32, 32));
    }

    #[test]
    fn transconv_shape_identity_size() {
        let spec = ConvSpec::transposed(64, 32, 1, 1, 0);
        let out = transconv_output_shape(shape(1, 64, 32, 32), &spec).unwrap();
        assert_eq!(out, shape(1, 32, 32, 32));
    }

    #[test]
    fn transconv_shape_from_one_pixel() {
        // (1-1)*2 - 2 + 4 = 2
        let spec = ConvSpec::transposed(64, 32, 4, 2, 1);
        let out = transconv_output_shape(shape(1, 64, 1, 1), &spec).unwrap();
        assert_eq!(out, shape(1, 32, 2, 2));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let t = ConvSpec::transposed(3, 3, 3, 1, 1);
        assert!(matches!(
            conv_output_shape(shape(1, 3, 8, 8), &t),
            Err(NetError::InvalidConfig(_))
        ));
        let c = ConvSpec::conv(3, 3, 3, 1, 1);
        assert!(matches!(
            transconv_output_shape(shape(1, 3, 8, 8), &c),
            Err(NetError::InvalidConfig(_))
        ));
    }

    mod shape_props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// k3 s1 p1 preserves spatial dims for every input >= 1x1.
            #[test]
            fn same_conv_preserves_dims(h in 1usize..96, w in 1usize..96, c in 1usize..8) {
                let spec = ConvSpec::conv(c, c + 1, 3, 1, 1);
                let out = conv_output_shape(shape(1, c, h, w), &spec).unwrap();
                prop_assert_eq!((out.height, out.width), (h, w));
            }

            /// transconv k4 s2 p1 exactly doubles spatial dims.
            #[test]
            fn transconv_doubles(h in 1usize..64, w in 1usize..64) {
                let spec = ConvSpec::transposed(4, 2, 4, 2, 1);
                let out = transconv_output_shape(shape(1, 4, h, w), &spec).unwrap();
                prop_assert_eq!((out.height, out.width), (2 * h, 2 * w));
            }

            /// conv k3 s2 p1 then transconv k4 s2 p1 returns the original
            /// dims for even inputs.
            #[test]
            fn down_up_round_trip(h in 1usize..48, w in 1usize..48) {
                let (h, w) = (2 * h, 2 * w);
                let down = ConvSpec::conv(3, 8, 3, 2, 1);
                let up = ConvSpec::transposed(8, 3, 4, 2, 1);
                let mid = conv_output_shape(shape(1, 3, h, w), &down).unwrap();
                let out = transconv_output_shape(mid, &up).unwrap();
                prop_assert_eq!((out.height, out.width), (h, w));
            }
        }
    }
}
