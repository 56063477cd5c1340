//! Night-scene semantic segmentation with a residual relighting front end.
//!
//! The pipeline is a residual relighting network (an encoder/decoder whose
//! output is added back onto the input image) feeding a four-stage
//! multi-resolution segmentation network that emits per-pixel class logits.
//! Everything runs on the CPU; inner loops are data-parallel via rayon when
//! the `parallel` feature (default) is enabled and fall back to plain
//! sequential loops otherwise. Results are bitwise identical either way:
//! every output element is produced by exactly one task with a fixed
//! reduction order.
//!
//! Crate layout:
//! - [`netcore`]: shape algebra and layer kernels (conv, transposed conv,
//!   batch norm, ReLU, bilinear resize) with hand-written backward passes.
//! - [`relight`]: the residual relighting network.
//! - [`hrseg`]: the multi-resolution segmentation network.
//! - [`data`]: dataset indexing, label encoding, augmentation, and a
//!   deterministic synthetic night-scene generator.
//! - [`training`]: losses, SGD with poly schedule, the train loop, optional
//!   adversarial domain adaptation, checkpoints.
//! - [`metrics`]: per-class IoU / mean IoU over a pixel confusion matrix.
//! - [`cli`]: the `synth` / `train` / `eval` / `infer` / `ablate` commands.

pub mod cli;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod hrseg;
pub mod metrics;
pub mod netcore;
pub mod par;
pub mod relight;
pub mod tensor;
pub mod training;

pub use tensor::{Scalar, TensorImage, TensorShape};
