//! Desk-scale anchor-free detector for tiny objects.
//!
//! The crate is organised bottom-up:
//!
//! - [`boxes`]: corner-form boxes and IoU.
//! - [`tensor`]: NCHW `f64` tensors, a reverse-mode tape and a finite-difference
//!   gradient checker.
//! - [`spd`]: lossless space-to-depth downsampling followed by a non-strided
//!   convolution.
//! - [`cspok`]: cross-stage split/merge fusion with a multi-branch omni-kernel
//!   operator on the processed half.
//! - [`losses`]: varifocal, focal and BCE classification losses plus IoU/CIoU.
//! - [`pipeline`]: model construction, target assignment, decoding with NMS,
//!   synthetic data, training and the four-arm ablation.
//! - [`eval`]: COCO-format I/O and COCO-style mAP evaluation.
//! - [`gradsuite`]: randomized finite-difference suites for each block.
//! - [`cli`]: the `tinydet` command line.

pub mod boxes;
pub mod cli;
pub mod cspok;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod pipeline;
pub mod spd;
pub mod tensor;

pub use boxes::Bbox;
pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor, Var};

/// Version string stamped into reports and manifests.
pub const ENGINE_VERSION: &str = concat!("tinydet ", env!("CARGO_PKG_VERSION"));
