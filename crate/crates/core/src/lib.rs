//! Inharmonious-region localization with auxiliary style features.
//!
//! The pipeline converts an RGB composite to YUV, applies a learned per-pixel
//! affine color mapping, extracts style features at 1/8 resolution and uses
//! them to let harmonious pixels "vote" for similarly styled pixels at every
//! decoder stage of a small encoder-decoder.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod colorspace;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod imageio;
mod gemm;
pub mod gradcheck;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod style;
pub mod tensor;
pub mod train;
pub mod voting;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
