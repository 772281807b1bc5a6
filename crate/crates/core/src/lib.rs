//! Box-guided referring segmentation: a differentiable mask decoder, a toy
//! training harness, a mask-fusion data pipeline and evaluation tooling.

pub mod attention;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod graph;
pub mod kernels;
pub mod mask;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
