//! Small reverse-mode automatic differentiation engine for dense NCHW tensors.
//!
//! The engine is deliberately narrow: it provides exactly the operators the
//! generator, encoders and discriminator need (convolutions via im2col and
//! GEMM, bilinear resampling, channel modulation, reductions, a few fused
//! losses) and is generic over `f32` and `f64`.

mod error;
mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub mod gradcheck;

pub use error::{Error, Result};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
