//! Minimal reverse-mode automatic differentiation for convolutional models.
//!
//! Tensors are dense and row-major; image-like data uses NCHW. The op set is
//! exactly what the hierarchical VAE in `uvae-core` needs: same-padded
//! convolutions, ReLU, pixel (un)shuffle, channel concatenation, elementwise
//! arithmetic, and fused squared-error and diagonal-Gaussian KL reductions.

mod error;
mod graph;
mod kernels;
mod params;
mod scalar;
mod tensor;

pub use error::{AutogradError, Result};
pub use graph::{kl_element, Gradients, Graph, Var};
pub use kernels::{parallel_enabled, set_parallel};
pub use params::{ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
