//! Tensors, seeded randomness and the reverse-mode autodiff tape.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod real;
mod rng;
#[allow(clippy::module_inception)]
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use real::{gemm, MatRef, Real};
pub use rng::{derive_seed, rand_uniform, randn, splitmix64, Rng};
pub use tensor::{Tensor, TNSR_MAGIC, TNSR_VERSION};
