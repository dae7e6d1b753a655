//! Minimal reverse-mode automatic differentiation over f64 tensors.

mod conv;
pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;
