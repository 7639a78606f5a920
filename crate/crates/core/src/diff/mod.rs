//! Dense tensors with tape-based reverse-mode differentiation.

mod check;
mod graph;
mod tensor;

pub use check::{central_differences, finite_difference_check, max_relative_error};
pub use graph::{ElementwiseOp, Graph, Var};
pub use tensor::Tensor;
