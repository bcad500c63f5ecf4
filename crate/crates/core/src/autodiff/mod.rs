//! Reverse-mode differentiation over dense tensors.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use scalar::{naive_gemm, Scalar, Strides};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
