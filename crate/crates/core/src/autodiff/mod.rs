//! Minimal dense tensors with define-by-run reverse-mode differentiation.

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::{grad_check, grad_check_multi, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use real::{sigmoid, Real};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
