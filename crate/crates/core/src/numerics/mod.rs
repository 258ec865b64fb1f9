//! Dense tensors and a small reverse-mode differentiation engine.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
