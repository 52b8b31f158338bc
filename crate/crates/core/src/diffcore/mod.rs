//! Minimal reverse-mode differentiation over dense `f64` tensors.

pub mod container;
pub mod gradcheck;
mod graph;
mod tensor;

pub use container::TensorArchive;
pub use graph::{log_sum_exp, BatchMoments, BnState, Graph, Mode, Var};
pub use tensor::Tensor;
