//! Reverse-mode differentiation over dense tensors.

mod graph;
pub mod gradcheck;
mod scalar;

pub use graph::{Graph, Var, OP_NAMES};
pub use scalar::Scalar;
