//! Dense tensors, forward kernels and reverse-mode differentiation.

mod backend;
mod graph;
pub mod io;
pub mod ops;
mod tensor;

pub use backend::{Backend, Eager};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
