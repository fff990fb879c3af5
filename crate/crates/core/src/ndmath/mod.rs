//! Dense tensors, reverse-mode autodiff, Adam, and the LCBC checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::Tensor;
