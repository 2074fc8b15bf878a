//! Numeric foundations: dense f64 tensors, deterministic RNG streams,
//! special functions, reverse-mode autodiff, and small linear solvers.

pub mod graph;
pub mod linalg;
pub mod rng;
pub mod special;
pub mod tensor;

pub use graph::{CombineTerm, CostCenter, Gradients, Graph, NodeId};
pub use rng::{sample_gaussian, stream, RngStream};
pub use tensor::Tensor;
