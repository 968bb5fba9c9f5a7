//! Reverse-mode differentiation engine and optimizers.
//!
//! The graph is rebuilt per forward pass (define-by-run): every operation
//! appends a record and a value node, and [`Graph::backward`] walks the
//! records once in reverse. Values and gradients are `f64` throughout.

mod graph;
mod linalg;
mod optim;
mod tensor;

pub use graph::{Graph, NodeId, OpRecord};
pub use optim::{AdamW, AdamWConfig, PlateauScheduler, PlateauConfig};
pub use tensor::Tensor;
