//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Values are dense row-major f64 tensors. Recording an op computes its value
//! eagerly; `Graph::backward` replays the tape once in reverse. The op set is
//! exactly what the model needs, nothing speculative.

pub mod check;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
