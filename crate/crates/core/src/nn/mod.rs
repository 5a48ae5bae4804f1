//! Minimal differentiable building blocks for the prediction network.

pub mod conv;
pub mod graph;
pub mod ops;

pub use graph::{Gradients, Graph, Var};
