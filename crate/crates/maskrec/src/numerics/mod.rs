//! Dense-tensor arithmetic, reverse-mode autodiff, Adam, gradient
//! checking, and the seeded deterministic random source.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use params::ParamSet;
pub use rng::Rng;
pub use tensor::Tensor;
