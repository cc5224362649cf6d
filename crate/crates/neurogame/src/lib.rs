//! Coalition-gated neural networks.
//!
//! Activation maps are tiled into rectangular coalitions of neurons, each
//! coalition is scored by an Ising-style energy through a Gibbs distribution
//! and a payoff function, and the neurons of the best coalitions are filtered
//! by their Shapley values under an iteration-dependent threshold. Only the
//! surviving activations propagate to the next layer, which acts as a
//! data-driven (non-random) dropout.
//!
//! The crate ships the numeric substrate (tensors, layers, losses, Adam),
//! the coalition/energy/Shapley machinery, the four reference model
//! architectures, and dataset utilities.

pub mod coalition;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod models;
pub mod nn;
pub mod optim;
pub mod ops;
pub mod shapley;
pub mod statmech;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
