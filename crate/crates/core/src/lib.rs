//! Neuron importance scoring for ReLU networks by mixed-integer programming,
//! and the pruning experiments built on top of it.
//!
//! The pipeline is: train a small network ([`train`]), propagate interval
//! bounds around a batch of inputs ([`bounds`]), encode the network with one
//! importance variable per neuron ([`mip`]), solve the program exactly
//! ([`solver`]), and turn the resulting scores into masks that are compared
//! against baselines ([`pruner`]).

pub mod bounds;
mod codec;
pub mod data;
pub mod error;
pub mod linalg;
pub mod mip;
pub mod network;
pub mod pruner;
pub mod solver;
pub mod train;

pub use error::{Error, Result};
