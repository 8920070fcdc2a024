//! Online spiking-network training with local eligibility traces.

pub mod bptt;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod network;
pub mod neuron;
pub mod optim;
pub mod plasticity;
pub mod psi;
pub mod registry;
pub mod signal;
pub mod verify;

pub use error::{Error, Result};
pub use ndarray;
