//! Simulation and asymptotic first-passage theory for stochastically perturbed Filippov
//! systems, with a relay-control reference model.

pub mod cli;
pub mod combine;
pub mod error;
pub mod escape;
pub mod filippov;
pub mod mc;
pub mod numerics;
pub mod regular;
pub mod sliding;
pub mod stats;

pub use error::{Error, Result};
