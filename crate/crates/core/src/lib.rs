//! Adversarial sample generation with guided conditional diffusion models.

pub mod advdiff;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod sampling;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
