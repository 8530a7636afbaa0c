//! Reparameterized masked label diffusion for transductive node classification.

pub mod baselines;
pub mod denoiser;
pub mod em;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod sparse;

pub use error::{Error, Result};
