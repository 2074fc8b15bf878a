//! Sparse mixture-of-experts routing for a small vision transformer, built
//! on a self-contained f64 tensor/autodiff kernel.
//!
//! The crate is organized bottom-up:
//!
//! - [`numkit`]: tensors, RNG streams, special functions, autodiff, solvers
//! - [`router`]: noisy gating and top-k selection
//! - [`allocator`]: expert buffer capacity and token-to-slot assignment
//! - [`moe`]: dispatch/compute/combine through expert MLPs
//! - [`losses`]: auxiliary load-balancing losses and the total objective
//! - [`model`]: toy vision transformer, synthetic data, training, checkpoints
//! - [`metering`]: multiply-add and communication-volume accounting
//! - [`analysis`]: routing-behavior experiments

pub mod allocator;
pub mod analysis;
pub mod losses;
pub mod metering;
pub mod model;
pub mod moe;
pub mod numkit;
pub mod router;

/// Crate-wide error type. Contract violations (shape mismatches, out-of-range
/// arguments) panic instead; `Error` covers failures driven by runtime data.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("load loss needs gates computed with routing noise: {0}")]
    NoiseFreeLoad(String),
}

pub type Result<T> = std::result::Result<T, Error>;
