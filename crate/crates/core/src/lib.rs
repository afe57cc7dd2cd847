//! Desk-scale laboratory for confidence purification: a defense that rewrites
//! a classifier's confidence vectors through a small autoencoder so that
//! membership-inference and model-inversion attacks lose their signal, while
//! the classifier's answers stay intact.
//!
//! The crate provides the full experiment loop on synthetic tabular data:
//! dataset generation, target-classifier training, purifier training (plain or
//! adversarial), baseline defenses, a suite of membership and inversion
//! attacks, metrics, and a deterministic report pipeline.

pub mod attacks;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod purifier;
pub mod target;

pub use error::PurifyError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PurifyError>;
