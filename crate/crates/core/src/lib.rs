//! Mode-gated temporal-leakage rewards with group-relative policy
//! optimization over tabular softmax policies.
//!
//! Pipeline: [`parse`] turns raw text into a [`model::Completion`],
//! [`verifier`] counts post-cutoff claims, [`reward`] applies the mode gate,
//! and [`train`] runs the update loop on a synthetic universe from [`env`].
//! [`theory`] checks the convergence properties with exact gradients.

pub mod config;
pub mod env;
pub mod error;
pub mod grpo;
pub mod metrics;
pub mod model;
pub mod parse;
pub mod policy;
pub mod reward;
pub mod suite;
pub mod theory;
pub mod trace;
pub mod train;
pub mod verifier;

pub use error::{Error, Result};
