//! Bayesian inference for hierarchical binary item-response data with an
//! inner-product latent interaction map.
//!
//! The pipeline is: [`data`] (ingest or simulate) → [`sampler`] (MCMC) →
//! [`postprocess`] (Procrustes alignment, interaction-adjusted summaries) →
//! [`clustering`] and [`evaluate`]. [`cli`] wires the steps to files.

pub mod clustering;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod linalg;
pub mod model;
pub mod postprocess;
pub mod sampler;

pub use data::{ResponseDataset, ResponseMatrix};
pub use error::{Error, Result};
pub use model::{Hyperparameters, ModelState};

/// Version string embedded in every written artifact.
pub const VERSION: &str = concat!("hlsirm ", env!("CARGO_PKG_VERSION"));
