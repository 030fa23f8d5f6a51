//! Speaker-embedding back-end: normalization models (PCA, LDA, VAE, C-VAE),
//! two-covariance PLDA scoring, domain adaptation, EER evaluation, and a
//! deterministic synthetic embedding generator for desk-scale experiments.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod linear_norm;
pub mod normalizer;
pub mod numstats;
pub mod plda;
pub mod synthgen;
pub mod vae_norm;

pub use error::{Error, Result};
