//! Adversarial mirrored autoencoder for unsupervised anomaly detection.
//!
//! An encoder/generator pair is trained against a critic that compares
//! channel-stacked image pairs, with simplex interpolation and atypical
//! latent negatives regularizing the code space. Test images are scored by
//! the critic-feature distance to their reconstruction and by the negative
//! log density of that distance under a Gaussian fitted on training data.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod latent;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod train;

pub use ama_nn;
pub use error::{AmaError, Result};
