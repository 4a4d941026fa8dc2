//! Gloss-free sign language production: a region-partitioned pose
//! autoencoder, a non-autoregressive text-to-latent transformer with a
//! channel-prior KL objective, latent-space analysis and DTW evaluation.

pub mod autoencoder;
pub mod corpus;
pub mod digest;
pub mod error;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod pipeline;
pub mod plots;
pub mod skeleton;
pub mod stats;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
