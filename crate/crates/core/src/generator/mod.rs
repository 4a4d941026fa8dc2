//! Non-autoregressive text-to-latent transformer.
//!
//! A transformer encoder reads the token embeddings; a sigmoid head on the
//! pooled memory predicts the length ratio; a transformer decoder turns `L`
//! time queries (a projected idle pose plus positional encoding) into `L`
//! latent frames in a single pass.

mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

pub use loss::{gaussian_kl, gaussian_kl_tensor, kl_channel_loss, phase1_loss, Phase1Loss};
pub use model::{generate, generate_padded, idle_pose_from, length_from_ratio, Generator, GEN_CHECKPOINT_MAGIC};
pub use train::{
    evaluate_losses, gt_ratio, train_generator, DevLosses, GenEpochRecord, GenSample,
};

use crate::autoencoder::LatentLayout;
use crate::corpus::EMBED_DIM;
use crate::error::{Error, Result};
use crate::skeleton::RegionValues;
use crate::stats::SIGMA_FLOOR;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Weighted latent L1 plus length-ratio error.
    #[serde(rename = "1")]
    One,
    /// Phase-1 objective plus the channel-prior KL term.
    #[serde(rename = "2")]
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Phase::One),
            2 => Ok(Phase::Two),
            _ => Err(Error::InvalidArgument(format!("phase must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub ffn_dim: usize,
    pub input_dim: usize,
    pub latent_layout: LatentLayout,
    pub t_max: usize,
    pub loss_weights: RegionValues,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Upper bound on epochs per phase; early stopping usually ends sooner.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub kl_weight: f64,
    pub sigma_floor: f64,
    /// Keep the time-query projection at its initial value.
    pub freeze_time_queries: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_model: 512,
            enc_layers: 3,
            enc_heads: 4,
            dec_layers: 6,
            dec_heads: 8,
            ffn_dim: 1024,
            input_dim: EMBED_DIM,
            latent_layout: LatentLayout::default(),
            t_max: 300,
            loss_weights: RegionValues::new(1.0, 14.0, 10.0, 2.0),
            lr: 2e-4,
            weight_decay: 1e-4,
            plateau_factor: 0.9,
            plateau_patience: 40,
            early_stop_patience: 60,
            max_epochs: 1000,
            batch_size: 16,
            dropout: 0.1,
            kl_weight: 1.0,
            sigma_floor: SIGMA_FLOOR,
            freeze_time_queries: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.d_model == 0 || self.enc_heads == 0 || self.d_model % self.enc_heads != 0 {
            return bad("encoder heads must divide d_model");
        }
        if self.dec_heads == 0 || self.d_model % self.dec_heads != 0 {
            return bad("decoder heads must divide d_model");
        }
        if !self.loss_weights.all_positive() {
            return bad("generator loss weights must be > 0");
        }
        if self.input_dim != EMBED_DIM {
            return bad("input_dim must match the embedding width");
        }
        if self.t_max == 0 {
            return bad("t_max must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.kl_weight >= 0.0) || !(self.sigma_floor > 0.0) {
            return bad("kl_weight must be >= 0 and sigma_floor > 0");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("plateau factor must lie in (0, 1]");
        }
        Ok(())
    }
}
