//! Region-partitioned pose autoencoder.
//!
//! Each articulator region has its own encoder and decoder, so latent block `R`
//! depends only on region-`R` keypoints and vice versa. The `entangled`
//! variant replaces the four blocks with a single 534 → 80 projection.

mod latents;
mod loss;
mod model;
mod train;

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use latents::{
    extract_latents, load_latent_dataset, read_latent_file, save_latent_dataset,
    write_latent_file, LatentDataset, LatentEntry, LATENT_MAGIC,
};
pub use loss::{ae_loss, AeLoss};
pub use model::{PoseAutoencoder, AE_CHECKPOINT_MAGIC};
pub use train::{train_ae, AeEpochRecord};

use crate::error::{Error, Result};
use crate::skeleton::{Region, RegionValues};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeVariant {
    /// One linear layer per region for encoder and decoder.
    Linear,
    /// Linear → PReLU → linear for hands and face; the body stays linear.
    Mlp,
    /// A single 534 → 80 linear encoder with no region split.
    Entangled,
}

/// Channel block sizes of the latent code, in region order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub body: usize,
    pub right_hand: usize,
    pub left_hand: usize,
    pub face: usize,
}

impl Default for LatentLayout {
    fn default() -> Self {
        LatentLayout {
            body: 8,
            right_hand: 28,
            left_hand: 28,
            face: 16,
        }
    }
}

impl LatentLayout {
    pub fn size(&self, region: Region) -> usize {
        match region {
            Region::Body => self.body,
            Region::RightHand => self.right_hand,
            Region::LeftHand => self.left_hand,
            Region::Face => self.face,
        }
    }

    pub fn total(&self) -> usize {
        Region::ALL.iter().map(|r| self.size(*r)).sum()
    }

    pub fn channel_range(&self, region: Region) -> Range<usize> {
        let start: usize = Region::ALL[..region.index()]
            .iter()
            .map(|r| self.size(*r))
            .sum();
        start..start + self.size(region)
    }

    /// Region owning latent channel `c`.
    pub fn region_of(&self, channel: usize) -> Option<Region> {
        Region::ALL
            .into_iter()
            .find(|r| self.channel_range(*r).contains(&channel))
    }

    fn validate(&self) -> Result<()> {
        if Region::ALL.iter().any(|r| self.size(*r) == 0) {
            return Err(Error::InvalidArgument(
                "every latent block needs at least one channel".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpHidden {
    pub hands: usize,
    pub face: usize,
}

impl Default for MlpHidden {
    fn default() -> Self {
        MlpHidden { hands: 40, face: 96 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub variant: AeVariant,
    pub latent_layout: LatentLayout,
    pub mlp_hidden: MlpHidden,
    pub loss_weights: RegionValues,
    pub sparsity_lambda: f64,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub epochs: usize,
    /// Frames per optimizer step.
    pub batch_size: usize,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            variant: AeVariant::Linear,
            latent_layout: LatentLayout::default(),
            mlp_hidden: MlpHidden::default(),
            loss_weights: RegionValues::new(0.5, 1.5, 1.5, 1.0),
            sparsity_lambda: 1e-4,
            lr: 2e-4,
            adam_betas: (0.5, 0.9),
            epochs: 270,
            batch_size: 256,
            max_steps: None,
            seed: 0,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        self.latent_layout.validate()?;
        if !self.loss_weights.all_positive() {
            return Err(Error::InvalidArgument("AE loss weights must be > 0".into()));
        }
        if !(self.sparsity_lambda >= 0.0) {
            return Err(Error::InvalidArgument("sparsity lambda must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.variant == AeVariant::Mlp && (self.mlp_hidden.hands == 0 || self.mlp_hidden.face == 0)
        {
            return Err(Error::InvalidArgument("MLP hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// A `T × 80` latent code sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub codes: Array2<f64>,
    pub layout: LatentLayout,
}

impl LatentSequence {
    pub fn new(codes: Array2<f64>, layout: LatentLayout) -> Result<Self> {
        if codes.ncols() != layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "latent sequence has {} channels, layout expects {}",
                codes.ncols(),
                layout.total()
            )));
        }
        if codes.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("latent sequence".into()));
        }
        Ok(LatentSequence { codes, layout })
    }

    pub fn len(&self) -> usize {
        self.codes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.nrows() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_latent_layout_blocks() {
        let l = LatentLayout::default();
        assert_eq!(l.total(), 80);
        assert_eq!(l.channel_range(Region::Body), 0..8);
        assert_eq!(l.channel_range(Region::RightHand), 8..36);
        assert_eq!(l.channel_range(Region::LeftHand), 36..64);
        assert_eq!(l.channel_range(Region::Face), 64..80);
        assert_eq!(l.region_of(35), Some(Region::RightHand));
        assert_eq!(l.region_of(80), None);
    }

    #[test]
    fn config_validation() {
        let mut c = AeConfig::default();
        c.validate().unwrap();
        c.loss_weights.face = 0.0;
        assert!(c.validate().is_err());
        let c = AeConfig {
            sparsity_lambda: -1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
