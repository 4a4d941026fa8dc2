use candle_core::Tensor;
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::ae_loss;
use super::model::{array_to_tensor, PoseAutoencoder};
use super::AeConfig;
use crate::digest::substream_seed;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::skeleton::{PoseSequence, Region, RegionValues, SkeletonLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeEpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Frame-weighted mean of the full objective over the epoch's batches.
    pub train_total: f64,
    pub train_per_region: RegionValues,
    /// Unweighted mean per-coordinate L1 on the selection split.
    pub dev_l1: f64,
}

fn stack_frames(seqs: &[PoseSequence]) -> Result<Array2<f64>> {
    let flats: Vec<Array2<f64>> = seqs.iter().map(PoseSequence::to_flat).collect();
    let views: Vec<_> = flats.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Mean absolute error per coordinate of `decode(encode(x))`.
pub(crate) fn reconstruction_l1(model: &PoseAutoencoder, frames: &Tensor) -> Result<f64> {
    let recon = model.decode_tensor(&model.encode_tensor(frames)?)?;
    Ok((recon - frames)?.abs()?.mean_all()?.to_scalar::<f64>()?)
}

/// Trains on normalized training sequences and returns the model with the
/// lowest dev reconstruction error. An empty dev split selects on train.
pub fn train_ae(
    train: &[PoseSequence],
    dev: &[PoseSequence],
    cfg: &AeConfig,
    layout: &SkeletonLayout,
) -> Result<PoseAutoencoder> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = PoseAutoencoder::new(cfg.clone(), layout.clone())?;
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok(model);
    }
    let train_frames = stack_frames(train)?;
    if train_frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("training poses".into()));
    }
    let select_frames = if dev.is_empty() {
        array_to_tensor(&train_frames)?
    } else {
        array_to_tensor(&stack_frames(dev)?)?
    };
    let n = train_frames.nrows();
    let mut opt = Adam::new(
        model.params(),
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.adam_betas.0,
            beta2: cfg.adam_betas.1,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, "ae/shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, model.snapshot()?);
    let mut steps = 0usize;
    let mut history = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total_sum = 0.0;
        let mut region_sum = RegionValues::default();
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = array_to_tensor(&train_frames.select(Axis(0), batch))?;
            let pred = model.decode_tensor(&model.encode_tensor(&x)?)?;
            let loss = ae_loss(&pred, &x, &model.encoder_weights(), cfg, layout)?;
            let value = loss.total.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::DivergenceDetected {
                    what: "autoencoder loss".into(),
                    epoch,
                });
            }
            opt.step(&loss.total.backward()?)?;
            steps += 1;
            let w = batch.len() as f64;
            total_sum += value * w;
            for r in Region::ALL {
                region_sum.set(r, region_sum.get(r) + loss.per_region.get(r) * w);
            }
            seen += batch.len();
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
        let dev_l1 = reconstruction_l1(&model, &select_frames)?;
        if !dev_l1.is_finite() {
            return Err(Error::DivergenceDetected {
                what: "autoencoder dev reconstruction".into(),
                epoch,
            });
        }
        let seen = seen as f64;
        let mut per_region = RegionValues::default();
        for r in Region::ALL {
            per_region.set(r, region_sum.get(r) / seen);
        }
        let record = AeEpochRecord {
            epoch,
            steps,
            train_total: total_sum / seen,
            train_per_region: per_region,
            dev_l1,
        };
        log::info!(
            "ae epoch {epoch}: loss {:.6} (body {:.5} rh {:.5} lh {:.5} face {:.5}) dev L1 {dev_l1:.6}",
            record.train_total,
            per_region.body,
            per_region.right_hand,
            per_region.left_hand,
            per_region.face
        );
        history.push(record);
        if dev_l1 < best.0 {
            best = (dev_l1, model.snapshot()?);
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break 'epochs;
        }
    }
    model.restore(&best.1)?;
    model.history = history;
    Ok(model)
}
