use candle_core::Tensor;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{kl_channel_loss, phase1_loss};
use super::model::Generator;
use super::Phase;
use crate::digest::substream_seed;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Dropout, ParamStore, ReduceLrOnPlateau};
use crate::stats::ChannelPrior;
use crate::text::{pad_batch, TextBatch};

/// One training pair: token embeddings and ground-truth latent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSample {
    pub id: String,
    pub embedding: Array2<f64>,
    /// `T × 80`.
    pub latents: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenEpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev: DevLosses,
}

/// Selection-split losses of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevLosses {
    /// Sample-mean phase-1 objective.
    pub phase1: f64,
    /// Channel KL over all valid frames of the split, when priors are given.
    pub kl: Option<f64>,
    /// Mean `|ẑ − z|` over valid frames and channels.
    pub latent_mae: f64,
    /// Mean `|r̂ − r|`.
    pub length_mae: f64,
}

impl DevLosses {
    pub fn objective(&self, phase: Phase, kl_weight: f64) -> f64 {
        match phase {
            Phase::One => self.phase1,
            Phase::Two => self.phase1 + kl_weight * self.kl.unwrap_or(0.0),
        }
    }
}

/// Ground-truth length ratio `T / T_max`, kept strictly below 1.
pub fn gt_ratio(frames: usize, t_max: usize) -> f64 {
    (frames as f64 / t_max as f64).min(1.0 - 1e-6)
}

struct Batch {
    text: TextBatch,
    target: Tensor,
    ratio: Tensor,
    frame_mask: Vec<Vec<bool>>,
    len: usize,
}

fn make_batch(samples: &[&GenSample], t_max: usize, channels: usize) -> Result<Batch> {
    let embeddings: Vec<&Array2<f64>> = samples.iter().map(|s| &s.embedding).collect();
    let text = pad_batch(&embeddings)?;
    let len = samples.iter().map(|s| s.latents.nrows()).max().unwrap_or(0);
    if len == 0 || len > t_max {
        return Err(Error::LengthOutOfRange { length: len, t_max });
    }
    let mut target = Array3::<f64>::zeros((samples.len(), len, channels));
    let mut frame_mask = Vec::with_capacity(samples.len());
    let mut ratios = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        let (t, c) = s.latents.dim();
        if c != channels {
            return Err(Error::ShapeMismatch(format!(
                "sample {} has {c} latent channels, expected {channels}",
                s.id
            )));
        }
        target.slice_mut(ndarray::s![b, ..t, ..]).assign(&s.latents);
        frame_mask.push((0..len).map(|i| i < t).collect());
        ratios.push(gt_ratio(t, t_max));
    }
    let device = ParamStore::device();
    let data: Vec<f64> = target.iter().copied().collect();
    Ok(Batch {
        text,
        target: Tensor::from_vec(data, (samples.len(), len, channels), &device)?,
        ratio: Tensor::from_vec(ratios, samples.len(), &device)?,
        frame_mask,
        len,
    })
}

/// Phase-appropriate losses of `gen` on `samples`, evaluated without dropout.
pub fn evaluate_losses(
    gen: &Generator,
    samples: &[GenSample],
    priors: Option<&ChannelPrior>,
) -> Result<DevLosses> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = gen.config();
    let layout = cfg.latent_layout;
    let channels = layout.total();
    let mut drop = Dropout::inactive();
    let mut phase1_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut length_sum = 0.0;
    let mut valid_frames = 0usize;
    let mut collected: Vec<f64> = Vec::new();
    let refs: Vec<&GenSample> = samples.iter().collect();
    for chunk in refs.chunks(cfg.batch_size) {
        let batch = make_batch(chunk, cfg.t_max, channels)?;
        let memory = gen.encode_text(&batch.text, &mut drop)?;
        let r_hat = gen.predict_length(&memory, &batch.text.pad_mask)?;
        let z_hat = gen.decode_latents(&memory, &batch.text.pad_mask, batch.len, Some(&batch.frame_mask), &mut drop)?;
        let loss = phase1_loss(
            &z_hat,
            &batch.target,
            &r_hat,
            &batch.ratio,
            &cfg.loss_weights,
            &batch.frame_mask,
            &layout,
        )?;
        phase1_sum += loss.total.to_scalar::<f64>()? * chunk.len() as f64;
        length_sum += loss.length * chunk.len() as f64;
        let pred = z_hat.flatten_all()?.to_vec1::<f64>()?;
        let gt = batch.target.flatten_all()?.to_vec1::<f64>()?;
        for (b, row) in batch.frame_mask.iter().enumerate() {
            for (t, &keep) in row.iter().enumerate() {
                if keep {
                    let off = (b * batch.len + t) * channels;
                    for c in 0..channels {
                        abs_sum += (pred[off + c] - gt[off + c]).abs();
                    }
                    collected.extend_from_slice(&pred[off..off + channels]);
                    valid_frames += 1;
                }
            }
        }
    }
    let n = samples.len() as f64;
    let kl = match priors {
        Some(p) => {
            let all = Tensor::from_vec(collected, (1, valid_frames, channels), &ParamStore::device())?;
            let kl = kl_channel_loss(&all, p, &[vec![true; valid_frames]], cfg.sigma_floor)?;
            Some(kl.to_scalar::<f64>()?)
        }
        None => None,
    };
    Ok(DevLosses {
        phase1: phase1_sum / n,
        kl,
        latent_mae: abs_sum / (valid_frames * channels) as f64,
        length_mae: length_sum / n,
    })
}

/// Trains one phase in place and returns the model restored to its best
/// selection-split objective. Phase 2 needs `priors`; an empty `dev` selects on `train`.
pub fn train_generator(
    mut gen: Generator,
    train: &[GenSample],
    dev: &[GenSample],
    priors: Option<&ChannelPrior>,
    phase: Phase,
) -> Result<Generator> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(p) = priors {
        if p.layout_hash != gen.layout_hash() {
            return Err(Error::HashMismatch {
                expected: gen.layout_hash().to_string(),
                found: p.layout_hash.clone(),
            });
        }
    }
    let priors_needed = match (phase, priors) {
        (Phase::Two, None) => {
            return Err(Error::MissingUpstream("phase 2 needs channel priors".into()));
        }
        (Phase::Two, Some(p)) => Some(p),
        (Phase::One, _) => None,
    };
    let cfg = gen.config().clone();
    let select = if dev.is_empty() { train } else { dev };
    let channels = cfg.latent_layout.total();
    let tag = format!("gen/phase{}", phase.number());
    let mut opt = Adam::new(
        gen.params(),
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut scheduler = ReduceLrOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, &format!("{tag}/shuffle")));
    let initial = evaluate_losses(&gen, select, priors_needed)?.objective(phase, cfg.kl_weight);
    let mut best = (initial, gen.snapshot()?);
    let mut bad_epochs = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut drop = if cfg.dropout > 0.0 {
            Dropout::training(
                cfg.dropout,
                ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, &format!("{tag}/dropout/{epoch}"))),
            )
        } else {
            Dropout::inactive()
        };
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let chunk: Vec<&GenSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&chunk, cfg.t_max, channels)?;
            let memory = gen.encode_text(&batch.text, &mut drop)?;
            let r_hat = gen.predict_length(&memory, &batch.text.pad_mask)?;
            let z_hat = gen.decode_latents(&memory, &batch.text.pad_mask, batch.len, Some(&batch.frame_mask), &mut drop)?;
            let mut loss = phase1_loss(
                &z_hat,
                &batch.target,
                &r_hat,
                &batch.ratio,
                &cfg.loss_weights,
                &batch.frame_mask,
                &cfg.latent_layout,
            )?
            .total;
            if let Some(p) = priors_needed {
                let kl = kl_channel_loss(&z_hat, p, &batch.frame_mask, cfg.sigma_floor)?;
                loss = (loss + (kl * cfg.kl_weight)?)?;
            }
            let value = loss.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::DivergenceDetected {
                    what: format!("generator phase {} loss", phase.number()),
                    epoch,
                });
            }
            opt.step(&loss.backward()?)?;
            loss_sum += value * chunk.len() as f64;
        }
        let dev_losses = evaluate_losses(&gen, select, priors_needed)?;
        let objective = dev_losses.objective(phase, cfg.kl_weight);
        if !objective.is_finite() {
            return Err(Error::DivergenceDetected {
                what: format!("generator phase {} dev loss", phase.number()),
                epoch,
            });
        }
        let lr = scheduler.observe(objective, opt.lr());
        opt.set_lr(lr);
        log::info!(
            "gen phase {} epoch {epoch}: train {:.6} dev {objective:.6} (latent MAE {:.5}, length MAE {:.5}) lr {lr:.3e}",
            phase.number(),
            loss_sum / train.len() as f64,
            dev_losses.latent_mae,
            dev_losses.length_mae
        );
        gen.history.push(GenEpochRecord {
            phase,
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            dev: dev_losses,
        });
        if objective < best.0 {
            best = (objective, gen.snapshot()?);
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.early_stop_patience {
                log::info!("gen phase {}: early stop after epoch {epoch}", phase.number());
                break;
            }
        }
    }
    gen.restore(&best.1)?;
    gen.phase = phase;
    Ok(gen)
}
