use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::GenEpochRecord;
use super::{GeneratorConfig, Phase};
use crate::autoencoder::{LatentSequence, PoseAutoencoder};
use crate::digest::substream_seed;
use crate::error::{Error, Result};
use crate::nn::layers::{key_mask_bias, positional_encoding, sigmoid};
use crate::nn::{
    read_container, write_container, Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    NamedTensor, ParamStore,
};
use crate::skeleton::{PoseSequence, FRAME_DIM};
use crate::text::{masked_mean_pool, pad_batch, TextBatch};

pub const GEN_CHECKPOINT_MAGIC: &str = "GENCKPT/1";

struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.enc_heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, key_bias: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        let a = self.attn.forward(x, x, Some(key_bias), drop)?;
        let a = drop.apply(&a)?;
        let x = self.norm1.forward(&(x + a)?)?;
        let f = self.ffn.forward(&x, drop)?;
        let f = drop.apply(&f)?;
        self.norm2.forward(&(x + f)?)
    }
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.dec_heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.dec_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d, rng)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        frame_bias: Option<&Tensor>,
        memory: &Tensor,
        text_bias: &Tensor,
        drop: &mut Dropout,
    ) -> Result<Tensor> {
        let a = self.self_attn.forward(x, x, frame_bias, drop)?;
        let a = drop.apply(&a)?;
        let x = self.norm1.forward(&(x + a)?)?;
        let c = self.cross_attn.forward(&x, memory, Some(text_bias), drop)?;
        let c = drop.apply(&c)?;
        let x = self.norm2.forward(&(x + c)?)?;
        let f = self.ffn.forward(&x, drop)?;
        let f = drop.apply(&f)?;
        self.norm3.forward(&(x + f)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: GeneratorConfig,
    layout_hash: String,
    phase: Phase,
    idle_pose: Vec<f64>,
    history: Vec<GenEpochRecord>,
}

/// Text-to-latent transformer with its parameters and idle reference pose.
pub struct Generator {
    cfg: GeneratorConfig,
    layout_hash: String,
    idle_pose: Vec<f64>,
    store: ParamStore,
    in_proj: Linear,
    encoder: Vec<EncoderLayer>,
    length_head: Linear,
    query_proj: Linear,
    decoder: Vec<DecoderLayer>,
    out_proj: Linear,
    decode_calls: AtomicUsize,
    /// Phase of the most recent training run (phase 1 for a fresh model).
    pub phase: Phase,
    pub history: Vec<GenEpochRecord>,
}

impl Generator {
    /// Fresh model; `idle_pose` is the flattened 534-value stationary reference pose.
    pub fn new(cfg: GeneratorConfig, idle_pose: Vec<f64>, layout_hash: &str) -> Result<Self> {
        cfg.validate()?;
        if idle_pose.len() != FRAME_DIM || idle_pose.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!(
                "idle pose must hold {FRAME_DIM} finite values"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, "gen/init"));
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let in_proj = Linear::new(&mut store, "in_proj", cfg.input_dim, d, true, &mut rng)?;
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("enc.{i}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let length_head = Linear::zeros(&mut store, "length_head", d, 1)?;
        let query_proj = Linear::new(&mut store, "query_proj", FRAME_DIM, d, true, &mut rng)?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("dec.{i}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let out_proj = Linear::new(&mut store, "out_proj", d, cfg.latent_layout.total(), true, &mut rng)?;
        Ok(Generator {
            cfg,
            layout_hash: layout_hash.to_string(),
            idle_pose,
            store,
            in_proj,
            encoder,
            length_head,
            query_proj,
            decoder,
            out_proj,
            decode_calls: AtomicUsize::new(0),
            phase: Phase::One,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn layout_hash(&self) -> &str {
        &self.layout_hash
    }

    pub fn idle_pose(&self) -> &[f64] {
        &self.idle_pose
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Number of decoder passes run so far.
    pub fn decode_calls(&self) -> usize {
        self.decode_calls.load(Ordering::Relaxed)
    }

    /// `B × L_max × d` memory; padded tokens are masked out of attention.
    pub fn encode_text(&self, batch: &TextBatch, drop: &mut Dropout) -> Result<Tensor> {
        let x = batch.embeddings_tensor()?;
        let (_, l, _) = x.dims3()?;
        let pe = positional_encoding(l, self.cfg.d_model)?;
        let mut h = drop.apply(&self.in_proj.forward(&x)?.broadcast_add(&pe)?)?;
        let bias = key_mask_bias(&batch.pad_mask)?;
        for layer in &self.encoder {
            h = layer.forward(&h, &bias, drop)?;
        }
        Ok(h)
    }

    /// Length ratio per sample, `sigmoid(affine(masked mean of memory))`.
    pub fn predict_length(&self, memory: &Tensor, pad_mask: &[Vec<bool>]) -> Result<Tensor> {
        let pooled = masked_mean_pool(memory, pad_mask)?;
        Ok(sigmoid(&self.length_head.forward(&pooled)?)?.squeeze(1)?)
    }

    /// `L × d` time queries: projected idle pose plus positional encoding.
    pub fn time_queries(&self, len: usize) -> Result<Tensor> {
        let idle = Tensor::from_slice(&self.idle_pose, (1, FRAME_DIM), &ParamStore::device())?;
        let mut base = self.query_proj.forward(&idle)?;
        if self.cfg.freeze_time_queries {
            base = base.detach();
        }
        Ok(base.broadcast_add(&positional_encoding(len, self.cfg.d_model)?)?)
    }

    /// Decodes `len` frames for every batch row in one parallel pass.
    ///
    /// `frame_mask` (B × len) hides padded target frames from self-attention
    /// during training; inference passes `None`.
    pub fn decode_latents(
        &self,
        memory: &Tensor,
        pad_mask: &[Vec<bool>],
        len: usize,
        frame_mask: Option<&[Vec<bool>]>,
        drop: &mut Dropout,
    ) -> Result<Tensor> {
        if len == 0 || len > self.cfg.t_max {
            return Err(Error::LengthOutOfRange {
                length: len,
                t_max: self.cfg.t_max,
            });
        }
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        let (b, _, d) = memory.dims3()?;
        let text_bias = key_mask_bias(pad_mask)?;
        let frame_bias = frame_mask.map(key_mask_bias).transpose()?;
        let mut h = drop.apply(&self.time_queries(len)?.unsqueeze(0)?.broadcast_as((b, len, d))?.contiguous()?)?;
        for layer in &self.decoder {
            h = layer.forward(&h, frame_bias.as_ref(), memory, &text_bias, drop)?;
        }
        self.out_proj.forward(&h)
    }

    /// Inference for one embedding matrix padded to `pad_to` tokens.
    /// Returns the latent sequence and the predicted length ratio.
    pub fn infer(&self, embedding: &Array2<f64>, pad_to: Option<usize>) -> Result<(LatentSequence, f64)> {
        let batch = match pad_to {
            Some(len) => crate::text::pad_batch_to(&[embedding], len)?,
            None => pad_batch(&[embedding])?,
        };
        let mut drop = Dropout::inactive();
        let memory = self.encode_text(&batch, &mut drop)?;
        let ratio = self.predict_length(&memory, &batch.pad_mask)?.to_vec1::<f64>()?[0];
        let len = length_from_ratio(ratio, self.cfg.t_max);
        let z = self.decode_latents(&memory, &batch.pad_mask, len, None, &mut drop)?;
        let codes = Array2::from_shape_vec((len, self.cfg.latent_layout.total()), z.flatten_all()?.to_vec1::<f64>()?)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok((LatentSequence::new(codes, self.cfg.latent_layout)?, ratio))
    }

    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.store.snapshot()
    }

    pub fn restore(&self, params: &[NamedTensor]) -> Result<()> {
        self.store.restore(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            layout_hash: self.layout_hash.clone(),
            phase: self.phase,
            idle_pose: self.idle_pose.clone(),
            history: self.history.clone(),
        };
        write_container(path, GEN_CHECKPOINT_MAGIC, serde_json::to_value(meta)?, &self.snapshot()?)
    }

    /// Loads a checkpoint and checks its skeleton layout hash.
    pub fn load(path: &Path, layout_hash: &str) -> Result<Self> {
        let (meta, tensors) = read_container(path, GEN_CHECKPOINT_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::format(path, 0, format!("checkpoint header: {e}")))?;
        if meta.layout_hash != layout_hash {
            return Err(Error::HashMismatch {
                expected: layout_hash.to_string(),
                found: meta.layout_hash,
            });
        }
        let mut g = Generator::new(meta.config, meta.idle_pose, &meta.layout_hash)?;
        g.restore(&tensors)?;
        g.phase = meta.phase;
        g.history = meta.history;
        Ok(g)
    }

    /// Replaces the configuration's training knobs; the architecture must stay the same.
    pub fn set_training_config(&mut self, cfg: GeneratorConfig) -> Result<()> {
        cfg.validate()?;
        let same_arch = cfg.d_model == self.cfg.d_model
            && cfg.enc_layers == self.cfg.enc_layers
            && cfg.enc_heads == self.cfg.enc_heads
            && cfg.dec_layers == self.cfg.dec_layers
            && cfg.dec_heads == self.cfg.dec_heads
            && cfg.ffn_dim == self.cfg.ffn_dim
            && cfg.latent_layout == self.cfg.latent_layout
            && cfg.t_max == self.cfg.t_max;
        if !same_arch {
            return Err(Error::InvalidArgument(
                "architecture fields differ from the checkpoint".into(),
            ));
        }
        self.cfg = cfg;
        Ok(())
    }
}

/// `clamp(round(r · T_max), 1, T_max)`.
pub fn length_from_ratio(ratio: f64, t_max: usize) -> usize {
    ((ratio * t_max as f64).round() as usize).clamp(1, t_max)
}

/// Mean of the first two and last two frames of every sequence (hands at rest).
pub fn idle_pose_from(poses: &[PoseSequence]) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; FRAME_DIM];
    let mut count = 0usize;
    for seq in poses {
        let t = seq.len();
        let mut idx = vec![0, 1.min(t - 1), t.saturating_sub(2), t - 1];
        idx.sort_unstable();
        idx.dedup();
        for i in idx {
            for (s, v) in sum.iter_mut().zip(seq.frame(i).iter()) {
                *s += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(sum.into_iter().map(|s| s / count as f64).collect())
}

/// Generates a pose sequence: predict the length, decode latents, AE-decode.
pub fn generate(embedding: &Array2<f64>, gen: &Generator, ae: &PoseAutoencoder) -> Result<PoseSequence> {
    generate_padded(embedding, None, gen, ae)
}

/// As [`generate`], with the text padded to `pad_to` tokens when given.
pub fn generate_padded(
    embedding: &Array2<f64>,
    pad_to: Option<usize>,
    gen: &Generator,
    ae: &PoseAutoencoder,
) -> Result<PoseSequence> {
    ae.layout().check_hash(gen.layout_hash())?;
    if ae.latent_layout() != gen.config().latent_layout {
        return Err(Error::LayoutMismatch(
            "generator and autoencoder latent layouts differ".into(),
        ));
    }
    let (lat, _) = gen.infer(embedding, pad_to)?;
    ae.decode(&lat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            d_model: 16,
            enc_layers: 1,
            enc_heads: 2,
            dec_layers: 1,
            dec_heads: 2,
            ffn_dim: 32,
            t_max: 20,
            ..Default::default()
        }
    }

    #[test]
    fn length_rounding() {
        assert_eq!(length_from_ratio(0.5, 300), 150);
        assert_eq!(length_from_ratio(0.0, 300), 1);
        assert_eq!(length_from_ratio(1.0, 300), 300);
    }

    #[test]
    fn zero_head_predicts_half() {
        let g = Generator::new(tiny(), vec![0.0; FRAME_DIM], "h").unwrap();
        let emb = Array2::from_shape_fn((3, 768), |(i, j)| ((i * 7 + j) % 11) as f64 * 0.1);
        let (lat, r) = g.infer(&emb, None).unwrap();
        assert_eq!(r, 0.5);
        assert_eq!(lat.len(), 10);
        assert_eq!(g.decode_calls(), 1);
    }

    #[test]
    fn rejects_bad_length() {
        let g = Generator::new(tiny(), vec![0.0; FRAME_DIM], "h").unwrap();
        let emb = Array2::zeros((2, 768));
        let batch = pad_batch(&[&emb]).unwrap();
        let mut drop = Dropout::inactive();
        let mem = g.encode_text(&batch, &mut drop).unwrap();
        assert!(matches!(
            g.decode_latents(&mem, &batch.pad_mask, 21, None, &mut drop),
            Err(Error::LengthOutOfRange { .. })
        ));
    }
}
