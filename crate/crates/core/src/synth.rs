//! Deterministic synthetic sign corpus for desk-scale runs.
//!
//! Each token owns a motif: a short clip of smooth sinusoidal activations that
//! drive a fixed low-rank basis per region. Hands move a lot, the body moves a
//! little, and the face stays at rest except for brief bump events. A sample
//! is the concatenation of its tokens' motifs with a linear cross-fade, placed
//! on a randomly translated and scaled signer.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSample, EMBED_DIM};
use crate::digest::substream_seed;
use crate::error::{Error, Result};
use crate::skeleton::{PoseSequence, Region, SkeletonLayout, COORDS, FRAME_DIM, TOTAL_JOINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub motif_bank_size: usize,
    pub t_max: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub motif_len_min: usize,
    pub motif_len_max: usize,
    pub crossfade: usize,
    /// Probability that a motif carries a facial bump event.
    pub face_event_prob: f64,
    pub positional_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 24,
            motif_bank_size: 24,
            t_max: 120,
            min_tokens: 1,
            max_tokens: 5,
            motif_len_min: 12,
            motif_len_max: 20,
            crossfade: 4,
            face_event_prob: 0.3,
            positional_noise: 0.05,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let checks = [
            (self.vocab_size >= 1, "vocab_size must be >= 1"),
            (self.motif_bank_size >= 1, "motif_bank_size must be >= 1"),
            (self.t_max >= 1, "t_max must be >= 1"),
            (self.min_tokens >= 1, "min_tokens must be >= 1"),
            (self.max_tokens >= self.min_tokens, "max_tokens < min_tokens"),
            (self.motif_len_min >= 1, "motif_len_min must be >= 1"),
            (self.motif_len_max >= self.motif_len_min, "motif_len_max < motif_len_min"),
            (
                self.crossfade < self.motif_len_min,
                "crossfade must be shorter than every motif",
            ),
            (
                self.motif_len_max <= self.t_max,
                "a single motif must fit in t_max",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidArgument(msg.into()));
            }
        }
        Ok(())
    }
}

/// Latent activation rank of each region's motion basis.
fn basis_rank(region: Region) -> usize {
    match region {
        Region::Body => 3,
        Region::RightHand | Region::LeftHand => 6,
        Region::Face => 2,
    }
}

struct Motif {
    len: usize,
    /// One `len × rank` activation matrix per region.
    activations: [Array2<f64>; 4],
}

/// Motif bank, region bases, rest pose and token embeddings for one synthetic language.
pub struct SyntheticLanguage {
    cfg: SynthConfig,
    layout: SkeletonLayout,
    rest: Array2<f64>,
    bases: [Array2<f64>; 4],
    motifs: Vec<Motif>,
    token_vectors: Array2<f64>,
    position_vectors: Array2<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rest_pose(layout: &SkeletonLayout) -> Array2<f64> {
    let mut pose = Array2::<f64>::zeros((TOTAL_JOINTS, COORDS));
    let body = [
        [0.5, 0.0, 0.0],
        [-0.5, 0.0, 0.0],
        [0.62, -0.62, 0.1],
        [-0.62, -0.62, 0.1],
        [0.45, -1.15, 0.25],
        [-0.45, -1.15, 0.25],
        [0.35, -1.6, 0.0],
        [-0.35, -1.6, 0.0],
    ];
    let body_start = layout.joint_range(Region::Body).start;
    // put the configured shoulder indices at the shoulder positions
    let mut order: Vec<usize> = (0..8).collect();
    let ls = layout.left_shoulder() - body_start;
    let rs = layout.right_shoulder() - body_start;
    order.retain(|&j| j != ls && j != rs);
    order.insert(0, ls);
    order.insert(1, rs);
    for (slot, joint) in order.into_iter().enumerate() {
        for c in 0..COORDS {
            pose[[body_start + joint, c]] = body[slot][c];
        }
    }
    for (region, wrist, side) in [
        (Region::RightHand, [-0.45, -1.15, 0.25], -1.0),
        (Region::LeftHand, [0.45, -1.15, 0.25], 1.0),
    ] {
        let range = layout.joint_range(region);
        for c in 0..COORDS {
            pose[[range.start, c]] = wrist[c];
        }
        for finger in 0..5 {
            let angle = -PI / 2.0 + side * (finger as f64 - 2.0) * 0.3;
            for k in 1..=4 {
                let j = range.start + 1 + finger * 4 + k - 1;
                let r = 0.035 * k as f64;
                pose[[j, 0]] = wrist[0] + r * angle.cos();
                pose[[j, 1]] = wrist[1] + r * angle.sin();
                pose[[j, 2]] = wrist[2] + 0.01 * k as f64;
            }
        }
    }
    let face = layout.joint_range(Region::Face);
    for (i, j) in face.enumerate() {
        let ring = (i % 4) as f64;
        let theta = 2.0 * PI * i as f64 / 128.0;
        let radius = 0.12 + 0.04 * ring;
        pose[[j, 0]] = radius * 0.8 * theta.cos();
        pose[[j, 1]] = 0.75 + radius * theta.sin();
        pose[[j, 2]] = 0.15 - 0.03 * ring;
    }
    pose
}

fn region_basis(region: Region, layout: &SkeletonLayout, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let joints = layout.joint_range(region);
    let dim = joints.len() * COORDS;
    let rank = basis_rank(region);
    let mut basis = Array2::<f64>::zeros((dim, rank));
    if region.is_hand() {
        // three rigid translations plus articulation directions
        for c in 0..COORDS {
            for j in 0..joints.len() {
                basis[[j * COORDS + c, c]] = 1.0;
            }
        }
        for col in COORDS..rank {
            for row in 0..dim {
                basis[[row, col]] = normal(rng) * 0.35;
            }
        }
    } else {
        for col in 0..rank {
            for row in 0..dim {
                basis[[row, col]] = normal(rng) / (dim as f64).sqrt() * 3.0;
            }
        }
    }
    if region == Region::Body {
        let start = joints.start;
        for shoulder in [layout.left_shoulder(), layout.right_shoulder()] {
            for c in 0..COORDS {
                basis.row_mut((shoulder - start) * COORDS + c).fill(0.0);
            }
        }
    }
    basis
}

fn build_motif(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Motif {
    let len = rng.random_range(cfg.motif_len_min..=cfg.motif_len_max);
    let activations = Region::ALL.map(|region| {
        let rank = basis_rank(region);
        let mut act = Array2::<f64>::zeros((len, rank));
        match region {
            Region::Face => {
                if rng.random_bool(cfg.face_event_prob) {
                    let width = 3.min(len);
                    let start = rng.random_range(0..=len - width);
                    let weights: Vec<f64> = (0..rank).map(|_| normal(rng) * 0.02).collect();
                    for k in 0..width {
                        let bump = (PI * (k as f64 + 1.0) / (width as f64 + 1.0)).sin();
                        for (i, w) in weights.iter().enumerate() {
                            act[[start + k, i]] = w * bump;
                        }
                    }
                }
            }
            _ => {
                let amp = if region == Region::Body { 0.08 } else { 0.25 };
                for i in 0..rank {
                    let a = amp * rng.random_range(0.5..1.0);
                    let freq = rng.random_range(0.5..2.0);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    for t in 0..len {
                        let x = 2.0 * PI * freq * t as f64 / len as f64 + phase;
                        act[[t, i]] = a * x.sin();
                    }
                }
            }
        }
        act
    });
    Motif { len, activations }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl SyntheticLanguage {
    pub fn new(seed: u64, cfg: SynthConfig, layout: SkeletonLayout) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "synth/bank"));
        let rest = rest_pose(&layout);
        let bases = Region::ALL.map(|r| region_basis(r, &layout, &mut rng));
        let motifs = (0..cfg.motif_bank_size)
            .map(|_| build_motif(&cfg, &mut rng))
            .collect();
        let mut emb_rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "synth/embeddings"));
        let token_vectors =
            Array2::from_shape_fn((cfg.vocab_size, EMBED_DIM), |_| normal(&mut emb_rng));
        let max_positions = cfg.max_tokens;
        let position_vectors =
            Array2::from_shape_fn((max_positions, EMBED_DIM), |_| normal(&mut emb_rng));
        Ok(SyntheticLanguage {
            cfg,
            layout,
            rest,
            bases,
            motifs,
            token_vectors,
            position_vectors,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn motif_len(&self, token: usize) -> usize {
        self.motifs[token % self.motifs.len()].len
    }

    /// Frame count of a sample built from `tokens`.
    pub fn sequence_len(&self, tokens: &[usize]) -> usize {
        let total: usize = tokens.iter().map(|&t| self.motif_len(t)).sum();
        total - self.cfg.crossfade * tokens.len().saturating_sub(1)
    }

    /// Region activations of the concatenated, cross-faded motifs.
    fn activations(&self, tokens: &[usize]) -> [Array2<f64>; 4] {
        let len = self.sequence_len(tokens);
        let overlap = self.cfg.crossfade;
        Region::ALL.map(|region| {
            let rank = basis_rank(region);
            let mut out = Array2::<f64>::zeros((len, rank));
            let mut cursor = 0usize;
            for (n, &token) in tokens.iter().enumerate() {
                let motif = &self.motifs[token % self.motifs.len()];
                let act = &motif.activations[region.index()];
                let start = if n == 0 { 0 } else { cursor - overlap };
                for t in 0..motif.len {
                    let row = start + t;
                    let blend = if n > 0 && t < overlap {
                        (t as f64 + 1.0) / (overlap as f64 + 1.0)
                    } else {
                        1.0
                    };
                    for i in 0..rank {
                        out[[row, i]] = (1.0 - blend) * out[[row, i]] + blend * act[[t, i]];
                    }
                }
                cursor = start + motif.len;
            }
            out
        })
    }

    /// Builds one sample from an explicit token list; `signer_seed` controls the
    /// global translation and scale applied to the whole skeleton.
    pub fn sample_from_tokens(
        &self,
        id: impl Into<String>,
        tokens: &[usize],
        signer_seed: u64,
    ) -> Result<CorpusSample> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("sample needs at least one token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        if tokens.len() > self.cfg.max_tokens {
            return Err(Error::InvalidArgument(format!(
                "{} tokens exceeds max_tokens {}",
                tokens.len(),
                self.cfg.max_tokens
            )));
        }
        let len = self.sequence_len(tokens);
        if len > self.cfg.t_max {
            return Err(Error::InvalidArgument(format!(
                "{len} frames exceeds t_max {}",
                self.cfg.t_max
            )));
        }
        let activations = self.activations(tokens);
        let rest_flat = Array1::from_iter(self.rest.iter().copied());
        let mut flat = Array2::<f64>::zeros((len, FRAME_DIM));
        for t in 0..len {
            let mut row = rest_flat.clone();
            for region in Region::ALL {
                let cols = self.layout.coord_range(region);
                let delta = self.bases[region.index()].dot(&activations[region.index()].row(t));
                let mut slice = row.slice_mut(ndarray::s![cols]);
                slice += &delta;
            }
            flat.row_mut(t).assign(&row);
        }

        let mut signer = ChaCha8Rng::seed_from_u64(signer_seed);
        let scale = signer.random_range(0.8..1.2);
        let shift = [
            signer.random_range(-0.3..0.3),
            signer.random_range(-0.3..0.3),
            signer.random_range(-0.3..0.3),
        ];
        let frames = Array3::from_shape_fn((len, TOTAL_JOINTS, COORDS), |(t, j, c)| {
            round_f32(flat[[t, j * COORDS + c]] * scale + shift[c])
        });

        let noise = self.cfg.positional_noise;
        let embedding = Array2::from_shape_fn((tokens.len(), EMBED_DIM), |(p, d)| {
            round_f32(self.token_vectors[[tokens[p], d]] + noise * self.position_vectors[[p, d]])
        });
        Ok(CorpusSample {
            id: id.into(),
            tokens: tokens.iter().map(|t| format!("w{t}")).collect(),
            embedding,
            pose: PoseSequence::new(frames)?,
        })
    }

    /// Draws `n` samples with random token lists.
    pub fn samples(&self, seed: u64, n: usize, id_prefix: &str) -> Result<Vec<CorpusSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let count = rng.random_range(self.cfg.min_tokens..=self.cfg.max_tokens);
                let mut tokens: Vec<usize> = Vec::with_capacity(count);
                for _ in 0..count {
                    let candidate = rng.random_range(0..self.cfg.vocab_size);
                    tokens.push(candidate);
                    if self.sequence_len(&tokens) > self.cfg.t_max {
                        tokens.pop();
                        break;
                    }
                }
                let signer_seed = rng.random();
                self.sample_from_tokens(format!("{id_prefix}{i:05}"), &tokens, signer_seed)
            })
            .collect()
    }
}

/// Generates `n_samples` samples of a fresh synthetic language under the default layout.
pub fn synth_corpus(
    seed: u64,
    n_samples: usize,
    vocab_size: usize,
    motif_bank_size: usize,
    t_max: usize,
) -> Result<Vec<CorpusSample>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        vocab_size,
        motif_bank_size,
        t_max,
        motif_len_max: defaults.motif_len_max.min(t_max),
        motif_len_min: defaults.motif_len_min.min(t_max),
        crossfade: defaults
            .crossfade
            .min(defaults.motif_len_min.min(t_max).saturating_sub(1)),
        ..defaults
    };
    let language = SyntheticLanguage::new(seed, cfg, SkeletonLayout::default())?;
    language.samples(substream_seed(seed, "synth/samples"), n_samples, "s")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::normalize_pose;

    fn language(seed: u64) -> SyntheticLanguage {
        SyntheticLanguage::new(seed, SynthConfig::default(), SkeletonLayout::default()).unwrap()
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_corpus(5, 8, 10, 10, 120).unwrap();
        let b = synth_corpus(5, 8, 10, 10, 120).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(6, 8, 10, 10, 120).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn length_grows_with_tokens() {
        let lang = language(1);
        let one = lang.sample_from_tokens("a", &[3], 0).unwrap();
        let two = lang.sample_from_tokens("b", &[3, 7], 0).unwrap();
        assert!(one.pose.len() < two.pose.len());
        let three = lang.sample_from_tokens("c", &[3, 7, 1], 0).unwrap();
        assert!(two.pose.len() < three.pose.len());
    }

    #[test]
    fn embedding_rows_match_tokens_and_poses_normalize() {
        let lang = language(2);
        let layout = SkeletonLayout::default();
        for s in lang.samples(9, 20, "x").unwrap() {
            s.validate().unwrap();
            assert!(s.pose.len() <= 120);
            let n = normalize_pose(&s.pose, &layout).unwrap();
            assert!(n.is_finite());
        }
    }

    #[test]
    fn payloads_are_f32_exact() {
        let s = &synth_corpus(3, 1, 5, 5, 120).unwrap()[0];
        assert!(s.pose.frames().iter().all(|v| *v == (*v as f32) as f64));
        assert!(s.embedding.iter().all(|v| *v == (*v as f32) as f64));
    }

    #[test]
    fn argument_validation() {
        assert!(synth_corpus(0, 0, 5, 5, 120).is_err());
        assert!(synth_corpus(0, 1, 0, 5, 120).is_err());
        assert!(synth_corpus(0, 1, 5, 0, 120).is_err());
        let lang = language(3);
        assert!(lang.sample_from_tokens("x", &[], 0).is_err());
        assert!(lang.sample_from_tokens("x", &[999], 0).is_err());
    }

    #[test]
    fn hands_vary_more_than_face() {
        let lang = language(4);
        let layout = SkeletonLayout::default();
        let samples = lang.samples(10, 10, "v").unwrap();
        let var_of = |region: Region| {
            let cols = layout.coord_range(region);
            let mut acc = 0.0;
            let mut n = 0.0;
            for s in &samples {
                let flat = normalize_pose(&s.pose, &layout).unwrap().to_flat();
                let block = flat.slice(ndarray::s![.., cols.clone()]);
                let mean = block.mean_axis(ndarray::Axis(0)).unwrap();
                acc += (&block - &mean).mapv(|v| v * v).sum();
                n += block.len() as f64;
            }
            acc / n
        };
        assert!(var_of(Region::RightHand) > 50.0 * var_of(Region::Face));
    }
}
