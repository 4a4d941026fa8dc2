use std::path::Path;

use candle_core::Tensor;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::AeEpochRecord;
use super::{AeConfig, AeVariant, LatentLayout, LatentSequence};
use crate::digest::substream_seed;
use crate::error::{Error, Result};
use crate::nn::{read_container, write_container, Linear, NamedTensor, PRelu, ParamStore};
use crate::skeleton::{PoseSequence, Region, SkeletonLayout, FRAME_DIM};

pub const AE_CHECKPOINT_MAGIC: &str = "AECKPT/1";

#[derive(Clone, Debug)]
enum Block {
    Linear(Linear),
    Mlp(Linear, PRelu, Linear),
}

impl Block {
    fn build(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: Option<usize>,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match hidden {
            None => Block::Linear(Linear::new(store, &format!("{name}.0"), input, output, true, rng)?),
            Some(h) => Block::Mlp(
                Linear::new(store, &format!("{name}.0"), input, h, true, rng)?,
                PRelu::new(store, &format!("{name}.act"), rng)?,
                Linear::new(store, &format!("{name}.1"), h, output, true, rng)?,
            ),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Linear(l) => l.forward(x),
            Block::Mlp(a, act, b) => b.forward(&act.forward(&a.forward(x)?)?),
        }
    }

    fn weights(&self) -> Vec<Tensor> {
        match self {
            Block::Linear(l) => vec![l.weight.clone()],
            Block::Mlp(a, _, b) => vec![a.weight.clone(), b.weight.clone()],
        }
    }
}

enum Topology {
    /// Encoder and decoder blocks indexed by [`Region::index`].
    Partitioned { enc: Vec<Block>, dec: Vec<Block> },
    Entangled { enc: Block, dec: Block },
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: AeConfig,
    layout_hash: String,
    history: Vec<AeEpochRecord>,
}

/// Frame-wise pose autoencoder with its parameters.
pub struct PoseAutoencoder {
    cfg: AeConfig,
    layout: SkeletonLayout,
    store: ParamStore,
    topology: Topology,
    pub history: Vec<AeEpochRecord>,
}

impl PoseAutoencoder {
    /// Freshly initialized model, seeded from `cfg.seed`.
    pub fn new(cfg: AeConfig, layout: SkeletonLayout) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, "ae/init"));
        let mut store = ParamStore::new();
        let lat = cfg.latent_layout;
        let topology = match cfg.variant {
            AeVariant::Entangled => Topology::Entangled {
                enc: Block::build(&mut store, "enc.all", FRAME_DIM, None, lat.total(), &mut rng)?,
                dec: Block::build(&mut store, "dec.all", lat.total(), None, FRAME_DIM, &mut rng)?,
            },
            AeVariant::Linear | AeVariant::Mlp => {
                let mut enc = Vec::new();
                let mut dec = Vec::new();
                for region in Region::ALL {
                    let input = layout.coord_range(region).len();
                    let hidden = match (cfg.variant, region) {
                        (AeVariant::Mlp, Region::Body) | (AeVariant::Linear, _) => None,
                        (_, Region::Face) => Some(cfg.mlp_hidden.face),
                        _ => Some(cfg.mlp_hidden.hands),
                    };
                    let latent = lat.size(region);
                    enc.push(Block::build(
                        &mut store,
                        &format!("enc.{}", region.name()),
                        input,
                        hidden,
                        latent,
                        &mut rng,
                    )?);
                    dec.push(Block::build(
                        &mut store,
                        &format!("dec.{}", region.name()),
                        latent,
                        hidden,
                        input,
                        &mut rng,
                    )?);
                }
                Topology::Partitioned { enc, dec }
            }
        };
        Ok(PoseAutoencoder {
            cfg,
            layout,
            store,
            topology,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &SkeletonLayout {
        &self.layout
    }

    pub fn latent_layout(&self) -> LatentLayout {
        self.cfg.latent_layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Encoder weight matrices, the operands of the sparsity penalty.
    pub fn encoder_weights(&self) -> Vec<Tensor> {
        match &self.topology {
            Topology::Partitioned { enc, .. } => enc.iter().flat_map(Block::weights).collect(),
            Topology::Entangled { enc, .. } => enc.weights(),
        }
    }

    /// `N × 534` flattened frames to `N × 80` codes.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != FRAME_DIM {
            return Err(Error::LayoutMismatch(format!(
                "encoder expects {FRAME_DIM} input columns, got {d}"
            )));
        }
        match &self.topology {
            Topology::Entangled { enc, .. } => enc.forward(x),
            Topology::Partitioned { enc, .. } => {
                let parts = Region::ALL
                    .iter()
                    .map(|r| {
                        let cols = self.layout.coord_range(*r);
                        enc[r.index()].forward(&x.narrow(1, cols.start, cols.len())?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::cat(&parts, 1)?)
            }
        }
    }

    /// `N × 80` codes to `N × 534` flattened frames.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d) = z.dims2()?;
        let lat = self.cfg.latent_layout;
        if d != lat.total() {
            return Err(Error::LayoutMismatch(format!(
                "decoder expects {} latent channels, got {d}",
                lat.total()
            )));
        }
        match &self.topology {
            Topology::Entangled { dec, .. } => dec.forward(z),
            Topology::Partitioned { dec, .. } => {
                let parts = Region::ALL
                    .iter()
                    .map(|r| {
                        let ch = lat.channel_range(*r);
                        dec[r.index()].forward(&z.narrow(1, ch.start, ch.len())?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::cat(&parts, 1)?)
            }
        }
    }

    pub fn encode(&self, seq: &PoseSequence) -> Result<LatentSequence> {
        if !seq.is_finite() {
            return Err(Error::NonFiniteInput("pose sequence".into()));
        }
        let x = array_to_tensor(&seq.to_flat())?;
        let z = tensor_to_array(&self.encode_tensor(&x)?)?;
        LatentSequence::new(z, self.cfg.latent_layout)
    }

    pub fn decode(&self, lat: &LatentSequence) -> Result<PoseSequence> {
        if lat.layout != self.cfg.latent_layout {
            return Err(Error::LayoutMismatch(
                "latent layout differs from the autoencoder's".into(),
            ));
        }
        let z = array_to_tensor(&lat.codes)?;
        PoseSequence::from_flat(tensor_to_array(&self.decode_tensor(&z)?)?)
    }

    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.store.snapshot()
    }

    pub fn restore(&self, params: &[NamedTensor]) -> Result<()> {
        self.store.restore(params)
    }

    /// Sets every weight, bias and slope to zero.
    pub fn zero_parameters(&self) -> Result<()> {
        self.store.zero_all()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            layout_hash: self.layout.layout_hash().to_string(),
            history: self.history.clone(),
        };
        write_container(
            path,
            AE_CHECKPOINT_MAGIC,
            serde_json::to_value(meta)?,
            &self.snapshot()?,
        )
    }

    /// Loads a checkpoint written under `layout`; any other layout is refused.
    pub fn load(path: &Path, layout: &SkeletonLayout) -> Result<Self> {
        let (meta, tensors) = read_container(path, AE_CHECKPOINT_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::format(path, 0, format!("checkpoint header: {e}")))?;
        layout.check_hash(&meta.layout_hash)?;
        let mut model = PoseAutoencoder::new(meta.config, layout.clone())?;
        model.restore(&tensors)?;
        model.history = meta.history;
        Ok(model)
    }
}

pub(crate) fn array_to_tensor(a: &Array2<f64>) -> Result<Tensor> {
    let (r, c) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), &ParamStore::device())?)
}

pub(crate) fn tensor_to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let data = t.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((r, c), data).map_err(|e| Error::ShapeMismatch(e.to_string()))
}
