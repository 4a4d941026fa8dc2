use candle_core::{DType, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

/// Additive bias applied to attention logits of padded keys.
pub const MASKED_LOGIT: f64 = -1e9;

/// Affine layer `y = x Wᵀ + b` with `W: out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.create(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Uniform(bound),
            rng,
        )?;
        let bias = if bias {
            Some(store.create(&format!("{name}.bias"), &[out_dim], Init::Uniform(bound), rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut unused = rand::SeedableRng::seed_from_u64(0);
        let weight = store.create(&format!("{name}.weight"), &[out_dim, in_dim], Init::Zeros, &mut unused)?;
        let bias = store.create(&format!("{name}.bias"), &[out_dim], Init::Zeros, &mut unused)?;
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the layer over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::ShapeMismatch("scalar input".into()))?;
        if in_dim != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "linear expects {} input features, got {in_dim}",
                self.in_dim()
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// PReLU with one shared learnable slope.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: Tensor,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let slope = store.create(&format!("{name}.slope"), &[1], Init::Const(0.25), rng)?;
        Ok(PRelu { slope })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pos = x.relu()?;
        let neg = x.neg()?.relu()?;
        Ok(pos.sub(&neg.broadcast_mul(&self.slope)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let gamma = store.create(&format!("{name}.gamma"), &[dim], Init::Const(1.0), rng)?;
        let beta = store.create(&format!("{name}.beta"), &[dim], Init::Zeros, rng)?;
        Ok(LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Inverted dropout driven by a seeded generator; inactive when no generator is attached.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn inactive() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn training(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x.clone());
        };
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
        Ok(x.mul(&mask)?)
    }
}

/// Softmax over the last dimension; the max shift is detached.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Numerically safe logistic function, `(tanh(x/2) + 1) / 2`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `len × dim` sinusoidal position table.
pub fn sinusoidal_table(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        sinusoidal_table(len, dim),
        (len, dim),
        &ParamStore::device(),
    )?)
}

/// Converts a `B × L` key mask (true = attend) into a `B × 1 × 1 × L` additive logit bias.
pub fn key_mask_bias(mask: &[Vec<bool>]) -> Result<Tensor> {
    let b = mask.len();
    let l = mask.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(b * l);
    for row in mask {
        if row.len() != l {
            return Err(Error::ShapeMismatch("ragged attention mask".into()));
        }
        data.extend(row.iter().map(|&keep| if keep { 0.0 } else { MASKED_LOGIT }));
    }
    Ok(Tensor::from_vec(data, (b, 1, 1, l), &ParamStore::device())?)
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{heads} heads do not divide model width {dim}"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query: B × Lq × d`, `context: B × Lk × d`, `key_bias: B × 1 × 1 × Lk`.
    pub fn forward(
        &self,
        query: &Tensor,
        context: &Tensor,
        key_bias: Option<&Tensor>,
        dropout: &mut Dropout,
    ) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let head_dim = d / self.heads;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let mut logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (head_dim as f64).sqrt())?;
        if let Some(bias) = key_bias {
            logits = logits.broadcast_add(bias)?;
        }
        let weights = dropout.apply(&softmax_last(&logits)?)?;
        let mixed = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, d))?;
        self.out.forward(&mixed)
    }
}

/// Position-wise ReLU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, dropout: &mut Dropout) -> Result<Tensor> {
        let h = dropout.apply(&self.up.forward(x)?.relu()?)?;
        self.down.forward(&h)
    }
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_matches_manual_product() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng).unwrap();
        let x = Tensor::new(&[[[1.0f64, 2.0, 3.0]]], &ParamStore::device()).unwrap();
        let y = to_f64_vec(&lin.forward(&x).unwrap()).unwrap();
        let w = lin.weight.to_vec2::<f64>().unwrap();
        let b = lin.bias.as_ref().unwrap().to_vec1::<f64>().unwrap();
        for o in 0..2 {
            let expect = w[o][0] + 2.0 * w[o][1] + 3.0 * w[o][2] + b[o];
            assert!((y[o] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::new(&[-1000.0f64, 0.0, 1000.0], &ParamStore::device()).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn softmax_ignores_masked_logits() {
        let x = Tensor::new(&[[1.0f64, 2.0, MASKED_LOGIT]], &ParamStore::device()).unwrap();
        let y = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(y[0][2], 0.0);
        assert!((y[0][0] + y[0][1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn positional_table_first_rows() {
        let t = sinusoidal_table(2, 4);
        assert_eq!(&t[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t[4] - 1f64.sin()).abs() < 1e-15);
        assert!((t[6] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 3, &mut rng).is_err());
    }
}
