//! Padded batches of precomputed token embeddings and mask-aware pooling.

use candle_core::Tensor;
use ndarray::{Array2, Array3, ArrayView3};

use crate::corpus::EMBED_DIM;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// `B × L_max × 768` embeddings with a `B × L_max` mask (true = real token).
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    pub embeddings: Array3<f64>,
    pub pad_mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.embeddings.dim().1
    }

    pub fn embeddings_tensor(&self) -> Result<Tensor> {
        let (b, l, d) = self.embeddings.dim();
        let data: Vec<f64> = self.embeddings.iter().copied().collect();
        Ok(Tensor::from_vec(data, (b, l, d), &ParamStore::device())?)
    }

    /// `B × L_max` mask as 0/1 values.
    pub fn mask_tensor(&self) -> Result<Tensor> {
        mask_to_tensor(&self.pad_mask)
    }
}

pub(crate) fn mask_to_tensor(mask: &[Vec<bool>]) -> Result<Tensor> {
    let b = mask.len();
    let l = mask.first().map_or(0, Vec::len);
    let data: Vec<f64> = mask
        .iter()
        .flat_map(|row| row.iter().map(|&m| if m { 1.0 } else { 0.0 }))
        .collect();
    if data.len() != b * l {
        return Err(Error::ShapeMismatch("ragged mask".into()));
    }
    Ok(Tensor::from_vec(data, (b, l), &ParamStore::device())?)
}

/// Pads to the longest sample.
pub fn pad_batch(samples: &[&Array2<f64>]) -> Result<TextBatch> {
    let l_max = samples.iter().map(|s| s.nrows()).max().ok_or(Error::EmptyBatch)?;
    pad_batch_to(samples, l_max)
}

/// Pads every sample to exactly `len` positions with zero vectors.
pub fn pad_batch_to(samples: &[&Array2<f64>], len: usize) -> Result<TextBatch> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut embeddings = Array3::zeros((samples.len(), len, EMBED_DIM));
    let mut pad_mask = Vec::with_capacity(samples.len());
    let mut lengths = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        let (rows, dim) = s.dim();
        if dim != EMBED_DIM {
            return Err(Error::ShapeMismatch(format!(
                "embedding width {dim}, expected {EMBED_DIM}"
            )));
        }
        if rows == 0 {
            return Err(Error::AllMaskedRow { row: b });
        }
        if rows > len {
            return Err(Error::InvalidArgument(format!(
                "sample {b} has {rows} tokens, more than the padded length {len}"
            )));
        }
        embeddings
            .slice_mut(ndarray::s![b, ..rows, ..])
            .assign(s);
        pad_mask.push((0..len).map(|i| i < rows).collect());
        lengths.push(rows);
    }
    Ok(TextBatch {
        embeddings,
        pad_mask,
        lengths,
    })
}

fn check_rows(mask: &[Vec<bool>]) -> Result<()> {
    match mask.iter().position(|row| !row.iter().any(|&m| m)) {
        Some(row) => Err(Error::AllMaskedRow { row }),
        None => Ok(()),
    }
}

/// Mean over the real positions of `states: B × L × D`, differentiable.
pub fn masked_mean_pool(states: &Tensor, pad_mask: &[Vec<bool>]) -> Result<Tensor> {
    check_rows(pad_mask)?;
    let (b, l, _) = states.dims3()?;
    if pad_mask.len() != b || pad_mask.iter().any(|r| r.len() != l) {
        return Err(Error::ShapeMismatch("mask does not match the states".into()));
    }
    let m = mask_to_tensor(pad_mask)?.unsqueeze(2)?;
    let sums = states.broadcast_mul(&m)?.sum(1)?;
    let counts = m.sum(1)?;
    Ok(sums.broadcast_div(&counts)?)
}

/// Host-side twin of [`masked_mean_pool`].
pub fn masked_mean_pool_array(states: ArrayView3<'_, f64>, pad_mask: &[Vec<bool>]) -> Result<Array2<f64>> {
    check_rows(pad_mask)?;
    let (b, l, d) = states.dim();
    if pad_mask.len() != b || pad_mask.iter().any(|r| r.len() != l) {
        return Err(Error::ShapeMismatch("mask does not match the states".into()));
    }
    let mut out = Array2::zeros((b, d));
    for (i, row) in pad_mask.iter().enumerate() {
        let mut count = 0usize;
        for (t, &keep) in row.iter().enumerate() {
            if keep {
                let mut o = out.row_mut(i);
                o += &states.slice(ndarray::s![i, t, ..]);
                count += 1;
            }
        }
        out.row_mut(i).mapv_inplace(|v| v / count as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: usize, fill: f64) -> Array2<f64> {
        Array2::from_elem((rows, EMBED_DIM), fill)
    }

    #[test]
    fn pads_to_longest() {
        let a = emb(2, 1.0);
        let b = emb(5, 2.0);
        let batch = pad_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.max_len(), 5);
        assert_eq!(batch.pad_mask[0].iter().filter(|m| !**m).count(), 3);
        assert!(batch
            .embeddings
            .slice(ndarray::s![0, 2.., ..])
            .iter()
            .all(|v| *v == 0.0));
        assert!(matches!(pad_batch(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn pooling_ignores_masked_positions() {
        let states = Array3::from_shape_fn((1, 3, 2), |(_, t, d)| (t * 2 + d) as f64);
        let mask = vec![vec![true, false, true]];
        let host = masked_mean_pool_array(states.view(), &mask).unwrap();
        assert_eq!(host.row(0).to_vec(), vec![2.0, 3.0]);
        let t = Tensor::from_vec(states.iter().copied().collect::<Vec<_>>(), (1, 3, 2), &ParamStore::device()).unwrap();
        let dev = masked_mean_pool(&t, &mask).unwrap();
        assert_eq!(dev.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.0, 3.0]);
        assert!(matches!(
            masked_mean_pool_array(states.view(), &[vec![false; 3]]),
            Err(Error::AllMaskedRow { row: 0 })
        ));
    }
}
