use candle_core::Tensor;

use super::AeConfig;
use crate::error::{Error, Result};
use crate::skeleton::{Region, RegionValues, SkeletonLayout};

/// Terms of the autoencoder objective.
pub struct AeLoss {
    /// Differentiable scalar: weighted reconstruction plus sparsity.
    pub total: Tensor,
    /// Unweighted per-region reconstruction terms `(1/N) Σ_i ‖x̂_R − x_R‖₁`.
    pub per_region: RegionValues,
    /// `λ · Σ_j ‖W_j‖₁` over the encoder weight matrices.
    pub sparsity: f64,
}

/// Weighted region L1 reconstruction plus an L1 penalty on encoder weights.
///
/// `pred` and `gt` are `N × 534` flattened frames. The inner L1 is summed over
/// every coordinate of a region and averaged over the `N` frames.
pub fn ae_loss(
    pred: &Tensor,
    gt: &Tensor,
    encoder_weights: &[Tensor],
    cfg: &AeConfig,
    layout: &SkeletonLayout,
) -> Result<AeLoss> {
    if pred.dims() != gt.dims() || pred.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let n = pred.dims()[0];
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let abs = (pred - gt)?.abs()?;
    let mut per_region = RegionValues::default();
    let mut total: Option<Tensor> = None;
    for region in Region::ALL {
        let cols = layout.coord_range(region);
        let term = (abs.narrow(1, cols.start, cols.len())?.sum_all()? / n as f64)?;
        per_region.set(region, term.to_scalar::<f64>()?);
        let weighted = (term * cfg.loss_weights.get(region))?;
        total = Some(match total {
            None => weighted,
            Some(t) => (t + weighted)?,
        });
    }
    let mut total = total.expect("four regions");
    let mut sparsity = 0.0;
    if cfg.sparsity_lambda > 0.0 {
        for w in encoder_weights {
            let term = (w.abs()?.sum_all()? * cfg.sparsity_lambda)?;
            sparsity += term.to_scalar::<f64>()?;
            total = (total + term)?;
        }
    }
    Ok(AeLoss {
        total,
        per_region,
        sparsity,
    })
}
