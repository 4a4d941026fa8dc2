use candle_core::{Tensor, D};

use crate::autoencoder::LatentLayout;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::skeleton::{Region, RegionValues};
use crate::stats::ChannelPrior;
use crate::text::mask_to_tensor;

/// Terms of the phase-1 objective, averaged over the batch.
pub struct Phase1Loss {
    /// Differentiable scalar.
    pub total: Tensor,
    /// Weighted per-region latent terms.
    pub per_region: RegionValues,
    pub length: f64,
}

fn check_frame_mask(mask: &[Vec<bool>], b: usize, t: usize) -> Result<()> {
    if mask.len() != b || mask.iter().any(|r| r.len() != t) {
        return Err(Error::ShapeMismatch(format!(
            "frame mask does not match a {b}x{t} batch"
        )));
    }
    Ok(())
}

/// Weighted region L1 over valid frames plus absolute length-ratio error.
///
/// `z_hat`, `z`: `B × T × C`; `r_hat`, `r`: `B`. Per sample the region term is
/// `w_R · (1/T_valid) · Σ_t ‖ẑ_t^R − z_t^R‖₁`; the result is the batch mean.
pub fn phase1_loss(
    z_hat: &Tensor,
    z: &Tensor,
    r_hat: &Tensor,
    r: &Tensor,
    weights: &RegionValues,
    frame_mask: &[Vec<bool>],
    layout: &LatentLayout,
) -> Result<Phase1Loss> {
    if z_hat.dims() != z.dims() || z_hat.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            z_hat.dims(),
            z.dims()
        )));
    }
    let (b, t, c) = z_hat.dims3()?;
    if c != layout.total() {
        return Err(Error::ShapeMismatch(format!(
            "{c} latent channels, layout expects {}",
            layout.total()
        )));
    }
    if r_hat.dims() != [b] || r.dims() != [b] {
        return Err(Error::ShapeMismatch("length ratios must be one per sample".into()));
    }
    check_frame_mask(frame_mask, b, t)?;
    let valid: Vec<f64> = frame_mask
        .iter()
        .map(|row| row.iter().filter(|&&m| m).count() as f64)
        .collect();
    if let Some(row) = valid.iter().position(|&n| n == 0.0) {
        return Err(Error::AllMaskedRow { row });
    }
    let mask = mask_to_tensor(frame_mask)?;
    let valid = Tensor::from_vec(valid, b, &ParamStore::device())?;
    let abs = (z_hat - z)?.abs()?;
    let mut per_region = RegionValues::default();
    let mut total: Option<Tensor> = None;
    for region in Region::ALL {
        let ch = layout.channel_range(region);
        let per_frame = abs.narrow(2, ch.start, ch.len())?.sum(D::Minus1)?;
        let per_sample = (per_frame * &mask)?.sum(1)?.div(&valid)?;
        let term = (per_sample.mean_all()? * weights.get(region))?;
        per_region.set(region, term.to_scalar::<f64>()?);
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    let length = (r_hat - r)?.abs()?.mean_all()?;
    let length_value = length.to_scalar::<f64>()?;
    Ok(Phase1Loss {
        total: (total.expect("four regions") + length)?,
        per_region,
        length: length_value,
    })
}

/// `KL(N(μ1, σ1²) ‖ N(μ2, σ2²))`; both sigmas must be at least `floor`.
pub fn gaussian_kl(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64, floor: f64) -> Result<f64> {
    for sigma in [sigma1, sigma2] {
        if !(sigma >= floor) {
            return Err(Error::DegenerateSigma { sigma, floor });
        }
    }
    Ok((sigma2 / sigma1).ln() + (sigma1 * sigma1 + (mu1 - mu2) * (mu1 - mu2)) / (2.0 * sigma2 * sigma2) - 0.5)
}

/// Elementwise KL given `σ1²` directly, so a floored variance never hits `sqrt(0)`.
pub fn gaussian_kl_tensor(mu1: &Tensor, var1: &Tensor, mu2: &Tensor, sigma2: &Tensor) -> Result<Tensor> {
    let var2 = sigma2.sqr()?;
    let log_ratio = (sigma2.log()? - (var1.log()? * 0.5)?)?;
    let quad = ((var1 + (mu1 - mu2)?.sqr()?)? / (var2 * 2.0)?)?;
    Ok(((log_ratio + quad)? - 0.5)?)
}

/// Sum over channels of the KL between batch statistics of `z_hat` at valid
/// frames and the channel priors. Variances are floored at `floor²`.
pub fn kl_channel_loss(
    z_hat: &Tensor,
    priors: &ChannelPrior,
    frame_mask: &[Vec<bool>],
    floor: f64,
) -> Result<Tensor> {
    let (b, t, c) = z_hat.dims3()?;
    if priors.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "{c} latent channels, priors cover {}",
            priors.channels()
        )));
    }
    check_frame_mask(frame_mask, b, t)?;
    let n = frame_mask.iter().flatten().filter(|&&m| m).count();
    if n < 2 {
        return Err(Error::TooFewFrames { required: 2, found: n });
    }
    let mask = mask_to_tensor(frame_mask)?.unsqueeze(2)?;
    let flat_sum = |x: &Tensor| -> Result<Tensor> { Ok(x.broadcast_mul(&mask)?.sum(1)?.sum(0)?) };
    let mu = (flat_sum(z_hat)? / n as f64)?;
    let centered = z_hat.broadcast_sub(&mu.reshape((1, 1, c))?)?;
    let var = (flat_sum(&centered.sqr()?)? / n as f64)?;
    let floor_sq = Tensor::full(floor * floor, c, &ParamStore::device())?;
    let var = var.maximum(&floor_sq)?;
    let device = ParamStore::device();
    let mu_p = Tensor::from_slice(&priors.mean, c, &device)?;
    let sigma_p = Tensor::from_slice(&priors.std, c, &device)?;
    Ok(gaussian_kl_tensor(&mu, &var, &mu_p, &sigma_p)?.sum_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_cases() {
        assert_eq!(gaussian_kl(0.0, 1.0, 0.0, 1.0, 1e-4).unwrap(), 0.0);
        assert!((gaussian_kl(1.0, 1.0, 0.0, 1.0, 1e-4).unwrap() - 0.5).abs() < 1e-15);
        let v = gaussian_kl(0.0, 2.0, 0.0, 1.0, 1e-4).unwrap();
        assert!((v - (1.5 - 2f64.ln())).abs() < 1e-15);
        assert!(matches!(
            gaussian_kl(0.0, 0.0, 0.0, 1.0, 1e-4),
            Err(Error::DegenerateSigma { .. })
        ));
    }

    #[test]
    fn rh_offset_example() {
        let layout = LatentLayout::default();
        let dev = ParamStore::device();
        let z = Tensor::zeros((1, 1, 80), candle_core::DType::F64, &dev).unwrap();
        let mut data = vec![0.0; 80];
        for v in &mut data[layout.channel_range(Region::RightHand)] {
            *v = 0.01;
        }
        let z_hat = Tensor::from_vec(data, (1, 1, 80), &dev).unwrap();
        let r = Tensor::from_vec(vec![0.3], 1, &dev).unwrap();
        let weights = RegionValues::new(1.0, 14.0, 10.0, 2.0);
        let loss = phase1_loss(&z_hat, &z, &r, &r, &weights, &[vec![true]], &layout).unwrap();
        assert!((loss.total.to_scalar::<f64>().unwrap() - 3.92).abs() < 1e-12);
        assert_eq!(loss.length, 0.0);
    }

    #[test]
    fn kl_needs_two_frames() {
        let dev = ParamStore::device();
        let z = Tensor::zeros((1, 2, 2), candle_core::DType::F64, &dev).unwrap();
        let priors = ChannelPrior {
            layout_hash: String::new(),
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
            source: String::new(),
        };
        assert!(matches!(
            kl_channel_loss(&z, &priors, &[vec![true, false]], 1e-4),
            Err(Error::TooFewFrames { .. })
        ));
    }
}
