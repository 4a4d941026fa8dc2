//! Latent channel statistics: KL priors, per-channel entropy/IQR/SD,
//! region-wise PCA planes and kernel density difference maps.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{LatentDataset, LatentLayout, PoseAutoencoder};
use crate::error::{Error, Result};
use crate::skeleton::{mask_to_region, CanonicalPose, PoseSequence, Region};

pub const SIGMA_FLOOR: f64 = 1e-4;
pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_GRID: usize = 100;

/// Per-channel Gaussian prior fitted on training encodings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPrior {
    pub layout_hash: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source: String,
}

impl ChannelPrior {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads a priors file and checks it was computed under `layout_hash`.
    pub fn load(path: &Path, layout_hash: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let prior: ChannelPrior = serde_json::from_str(&text)?;
        if prior.layout_hash != layout_hash {
            return Err(Error::HashMismatch {
                expected: layout_hash.to_string(),
                found: prior.layout_hash,
            });
        }
        if prior.mean.len() != prior.std.len() {
            return Err(Error::format(path, 0, "mean and std lengths differ"));
        }
        if prior.mean.iter().chain(&prior.std).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("channel prior".into()));
        }
        Ok(prior)
    }
}

/// Stacks every frame of every sequence into one `N × C` matrix.
pub fn stack_latents(ds: &LatentDataset) -> Result<Array2<f64>> {
    let views: Vec<_> = ds.sequences().map(|s| s.codes.view()).collect();
    if views.is_empty() {
        return Err(Error::EmptyDataset { required: 1 });
    }
    concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

fn mean_and_population_sd(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Channel-wise mean and population standard deviation, `std` floored at `sigma_floor`.
pub fn compute_priors(frames: &Array2<f64>, sigma_floor: f64, layout_hash: &str, source: &str) -> Result<ChannelPrior> {
    if frames.nrows() < 2 {
        return Err(Error::EmptyDataset { required: 2 });
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("latent frames".into()));
    }
    let (mean, std) = frames
        .columns()
        .into_iter()
        .map(|c| {
            let (m, s) = mean_and_population_sd(&c.to_vec());
            (m, s.max(sigma_floor))
        })
        .unzip();
    Ok(ChannelPrior {
        layout_hash: layout_hash.to_string(),
        mean,
        std,
        source: source.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStat {
    /// Histogram entropy in nats.
    pub entropy: f64,
    pub iqr: f64,
    pub sd: f64,
    /// `n_bins + 1` equally spaced edges over `[min, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channels: Vec<ChannelStat>,
}

impl ChannelStats {
    pub fn mean_entropy(&self, channels: Range<usize>) -> f64 {
        let n = channels.len() as f64;
        self.channels[channels].iter().map(|c| c.entropy).sum::<f64>() / n
    }

    pub fn region_mean_entropy(&self, layout: &LatentLayout, region: Region) -> f64 {
        self.mean_entropy(layout.channel_range(region))
    }

    /// One row per channel: `channel,region,entropy,iqr,sd`.
    pub fn to_csv(&self, layout: &LatentLayout) -> String {
        let mut out = String::from("channel,region,entropy,iqr,sd\n");
        for (c, s) in self.channels.iter().enumerate() {
            let region = layout.region_of(c).map_or("none", Region::name);
            out.push_str(&format!("{c},{region},{:.12e},{:.12e},{:.12e}\n", s.entropy, s.iqr, s.sd));
        }
        out
    }
}

/// Linear-interpolation quantile of sorted data (the usual "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn channel_stat(col: &[f64], n_bins: usize) -> ChannelStat {
    let min = col.iter().copied().fold(f64::INFINITY, f64::min);
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = max - min;
    let edges = (0..=n_bins)
        .map(|k| if k == n_bins { max } else { min + width * k as f64 / n_bins as f64 })
        .collect();
    let mut counts = vec![0usize; n_bins];
    for v in col {
        let k = if width > 0.0 {
            (((v - min) / width * n_bins as f64) as usize).min(n_bins - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    let n = col.len() as f64;
    let entropy = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0);
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    ChannelStat {
        entropy,
        iqr: iqr.max(0.0),
        sd: mean_and_population_sd(col).1,
        edges,
        counts,
    }
}

pub fn channel_stats(frames: &Array2<f64>, n_bins: usize) -> Result<ChannelStats> {
    if frames.nrows() < 2 {
        return Err(Error::EmptyDataset { required: 2 });
    }
    if n_bins < 2 {
        return Err(Error::InvalidArgument("histograms need at least 2 bins".into()));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("latent frames".into()));
    }
    Ok(ChannelStats {
        channels: frames
            .columns()
            .into_iter()
            .map(|c| channel_stat(&c.to_vec(), n_bins))
            .collect(),
    })
}

/// Which latent channels a projection is fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSelection {
    Region(Region),
    All,
}

impl ChannelSelection {
    pub fn range(self, layout: &LatentLayout) -> Range<usize> {
        match self {
            ChannelSelection::Region(r) => layout.channel_range(r),
            ChannelSelection::All => 0..layout.total(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelSelection::Region(r) => r.name(),
            ChannelSelection::All => "all",
        }
    }
}

/// Frozen two-axis PCA basis over standardized channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProjection {
    pub selection: ChannelSelection,
    pub channels: Range<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Up to two unit-norm principal axes, in descending variance order.
    pub axes: Vec<Vec<f64>>,
    /// Fraction of total standardized variance carried by each axis.
    pub explained_variance: Vec<f64>,
    /// Set when fewer than two non-degenerate components exist.
    pub rank_deficient: bool,
}

/// Fits a PCA plane on the selected channels of training frames (`N × C`).
pub fn fit_region_projection(
    train: &Array2<f64>,
    selection: ChannelSelection,
    layout: &LatentLayout,
) -> Result<RegionProjection> {
    let channels = selection.range(layout);
    if train.ncols() != layout.total() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} latent channels, got {}",
            layout.total(),
            train.ncols()
        )));
    }
    let dim = channels.len();
    let n = train.nrows();
    if n < dim.max(2) {
        return Err(Error::RankDeficient {
            required: dim.max(2),
            found: n,
        });
    }
    let block = train.slice(ndarray::s![.., channels.clone()]);
    let mut mean = Vec::with_capacity(dim);
    let mut scale = Vec::with_capacity(dim);
    for col in block.columns() {
        let (m, s) = mean_and_population_sd(&col.to_vec());
        mean.push(m);
        scale.push(if s > 1e-12 { s } else { 1.0 });
    }
    let mut z = DMatrix::<f64>::zeros(n, dim);
    for ((i, j), v) in block.indexed_iter() {
        z[(i, j)] = (v - mean[j]) / scale[j];
    }
    let cov = (z.transpose() * &z) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-10 * total.max(f64::MIN_POSITIVE);
    let mut axes = Vec::new();
    let mut explained = Vec::new();
    for &k in order.iter().take(2) {
        let lambda = eig.eigenvalues[k];
        if total <= 0.0 || lambda <= tol {
            break;
        }
        let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        let pivot = axis
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for v in &mut axis {
            *v *= sign / norm;
        }
        axes.push(axis);
        explained.push(lambda / total);
    }
    let rank_deficient = axes.len() < 2;
    if rank_deficient {
        log::warn!(
            "projection for {} has only {} usable component(s)",
            selection.name(),
            axes.len()
        );
    }
    Ok(RegionProjection {
        selection,
        channels,
        mean,
        scale,
        axes,
        explained_variance: explained,
        rank_deficient,
    })
}

/// Projects full-width latent frames onto the plane; missing axes yield zeros.
pub fn project(points: &Array2<f64>, proj: &RegionProjection) -> Result<Array2<f64>> {
    if points.ncols() < proj.channels.end {
        return Err(Error::ShapeMismatch(format!(
            "points have {} channels, projection needs {}",
            points.ncols(),
            proj.channels.end
        )));
    }
    let mut out = Array2::zeros((points.nrows(), 2));
    for (i, row) in points.rows().into_iter().enumerate() {
        for (a, axis) in proj.axes.iter().enumerate() {
            out[(i, a)] = proj
                .channels
                .clone()
                .enumerate()
                .map(|(j, c)| (row[c] - proj.mean[j]) / proj.scale[j] * axis[j])
                .sum();
        }
    }
    Ok(out)
}

/// Masks every sequence to `region`, encodes it and projects all frames.
pub fn masked_region_embedding(
    poses: &[PoseSequence],
    ae: &PoseAutoencoder,
    region: Region,
    canonical: &CanonicalPose,
    proj: &RegionProjection,
) -> Result<Array2<f64>> {
    let mut codes = Vec::with_capacity(poses.len());
    for seq in poses {
        let masked = mask_to_region(seq, region, canonical, ae.layout())?;
        codes.push(ae.encode(&masked)?.codes);
    }
    let views: Vec<_> = codes.iter().map(|c| c.view()).collect();
    if views.is_empty() {
        return Err(Error::EmptyInput);
    }
    let stacked = concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    project(&stacked, proj)
}

/// Signed difference of two kernel density estimates on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    /// Cell-center coordinates along each axis.
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub cell_area: f64,
    /// `values[(iy, ix)]`.
    pub values: Array2<f64>,
}

impl DensityGrid {
    pub fn integral(&self) -> f64 {
        self.values.sum() * self.cell_area
    }
}

fn scott_bandwidth(points: &Array2<f64>) -> [f64; 2] {
    let n = points.nrows() as f64;
    let factor = n.powf(-1.0 / 6.0);
    let mut out = [0.0; 2];
    for (d, col) in points.columns().into_iter().enumerate() {
        out[d] = mean_and_population_sd(&col.to_vec()).1 * factor;
    }
    out
}

fn kde_on_grid(points: &Array2<f64>, h: [f64; 2], xs: &[f64], ys: &[f64], cell_area: f64) -> Array2<f64> {
    let mut grid = Array2::<f64>::zeros((ys.len(), xs.len()));
    for p in points.rows() {
        let kx: Vec<f64> = xs.iter().map(|x| (-0.5 * ((x - p[0]) / h[0]).powi(2)).exp()).collect();
        let ky: Vec<f64> = ys.iter().map(|y| (-0.5 * ((y - p[1]) / h[1]).powi(2)).exp()).collect();
        for (iy, wy) in ky.iter().enumerate() {
            for (ix, wx) in kx.iter().enumerate() {
                grid[(iy, ix)] += wy * wx;
            }
        }
    }
    let mass = grid.sum() * cell_area;
    if mass > 0.0 {
        grid /= mass;
    }
    grid
}

/// `density(a) − density(b)` on a `grid_n × grid_n` grid padded 10% beyond
/// the joint bounds. Each density is renormalized to unit mass on the grid.
/// `bandwidth` overrides Scott's rule with an isotropic width.
pub fn density_difference(
    a: &Array2<f64>,
    b: &Array2<f64>,
    grid_n: usize,
    bandwidth: Option<f64>,
) -> Result<DensityGrid> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if a.ncols() != 2 || b.ncols() != 2 {
        return Err(Error::ShapeMismatch("density maps take N × 2 points".into()));
    }
    if grid_n < 2 {
        return Err(Error::InvalidArgument("grid needs at least 2 cells per axis".into()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("projected points".into()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in a.rows().into_iter().chain(b.rows()) {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let mut cell = [0.0; 2];
    let mut centers: [Vec<f64>; 2] = Default::default();
    for d in 0..2 {
        let extent = hi[d] - lo[d];
        let pad = if extent > 0.0 { 0.1 * extent } else { 0.5 };
        let (start, end) = (lo[d] - pad, hi[d] + pad);
        cell[d] = (end - start) / grid_n as f64;
        centers[d] = (0..grid_n).map(|k| start + (k as f64 + 0.5) * cell[d]).collect();
    }
    let floor = [cell[0] * 0.5, cell[1] * 0.5];
    let widths = |pts: &Array2<f64>| -> [f64; 2] {
        let h = bandwidth.map_or_else(|| scott_bandwidth(pts), |bw| [bw, bw]);
        [h[0].max(floor[0]), h[1].max(floor[1])]
    };
    let cell_area = cell[0] * cell[1];
    let da = kde_on_grid(a, widths(a), &centers[0], &centers[1], cell_area);
    let db = kde_on_grid(b, widths(b), &centers[0], &centers[1], cell_area);
    let [xs, ys] = centers;
    Ok(DensityGrid {
        xs,
        ys,
        cell_area,
        values: da - db,
    })
}

/// Column means of a point set.
pub fn column_means(points: &Array2<f64>) -> Array1<f64> {
    points.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(points.ncols()))
}
