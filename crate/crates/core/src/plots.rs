//! Latent-analysis artifacts and their PNG/CSV renderings.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autoencoder::LatentLayout;
use crate::error::{Error, Result};
use crate::skeleton::Region;
use crate::stats::{ChannelStats, DensityGrid, RegionProjection};

pub const CHANNEL_STATS_FILE: &str = "channel_stats.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    Stats,
    Projection,
    DensityDiff,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::Stats, PlotKind::Projection, PlotKind::DensityDiff];

    /// Also the name of the kind's directory under the analysis root.
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Stats => "stats",
            PlotKind::Projection => "projection",
            PlotKind::DensityDiff => "density-diff",
        }
    }
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown analysis kind {s:?}")))
    }
}

/// Frozen projection of one region plus the projected points of the analysis split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionArtifact {
    pub region: Region,
    pub projection: RegionProjection,
    /// Region-masked inputs through the AE, projected.
    pub masked: Vec<[f64; 2]>,
    /// Unmasked inputs through the AE, projected.
    pub unmasked: Vec<[f64; 2]>,
}

/// Density of AE latents minus density of generator latents in one region plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityArtifact {
    pub region: Region,
    /// Which generator checkpoint produced the subtracted points.
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub cell_area: f64,
    /// Row `i` holds the values at `ys[i]`.
    pub values: Vec<Vec<f64>>,
}

impl DensityArtifact {
    pub fn from_grid(region: Region, label: &str, grid: &DensityGrid) -> Self {
        DensityArtifact {
            region,
            label: label.to_string(),
            xs: grid.xs.clone(),
            ys: grid.ys.clone(),
            cell_area: grid.cell_area,
            values: grid.values.outer_iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn grid(&self) -> Array2<f64> {
        let n = self.ys.len();
        let m = self.xs.len();
        Array2::from_shape_fn((n, m), |(i, j)| self.values[i][j])
    }
}

pub fn points_to_rows(points: &Array2<f64>) -> Vec<[f64; 2]> {
    points.outer_iter().map(|r| [r[0], r[1]]).collect()
}

pub fn projection_path(root: &Path, region: Region) -> PathBuf {
    root.join(PlotKind::Projection.name()).join(format!("{}.json", region.name()))
}

pub fn density_path(root: &Path, region: Region, label: &str) -> PathBuf {
    root.join(PlotKind::DensityDiff.name()).join(format!("{label}_{}.json", region.name()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders the artifacts of `kind` under the analysis root into that kind's
/// directory. Returns the written files.
pub fn emit_plots(root: &Path, kind: PlotKind, layout: &LatentLayout) -> Result<Vec<PathBuf>> {
    match kind {
        PlotKind::Stats => emit_stats(root, layout),
        PlotKind::Projection => emit_projection(root),
        PlotKind::DensityDiff => emit_density(root),
    }
}

fn emit_stats(root: &Path, layout: &LatentLayout) -> Result<Vec<PathBuf>> {
    let dir = root.join(PlotKind::Stats.name());
    let src = dir.join(CHANNEL_STATS_FILE);
    if !src.exists() {
        return Err(Error::MissingUpstream(format!("{} (run the stats analysis)", src.display())));
    }
    let stats: ChannelStats = read_json(&src)?;
    if stats.channels.len() != layout.total() {
        return Err(Error::ShapeMismatch(format!(
            "{} channel statistics for a {}-channel layout",
            stats.channels.len(),
            layout.total()
        )));
    }
    let mut written = Vec::new();
    let csv = dir.join("channel_stats.csv");
    write_text(&csv, &stats.to_csv(layout))?;
    written.push(csv);
    for region in Region::ALL {
        let range = layout.channel_range(region);
        let bins = stats.channels[range.start].counts.len();
        let mut grid = Array2::<f64>::zeros((range.len(), bins));
        for (row, c) in range.enumerate() {
            let counts = &stats.channels[c].counts;
            let total: usize = counts.iter().sum();
            for (k, &n) in counts.iter().enumerate() {
                grid[(row, k)] = n as f64 / total.max(1) as f64;
            }
        }
        let png = dir.join(format!("channel_stats_{}.png", region.name()));
        heatmap(&grid, false).save(&png)?;
        written.push(png);
    }
    Ok(written)
}

pub fn load_projections(root: &Path) -> Result<Vec<ProjectionArtifact>> {
    Region::ALL
        .iter()
        .map(|&region| {
            let path = projection_path(root, region);
            if !path.exists() {
                return Err(Error::MissingUpstream(format!(
                    "{} (run the projection analysis first)",
                    path.display()
                )));
            }
            read_json(&path)
        })
        .collect()
}

fn emit_projection(root: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join(PlotKind::Projection.name());
    let mut written = Vec::new();
    for art in load_projections(root)? {
        let stem = format!("projection_{}", art.region.name());
        let mut csv = String::from("set,x,y\n");
        for (set, pts) in [("unmasked", &art.unmasked), ("masked", &art.masked)] {
            for p in pts {
                csv.push_str(&format!("{set},{:.12e},{:.12e}\n", p[0], p[1]));
            }
        }
        let csv_path = dir.join(format!("{stem}.csv"));
        write_text(&csv_path, &csv)?;
        let png = dir.join(format!("{stem}.png"));
        scatter(&[(&art.unmasked, GRAY), (&art.masked, region_color(art.region))]).save(&png)?;
        written.extend([csv_path, png]);
    }
    Ok(written)
}

fn emit_density(root: &Path) -> Result<Vec<PathBuf>> {
    load_projections(root)?;
    let dir = root.join(PlotKind::DensityDiff.name());
    let mut sources: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if sources.is_empty() {
        return Err(Error::MissingUpstream(format!(
            "no density grids under {}",
            dir.display()
        )));
    }
    sources.sort();
    let mut written = Vec::new();
    for src in sources {
        let art: DensityArtifact = read_json(&src)?;
        let stem = format!("density_{}_{}", art.label, art.region.name());
        let mut csv = String::from("x,y,value\n");
        for (i, y) in art.ys.iter().enumerate() {
            for (j, x) in art.xs.iter().enumerate() {
                csv.push_str(&format!("{x:.12e},{y:.12e},{:.12e}\n", art.values[i][j]));
            }
        }
        let csv_path = dir.join(format!("{stem}.csv"));
        write_text(&csv_path, &csv)?;
        let png = dir.join(format!("{stem}.png"));
        heatmap(&art.grid(), true).save(&png)?;
        written.extend([csv_path, png]);
    }
    Ok(written)
}

const GRAY: [u8; 3] = [190, 190, 190];
const PANEL: u32 = 400;

fn region_color(region: Region) -> [u8; 3] {
    match region {
        Region::Body => [44, 160, 44],
        Region::RightHand => [214, 39, 40],
        Region::LeftHand => [31, 119, 180],
        Region::Face => [255, 127, 14],
    }
}

/// Grid image with row 0 at the top. Signed grids use blue/white/red around
/// zero; unsigned grids run from white to black.
fn heatmap(values: &Array2<f64>, signed: bool) -> RgbImage {
    let (rows, cols) = values.dim();
    let cell_w = (PANEL / cols.max(1) as u32).max(1);
    let cell_h = (PANEL / rows.max(1) as u32).max(1);
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut img = RgbImage::new(cell_w * cols as u32, cell_h * rows as u32);
    for ((r, c), &v) in values.indexed_iter() {
        let t = if scale > 0.0 { v / scale } else { 0.0 };
        let color = if signed {
            let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
            if t >= 0.0 {
                [255, fade(t), fade(t)]
            } else {
                [fade(t), fade(t), 255]
            }
        } else {
            let g = (255.0 * (1.0 - t)).round() as u8;
            [g, g, g]
        };
        for dy in 0..cell_h {
            for dx in 0..cell_w {
                img.put_pixel(c as u32 * cell_w + dx, r as u32 * cell_h + dy, Rgb(color));
            }
        }
    }
    img
}

/// Scatter plot of several point layers on shared bounds, later layers on top.
fn scatter(layers: &[(&Vec<[f64; 2]>, [u8; 3])]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PANEL, PANEL, Rgb([255, 255, 255]));
    let all = layers.iter().flat_map(|(pts, _)| pts.iter());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    if !lo[0].is_finite() {
        return img;
    }
    let span = |k: usize| (hi[k] - lo[k]).max(1e-12);
    let margin = 8.0;
    let usable = PANEL as f64 - 2.0 * margin;
    for (pts, color) in layers {
        for p in pts.iter() {
            let x = margin + (p[0] - lo[0]) / span(0) * usable;
            let y = margin + (1.0 - (p[1] - lo[1]) / span(1)) * usable;
            for dx in 0..2 {
                for dy in 0..2 {
                    let (px, py) = (x as u32 + dx, y as u32 + dy);
                    if px < PANEL && py < PANEL {
                        img.put_pixel(px, py, Rgb(*color));
                    }
                }
            }
        }
    }
    img
}
