//! DTW-based pose metrics, evaluation reports and sequence export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::PoseAutoencoder;
use crate::corpus::{write_pose_file, CorpusSample};
use crate::digest::sha256_json;
use crate::error::{Error, Result};
use crate::generator::{generate, Generator};
use crate::skeleton::{normalize_pose, PoseSequence, SkeletonLayout, COORDS, TOTAL_JOINTS};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Optimal warping path summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    /// Accumulated local cost along the optimal path.
    pub total_cost: f64,
    pub path_len: usize,
}

impl DtwResult {
    /// Path-length normalized cost.
    pub fn normalized(&self) -> f64 {
        self.total_cost / self.path_len as f64
    }
}

/// Mean over joints of the Euclidean distance between two frames.
pub fn mean_joint_distance(a: ndarray::ArrayView2<'_, f64>, b: ndarray::ArrayView2<'_, f64>) -> f64 {
    let mut sum = 0.0;
    for j in 0..TOTAL_JOINTS {
        let mut sq = 0.0;
        for c in 0..COORDS {
            let d = a[(j, c)] - b[(j, c)];
            sq += d * d;
        }
        sum += sq.sqrt();
    }
    sum / TOTAL_JOINTS as f64
}

/// DTW with steps `(1,0)`, `(0,1)`, `(1,1)` over the mean-joint-distance cost.
/// Among equal-cost paths the shortest is kept.
pub fn dtw(pred: &PoseSequence, gt: &PoseSequence) -> Result<DtwResult> {
    let (n, m) = (pred.len(), gt.len());
    if n == 0 || m == 0 {
        return Err(Error::EmptySequence);
    }
    let inf = (f64::INFINITY, usize::MAX);
    let mut acc = vec![inf; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = mean_joint_distance(pred.frame(i), gt.frame(j));
            let prev = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = inf;
                let candidates = [
                    (i > 0).then(|| acc[(i - 1) * m + j]),
                    (j > 0).then(|| acc[i * m + j - 1]),
                    (i > 0 && j > 0).then(|| acc[(i - 1) * m + j - 1]),
                ];
                for cand in candidates.into_iter().flatten() {
                    if cand.0 < best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                        best = cand;
                    }
                }
                best
            };
            acc[i * m + j] = (prev.0 + c, prev.1 + 1);
        }
    }
    let (total_cost, path_len) = acc[n * m - 1];
    Ok(DtwResult {
        total_cost,
        path_len,
    })
}

/// Path-length normalized DTW with mean joint error as local cost.
pub fn dtw_mje(pred: &PoseSequence, gt: &PoseSequence) -> Result<f64> {
    Ok(dtw(pred, gt)?.normalized())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub dtw_mje: f64,
    pub dtw_total: f64,
    pub path_len: usize,
    pub pred_frames: usize,
    pub gt_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub config_digest: String,
    pub samples: Vec<SampleEval>,
    pub mean_dtw_mje: f64,
    pub median_dtw_mje: f64,
    /// Mean absolute difference between predicted and ground-truth frame counts.
    pub length_mae: f64,
}

impl EvalReport {
    pub fn from_samples(split: &str, config_digest: &str, samples: Vec<SampleEval>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.dtw_mje).sum::<f64>() / n;
        let mut sorted: Vec<f64> = samples.iter().map(|s| s.dtw_mje).collect();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        let length_mae = samples
            .iter()
            .map(|s| (s.pred_frames as f64 - s.gt_frames as f64).abs())
            .sum::<f64>()
            / n;
        Ok(EvalReport {
            split: split.to_string(),
            config_digest: config_digest.to_string(),
            samples,
            mean_dtw_mje: mean,
            median_dtw_mje: median,
            length_mae,
        })
    }

    /// Digest of the report content.
    pub fn digest(&self) -> String {
        sha256_json(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dtw_mje,dtw_total,path_len,pred_frames,gt_frames\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{},{},{}\n",
                s.id, s.dtw_mje, s.dtw_total, s.path_len, s.pred_frames, s.gt_frames
            ));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Scores `(id, prediction, ground truth)` triples.
pub fn evaluate_pairs(
    split: &str,
    config_digest: &str,
    pairs: &[(String, PoseSequence, PoseSequence)],
) -> Result<EvalReport> {
    let samples = pairs
        .iter()
        .map(|(id, pred, gt)| {
            let d = dtw(pred, gt)?;
            Ok(SampleEval {
                id: id.clone(),
                dtw_mje: d.normalized(),
                dtw_total: d.total_cost,
                path_len: d.path_len,
                pred_frames: pred.len(),
                gt_frames: gt.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(split, config_digest, samples)
}

/// Generates every sample of a split and scores it against its normalized ground truth.
/// Also returns the generated sequences, keyed by sample id.
pub fn evaluate_corpus(
    gen: &Generator,
    ae: &PoseAutoencoder,
    samples: &[CorpusSample],
    layout: &SkeletonLayout,
    split: &str,
    config_digest: &str,
) -> Result<(EvalReport, Vec<(String, PoseSequence)>)> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = generate(&s.embedding, gen, ae)?;
        let gt = normalize_pose(&s.pose, layout)?;
        pairs.push((s.id.clone(), pred, gt));
    }
    let report = evaluate_pairs(split, config_digest, &pairs)?;
    let generated = pairs.into_iter().map(|(id, pred, _)| (id, pred)).collect();
    Ok((report, generated))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub pose_file: String,
    pub n_frames: usize,
}

/// Writes one `DPSE1` file per sequence plus a JSON-lines manifest.
pub fn export_for_backtranslation(sequences: &[(String, PoseSequence)], out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Vec::with_capacity(sequences.len());
    let mut text = Vec::new();
    for (i, (id, seq)) in sequences.iter().enumerate() {
        let pose_file = format!("{i:06}.pose");
        write_pose_file(&out_dir.join(&pose_file), seq)?;
        let entry = ManifestEntry {
            id: id.clone(),
            pose_file,
            n_frames: seq.len(),
        };
        serde_json::to_writer(&mut text, &entry)?;
        text.push(b'\n');
        manifest.push(entry);
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = out_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
