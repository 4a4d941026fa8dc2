//! Scalar reference implementations and helpers shared by the test targets.
#![allow(dead_code)]

use candle_core::{Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use darslp::nn::ParamStore;
use darslp::skeleton::{PoseSequence, COORDS, TOTAL_JOINTS};

/// Flattened coordinate range `[start, end)` of body, right hand, left hand, face.
pub const REGION_COORDS: [(usize, usize); 4] = [(0, 24), (24, 87), (87, 150), (150, 534)];
/// Latent channel range of body, right hand, left hand, face.
pub const LATENT_BLOCKS: [(usize, usize); 4] = [(0, 8), (8, 36), (36, 64), (64, 80)];
pub const FRAME: usize = 534;
pub const CHANNELS: usize = 80;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, lo, hi)).collect()
}

/// Random frame mask with at least `min_per_row` valid frames in every row.
pub fn random_mask(rng: &mut ChaCha8Rng, b: usize, t: usize, min_per_row: usize) -> Vec<Vec<bool>> {
    (0..b)
        .map(|_| {
            let valid = rng.random_range(min_per_row.min(t)..=t);
            (0..t).map(|i| i < valid).collect()
        })
        .collect()
}

pub fn random_pose(rng: &mut ChaCha8Rng, t: usize, scale: f64) -> PoseSequence {
    PoseSequence::new(Array3::from_shape_fn((t, TOTAL_JOINTS, COORDS), |_| uniform(rng, -scale, scale))).unwrap()
}

pub fn tensor(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(data, shape, &ParamStore::device()).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Gradient-check error: relative, with an absolute floor for near-zero gradients.
pub fn grad_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// `Σ_R w_R · (1/N) Σ_i Σ_{k∈R} |p_ik − g_ik| + λ Σ |W|`.
pub fn ae_loss_ref(pred: &[f64], gt: &[f64], n: usize, weights: [f64; 4], lambda: f64, enc: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (r, &(a, b)) in REGION_COORDS.iter().enumerate() {
        let mut s = 0.0;
        for i in 0..n {
            for k in a..b {
                s += (pred[i * FRAME + k] - gt[i * FRAME + k]).abs();
            }
        }
        total += weights[r] * s / n as f64;
    }
    let l1: f64 = enc.iter().flatten().map(|w| w.abs()).sum();
    total + lambda * l1
}

/// Batch mean over samples of `Σ_R w_R · mean_t ‖ẑ_t^R − z_t^R‖₁ + |r̂ − r|`.
#[allow(clippy::too_many_arguments)]
pub fn phase1_ref(
    z_hat: &[f64],
    z: &[f64],
    b: usize,
    t: usize,
    r_hat: &[f64],
    r: &[f64],
    weights: [f64; 4],
    mask: &[Vec<bool>],
) -> f64 {
    let mut sum = 0.0;
    for s in 0..b {
        let valid: Vec<usize> = (0..t).filter(|&i| mask[s][i]).collect();
        let mut sample = 0.0;
        for (reg, &(a, e)) in LATENT_BLOCKS.iter().enumerate() {
            let mut acc = 0.0;
            for &i in &valid {
                for c in a..e {
                    let k = (s * t + i) * CHANNELS + c;
                    acc += (z_hat[k] - z[k]).abs();
                }
            }
            sample += weights[reg] * acc / valid.len() as f64;
        }
        sum += sample + (r_hat[s] - r[s]).abs();
    }
    sum / b as f64
}

pub fn gaussian_kl_ref(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    (s2 / s1).ln() + (s1 * s1 + (mu1 - mu2) * (mu1 - mu2)) / (2.0 * s2 * s2) - 0.5
}

/// `∫ p log(p/q)` by composite Simpson over `μ1 ± 14 σ1`.
pub fn gaussian_kl_quadrature(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    let log_n = |x: f64, mu: f64, s: f64| {
        -0.5 * ((x - mu) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let f = |x: f64| {
        let lp = log_n(x, mu1, s1);
        lp.exp() * (lp - log_n(x, mu2, s2))
    };
    let (a, b) = (mu1 - 14.0 * s1, mu1 + 14.0 * s1);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Sum over channels of the KL between masked batch statistics (population
/// variance floored at `floor²`) and the priors.
#[allow(clippy::too_many_arguments)]
pub fn kl_channel_ref(
    z_hat: &[f64],
    b: usize,
    t: usize,
    mask: &[Vec<bool>],
    mu_p: &[f64],
    sd_p: &[f64],
    floor: f64,
) -> f64 {
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let mut vals = Vec::new();
        for s in 0..b {
            for i in 0..t {
                if mask[s][i] {
                    vals.push(z_hat[(s * t + i) * CHANNELS + c]);
                }
            }
        }
        let (mu, sd) = two_pass_mean_std(&vals);
        let var = (sd * sd).max(floor * floor);
        total += gaussian_kl_ref(mu, var.sqrt(), mu_p[c], sd_p[c]);
    }
    total
}

/// Mean and population standard deviation by two passes.
pub fn two_pass_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean over joints of the Euclidean distance between frame `i` of `a` and frame `j` of `b`.
pub fn frame_cost(a: &PoseSequence, i: usize, b: &PoseSequence, j: usize) -> f64 {
    let (fa, fb) = (a.frame(i), b.frame(j));
    let mut sum = 0.0;
    for k in 0..TOTAL_JOINTS {
        let mut sq = 0.0;
        for c in 0..COORDS {
            let d = fa[(k, c)] - fb[(k, c)];
            sq += d * d;
        }
        sum += sq.sqrt();
    }
    sum / TOTAL_JOINTS as f64
}

/// Enumerates every monotone warping path; returns the minimal total cost
/// and, among minimal-cost paths, the shortest length.
pub fn dtw_brute(a: &PoseSequence, b: &PoseSequence) -> (f64, usize) {
    let (n, m) = (a.len(), b.len());
    let cost = Array2::from_shape_fn((n, m), |(i, j)| frame_cost(a, i, b, j));
    let mut best = (f64::INFINITY, usize::MAX);
    fn walk(i: usize, j: usize, acc: f64, len: usize, cost: &Array2<f64>, best: &mut (f64, usize)) {
        let acc = acc + cost[(i, j)];
        let len = len + 1;
        let (n, m) = cost.dim();
        if i == n - 1 && j == m - 1 {
            if acc < best.0 || (acc == best.0 && len < best.1) {
                *best = (acc, len);
            }
            return;
        }
        if i + 1 < n {
            walk(i + 1, j, acc, len, cost, best);
        }
        if j + 1 < m {
            walk(i, j + 1, acc, len, cost, best);
        }
        if i + 1 < n && j + 1 < m {
            walk(i + 1, j + 1, acc, len, cost, best);
        }
    }
    walk(0, 0, 0.0, 0, &cost, &mut best);
    best
}

/// Sets entry `idx` of `var` to `value`.
pub fn set_entry(var: &Var, idx: usize, value: f64) {
    let mut data = to_vec(var.as_tensor());
    data[idx] = value;
    let t = Tensor::from_vec(data, var.as_tensor().shape(), &ParamStore::device()).unwrap();
    var.set(&t).unwrap();
}

/// Central finite difference of `f` with respect to entry `idx` of `var`.
pub fn central_difference(var: &Var, idx: usize, h: f64, mut f: impl FnMut() -> f64) -> f64 {
    let x0 = to_vec(var.as_tensor())[idx];
    set_entry(var, idx, x0 + h);
    let up = f();
    set_entry(var, idx, x0 - h);
    let down = f();
    set_entry(var, idx, x0);
    (up - down) / (2.0 * h)
}
