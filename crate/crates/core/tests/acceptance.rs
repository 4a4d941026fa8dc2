//! Acceptance run: one PASS/FAIL line per criterion AC1–AC10.

mod support;

use std::time::{Duration, Instant};

use candle_core::Var;
use ndarray::{concatenate, Array2, Axis};

use darslp::autoencoder::{ae_loss, extract_latents, train_ae, AeConfig, AeVariant, LatentSequence, PoseAutoencoder};
use darslp::corpus::CorpusSample;
use darslp::eval::dtw;
use darslp::generator::{
    evaluate_losses, gaussian_kl, generate, generate_padded, idle_pose_from, kl_channel_loss, phase1_loss,
    train_generator, GenSample, Generator, GeneratorConfig, Phase,
};
use darslp::pipeline::{Pipeline, PipelineConfig};
use darslp::skeleton::{normalize_pose, PoseSequence, Region, RegionValues, SkeletonLayout};
use darslp::stats::{channel_stats, compute_priors, ChannelPrior, SIGMA_FLOOR};
use darslp::synth::synth_corpus;
use darslp::Result;

use support::*;

type Check = Result<(bool, String)>;

/// State shared by the training criteria.
struct Trained {
    corpus: Vec<CorpusSample>,
    ae: PoseAutoencoder,
    latents: Vec<Array2<f64>>,
    generator: Option<Generator>,
}

fn timed(limit: Duration, start: Instant, ok: bool, detail: String) -> (bool, String) {
    let elapsed = start.elapsed();
    let within = elapsed <= limit;
    let detail = format!("{detail}; {:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs());
    (ok && within, detail)
}

fn region_of_coord(k: usize) -> usize {
    REGION_COORDS.iter().position(|&(a, b)| k >= a && k < b).unwrap()
}

fn region_of_channel(c: usize) -> usize {
    LATENT_BLOCKS.iter().position(|&(a, b)| c >= a && c < b).unwrap()
}

fn ac1() -> Check {
    let layout = SkeletonLayout::default();
    let corpus = synth_corpus(3, 4, 8, 8, 60)?;
    let poses: Vec<PoseSequence> = corpus.iter().map(|s| normalize_pose(&s.pose, &layout)).collect::<Result<_>>()?;
    let mut models = Vec::new();
    for variant in [AeVariant::Linear, AeVariant::Mlp] {
        let cfg = AeConfig {
            variant,
            max_steps: Some(20),
            seed: 5,
            ..Default::default()
        };
        models.push((variant, PoseAutoencoder::new(cfg.clone(), layout.clone())?));
        models.push((variant, train_ae(&poses, &[], &cfg, &layout)?));
    }
    let start = Instant::now();
    let mut r = rng(1);
    let mut checked = 0;
    for (variant, model) in &models {
        {
            let x = random_pose(&mut r, 6, 1.0);
            let z = to_vec(&model.encode_tensor(&tensor(x.to_flat().as_slice().unwrap(), &[6, FRAME]))?);
            let lat = LatentSequence::new(Array2::from_shape_vec((6, CHANNELS), z.clone()).unwrap(), model.latent_layout())?;
            let recon = model.decode(&lat)?.to_flat();
            for (reg, &(a, b)) in REGION_COORDS.iter().enumerate() {
                let mut xp = x.to_flat();
                for v in xp.slice_mut(ndarray::s![.., a..b]).iter_mut() {
                    *v += uniform(&mut r, -0.5, 0.5);
                }
                let zp = to_vec(&model.encode_tensor(&tensor(xp.as_slice().unwrap(), &[6, FRAME]))?);
                for (k, (u, v)) in z.iter().zip(&zp).enumerate() {
                    if region_of_channel(k % CHANNELS) != reg && u.to_bits() != v.to_bits() {
                        return Ok((false, format!("{variant:?}: encoder channel {} moved under region {reg}", k % CHANNELS)));
                    }
                }
                let (ca, cb) = LATENT_BLOCKS[reg];
                let mut zq = Array2::from_shape_vec((6, CHANNELS), z.clone()).unwrap();
                for v in zq.slice_mut(ndarray::s![.., ca..cb]).iter_mut() {
                    *v += uniform(&mut r, -0.5, 0.5);
                }
                let rq = model.decode(&LatentSequence::new(zq, model.latent_layout())?)?.to_flat();
                for (k, (u, v)) in recon.iter().zip(rq.iter()).enumerate() {
                    if region_of_coord(k % FRAME) != reg && u.to_bits() != v.to_bits() {
                        return Ok((false, format!("{variant:?}: decoder coordinate {} moved under block {reg}", k % FRAME)));
                    }
                }
                checked += 1;
            }
        }
    }
    Ok(timed(
        Duration::from_secs(1),
        start,
        true,
        format!("{checked} region perturbations bit-identical outside the region (linear+mlp, trained+untrained)"),
    ))
}

fn ac2() -> Check {
    let start = Instant::now();
    let layout = SkeletonLayout::default();
    let mut r = rng(2);
    let mut worst = [0.0f64; 4];
    for i in 0..100u64 {
        // ae_loss
        let cfg = AeConfig {
            variant: if i % 2 == 0 { AeVariant::Linear } else { AeVariant::Mlp },
            loss_weights: RegionValues::new(
                uniform(&mut r, 0.1, 3.0),
                uniform(&mut r, 0.1, 3.0),
                uniform(&mut r, 0.1, 3.0),
                uniform(&mut r, 0.1, 3.0),
            ),
            sparsity_lambda: uniform(&mut r, 0.0, 1e-2),
            seed: i,
            ..Default::default()
        };
        let model = PoseAutoencoder::new(cfg.clone(), layout.clone())?;
        let n = r.random_range(1..4);
        let pred = random_vec(&mut r, n * FRAME, -1.0, 1.0);
        let gt = random_vec(&mut r, n * FRAME, -1.0, 1.0);
        let enc = model.encoder_weights();
        let loss = ae_loss(&tensor(&pred, &[n, FRAME]), &tensor(&gt, &[n, FRAME]), &enc, &cfg, &layout)?;
        let w = cfg.loss_weights;
        let enc_vals: Vec<Vec<f64>> = enc.iter().map(to_vec).collect();
        let want = ae_loss_ref(&pred, &gt, n, [w.body, w.right_hand, w.left_hand, w.face], cfg.sparsity_lambda, &enc_vals);
        worst[0] = worst[0].max(rel_err(loss.total.to_scalar::<f64>()?, want));

        // phase1_loss
        let (b, t) = (r.random_range(1..4), r.random_range(1..7));
        let z_hat = random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0);
        let z = random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0);
        let r_hat = random_vec(&mut r, b, 0.0, 1.0);
        let rr = random_vec(&mut r, b, 0.0, 1.0);
        let wts = [uniform(&mut r, 0.5, 15.0), uniform(&mut r, 0.5, 15.0), uniform(&mut r, 0.5, 15.0), uniform(&mut r, 0.5, 15.0)];
        let mask = random_mask(&mut r, b, t, 1);
        let got = phase1_loss(
            &tensor(&z_hat, &[b, t, CHANNELS]),
            &tensor(&z, &[b, t, CHANNELS]),
            &tensor(&r_hat, &[b]),
            &tensor(&rr, &[b]),
            &RegionValues::new(wts[0], wts[1], wts[2], wts[3]),
            &mask,
            &Default::default(),
        )?;
        let want = phase1_ref(&z_hat, &z, b, t, &r_hat, &rr, wts, &mask);
        worst[1] = worst[1].max(rel_err(got.total.to_scalar::<f64>()?, want));

        // kl_channel_loss, with a few constant channels to reach the floor
        let (b, t) = (r.random_range(1..4), r.random_range(2..7));
        let mut z_hat = random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0);
        for c in [3usize, 70] {
            for k in 0..b * t {
                z_hat[k * CHANNELS + c] = 0.25;
            }
        }
        let mask = random_mask(&mut r, b, t, 2);
        let priors = ChannelPrior {
            layout_hash: String::new(),
            mean: random_vec(&mut r, CHANNELS, -1.0, 1.0),
            std: random_vec(&mut r, CHANNELS, 0.05, 2.0),
            source: "random".into(),
        };
        let got = kl_channel_loss(&tensor(&z_hat, &[b, t, CHANNELS]), &priors, &mask, SIGMA_FLOOR)?;
        let want = kl_channel_ref(&z_hat, b, t, &mask, &priors.mean, &priors.std, SIGMA_FLOOR);
        worst[2] = worst[2].max(rel_err(got.to_scalar::<f64>()?, want));

        // gaussian_kl against quadrature (absolute)
        let (m1, s1, m2, s2) = (
            uniform(&mut r, -2.0, 2.0),
            uniform(&mut r, 0.2, 3.0),
            uniform(&mut r, -2.0, 2.0),
            uniform(&mut r, 0.2, 3.0),
        );
        let got = gaussian_kl(m1, s1, m2, s2, SIGMA_FLOOR)?;
        worst[3] = worst[3].max((got - gaussian_kl_quadrature(m1, s1, m2, s2)).abs());
    }
    let ok = worst[0] <= 1e-10 && worst[1] <= 1e-10 && worst[2] <= 1e-10 && worst[3] <= 1e-6;
    Ok(timed(
        Duration::from_secs(120),
        start,
        ok,
        format!(
            "max rel err ae_loss {:.1e}, phase1_loss {:.1e}, kl_channel_loss {:.1e}; gaussian_kl vs quadrature abs {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

use rand::Rng;

fn ac3() -> Check {
    let start = Instant::now();
    let layout = SkeletonLayout::default();
    let mut r = rng(3);
    let h = 1e-5;
    let mut worst = [0.0f64; 3];
    let mut checks = [0usize; 3];
    for i in 0..20u64 {
        // ae_loss w.r.t. autoencoder parameters
        let cfg = AeConfig {
            variant: if i % 2 == 0 { AeVariant::Linear } else { AeVariant::Mlp },
            sparsity_lambda: 1e-3,
            seed: 100 + i,
            ..Default::default()
        };
        let model = PoseAutoencoder::new(cfg.clone(), layout.clone())?;
        let x = tensor(&random_vec(&mut r, 2 * FRAME, -1.0, 1.0), &[2, FRAME]);
        let eval = |m: &PoseAutoencoder| -> Result<candle_core::Tensor> {
            let pred = m.decode_tensor(&m.encode_tensor(&x)?)?;
            Ok(ae_loss(&pred, &x, &m.encoder_weights(), &cfg, &layout)?.total)
        };
        let grads = eval(&model)?.backward()?;
        let vars: Vec<Var> = model.params().vars().map(|(_, v)| v.clone()).collect();
        for _ in 0..10 {
            let var = &vars[r.random_range(0..vars.len())];
            let idx = r.random_range(0..var.elem_count());
            let analytic = to_vec(grads.get(var.as_tensor()).unwrap())[idx];
            let numeric = central_difference(var, idx, h, || eval(&model).unwrap().to_scalar::<f64>().unwrap());
            worst[0] = worst[0].max(grad_err(analytic, numeric));
            checks[0] += 1;
        }

        // phase1_loss w.r.t. predictions and length ratios
        let (b, t) = (r.random_range(1..4), r.random_range(1..6));
        let z_hat = Var::from_tensor(&tensor(&random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0), &[b, t, CHANNELS]))?;
        let r_hat = Var::from_tensor(&tensor(&random_vec(&mut r, b, 0.0, 1.0), &[b]))?;
        let z = tensor(&random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0), &[b, t, CHANNELS]);
        let rr = tensor(&random_vec(&mut r, b, 0.0, 1.0), &[b]);
        let mask = random_mask(&mut r, b, t, 1);
        let weights = RegionValues::new(1.0, 14.0, 10.0, 2.0);
        let f = || -> candle_core::Tensor {
            phase1_loss(z_hat.as_tensor(), &z, r_hat.as_tensor(), &rr, &weights, &mask, &Default::default())
                .unwrap()
                .total
        };
        let grads = f().backward()?;
        for (var, count) in [(&z_hat, 10), (&r_hat, b)] {
            for k in 0..count {
                let idx = if count == b && std::ptr::eq(var, &r_hat) { k } else { r.random_range(0..var.elem_count()) };
                let analytic = to_vec(grads.get(var.as_tensor()).unwrap())[idx];
                let numeric = central_difference(var, idx, h, || f().to_scalar::<f64>().unwrap());
                worst[1] = worst[1].max(grad_err(analytic, numeric));
                checks[1] += 1;
            }
        }

        // kl_channel_loss w.r.t. predictions
        let (b, t) = (r.random_range(1..4), r.random_range(2..6));
        let z_hat = Var::from_tensor(&tensor(&random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0), &[b, t, CHANNELS]))?;
        let mask = random_mask(&mut r, b, t, 2);
        let priors = ChannelPrior {
            layout_hash: String::new(),
            mean: random_vec(&mut r, CHANNELS, -1.0, 1.0),
            std: random_vec(&mut r, CHANNELS, 0.2, 2.0),
            source: "random".into(),
        };
        let f = || kl_channel_loss(z_hat.as_tensor(), &priors, &mask, SIGMA_FLOOR).unwrap();
        let grads = f().backward()?;
        for _ in 0..10 {
            let idx = r.random_range(0..z_hat.elem_count());
            let analytic = to_vec(grads.get(z_hat.as_tensor()).unwrap())[idx];
            let numeric = central_difference(&z_hat, idx, h, || f().to_scalar::<f64>().unwrap());
            worst[2] = worst[2].max(grad_err(analytic, numeric));
            checks[2] += 1;
        }
    }
    let ok = worst.iter().all(|&w| w < 1e-4);
    Ok(timed(
        Duration::from_secs(60),
        start,
        ok,
        format!(
            "20 instances per loss ({}/{}/{} coordinates); max rel err ae_loss {:.1e}, phase1_loss {:.1e}, kl_channel_loss {:.1e}",
            checks[0], checks[1], checks[2], worst[0], worst[1], worst[2]
        ),
    ))
}

fn ac4(state: &mut Option<Trained>) -> Check {
    let start = Instant::now();
    let layout = SkeletonLayout::default();
    let corpus = synth_corpus(11, 32, 24, 24, 120)?;
    let poses: Vec<PoseSequence> = corpus.iter().map(|s| normalize_pose(&s.pose, &layout)).collect::<Result<_>>()?;
    let cfg = AeConfig {
        epochs: 100_000,
        max_steps: Some(2000),
        seed: 11,
        ..Default::default()
    };
    let ae = train_ae(&poses, &[], &cfg, &layout)?;
    let steps = ae.history.last().map(|h| h.steps).unwrap_or(0);
    let frames = concatenate(Axis(0), &poses.iter().map(|p| p.to_flat()).collect::<Vec<_>>().iter().map(|a| a.view()).collect::<Vec<_>>())
        .unwrap();
    let recon = to_vec(&ae.decode_tensor(&ae.encode_tensor(&tensor(frames.as_slice().unwrap(), &[frames.nrows(), FRAME]))?)?);
    let l1 = recon.iter().zip(frames.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / recon.len() as f64;
    let items: Vec<(String, PoseSequence)> = corpus.iter().zip(&poses).map(|(s, p)| (s.id.clone(), p.clone())).collect();
    let latents = extract_latents(&ae, &items)?.entries.into_iter().map(|e| e.latents.codes).collect();
    *state = Some(Trained {
        corpus,
        ae,
        latents,
        generator: None,
    });
    Ok(timed(
        Duration::from_secs(600),
        start,
        l1 < 0.01 && steps <= 2000,
        format!("train L1 {l1:.5} < 0.01 after {steps} steps on {} frames", frames.nrows()),
    ))
}

fn gen_samples(t: &Trained, range: std::ops::Range<usize>) -> Vec<GenSample> {
    range
        .map(|i| GenSample {
            id: t.corpus[i].id.clone(),
            embedding: t.corpus[i].embedding.clone(),
            latents: t.latents[i].clone(),
        })
        .collect()
}

fn overfit_config() -> GeneratorConfig {
    GeneratorConfig {
        d_model: 64,
        enc_layers: 2,
        enc_heads: 4,
        dec_layers: 2,
        dec_heads: 4,
        ffn_dim: 128,
        t_max: 120,
        lr: 3e-3,
        dropout: 0.0,
        max_epochs: 800,
        plateau_patience: 1000,
        early_stop_patience: 1000,
        seed: 5,
        ..Default::default()
    }
}

fn ac5(state: &mut Option<Trained>) -> Check {
    let start = Instant::now();
    let t = state.as_mut().ok_or_else(|| darslp::Error::MissingUpstream("AC4 model".into()))?;
    let layout = SkeletonLayout::default();
    let train = gen_samples(t, 0..16);
    let poses: Vec<PoseSequence> = t.corpus[..16].iter().map(|s| normalize_pose(&s.pose, &layout)).collect::<Result<_>>()?;
    let gen = Generator::new(overfit_config(), idle_pose_from(&poses)?, layout.layout_hash())?;
    let gen = train_generator(gen, &train, &[], None, Phase::One)?;
    let d = evaluate_losses(&gen, &train, None)?;
    t.generator = Some(gen);
    Ok(timed(
        Duration::from_secs(1200),
        start,
        d.latent_mae < 0.05 && d.length_mae < 0.02,
        format!("latent MAE {:.4} < 0.05, length-ratio MAE {:.4} < 0.02", d.latent_mae, d.length_mae),
    ))
}

fn ac6(state: &mut Option<Trained>) -> Check {
    let start = Instant::now();
    let t = state.as_mut().ok_or_else(|| darslp::Error::MissingUpstream("AC4 model".into()))?;
    let gen1 = t.generator.take().ok_or_else(|| darslp::Error::MissingUpstream("AC5 generator".into()))?;
    let layout = SkeletonLayout::default();
    let views: Vec<_> = t.latents.iter().map(|l| l.view()).collect();
    let all = concatenate(Axis(0), &views).unwrap();
    let priors = compute_priors(&all, SIGMA_FLOOR, layout.layout_hash(), "train")?;
    let train = gen_samples(t, 0..16);
    let dev = gen_samples(t, 16..32);
    let before = evaluate_losses(&gen1, &dev, Some(&priors))?;
    let mut gen = gen1;
    gen.set_training_config(GeneratorConfig {
        lr: 3e-4,
        kl_weight: 1e-2,
        max_epochs: 100,
        ..overfit_config()
    })?;
    let gen2 = train_generator(gen, &train, &dev, Some(&priors), Phase::Two)?;
    let after = evaluate_losses(&gen2, &dev, Some(&priors))?;
    t.generator = Some(gen2);
    let (k0, k1) = (before.kl.unwrap(), after.kl.unwrap());
    let kl_ratio = k1 / k0;
    let p1_ratio = after.phase1 / before.phase1;
    Ok(timed(
        Duration::from_secs(1800),
        start,
        kl_ratio <= 0.5 && p1_ratio <= 1.2,
        format!("dev KL {k0:.1} -> {k1:.1} (ratio {kl_ratio:.3} <= 0.5); dev phase-1 ratio {p1_ratio:.3} <= 1.2"),
    ))
}

fn ac7() -> Check {
    let start = Instant::now();
    let mut r = rng(7);
    let mut compared = 0;
    for _ in 0..50 {
        for n in 1..=5 {
            for m in 1..=5 {
                let a = random_pose(&mut r, n, 1.0);
                let b = random_pose(&mut r, m, 1.0);
                let got = dtw(&a, &b)?;
                let (cost, len) = dtw_brute(&a, &b);
                if got.total_cost != cost || got.path_len != len || got.normalized() != cost / len as f64 {
                    return Ok((false, format!("{n}x{m}: dp ({}, {}) vs brute ({cost}, {len})", got.total_cost, got.path_len)));
                }
                compared += 1;
            }
        }
    }
    Ok(timed(
        Duration::from_secs(10),
        start,
        true,
        format!("{compared} pairs equal brute-force enumeration exactly"),
    ))
}

fn ac8(state: &mut Option<Trained>) -> Check {
    let start = Instant::now();
    let t = state.as_ref().ok_or_else(|| darslp::Error::MissingUpstream("AC4 model".into()))?;
    let gen = t.generator.as_ref().ok_or_else(|| darslp::Error::MissingUpstream("trained generator".into()))?;
    let mut worst = 0.0f64;
    for s in t.corpus.iter().take(20) {
        let base = generate(&s.embedding, gen, &t.ae)?;
        for extra in 1..=8 {
            let padded = generate_padded(&s.embedding, Some(s.embedding.nrows() + extra), gen, &t.ae)?;
            if padded.len() != base.len() {
                return Ok((false, format!("{}: length {} vs {} with {extra} pads", s.id, padded.len(), base.len())));
            }
            let diff = (padded.frames() - base.frames()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(diff);
        }
    }
    Ok(timed(
        Duration::from_secs(300),
        start,
        worst < 1e-5,
        format!("max coordinate change {worst:.2e} < 1e-5 over 20 samples x 1..8 pads"),
    ))
}

fn ac9(state: &mut Option<Trained>) -> Check {
    let start = Instant::now();
    let t = state.as_ref().ok_or_else(|| darslp::Error::MissingUpstream("AC4 model".into()))?;
    let layout = t.ae.latent_layout();
    let views: Vec<_> = t.latents.iter().map(|l| l.view()).collect();
    let frames = concatenate(Axis(0), &views).unwrap();
    let stats = channel_stats(&frames, 50)?;
    let rh = layout.channel_range(Region::RightHand);
    let lh = layout.channel_range(Region::LeftHand);
    let hands = rh.chain(lh).map(|c| stats.channels[c].entropy).sum::<f64>()
        / (layout.size(Region::RightHand) + layout.size(Region::LeftHand)) as f64;
    let face = stats.region_mean_entropy(&layout, Region::Face);
    Ok(timed(
        Duration::from_secs(60),
        start,
        hands > face,
        format!("mean entropy hands {hands:.3} > face {face:.3} nats"),
    ))
}

fn ac10() -> Check {
    let start = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let overrides: Vec<String> = [
        "synth.n_train=24",
        "synth.n_dev=6",
        "synth.n_test=6",
        "ae.max_steps=300",
        "ae.epochs=1000",
        "gen.d_model=32",
        "gen.enc_layers=1",
        "gen.dec_layers=1",
        "gen.ffn_dim=64",
        "gen.t_max=120",
        "gen.lr=0.003",
        "gen.max_epochs=20",
        "phase2.lr=0.0003",
        "phase2.kl_weight=0.01",
        "phase2.max_epochs=10",
        "analysis.grid=40",
        "seed=2024",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut digests = Vec::new();
    for dir in &dirs {
        let mut all = overrides.clone();
        all.push(format!("paths.workdir={}", serde_json::to_string(dir.path()).unwrap()));
        let pipeline = Pipeline::open(&PipelineConfig::default(), &all)?;
        pipeline.run_all()?;
        let dev = pipeline.read_report("dev")?.digest();
        let test = pipeline.read_report("test")?.digest();
        digests.push((dev, test));
    }
    Ok(timed(
        Duration::from_secs(2700),
        start,
        digests[0] == digests[1],
        format!(
            "report digests dev {} / {}, test {} / {}",
            &digests[0].0[..12],
            &digests[1].0[..12],
            &digests[0].1[..12],
            &digests[1].1[..12]
        ),
    ))
}

fn main() {
    let mut state: Option<Trained> = None;
    let mut failed = 0;
    let mut report = |id: &str, result: Check| {
        let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failed += 1;
        }
        println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
    };
    report("AC1", ac1());
    report("AC2", ac2());
    report("AC3", ac3());
    report("AC4", ac4(&mut state));
    report("AC5", ac5(&mut state));
    report("AC6", ac6(&mut state));
    report("AC7", ac7());
    report("AC8", ac8(&mut state));
    report("AC9", ac9(&mut state));
    report("AC10", ac10());
    if failed > 0 {
        std::process::exit(1);
    }
}
