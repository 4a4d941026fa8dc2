mod support;

use ndarray::Array2;
use proptest::prelude::*;

use darslp::corpus::EMBED_DIM;
use darslp::generator::{
    gaussian_kl, kl_channel_loss, length_from_ratio, phase1_loss, Generator, GeneratorConfig,
};
use darslp::skeleton::{RegionValues, SkeletonLayout};
use darslp::stats::{ChannelPrior, SIGMA_FLOOR};

use support::*;

fn tiny(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        d_model: 16,
        enc_layers: 1,
        enc_heads: 2,
        dec_layers: 2,
        dec_heads: 4,
        ffn_dim: 32,
        t_max: 24,
        seed,
        ..Default::default()
    }
}

fn tiny_generator(seed: u64) -> Generator {
    let layout = SkeletonLayout::default();
    let idle = random_vec(&mut rng(seed ^ 1), FRAME, -0.5, 0.5);
    Generator::new(tiny(seed), idle, layout.layout_hash()).unwrap()
}

fn embedding(seed: u64, l: usize) -> Array2<f64> {
    Array2::from_shape_vec((l, EMBED_DIM), random_vec(&mut rng(seed), l * EMBED_DIM, -1.0, 1.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn inference_is_one_parallel_pass(seed in any::<u64>(), l in 1usize..8) {
        let g = tiny_generator(seed);
        let before = g.decode_calls();
        let (lat, ratio) = g.infer(&embedding(seed, l), None).unwrap();
        prop_assert_eq!(g.decode_calls(), before + 1);
        prop_assert!(ratio > 0.0 && ratio < 1.0);
        prop_assert_eq!(lat.len(), length_from_ratio(ratio, 24));
        prop_assert_eq!(lat.codes.ncols(), CHANNELS);
    }

    #[test]
    fn text_padding_does_not_change_the_output(seed in any::<u64>(), l in 1usize..6, extra in 1usize..6) {
        let g = tiny_generator(seed);
        let emb = embedding(seed, l);
        let (a, ra) = g.infer(&emb, None).unwrap();
        let (b, rb) = g.infer(&emb, Some(l + extra)).unwrap();
        prop_assert!((ra - rb).abs() < 1e-12);
        prop_assert_eq!(a.codes.dim(), b.codes.dim());
        let diff = (&a.codes - &b.codes).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff < 1e-9);
    }

    #[test]
    fn checkpoints_roundtrip_bit_identically(seed in any::<u64>()) {
        let layout = SkeletonLayout::default();
        let g = tiny_generator(seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        g.save(&path).unwrap();
        let loaded = Generator::load(&path, layout.layout_hash()).unwrap();
        let emb = embedding(seed, 3);
        let (a, _) = g.infer(&emb, None).unwrap();
        let (b, _) = loaded.infer(&emb, None).unwrap();
        prop_assert!(a.codes.iter().zip(b.codes.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        prop_assert!(Generator::load(&path, &"0".repeat(64)).is_err());
    }

    #[test]
    fn length_mapping_stays_in_range(ratio in -1.0f64..2.0, t_max in 1usize..400) {
        let len = length_from_ratio(ratio, t_max);
        prop_assert!((1..=t_max).contains(&len));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn phase1_loss_matches_reference(
        seed in any::<u64>(),
        b in 1usize..4,
        t in 1usize..7,
        w in prop::array::uniform4(0.1f64..15.0),
    ) {
        let mut r = rng(seed);
        let z_hat = random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0);
        let z = random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0);
        let r_hat = random_vec(&mut r, b, 0.0, 1.0);
        let rr = random_vec(&mut r, b, 0.0, 1.0);
        let mask = random_mask(&mut r, b, t, 1);
        let weights = RegionValues::new(w[0], w[1], w[2], w[3]);
        let loss = |zh: &[f64], rh: &[f64]| {
            phase1_loss(
                &tensor(zh, &[b, t, CHANNELS]),
                &tensor(&z, &[b, t, CHANNELS]),
                &tensor(rh, &[b]),
                &tensor(&rr, &[b]),
                &weights,
                &mask,
                &Default::default(),
            )
            .unwrap()
            .total
            .to_scalar::<f64>()
            .unwrap()
        };
        let got = loss(&z_hat, &r_hat);
        prop_assert!(rel_err(got, phase1_ref(&z_hat, &z, b, t, &r_hat, &rr, w, &mask)) < 1e-10);
        prop_assert!(got >= 0.0);
        prop_assert_eq!(loss(&z, &rr), 0.0);
    }

    #[test]
    fn kl_channel_loss_matches_reference(seed in any::<u64>(), b in 1usize..4, t in 2usize..7) {
        let mut r = rng(seed);
        let z_hat = random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0);
        let mask = random_mask(&mut r, b, t, 2);
        let priors = ChannelPrior {
            layout_hash: String::new(),
            mean: random_vec(&mut r, CHANNELS, -1.0, 1.0),
            std: random_vec(&mut r, CHANNELS, 0.05, 2.0),
            source: "random".into(),
        };
        let got = kl_channel_loss(&tensor(&z_hat, &[b, t, CHANNELS]), &priors, &mask, SIGMA_FLOOR)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let want = kl_channel_ref(&z_hat, b, t, &mask, &priors.mean, &priors.std, SIGMA_FLOOR);
        prop_assert!(got >= 0.0);
        prop_assert!(rel_err(got, want) < 1e-10);
    }

    #[test]
    fn gaussian_kl_is_nonnegative_and_zero_on_equality(
        m1 in -3.0f64..3.0,
        s1 in 0.01f64..4.0,
        m2 in -3.0f64..3.0,
        s2 in 0.01f64..4.0,
    ) {
        let kl = gaussian_kl(m1, s1, m2, s2, SIGMA_FLOOR).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(rel_err(kl, gaussian_kl_ref(m1, s1, m2, s2)) < 1e-12 || kl < 1e-15);
        prop_assert!(gaussian_kl(m1, s1, m1, s1, SIGMA_FLOOR).unwrap().abs() < 1e-15);
    }
}

#[test]
fn kl_vanishes_when_batch_statistics_match_the_priors() {
    let (b, t) = (2, 5);
    let mut r = rng(9);
    let z_hat = random_vec(&mut r, b * t * CHANNELS, -1.0, 1.0);
    let mut mean = vec![0.0; CHANNELS];
    let mut std = vec![0.0; CHANNELS];
    for c in 0..CHANNELS {
        let col: Vec<f64> = (0..b * t).map(|k| z_hat[k * CHANNELS + c]).collect();
        (mean[c], std[c]) = two_pass_mean_std(&col);
    }
    let priors = ChannelPrior {
        layout_hash: String::new(),
        mean,
        std,
        source: "batch".into(),
    };
    let mask = vec![vec![true; t]; b];
    let kl = kl_channel_loss(&tensor(&z_hat, &[b, t, CHANNELS]), &priors, &mask, SIGMA_FLOOR)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!(kl.abs() < 1e-10, "{kl}");
}
