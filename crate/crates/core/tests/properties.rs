//! Property tests for the geometric and numeric invariants.

use std::f64::consts::{LN_2, TAU};

use proptest::prelude::*;
use threephase::data::{bytes_per_token, window_count, Vocab};
use threephase::geometry::{
    aux_zero_sum_loss, cross_phase_mean, horn_substitute, zero_sum_residual, HornProfile, PhaseConfig,
};
use threephase::model::layers::{phase_rotation, unrotate_phases};
use threephase::model::RopeCache;
use threephase::tensor::{Tape, Tensor};
use threephase::train::{bits_per_byte, lr_at, perplexity, OptimizerConfig};

const PHASES: [usize; 7] = [1, 2, 3, 4, 6, 8, 12];

fn tensor(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, values.iter().cycle().take(n).copied().collect()).unwrap()
}

fn harmonic(t: usize) -> f64 {
    (1..=t).map(|k| 1.0 / k as f64).sum()
}

fn rotate(h: &Tensor<f64>, theta: &[f64], cfg: &PhaseConfig) -> Tensor<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let tv = tape.constant(Tensor::from_vec(&[theta.len()], theta.to_vec()).unwrap());
    let out = phase_rotation(&mut tape, hv, tv, cfg).unwrap();
    tape.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pinning_holds_for_any_input(
        n_idx in 0usize..7,
        k in 1usize..3,
        t in 1usize..40,
        scale in 0.01f64..100.0,
        values in prop::collection::vec(-1.0f64..1.0, 1..64),
    ) {
        let n = PHASES[n_idx];
        let cfg = PhaseConfig::new(n, 2 * n * k).unwrap();
        let x = tensor(&[2, t, cfg.d_model()], &values.iter().map(|v| v * scale).collect::<Vec<_>>());
        let y = horn_substitute(&x, &HornProfile::fixed(t), &cfg).unwrap();
        let want = n as f64 * harmonic(t) / t as f64;
        prop_assert!((zero_sum_residual(&y, &cfg).unwrap() - want).abs() < 1e-9 * (1.0 + scale));
    }

    #[test]
    fn horn_changes_only_the_row_mean(
        n_idx in 0usize..7,
        t in 1usize..16,
        values in prop::collection::vec(-5.0f64..5.0, 1..50),
    ) {
        let n = PHASES[n_idx];
        let cfg = PhaseConfig::new(n, 2 * n).unwrap();
        let x = tensor(&[t, cfg.d_model()], &values);
        let y = horn_substitute(&x, &HornProfile::fixed(t), &cfg).unwrap();
        for (p, (rx, ry)) in x.data().chunks(cfg.d_model()).zip(y.data().chunks(cfg.d_model())).enumerate() {
            let shift = ry[0] - rx[0];
            for (a, b) in rx.iter().zip(ry) {
                prop_assert!((b - a - shift).abs() < 1e-12);
            }
            let mean = ry.iter().sum::<f64>() / ry.len() as f64;
            prop_assert!((mean - 1.0 / (p as f64 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_phase_mean_is_full_mean(
        n_idx in 0usize..7,
        values in prop::collection::vec(-3.0f64..3.0, 1..40),
    ) {
        let n = PHASES[n_idx];
        let cfg = PhaseConfig::new(n, 4 * n).unwrap();
        let x = tensor(&[3, cfg.d_model()], &values);
        let m = cross_phase_mean(&x, &cfg).unwrap();
        for (row, mv) in x.data().chunks(cfg.d_model()).zip(m.data()) {
            prop_assert!((row.iter().sum::<f64>() / row.len() as f64 - mv).abs() < 1e-12);
        }
    }

    #[test]
    fn centred_stream_has_no_aux(
        n_idx in 0usize..7,
        values in prop::collection::vec(-10.0f64..10.0, 1..40),
    ) {
        let n = PHASES[n_idx];
        let cfg = PhaseConfig::new(n, 2 * n).unwrap();
        let mut x = tensor(&[5, cfg.d_model()], &values);
        for row in x.data_mut().chunks_mut(cfg.d_model()) {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        prop_assert!(aux_zero_sum_loss(&x, &cfg).unwrap() < 1e-24);
    }

    #[test]
    fn rotation_is_orthogonal(
        n_idx in 0usize..7,
        h in prop::collection::vec(-4.0f64..4.0, 1..48),
        theta in prop::collection::vec(-TAU..TAU, 1..8),
    ) {
        let n = PHASES[n_idx];
        let cfg = PhaseConfig::new(n, 4 * n).unwrap();
        let h = tensor(&[2, cfg.d_model()], &h);
        let theta: Vec<f64> = theta.iter().cycle().take(cfg.n_pairs()).copied().collect();
        let out = rotate(&h, &theta, &cfg);
        prop_assert!((out.l2_norm() - h.l2_norm()).abs() < 1e-12 * (1.0 + h.l2_norm()));
        prop_assert!(unrotate_phases(&out, &theta, &cfg).max_abs_diff(&h).unwrap() < 1e-12);
    }

    #[test]
    fn rotation_jacobian_is_orthogonal(theta in prop::collection::vec(-TAU..TAU, 4)) {
        let cfg = PhaseConfig::new(1, 8).unwrap();
        // The layer is linear in h: its Jacobian's columns are the images of
        // the basis vectors.
        let cols: Vec<Vec<f64>> = (0..8)
            .map(|j| {
                let mut e = vec![0.0; 8];
                e[j] = 1.0;
                rotate(&Tensor::from_vec(&[8], e).unwrap(), &theta, &cfg).into_data()
            })
            .collect();
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..8).map(|i| cols[a][i] * cols[b][i]).sum();
                prop_assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rope_scores_depend_on_offset_only(
        q in prop::collection::vec(-1.0f64..1.0, 8),
        k in prop::collection::vec(-1.0f64..1.0, 8),
        p in 0usize..50,
        r in 0usize..50,
        s in 0usize..150,
    ) {
        let cache = RopeCache::new(8, 256, 10_000.0).unwrap();
        let (q, k) = (tensor(&[1, 8], &q), tensor(&[1, 8], &k));
        let score = |a: usize, b: usize| -> f64 {
            let (x, y) = (cache.apply(&q, a).unwrap(), cache.apply(&k, b).unwrap());
            x.data().iter().zip(y.data()).map(|(u, v)| u * v).sum()
        };
        prop_assert!((score(p, r) - score(p + s, r + s)).abs() < 1e-10);
    }

    #[test]
    fn metric_identities(loss in 0.0f64..12.0, bpt in 0.5f64..12.0) {
        prop_assert!((perplexity(loss).ln() - loss).abs() < 1e-12);
        prop_assert!((bits_per_byte(loss, bpt).unwrap() * LN_2 * bpt - loss).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_bounded(total in 1u64..500, warm_frac in 0.0f64..1.0, step in 0u64..600) {
        let cfg = OptimizerConfig {
            warmup_steps: (total as f64 * warm_frac) as u64,
            ..OptimizerConfig::new(total)
        };
        let lr = lr_at(step, &cfg);
        prop_assert!((0.0..=cfg.lr * (1.0 + 1e-12)).contains(&lr));
    }

    #[test]
    fn vocab_round_trips_known_words(words in prop::collection::vec("[a-e]{1,3}", 1..60)) {
        let text = words.join(" ");
        let vocab = Vocab::build(&text, 1_000).unwrap();
        prop_assert_eq!(vocab.decode(&vocab.encode(&text)), text.clone());
        let n = words.len() as f64;
        let want = (words.iter().map(|w| w.len()).sum::<usize>() as f64 + n - 1.0) / n;
        prop_assert!((bytes_per_token(&text).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn windows_fit_in_stream(len in 2usize..500, seq in 1usize..64) {
        let w = window_count(len, seq);
        prop_assert!(w * seq < len || w == 0);
        prop_assert!((w + 1) * seq + 1 > len);
    }
}
