//! Acceptance criteria, one line each. Every check compares library output
//! with an oracle computed here, not with the library's own helpers.

use std::f64::consts::{LN_2, PI, TAU};
use std::time::{Duration, Instant};

use threephase::cli::{compare, train, RunConfig};
use threephase::data::{Corpus, PAD_ID};
use threephase::geometry::{horn_substitute, theta_init, HornProfile, PhaseConfig};
use threephase::model::layers::phase_rotation;
use threephase::model::{count_params, Model, ModelConfig, RopeCache};
use threephase::tensor::{Rng, Tape, Tensor};
use threephase::train::{bits_per_byte, evaluate, OptimizerConfig, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn harmonic_oracle(t: usize) -> f64 {
    // Kahan-compensated, largest term first: a different order from the library.
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for k in 1..=t {
        let y = 1.0 / k as f64 - c;
        let s = sum + y;
        c = (s - sum) - y;
        sum = s;
    }
    sum
}

fn residual_oracle(x: &Tensor<f32>, n: usize) -> f64 {
    let d = *x.shape().last().unwrap();
    let dp = d / n;
    let rows: Vec<f64> = x
        .data()
        .chunks(d)
        .map(|row| {
            (0..n)
                .map(|i| row[i * dp..(i + 1) * dp].iter().map(|&v| v as f64).sum::<f64>() / dp as f64)
                .sum::<f64>()
                .abs()
        })
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

fn c1_pinning() -> Outcome {
    let refs = [(3, 128, 0.12734, 5e-6), (3, 1024, 0.0220, 5e-5), (1, 1024, 0.00733, 5e-6)];
    for (n, t, want, tol) in refs {
        let v = n as f64 * harmonic_oracle(t) / t as f64;
        if (v - want).abs() > tol {
            return Err(format!("reference N={n} T={t}: {v} vs {want}"));
        }
    }
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for n in [1, 2, 3, 4, 6, 8, 12] {
        for t in [8, 128, 1024] {
            let cfg = PhaseConfig::new(n, 24 * n).map_err(|e| e.to_string())?;
            let x = Tensor::<f32>::randn(&[2, t, 24 * n], 2.0, &mut rng).map_err(|e| e.to_string())?;
            let y = horn_substitute(&x, &HornProfile::fixed(t), &cfg).map_err(|e| e.to_string())?;
            let err = (residual_oracle(&y, n) - n as f64 * harmonic_oracle(t) / t as f64).abs();
            worst = worst.max(err);
        }
    }
    check(worst < 1e-6, format!("21 cells, max |residual − N·H_T/T| = {worst:.2e} (< 1e-6)"))
}

fn rotate_oracle(h: &[f64], theta: &[f64], n: usize, sign: f64) -> Vec<f64> {
    let dp = h.len() / n;
    let mut out = h.to_vec();
    for i in 0..n {
        let offset = TAU * i as f64 / n as f64;
        for (k, th) in theta.iter().enumerate() {
            let a = sign * (th + offset);
            let (x, y) = (out[i * dp + 2 * k], out[i * dp + 2 * k + 1]);
            out[i * dp + 2 * k] = x * a.cos() - y * a.sin();
            out[i * dp + 2 * k + 1] = x * a.sin() + y * a.cos();
        }
    }
    out
}

fn layer_rotate<T: threephase::tensor::Scalar>(h: &Tensor<T>, theta: &Tensor<T>, cfg: &PhaseConfig) -> Tensor<T> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let tv = tape.constant(theta.clone());
    let out = phase_rotation(&mut tape, hv, tv, cfg).unwrap();
    tape.value(out).clone()
}

/// Singular values via one-sided Jacobi on the columns of `a`.
fn singular_values(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for row in &a {
                    alpha += row[p] * row[p];
                    beta += row[q] * row[q];
                    gamma += row[p] * row[q];
                }
                if gamma.abs() < 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (0..n).map(|j| a.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt()).collect()
}

fn c2_orthogonality() -> Outcome {
    let cfg = PhaseConfig::new(3, 48).unwrap();
    let mut rng = Rng::new(202);
    let (mut norm_err, mut inv_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let h = Tensor::<f32>::randn(&[48], 1.0, &mut rng).unwrap();
        let theta = Tensor::<f32>::randn(&[cfg.n_pairs()], 3.0, &mut rng).unwrap();
        let out = layer_rotate(&h, &theta, &cfg);
        let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        norm_err = norm_err.max((norm(out.data()) - norm(h.data())).abs() / norm(h.data()));
        let th: Vec<f64> = theta.data().iter().map(|&v| v as f64).collect();
        let back = rotate_oracle(&out.to_f64(), &th, 3, -1.0);
        for (b, x) in back.iter().zip(h.data()) {
            inv_err = inv_err.max((b - *x as f64).abs());
        }
        let fwd = rotate_oracle(&h.to_f64(), &th, 3, 1.0);
        for (f, o) in fwd.iter().zip(out.data()) {
            inv_err = inv_err.max((f - *o as f64).abs());
        }
    }
    let cfg8 = PhaseConfig::new(1, 8).unwrap();
    let h = Tensor::<f64>::randn(&[8], 1.0, &mut rng).unwrap();
    let theta = Tensor::<f64>::randn(&[4], 1.0, &mut rng).unwrap();
    let step = 1e-6;
    let mut jac = vec![vec![0.0; 8]; 8];
    for j in 0..8 {
        let (mut p, mut m) = (h.clone(), h.clone());
        p.data_mut()[j] += step;
        m.data_mut()[j] -= step;
        let (fp, fm) = (layer_rotate(&p, &theta, &cfg8), layer_rotate(&m, &theta, &cfg8));
        for i in 0..8 {
            jac[i][j] = (fp.data()[i] - fm.data()[i]) / (2.0 * step);
        }
    }
    let sv_err = singular_values(jac).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    check(
        norm_err < 1e-5 && inv_err < 1e-5 && sv_err < 1e-4,
        format!("1000 probes: norm {norm_err:.1e}, inverse {inv_err:.1e}; Jacobian |σ−1| ≤ {sv_err:.1e}"),
    )
}

fn c3_gradients() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 13,
        d_model: 24,
        n_layers: 2,
        n_phases: 3,
        n_q_heads: 6,
        n_kv_heads: 3,
        d_ff: 32,
        max_seq_len: 8,
        learnable_horn: true,
        ..ModelConfig::small(13, 8)
    };
    let model = Model::<f64>::new(cfg, &mut Rng::new(303)).unwrap();
    let tokens: Vec<usize> = (0..8).map(|i| (i * 7 + 3) % 13).collect();
    let targets: Vec<usize> = (0..8).map(|i| (i * 4 + 2) % 13).collect();
    let forward = |m: &Model<f64>| -> f64 {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let fwd = m.forward(&mut tape, &vars, &tokens, 1, 8).unwrap();
        let loss = m.loss(&mut tape, &fwd, &targets).unwrap().total;
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let fwd = model.forward(&mut tape, &vars, &tokens, 1, 8).unwrap();
    let loss = model.loss(&mut tape, &fwd, &targets).unwrap().total;
    let grads = tape.backward(loss).unwrap();

    let mut rng = Rng::new(304);
    let (mut probes, mut worst) = (0usize, 0.0f64);
    let mut kinds = std::collections::BTreeSet::new();
    for (i, spec) in model.params().specs().iter().enumerate() {
        let g = grads.tensor(vars[i]).into_data();
        for _ in 0..5 {
            let j = rng.below(g.len());
            let mut m = model.clone();
            m.params_mut().tensors_mut()[i].data_mut()[j] += 1e-5;
            let fp = forward(&m);
            m.params_mut().tensors_mut()[i].data_mut()[j] -= 2e-5;
            let fm = forward(&m);
            let numeric = (fp - fm) / 2e-5;
            let rel = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            probes += 1;
            kinds.insert(format!("{:?}", spec.kind));
        }
    }
    let covered = ["Theta", "NormGain", "Horn"].iter().all(|k| kinds.contains(*k));
    check(
        probes >= 100 && covered && worst < 1e-4,
        format!("{probes} probes over {kinds:?}, max rel. err {worst:.2e}"),
    )
}

fn count_oracle(v: usize, d: usize, l: usize, q: usize, kv: usize, ff: usize, n: Option<usize>) -> usize {
    let kv_dim = d / q * kv;
    let block = 2 * d + 2 * d * d + 2 * d * kv_dim + 3 * d * ff + n.map_or(0, |n| d / n / 2);
    2 * v * d + l * block + d
}

fn c4_param_counts() -> Outcome {
    let small = ModelConfig::small(10_000, 128);
    let large = ModelConfig::large(32_000, 1024);
    let got = [
        count_params(&small).unwrap(),
        count_params(&small.to_baseline()).unwrap(),
        count_params(&large).unwrap(),
        count_params(&large.to_baseline()).unwrap(),
    ];
    let oracle = [
        count_oracle(10_000, 192, 4, 6, 3, 512, Some(3)),
        count_oracle(10_000, 192, 4, 6, 3, 512, None),
        count_oracle(32_000, 768, 12, 12, 3, 2048, Some(3)),
        count_oracle(32_000, 768, 12, 12, 3, 2048, None),
    ];
    check(
        got == oracle && got[0] == 5_463_872 && got[1] == 5_463_744 && got[0] - got[1] == 128 && got[2] - got[3] == 1_536,
        format!("small {} / baseline {} (Δ {}), large Δ {}", got[0], got[1], got[0] - got[1], got[2] - got[3]),
    )
}

fn c5_theta_schedule() -> Outcome {
    let table = [0.131, 0.262, 0.393, 0.524, 0.654, 0.785, 0.916, 1.047, 1.178, 1.309, 1.440, 1.571];
    let mut worst = 0.0f64;
    for (l, want) in table.iter().enumerate() {
        let th = theta_init(l, 12, 64).unwrap();
        let mean = th.iter().sum::<f64>() / th.len() as f64;
        worst = worst.max((mean - want).abs());
        worst = worst.max((mean - (l + 1) as f64 * PI / 24.0).abs());
    }
    check(worst < 5e-4, format!("12 layers, max deviation {worst:.2e}"))
}

fn c6_dead_aux() -> Outcome {
    let corpus = Corpus::from_text(&threephase::data::synthetic_text(40_000, 606), 300).unwrap();
    let make = |aux: bool| {
        let cfg = ModelConfig {
            vocab_size: corpus.vocab.len(),
            d_model: 48,
            n_layers: 2,
            n_q_heads: 6,
            n_kv_heads: 3,
            d_ff: 96,
            horn_inject: false,
            zero_mean_enforce: true,
            use_aux_loss: aux,
            ..ModelConfig::small(corpus.vocab.len(), 32)
        };
        let optim = OptimizerConfig {
            lr: 3e-3,
            warmup_steps: 20,
            ..OptimizerConfig::new(200)
        };
        Trainer::<f32>::new(cfg, optim, TrainConfig::new(8, 32), &corpus, 606, true).unwrap()
    };
    let (mut on, mut off) = (make(true), make(false));
    let (mut diff, mut aux_max) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let a = on.step().map_err(|e| e.to_string())?;
        off.step().map_err(|e| e.to_string())?;
        aux_max = aux_max.max(a.aux.ok_or("aux term missing")?);
        for (x, y) in on.model().params().tensors().iter().zip(off.model().params().tensors()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                diff = diff.max((p - q).abs() as f64);
            }
        }
    }
    check(
        diff < 1e-7 && aux_max < 1e-12,
        format!("200 steps: max aux {aux_max:.1e}, max |Δparam| {diff:.1e}"),
    )
}

fn c7_ppl_bpb() -> Outcome {
    let spot = bits_per_byte(2.7765, 3.69).unwrap();
    let text = threephase::data::synthetic_text(8_000, 707);
    let corpus = Corpus::from_text(&text, 64).unwrap();
    let words: Vec<&str> = text.split_whitespace().collect();
    let bpt = (words.iter().map(|w| w.len()).sum::<usize>() + words.len() - 1) as f64 / words.len() as f64;
    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        d_model: 24,
        n_layers: 2,
        n_q_heads: 6,
        n_kv_heads: 3,
        d_ff: 32,
        ..ModelConfig::small(corpus.vocab.len(), 16)
    };
    let model = Model::<f32>::new(cfg, &mut Rng::new(707)).unwrap();
    let r = evaluate(&model, &corpus.val, 16, 4, corpus.bytes_per_token).unwrap();

    let ids = &corpus.val;
    let (mut nll, mut count) = (0.0f64, 0usize);
    for w in 0..(ids.len() - 1) / 16 {
        let logits = model.logits(&ids[w * 16..w * 16 + 16], 1, 16).unwrap();
        for (t, row) in logits.data().chunks(corpus.vocab.len()).enumerate() {
            let target = ids[w * 16 + t + 1];
            if target == PAD_ID {
                continue;
            }
            let max = row.iter().fold(f32::MIN, |a, &b| a.max(b)) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            nll += lse - row[target] as f64;
            count += 1;
        }
    }
    let loss = nll / count as f64;
    let ok = (spot - 1.0855).abs() < 5e-4
        && (corpus.bytes_per_token - bpt).abs() < 1e-12
        && (r.val_loss - loss).abs() < 1e-5 * loss
        && (r.ppl.ln() - r.val_loss).abs() < 1e-12
        && (r.bpb * LN_2 * bpt - r.val_loss).abs() < 1e-12;
    check(
        ok,
        format!("spot bpb {spot:.4}; val loss {:.6} vs oracle {loss:.6}, ppl {:.4}, bpb {:.4}", r.val_loss, r.ppl, r.bpb),
    )
}

fn c8_smoke() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    let mut lines = Vec::new();
    let mut ok = true;
    for baseline in [false, true] {
        let mut cfg = RunConfig::toy();
        if baseline {
            cfg.model = cfg.model.to_baseline();
        }
        cfg.out_dir = dir.path().join(cfg.label());
        let corpus_bytes = cfg.data.synthetic_bytes;
        let s = train(&cfg).map_err(|e| e.to_string())?;
        let steps: Vec<serde_json::Value> = std::fs::read_to_string(cfg.out_dir.join("steps.jsonl"))
            .map_err(|e| e.to_string())?
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let losses: Vec<f64> = steps.iter().map(|v| v["loss"].as_f64().unwrap()).collect();
        let tail = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        let ratio = tail / losses[0];
        ok &= losses.len() <= 300 && ratio < 0.6;
        lines.push(format!("{} {:.3}→{:.3} ({:.0}%, {} KB)", s.label, losses[0], tail, 100.0 * ratio, corpus_bytes / 1000));
        runs.push(cfg.out_dir);
    }
    let report = compare(&runs, &dir.path().join("compare")).map_err(|e| e.to_string())?;
    let delta = report.runs[1].final_val_loss - report.runs[0].final_val_loss;
    ok &= (report.runs[1].delta - delta).abs() < 1e-15 && dir.path().join("compare/loss_curves.svg").exists();
    check(ok, format!("{}; baseline − 3pt final val loss = {delta:+.4}", lines.join(", ")))
}

fn c9_determinism() -> Outcome {
    let mut cfg = RunConfig::toy();
    cfg.optim.total_steps = 60;
    cfg.train.eval_every = 10;
    let corpus = cfg.corpus().map_err(|e| e.to_string())?;
    let make = || Trainer::<f32>::new(cfg.model.clone(), cfg.optim.clone(), cfg.train.clone(), &corpus, cfg.seed, true).unwrap();
    let record = |t: &mut Trainer<f32>, until: u64| {
        let mut out = Vec::new();
        t.run_until(until, &mut |e| {
            out.push(format!("{e:?}"));
            Ok(())
        })
        .unwrap();
        out
    };
    let (mut a, mut b) = (make(), make());
    let (ra, rb) = (record(&mut a, 60), record(&mut b, 60));
    let same_seed = ra == rb;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut c = make();
    let mut rc = record(&mut c, 30);
    c.save(dir.path()).map_err(|e| e.to_string())?;
    drop(c);
    let mut resumed = Trainer::<f32>::resume(dir.path(), &corpus).map_err(|e| e.to_string())?;
    rc.extend(record(&mut resumed, 60));
    let params_equal = a
        .model()
        .params()
        .tensors()
        .iter()
        .zip(resumed.model().params().tensors())
        .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    check(
        same_seed && rc == ra && params_equal,
        format!("{} events, same-seed runs identical: {same_seed}; resume at 30 identical: {}", ra.len(), rc == ra && params_equal),
    )
}

fn c10_rope() -> Outcome {
    let (d, t) = (16, 12);
    let cache = RopeCache::new(d, 512, 10_000.0).unwrap();
    let mut rng = Rng::new(1010);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = Tensor::<f64>::randn(&[t, d], 1.0, &mut rng).unwrap();
        let k = Tensor::<f64>::randn(&[t, d], 1.0, &mut rng).unwrap();
        let shift = 1 + rng.below(400);
        let scores = |start: usize| -> Vec<f64> {
            let (qr, kr) = (cache.apply(&q, start).unwrap(), cache.apply(&k, start).unwrap());
            let mut s = Vec::with_capacity(t * t);
            for i in 0..t {
                for j in 0..t {
                    s.push((0..d).map(|c| qr.data()[i * d + c] * kr.data()[j * d + c]).sum());
                }
            }
            s
        };
        let (a, b) = (scores(0), scores(shift));
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    check(worst < 1e-4, format!("20 random 12×12 score matrices, max shift deviation {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("structural pinning", c1_pinning, Duration::from_secs(10)),
        ("rotation orthogonality", c2_orthogonality, Duration::from_secs(30)),
        ("gradient fidelity", c3_gradients, Duration::from_secs(120)),
        ("parameter counts", c4_param_counts, Duration::from_secs(10)),
        ("theta init schedule", c5_theta_schedule, Duration::from_secs(1)),
        ("dead-aux equivalence", c6_dead_aux, Duration::from_secs(300)),
        ("ppl/bpb identity", c7_ppl_bpb, Duration::from_secs(1)),
        ("smoke training", c8_smoke, Duration::from_secs(600)),
        ("determinism and resume", c9_determinism, Duration::from_secs(300)),
        ("rope relative position", c10_rope, Duration::from_secs(10)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget {budget:?}")),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.2}s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
