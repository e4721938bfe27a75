//! Invariant suites run by `threephase verify`.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::RunConfig;
use crate::data::{synthetic_text, Corpus};
use crate::error::Result;
use crate::geometry::{
    analytic_pinned_residual, horn_substitute, theta_init, zero_sum_residual, HornProfile, PhaseConfig,
};
use crate::model::layers::{phase_rotation, unrotate_phases};
use crate::model::{count_params, Model, ModelConfig, RopeCache};
use crate::tensor::gradcheck::relative_error;
use crate::tensor::{Rng, Tape, Tensor};
use crate::train::{bits_per_byte, evaluate, perplexity, OptimizerConfig, TrainConfig, Trainer};

pub const PINNING_PHASES: [usize; 7] = [1, 2, 3, 4, 6, 8, 12];
pub const PINNING_LENGTHS: [usize; 3] = [8, 128, 1024];

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Perturbs the horn by this amount before the pinning suite.
    pub inject_fault: Option<f64>,
    pub dead_aux_steps: u64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            inject_fault: None,
            dead_aux_steps: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    /// `(N, N·H_128/128)` for every tested phase count.
    pub analytic_pinned_residual: Vec<(usize, f64)>,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

pub fn verify(config: Option<&RunConfig>, opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut suites = vec![
        pinning(opts)?,
        orthogonality(opts.seed)?,
        gradients(opts.seed)?,
        param_counts(config)?,
        theta_schedule()?,
        dead_aux(opts)?,
        ppl_bpb(opts.seed)?,
        rope_shift(opts.seed)?,
    ];
    if let Some(cfg) = config {
        suites.push(config_pinning(cfg, opts)?);
    }
    Ok(VerifyReport {
        passed: suites.iter().all(|s| s.passed),
        analytic_pinned_residual: PINNING_PHASES
            .iter()
            .map(|&n| (n, analytic_pinned_residual(n, 128)))
            .collect(),
        suites,
    })
}

fn suite(name: &str, passed: bool, detail: serde_json::Value) -> SuiteResult {
    SuiteResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn pinned_error(n: usize, d_model: usize, t: usize, horn: &HornProfile, rng: &mut Rng) -> Result<(f64, f64)> {
    let cfg = PhaseConfig::new(n, d_model)?;
    let x = Tensor::<f32>::randn(&[2, t, d_model], 1.0, rng)?;
    let measured = zero_sum_residual(&horn_substitute(&x, horn, &cfg)?, &cfg)?;
    Ok((measured, analytic_pinned_residual(n, t)))
}

fn pinning(opts: &VerifyOptions) -> Result<SuiteResult> {
    let mut rng = Rng::new(opts.seed);
    let mut rows = Vec::new();
    let mut ok = true;
    for &n in &PINNING_PHASES {
        for &t in &PINNING_LENGTHS {
            let mut horn = HornProfile::fixed(t);
            if let Some(delta) = opts.inject_fault {
                horn = horn.perturbed(delta);
            }
            let (measured, analytic) = pinned_error(n, 24 * n, t, &horn, &mut rng)?;
            let err = (measured - analytic).abs();
            ok &= err < 1e-6;
            rows.push(json!({ "n_phases": n, "seq_len": t, "measured": measured, "analytic": analytic, "abs_err": err }));
        }
    }
    Ok(suite("pinning", ok, json!({ "tolerance": 1e-6, "fault_injected": opts.inject_fault, "cells": rows })))
}

fn config_pinning(cfg: &RunConfig, opts: &VerifyOptions) -> Result<SuiteResult> {
    let m = &cfg.model;
    let t = cfg.train.seq_len;
    let mut horn = HornProfile::fixed(t);
    if let Some(delta) = opts.inject_fault {
        horn = horn.perturbed(delta);
    }
    let (measured, analytic) = pinned_error(m.n_phases, m.d_model, t, &horn, &mut Rng::new(opts.seed))?;
    let err = (measured - analytic).abs();
    Ok(suite(
        "config",
        err < 1e-6,
        json!({ "n_phases": m.n_phases, "d_model": m.d_model, "seq_len": t, "params": count_params(m)?, "measured": measured, "analytic": analytic }),
    ))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub(crate) fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let tau = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn rotate_f64(h: &Tensor<f64>, theta: &Tensor<f64>, cfg: &PhaseConfig) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let tv = tape.constant(theta.clone());
    let out = phase_rotation(&mut tape, hv, tv, cfg)?;
    Ok(tape.value(out).clone())
}

/// Singular values of the numerical Jacobian of the rotation at `h`.
pub(crate) fn rotation_singular_values(cfg: &PhaseConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = Rng::new(seed);
    let d = cfg.d_model();
    let h = Tensor::<f64>::randn(&[d], 1.0, &mut rng)?;
    let theta = Tensor::<f64>::randn(&[cfg.n_pairs()], 1.0, &mut rng)?;
    let step = 1e-6;
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut plus = h.clone();
        plus.data_mut()[j] += step;
        let mut minus = h.clone();
        minus.data_mut()[j] -= step;
        let (fp, fm) = (rotate_f64(&plus, &theta, cfg)?, rotate_f64(&minus, &theta, cfg)?);
        for i in 0..d {
            jac[i][j] = (fp.data()[i] - fm.data()[i]) / (2.0 * step);
        }
    }
    let jtj: Vec<Vec<f64>> = (0..d)
        .map(|a| (0..d).map(|b| (0..d).map(|k| jac[k][a] * jac[k][b]).sum()).collect())
        .collect();
    let mut sv: Vec<f64> = symmetric_eigenvalues(jtj).into_iter().map(|e| e.max(0.0).sqrt()).collect();
    sv.sort_by(f64::total_cmp);
    Ok(sv)
}

fn orthogonality(seed: u64) -> Result<SuiteResult> {
    let cfg = PhaseConfig::new(3, 24)?;
    let mut rng = Rng::new(seed + 1);
    let (mut norm_err, mut inv_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let h = Tensor::<f32>::randn(&[cfg.d_model()], 1.0, &mut rng)?;
        let theta = Tensor::<f32>::randn(&[cfg.n_pairs()], 2.0, &mut rng)?;
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let tv = tape.constant(theta.clone());
        let out = phase_rotation(&mut tape, hv, tv, &cfg)?;
        let out = tape.value(out).clone();
        norm_err = norm_err.max((out.l2_norm() - h.l2_norm()).abs() / h.l2_norm());
        inv_err = inv_err.max(unrotate_phases(&out, theta.data(), &cfg).max_abs_diff(&h)?);
    }
    let sv = rotation_singular_values(&PhaseConfig::new(1, 8)?, seed + 2)?;
    let sv_err = sv.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    Ok(suite(
        "orthogonality",
        norm_err < 1e-5 && inv_err < 1e-5 && sv_err < 1e-4,
        json!({ "probes": 1000, "norm_rel_err": norm_err, "inverse_err": inv_err, "singular_values": sv, "singular_value_err": sv_err }),
    ))
}

/// The micro configuration used for finite-difference checks.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 24,
        n_layers: 2,
        n_q_heads: 6,
        n_kv_heads: 3,
        d_ff: 32,
        learnable_horn: true,
        ..ModelConfig::small(13, 8)
    }
}

fn gradients(seed: u64) -> Result<SuiteResult> {
    let model = Model::<f64>::new(micro_config(), &mut Rng::new(seed + 3))?;
    let tokens: Vec<usize> = (0..8).map(|i| (i * 5 + 2) % 13).collect();
    let targets: Vec<usize> = (0..8).map(|i| (i * 3 + 1) % 13).collect();
    let loss_of = |m: &Model<f64>, with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let fwd = m.forward(&mut tape, &vars, &tokens, 1, 8)?;
        let loss = m.loss(&mut tape, &fwd, &targets)?.total;
        let value = tape.value(loss).item()?;
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.tensor(v).into_data()).collect()))
    };
    let (_, grads) = loss_of(&model, true)?;
    let mut rng = Rng::new(seed + 4);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probes = 0usize;
    let mut kinds = std::collections::BTreeMap::<String, f64>::new();
    for (i, spec) in model.params().specs().iter().enumerate() {
        let n = model.params().tensors()[i].len();
        for _ in 0..5 {
            let j = rng.below(n);
            let mut m = model.clone();
            m.params_mut().tensors_mut()[i].data_mut()[j] += h;
            let fp = loss_of(&m, false)?.0;
            m.params_mut().tensors_mut()[i].data_mut()[j] -= 2.0 * h;
            let fm = loss_of(&m, false)?.0;
            let err = relative_error(grads[i][j], (fp - fm) / (2.0 * h));
            worst = worst.max(err);
            probes += 1;
            let e = kinds.entry(format!("{:?}", spec.kind)).or_default();
            *e = e.max(err);
        }
    }
    Ok(suite(
        "gradients",
        worst < 1e-4 && probes >= 100,
        json!({ "probes": probes, "max_rel_err": worst, "by_kind": kinds, "tolerance": 1e-4 }),
    ))
}

fn param_counts(config: Option<&RunConfig>) -> Result<SuiteResult> {
    let small = ModelConfig::small(10_000, 128);
    let (s3, sb) = (count_params(&small)?, count_params(&small.to_baseline())?);
    let large = ModelConfig::large(32_000, 1024);
    let (l3, lb) = (count_params(&large)?, count_params(&large.to_baseline())?);
    let configured = config.map(|c| count_params(&c.model)).transpose()?;
    Ok(suite(
        "param_counts",
        s3 == 5_463_872 && sb == 5_463_744 && l3 - lb == 1_536,
        json!({ "small": s3, "small_baseline": sb, "small_delta": s3 as i64 - sb as i64, "large": l3, "large_baseline": lb, "large_delta": l3 as i64 - lb as i64, "configured": configured }),
    ))
}

fn theta_schedule() -> Result<SuiteResult> {
    let want = [0.131, 0.262, 0.393, 0.524, 0.654, 0.785, 0.916, 1.047, 1.178, 1.309, 1.440, 1.571];
    let mut means = Vec::new();
    for l in 0..12 {
        let th = theta_init(l, 12, 64)?;
        means.push(th.iter().sum::<f64>() / th.len() as f64);
    }
    let err = means.iter().zip(want).map(|(m, w)| (m - w).abs()).fold(0.0, f64::max);
    Ok(suite("theta_schedule", err < 5e-4, json!({ "means": means, "max_err": err })))
}

/// Toy configuration for trajectory comparisons with the aux term on
/// and off.
pub fn dead_aux_config(use_aux: bool) -> ModelConfig {
    ModelConfig {
        d_model: 24,
        n_layers: 2,
        n_q_heads: 6,
        n_kv_heads: 3,
        d_ff: 64,
        horn_inject: false,
        zero_mean_enforce: true,
        use_aux_loss: use_aux,
        ..ModelConfig::small(200, 16)
    }
}

/// `(max-abs parameter difference, max aux value)` over `steps` steps of
/// two runs that differ only in the aux term.
pub fn dead_aux_trajectories(steps: u64, seed: u64) -> Result<(f64, f64)> {
    let corpus = Corpus::from_text(&synthetic_text(20_000, seed), 200)?;
    let vocab = corpus.vocab.len();
    let make = |aux: bool| -> Result<Trainer<f32>> {
        let cfg = ModelConfig {
            vocab_size: vocab,
            ..dead_aux_config(aux)
        };
        let optim = OptimizerConfig {
            lr: 3e-3,
            warmup_steps: 5,
            ..OptimizerConfig::new(steps)
        };
        Trainer::new(cfg, optim, TrainConfig::new(4, 16), &corpus, seed, true)
    };
    let (mut on, mut off) = (make(true)?, make(false)?);
    let (mut diff, mut aux_max) = (0.0f64, 0.0f64);
    for _ in 0..steps {
        let a = on.step()?;
        off.step()?;
        aux_max = aux_max.max(a.aux.unwrap_or(f64::INFINITY));
        for (x, y) in on.model().params().tensors().iter().zip(off.model().params().tensors()) {
            diff = diff.max(x.max_abs_diff(y)?);
        }
    }
    Ok((diff, aux_max))
}

fn dead_aux(opts: &VerifyOptions) -> Result<SuiteResult> {
    let (diff, aux) = dead_aux_trajectories(opts.dead_aux_steps, opts.seed)?;
    Ok(suite(
        "dead_aux",
        diff < 1e-7 && aux < 1e-12,
        json!({ "steps": opts.dead_aux_steps, "max_param_diff": diff, "max_aux": aux }),
    ))
}

fn ppl_bpb(seed: u64) -> Result<SuiteResult> {
    let spot = bits_per_byte(2.7765, 3.69)?;
    let corpus = Corpus::from_text(&synthetic_text(4_000, seed), 13)?;
    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        ..micro_config()
    };
    let model = Model::<f32>::new(cfg, &mut Rng::new(seed))?;
    let r = evaluate(&model, &corpus.val, 8, 4, corpus.bytes_per_token)?;
    let ppl_err = (r.ppl - perplexity(r.val_loss)).abs() / r.ppl;
    let bpb_err = (r.bpb - r.val_loss / (std::f64::consts::LN_2 * corpus.bytes_per_token)).abs();
    Ok(suite(
        "ppl_bpb",
        (spot - 1.0855).abs() < 5e-4 && ppl_err < 1e-12 && bpb_err < 1e-12,
        json!({ "spot_bpb": spot, "val_loss": r.val_loss, "ppl": r.ppl, "bpb": r.bpb }),
    ))
}

fn rope_shift(seed: u64) -> Result<SuiteResult> {
    let d = 16;
    let cache = RopeCache::new(d, 256, 10_000.0)?;
    let mut rng = Rng::new(seed + 5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let q = Tensor::<f64>::randn(&[1, d], 1.0, &mut rng)?;
        let k = Tensor::<f64>::randn(&[1, d], 1.0, &mut rng)?;
        let (p, r, s) = (rng.below(100), rng.below(100), rng.below(100));
        let score = |a: usize, b: usize| -> Result<f64> {
            let (qa, kb) = (cache.apply(&q, a)?, cache.apply(&k, b)?);
            Ok(qa.data().iter().zip(kb.data()).map(|(x, y)| x * y).sum())
        };
        worst = worst.max((score(p, r)? - score(p + s, r + s)?).abs());
    }
    Ok(suite("rope_shift", worst < 1e-4, json!({ "max_score_diff": worst })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_on_known_matrix() {
        let mut ev = symmetric_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fault_breaks_pinning_only() {
        let opts = VerifyOptions {
            inject_fault: Some(1e-3),
            ..Default::default()
        };
        assert!(!pinning(&opts).unwrap().passed);
        assert!(pinning(&VerifyOptions::default()).unwrap().passed);
    }
}
