use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svg::{line_chart, Series};
use super::{read_jsonl, write_file, write_json, RunConfig};
use crate::diagnostics::{export_heatmap, intrinsic_balance, radius_spread, theta_drift, ThetaDrift};
use crate::error::{Error, Result};
use crate::geometry::{analytic_pinned_residual, PhaseConfig};
use crate::model::{count_params, Model};
use crate::train::{evaluate, DiagnosticsRecord, EvalReport, Event, StepRecord, Trainer};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS: &str = "metrics.jsonl";
pub const STEPS: &str = "steps.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub steps: u64,
    pub params: usize,
    pub n_phases: usize,
    pub initial_loss: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_ppl: f64,
    pub final_bpb: f64,
    pub zero_sum_residual: f64,
    /// `N·H_T/T` when the horn is injected.
    pub analytic_residual: Option<f64>,
    pub theta_count: usize,
    pub theta_l2_drift: Vec<f64>,
    pub phase_radii: Vec<f64>,
}

struct Jsonl(BufWriter<File>, PathBuf);

impl Jsonl {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Jsonl(BufWriter::new(f), path))
    }

    fn push<S: Serialize>(&mut self, v: &S) -> Result<()> {
        let line = serde_json::to_string(v)?;
        writeln!(self.0, "{line}").map_err(|e| Error::io(&self.1, e))
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush().map_err(|e| Error::io(&self.1, e))
    }
}

fn theta_count(cfg: &crate::model::ModelConfig) -> usize {
    if cfg.has_rotation() {
        cfg.n_layers * cfg.d_model / (2 * cfg.n_phases)
    } else {
        0
    }
}

/// Trains one run into `cfg.out_dir`: resolved config, vocabulary,
/// per-step and per-eval JSON lines, checkpoints and a summary.
pub fn train(cfg: &RunConfig) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let corpus = cfg.corpus()?;
    if let Some(p) = &cfg.data.corpus {
        if p.is_relative() {
            let abs = cfg.base_dir.join(p);
            cfg.data.corpus = Some(abs.canonicalize().unwrap_or(abs));
        }
    }
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join(CONFIG), &cfg)?;
    corpus.vocab.save(&out.join("vocab.json"))?;

    let mut trainer = Trainer::<f32>::new(
        cfg.model.clone(),
        cfg.optim.clone(),
        cfg.train.clone(),
        &corpus,
        cfg.seed,
        cfg.deterministic,
    )?;
    let mut metrics = Jsonl::create(out.join(METRICS))?;
    let mut steps = Jsonl::create(out.join(STEPS))?;
    let mut first: Option<StepRecord> = None;
    let mut last_step: Option<StepRecord> = None;
    let mut last_eval: Option<DiagnosticsRecord> = None;
    let total = trainer.total_steps();
    let every = cfg.checkpoint_every;
    while trainer.step_count() < total {
        let until = if every > 0 {
            (trainer.step_count() / every + 1) * every
        } else {
            total
        };
        trainer.run_until(until, &mut |ev| match ev {
            Event::Step(s) => {
                first.get_or_insert_with(|| s.clone());
                last_step = Some(s.clone());
                steps.push(s)
            }
            Event::Eval(d) => {
                last_eval = Some(d.clone());
                metrics.push(d)
            }
        })?;
        if every > 0 && trainer.step_count() % every == 0 && trainer.step_count() < total {
            trainer.save(&out.join("checkpoints").join(format!("step_{:06}", trainer.step_count())))?;
        }
    }
    metrics.finish()?;
    steps.finish()?;
    trainer.save(&out.join(CHECKPOINT_DIR))?;

    let eval = last_eval.ok_or_else(|| Error::Config("run finished without an evaluation".into()))?;
    let model = &cfg.model;
    let summary = RunSummary {
        label: cfg.label(),
        seed: cfg.seed,
        steps: trainer.step_count(),
        params: count_params(model)?,
        n_phases: model.n_phases,
        initial_loss: first.map_or(f64::NAN, |s| s.loss),
        final_train_loss: last_step.map_or(f64::NAN, |s| s.loss),
        final_val_loss: eval.val_loss,
        final_ppl: eval.ppl,
        final_bpb: eval.bpb,
        zero_sum_residual: eval.zero_sum_residual,
        analytic_residual: model
            .horn_inject
            .then(|| analytic_pinned_residual(model.n_phases, cfg.train.seq_len)),
        theta_count: theta_count(model),
        theta_l2_drift: eval.theta_l2_drift,
        phase_radii: eval.phase_radii,
    };
    write_json(&out.join(SUMMARY), &summary)?;
    Ok(summary)
}

fn load_run(run: &Path) -> Result<(RunConfig, crate::data::Corpus, Model<f32>)> {
    let mut cfg = RunConfig::load(&run.join(CONFIG))?;
    let corpus = cfg.corpus()?;
    let (model, _) = Model::<f32>::load(&run.join(CHECKPOINT_DIR))?;
    Ok((cfg, corpus, model))
}

/// Re-evaluates a finished run's final checkpoint; writes `eval.json`.
pub fn eval(run: &Path) -> Result<EvalReport> {
    let (cfg, corpus, model) = load_run(run)?;
    let report = evaluate(&model, &corpus.val, cfg.train.seq_len, cfg.train.eval_batch, corpus.bytes_per_token)?;
    write_json(&run.join("eval.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HornInspection {
    pub learnable: bool,
    pub head: f64,
    pub first: Vec<f64>,
    /// Largest `|r(t) − 1/(t+1)|` over the profile.
    pub max_dev_from_reciprocal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub drift: ThetaDrift,
    pub per_theta_rms: Vec<f64>,
    pub marked_pairs: Vec<(usize, usize)>,
    pub horn: Option<HornInspection>,
    pub phase_means: Vec<f64>,
    pub intrinsic_means: Vec<f64>,
    pub zero_sum_residual: f64,
    pub analytic_residual: Option<f64>,
    pub block_radii: Vec<Vec<f64>>,
    pub block_radius_spread: Vec<f64>,
}

/// Angle drift heatmap, horn inspection, phase balance and radii of a
/// run's final checkpoint, written under `{run}/diagnose/`.
pub fn diagnose(run: &Path, threshold: f64) -> Result<DiagnoseReport> {
    let (cfg, corpus, model) = load_run(run)?;
    let dir = run.join("diagnose");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let drift = theta_drift(&model.theta_bank());
    let hm = export_heatmap(&drift.per_pair, threshold, &dir)?;
    let horn = model.horn().map(|h| HornInspection {
        learnable: h.is_learnable(),
        head: h.head(),
        first: h.values().iter().take(8).copied().collect(),
        max_dev_from_reciprocal: h
            .values()
            .iter()
            .enumerate()
            .map(|(t, v)| (v - 1.0 / (t as f64 + 1.0)).abs())
            .fold(0.0, f64::max),
    });
    let seq = cfg.train.seq_len;
    let r = evaluate(&model, &corpus.val, seq, cfg.train.eval_batch, corpus.bytes_per_token)?;
    let report = DiagnoseReport {
        per_theta_rms: drift.per_theta_rms(),
        marked_pairs: hm.marked,
        horn,
        intrinsic_means: if cfg.model.horn_inject {
            intrinsic_balance(&r.phase_means, seq)
        } else {
            r.phase_means.clone()
        },
        phase_means: r.phase_means,
        zero_sum_residual: r.zero_sum_residual,
        analytic_residual: cfg
            .model
            .horn_inject
            .then(|| analytic_pinned_residual(cfg.model.n_phases, seq)),
        block_radius_spread: r.block_radii.iter().map(|b| radius_spread(b)).collect(),
        block_radii: r.block_radii,
        drift,
    };
    write_json(&dir.join("diagnose.json"), &report)?;
    Ok(report)
}

/// Query and KV head counts for a phase count: two query heads and one
/// KV head per phase, with the single-phase case at 6Q/3KV.
pub fn sweep_rule(n_phases: usize) -> (usize, usize) {
    if n_phases == 1 {
        (6, 3)
    } else {
        (2 * n_phases, n_phases)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_phases: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub theta_count: usize,
    pub params: usize,
    pub final_val_loss: f64,
    pub measured_residual: f64,
    pub analytic_residual: f64,
}

/// Worker count for parallel sweeps: `THREEPHASE_THREADS` when set.
pub fn sweep_threads() -> Option<usize> {
    std::env::var("THREEPHASE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// One run per phase count under `{out}/n{N}`; every configuration is
/// validated before any training starts.
pub fn sweep_n(base: &RunConfig, phases: &[usize]) -> Result<Vec<SweepRow>> {
    if phases.is_empty() {
        return Err(Error::Config("sweep needs at least one phase count".into()));
    }
    let mut cells = Vec::with_capacity(phases.len());
    for &n in phases {
        let (q, kv) = sweep_rule(n);
        let mut cfg = base.clone();
        cfg.model.n_phases = n;
        cfg.model.n_q_heads = q;
        cfg.model.n_kv_heads = kv;
        cfg.model.baseline_mode = false;
        cfg.out_dir = base.out_dir.join(format!("n{n}"));
        cfg.label = Some(format!("n{n}"));
        let cell_err = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("sweep cell N = {n}: {m}")),
            other => Error::Config(format!("sweep cell N = {n}: {other}")),
        };
        PhaseConfig::new(n, cfg.model.d_model).map_err(cell_err)?;
        cfg.validate().map_err(cell_err)?;
        cells.push(cfg);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = sweep_threads() {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|cfg| {
                let s = train(cfg)?;
                let m = &cfg.model;
                Ok(SweepRow {
                    n_phases: m.n_phases,
                    n_q_heads: m.n_q_heads,
                    n_kv_heads: m.n_kv_heads,
                    theta_count: s.theta_count,
                    params: s.params,
                    final_val_loss: s.final_val_loss,
                    measured_residual: s.zero_sum_residual,
                    analytic_residual: analytic_pinned_residual(m.n_phases, cfg.train.seq_len),
                })
            })
            .collect::<Result<_>>()
    })?;
    write_json(&base.out_dir.join("sweep.json"), &rows)?;
    write_file(&base.out_dir.join("sweep.md"), &sweep_table(&rows))?;
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("| N | Q/KV | thetas | params | val loss | residual | N·H_T/T |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {}/{} | {} | {} | {:.4} | {:.6} | {:.6} |",
            r.n_phases, r.n_q_heads, r.n_kv_heads, r.theta_count, r.params, r.final_val_loss, r.measured_residual, r.analytic_residual
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFinal {
    pub dir: PathBuf,
    pub label: String,
    pub seed: u64,
    pub final_val_loss: f64,
    /// Signed difference from the first run.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub label: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedRow {
    pub step: u64,
    /// Validation loss of each run at this step, in input order.
    pub val_loss: Vec<Option<f64>>,
    /// `val_loss[i] − val_loss[0]` where both exist.
    pub delta: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub runs: Vec<RunFinal>,
    pub table: Vec<AlignedRow>,
    pub groups: Vec<GroupStats>,
    pub warnings: Vec<String>,
}

fn run_label(dir: &Path) -> Result<(String, u64)> {
    let path = dir.join(CONFIG);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg = RunConfig::from_json(&text, dir)?;
    Ok((cfg.label(), cfg.seed))
}

/// Aligns the validation curves of several runs, reports final deltas
/// against the first run and per-label statistics, and writes
/// `compare.json`, `compare.md` and `loss_curves.svg` into `out`.
pub fn compare(runs: &[PathBuf], out: &Path) -> Result<CompareReport> {
    if runs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let mut curves: Vec<Vec<DiagnosticsRecord>> = Vec::new();
    let mut finals = Vec::new();
    for dir in runs {
        let recs: Vec<DiagnosticsRecord> = read_jsonl(&dir.join(METRICS))?;
        let last = recs
            .last()
            .ok_or_else(|| Error::Data(format!("{} has no evaluation records", dir.display())))?;
        let (label, seed) = run_label(dir)?;
        finals.push(RunFinal {
            dir: dir.clone(),
            label,
            seed,
            final_val_loss: last.val_loss,
            delta: 0.0,
        });
        curves.push(recs);
    }
    let base = finals[0].final_val_loss;
    finals.iter_mut().for_each(|f| f.delta = f.final_val_loss - base);

    let mut warnings = Vec::new();
    let grids: Vec<BTreeSet<u64>> = curves.iter().map(|c| c.iter().map(|r| r.step).collect()).collect();
    for (i, g) in grids.iter().enumerate().skip(1) {
        if *g != grids[0] {
            warnings.push(format!(
                "evaluation steps of {} differ from {}",
                runs[i].display(),
                runs[0].display()
            ));
        }
    }
    let all_steps: BTreeSet<u64> = grids.iter().flatten().copied().collect();
    let table = all_steps
        .into_iter()
        .map(|step| {
            let val_loss: Vec<Option<f64>> = curves
                .iter()
                .map(|c| c.iter().find(|r| r.step == step).map(|r| r.val_loss))
                .collect();
            let delta = val_loss
                .iter()
                .map(|v| Some((*v)? - val_loss[0]?))
                .collect();
            AlignedRow { step, val_loss, delta }
        })
        .collect();

    let mut by_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in &finals {
        by_label.entry(f.label.clone()).or_default().push(f.final_val_loss);
    }
    let groups = by_label
        .into_iter()
        .map(|(label, xs)| {
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let std = (n > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
            GroupStats { label, n, mean, std }
        })
        .collect();

    let report = CompareReport {
        runs: finals,
        table,
        groups,
        warnings,
    };
    let series: Vec<Series> = report
        .runs
        .iter()
        .zip(&curves)
        .map(|(f, c)| Series {
            label: format!("{} (seed {})", f.label, f.seed),
            points: c.iter().map(|r| (r.step as f64, r.val_loss)).collect(),
        })
        .collect();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("compare.json"), &report)?;
    write_file(&out.join("compare.md"), &compare_table(&report))?;
    write_file(&out.join("loss_curves.svg"), &line_chart("Validation loss", "step", "loss", &series))?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn fmt_delta(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:+.4}"))
}

pub fn compare_table(r: &CompareReport) -> String {
    let mut s = String::from("| step |");
    for f in &r.runs {
        let _ = write!(s, " {} s{} |", f.label, f.seed);
    }
    s.push('\n');
    s.push_str(&"|---".repeat(r.runs.len() + 1));
    s.push_str("|\n");
    for row in &r.table {
        let _ = write!(s, "| {} |", row.step);
        for (v, d) in row.val_loss.iter().zip(&row.delta) {
            let _ = write!(s, " {} ({}) |", fmt_opt(*v), fmt_delta(*d));
        }
        s.push('\n');
    }
    s.push_str("\n| run | final val loss | delta |\n|---|---|---|\n");
    for f in &r.runs {
        let _ = writeln!(s, "| {} s{} | {:.4} | {:+.4} |", f.label, f.seed, f.final_val_loss, f.delta);
    }
    s.push_str("\n| label | n | mean | std |\n|---|---|---|---|\n");
    for g in &r.groups {
        let _ = writeln!(s, "| {} | {} | {:.4} | {} |", g.label, g.n, g.mean, fmt_opt(g.std));
    }
    for w in &r.warnings {
        let _ = writeln!(s, "\nwarning: {w}");
    }
    s
}
