//! AdamW training with warmup and cosine decay, evaluation and metrics.

mod eval;
mod optim;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use eval::{bits_per_byte, evaluate, perplexity, EvalReport};
pub use optim::{clip_global_norm, lr_at, AdamW, OptimizerConfig};

use crate::data::{Corpus, WindowSampler};
use crate::diagnostics::theta_drift;
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, Manifest};
use crate::model::{Model, ModelConfig, ParamKind, ParamStore};
use crate::tensor::{Rng, Scalar, Tape, Tensor};

fn default_batch() -> usize {
    16
}
fn default_one() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seq_len: usize,
    /// Micro-batches averaged per optimiser step.
    #[serde(default = "default_one")]
    pub grad_accum: u64,
    /// Evaluate every this many steps; the final step is always evaluated.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_batch")]
    pub eval_batch: usize,
    /// Reject NaN/Inf anywhere in forward or backward.
    #[serde(default)]
    pub checked: bool,
}

impl TrainConfig {
    pub fn new(batch_size: usize, seq_len: usize) -> Self {
        TrainConfig {
            batch_size,
            seq_len,
            grad_accum: 1,
            eval_every: 0,
            eval_batch: default_batch(),
            checked: false,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.grad_accum == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch_size, seq_len, grad_accum and eval_batch must be positive".into()));
        }
        if self.seq_len > model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.seq_len, model.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Total objective: cross-entropy plus the weighted aux term.
    pub loss: f64,
    pub ce: f64,
    pub aux: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One JSON-lines metrics record, written at every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: u64,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub val_loss: f64,
    pub ppl: f64,
    pub bpb: f64,
    pub phase_means: Vec<f64>,
    pub zero_sum_residual: f64,
    pub theta_l2_drift: Vec<f64>,
    pub theta_mean: Vec<f64>,
    pub per_pair_drift: Vec<Vec<f64>>,
    pub phase_radii: Vec<f64>,
    pub horn_head: Option<f64>,
    pub lr: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Step(StepRecord),
    Eval(DiagnosticsRecord),
}

/// State carried in the checkpoint's `extra` field.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerState {
    optimizer: OptimizerConfig,
    train: TrainConfig,
    seed: u64,
    deterministic: bool,
    adam_steps: u64,
    pending_losses: Vec<f64>,
}

pub struct Trainer<T: Scalar> {
    model: Model<T>,
    opt: AdamW<T>,
    sampler: WindowSampler,
    val: Vec<usize>,
    bytes_per_token: f64,
    cfg: TrainConfig,
    seed: u64,
    deterministic: bool,
    step: u64,
    pending_losses: Vec<f64>,
    decay: Vec<bool>,
    active: Vec<bool>,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model from `seed`; the same seed drives the batch order.
    pub fn new(
        model_cfg: ModelConfig,
        optim: OptimizerConfig,
        cfg: TrainConfig,
        corpus: &Corpus,
        seed: u64,
        deterministic: bool,
    ) -> Result<Self> {
        let model = Model::new(model_cfg, &mut Rng::new(seed))?;
        Self::with_model(model, optim, cfg, corpus, seed, deterministic)
    }

    pub fn with_model(
        model: Model<T>,
        optim: OptimizerConfig,
        cfg: TrainConfig,
        corpus: &Corpus,
        seed: u64,
        deterministic: bool,
    ) -> Result<Self> {
        cfg.validate(model.config())?;
        if corpus.vocab.len() > model.config().vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} exceeds model vocab_size {}",
                corpus.vocab.len(),
                model.config().vocab_size
            )));
        }
        let opt = AdamW::new(optim, model.params().tensors())?;
        let sampler = WindowSampler::new(corpus.train.clone(), cfg.seq_len, cfg.batch_size, seed)?;
        let freeze = model.config().freeze_theta;
        let decay_vectors = opt.config().decay_vectors;
        let specs = model.params().specs();
        let decay = specs.iter().map(|s| decay_vectors || !s.kind.is_vector()).collect();
        let active = specs.iter().map(|s| !(freeze && s.kind == ParamKind::Theta)).collect();
        Ok(Trainer {
            model,
            opt,
            sampler,
            val: corpus.val.clone(),
            bytes_per_token: corpus.bytes_per_token,
            cfg,
            seed,
            deterministic,
            step: 0,
            pending_losses: Vec::new(),
            decay,
            active,
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.opt.config().total_steps
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.opt
    }

    /// One optimiser update over `grad_accum` micro-batches.
    pub fn step(&mut self) -> Result<StepRecord> {
        let accum = self.cfg.grad_accum;
        let n_params = self.model.params().len();
        let mut grads: Vec<Vec<f64>> = self.model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let (mut loss_sum, mut ce_sum, mut aux_sum) = (0.0, 0.0, None::<f64>);
        let scale = 1.0 / accum as f64;
        for micro in 0..accum {
            let batch = self.sampler.batch_at(self.step, micro, accum);
            let mut tape = Tape::new();
            tape.set_checked(self.cfg.checked);
            let vars = self.model.bind(&mut tape);
            let fwd = self.model.forward(&mut tape, &vars, &batch.inputs, batch.batch, batch.seq)?;
            let loss = self.model.loss(&mut tape, &fwd, &batch.targets)?;
            let total = tape.value(loss.total).item()?.f64();
            if !total.is_finite() {
                return Err(Error::NonFinite { op: "loss" });
            }
            loss_sum += total;
            ce_sum += tape.value(loss.ce).item()?.f64();
            if let Some(a) = loss.aux {
                *aux_sum.get_or_insert(0.0) += tape.value(a).item()?.f64();
            }
            let g = tape.backward(loss.total)?;
            for (i, acc) in grads.iter_mut().enumerate().take(n_params) {
                if let Some(gi) = g.get(vars[i]) {
                    acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v.f64() * scale);
                }
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.opt.config().grad_clip);
        self.step += 1;
        let lr = lr_at(self.step, self.opt.config());
        self.opt
            .step(self.model.params_mut().tensors_mut(), &grads, &self.decay, &self.active, lr)?;
        let rec = StepRecord {
            step: self.step,
            loss: loss_sum * scale,
            ce: ce_sum * scale,
            aux: aux_sum.map(|a| a * scale),
            lr,
            grad_norm,
        };
        self.pending_losses.push(rec.loss);
        Ok(rec)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(
            &self.model,
            &self.val,
            self.cfg.seq_len,
            self.cfg.eval_batch,
            self.bytes_per_token,
        )
    }

    /// Evaluates and builds the metrics record for the current step.
    pub fn diagnostics(&mut self) -> Result<DiagnosticsRecord> {
        let report = self.evaluate()?;
        let drift = theta_drift(&self.model.theta_bank());
        let train_loss = if self.pending_losses.is_empty() {
            f64::NAN
        } else {
            self.pending_losses.iter().sum::<f64>() / self.pending_losses.len() as f64
        };
        self.pending_losses.clear();
        let horn_head = self
            .model
            .horn()
            .filter(|h| h.is_learnable())
            .map(|h| h.head());
        Ok(DiagnosticsRecord {
            step: self.step,
            train_loss,
            val_loss: report.val_loss,
            ppl: report.ppl,
            bpb: report.bpb,
            phase_means: report.phase_means,
            zero_sum_residual: report.zero_sum_residual,
            theta_l2_drift: drift.l2,
            theta_mean: drift.mean,
            per_pair_drift: drift.per_pair,
            phase_radii: report.phase_radii,
            horn_head,
            lr: lr_at(self.step, self.opt.config()),
            elapsed_s: if self.deterministic {
                0.0
            } else {
                self.started.elapsed().as_secs_f64()
            },
        })
    }

    /// Trains until `until` (capped at the configured total), reporting
    /// every step and every evaluation to `sink`.
    pub fn run_until(&mut self, until: u64, sink: &mut dyn FnMut(&Event) -> Result<()>) -> Result<()> {
        let until = until.min(self.total_steps());
        while self.step < until {
            let rec = self.step()?;
            sink(&Event::Step(rec))?;
            let every = self.cfg.eval_every;
            if (every > 0 && self.step % every == 0) || self.step == self.total_steps() {
                let d = self.diagnostics()?;
                sink(&Event::Eval(d))?;
            }
        }
        Ok(())
    }

    /// Parameters, Adam moments and trainer state.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = Manifest::new(self.model.config().clone(), self.step, self.model.theta_init().to_vec());
        manifest.rng = Some(Rng::new(self.seed).state());
        manifest.extra = serde_json::to_value(TrainerState {
            optimizer: self.opt.config().clone(),
            train: self.cfg.clone(),
            seed: self.seed,
            deterministic: self.deterministic,
            adam_steps: self.opt.steps(),
            pending_losses: self.pending_losses.clone(),
        })?;
        let (m, v) = self.opt.moments();
        let mut tensors = self.model.named_tensors();
        let moments: Vec<(String, Tensor<T>)> = self
            .model
            .params()
            .specs()
            .iter()
            .zip(m.iter().zip(v))
            .flat_map(|(s, (mi, vi))| {
                [
                    (format!("adam.m.{}", s.name), Tensor::from_vec(&s.shape, mi.clone())),
                    (format!("adam.v.{}", s.name), Tensor::from_vec(&s.shape, vi.clone())),
                ]
            })
            .map(|(n, t)| t.map(|t| (n, t)))
            .collect::<Result<_>>()?;
        tensors.extend(moments.iter().map(|(n, t)| (n.clone(), t)));
        checkpoint::write(dir, manifest, &tensors)
    }

    /// Restores a trainer saved by [`Trainer::save`]; the corpus must be
    /// the one it was trained on.
    pub fn resume(dir: &Path, corpus: &Corpus) -> Result<Self> {
        let (manifest, tensors) = checkpoint::read::<T>(dir)?;
        let state: TrainerState = serde_json::from_value(manifest.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))?;
        let find = |name: &str| -> Result<Tensor<T>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let specs = crate::model::layout(&manifest.config)?;
        let params = specs.iter().map(|s| find(&s.name)).collect::<Result<Vec<_>>>()?;
        let m = specs
            .iter()
            .map(|s| find(&format!("adam.m.{}", s.name)).map(Tensor::into_data))
            .collect::<Result<Vec<_>>>()?;
        let v = specs
            .iter()
            .map(|s| find(&format!("adam.v.{}", s.name)).map(Tensor::into_data))
            .collect::<Result<Vec<_>>>()?;
        let store = ParamStore::from_parts(specs, params)?;
        let model = Model::from_params(manifest.config.clone(), store, Some(manifest.theta_init.clone()))?;
        let mut t = Self::with_model(model, state.optimizer.clone(), state.train, corpus, state.seed, state.deterministic)?;
        t.opt = AdamW::from_state(state.optimizer, m, v, state.adam_steps)?;
        t.step = manifest.step;
        t.pending_losses = state.pending_losses;
        Ok(t)
    }
}
