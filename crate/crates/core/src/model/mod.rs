//! The phase-partitioned decoder and its matched baseline.

mod block;
pub mod checkpoint;
mod config;
pub mod layers;
mod params;

use std::sync::Arc;

pub use block::{block_forward, gqa_attention, swiglu_ffn, BlockTrace, BlockVars};
pub use config::ModelConfig;
pub use layers::RopeCache;
pub use params::{count_params, layout, ParamKind, ParamSpec, ParamStore};

use crate::error::{Error, Result};
use crate::geometry::{HornProfile, PhaseConfig, ThetaBank};
use crate::tensor::{CustomOp, Rng, Scalar, Tape, Tensor, Var};

/// Handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Weighted zero-sum penalty, present when `use_aux_loss` is set.
    pub aux: Option<Var>,
    pub embedded: Var,
    pub blocks: Vec<BlockTrace>,
    pub final_normed: Var,
}

/// Handles produced by [`Model::loss`].
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub total: Var,
    pub ce: Var,
    pub aux: Option<Var>,
}

struct Embedded {
    output: Var,
    /// Stream entering the mean subtraction / horn substitution.
    pre_dc: Var,
    /// `[seq, 1]` horn column when injected.
    horn_col: Option<Var>,
}

/// `coef · mean_rows (Σ_i μ_i)²` where every row mean of the stream is
/// fixed by centering and horn substitution. The stream gradient is a
/// per-row constant, so its projection through the centering is formed
/// in f64 before rounding; the horn column receives the row sums.
struct PinnedZeroSum {
    sums: Vec<f64>,
    coef: f64,
    d_model: usize,
    d_phase: usize,
    seq: usize,
}

impl<T: Scalar> CustomOp<T> for PinnedZeroSum {
    fn name(&self) -> &'static str {
        "pinned_zero_sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let g = grad[0].f64();
        let rows = self.sums.len() as f64;
        let d = self.d_model;
        let mut dx = Vec::with_capacity(inputs[0].len());
        let mut dr = vec![0.0f64; self.seq];
        for (r, s) in self.sums.iter().enumerate() {
            let k = g * self.coef * 2.0 * s / (rows * self.d_phase as f64);
            let mean = (0..d).map(|_| k).sum::<f64>() / d as f64;
            dx.extend(std::iter::repeat(T::of(k - mean)).take(d));
            dr[r % self.seq] += k * d as f64;
        }
        let mut out = vec![Some(dx)];
        if inputs.len() > 1 {
            out.push(Some(dr.into_iter().map(T::of).collect()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    phase: PhaseConfig,
    params: ParamStore<T>,
    theta_init: Vec<Vec<f64>>,
    horn: Option<HornProfile>,
    rope: Arc<RopeCache>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = ParamStore::init(&cfg, rng)?;
        Self::from_params(cfg, params, None)
    }

    /// Wraps existing parameters. `theta_init` defaults to the current
    /// angles when absent.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>, theta_init: Option<Vec<Vec<f64>>>) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(&cfg)?;
        if params.specs() != expected.as_slice() {
            return Err(Error::Config("parameter layout does not match the configuration".into()));
        }
        let phase = cfg.phase_config()?;
        let current: Vec<Vec<f64>> = (0..cfg.n_layers)
            .filter_map(|l| params.theta(l).map(|t| t.to_f64()))
            .collect();
        let theta_init = theta_init.unwrap_or_else(|| current.clone());
        ThetaBank::new(current, theta_init.clone())?;
        let horn = (cfg.horn_inject && !cfg.learnable_horn).then(|| HornProfile::fixed(cfg.max_seq_len));
        let rope = Arc::new(RopeCache::new(cfg.d_head(), cfg.max_seq_len, cfg.rope_base)?);
        Ok(Model {
            cfg,
            phase,
            params,
            theta_init,
            horn,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn phase_config(&self) -> &PhaseConfig {
        &self.phase
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn rope_cache(&self) -> &Arc<RopeCache> {
        &self.rope
    }

    /// The horn currently injected: the fixed buffer, or the learnable
    /// parameter's values.
    pub fn horn(&self) -> Option<HornProfile> {
        if self.cfg.learnable_horn {
            let p = self.params.get("horn.profile")?;
            return Some(HornProfile::from_values(p.to_f64(), true));
        }
        self.horn.clone()
    }

    /// Replaces the fixed horn buffer. Intended for fault injection.
    pub fn set_fixed_horn(&mut self, horn: HornProfile) -> Result<()> {
        if self.horn.is_none() {
            return Err(Error::Config("model has no fixed horn".into()));
        }
        if horn.max_len() < self.cfg.max_seq_len {
            return Err(Error::Config("horn shorter than max_seq_len".into()));
        }
        self.horn = Some(horn);
        Ok(())
    }

    pub fn theta_bank(&self) -> ThetaBank {
        let current = (0..self.cfg.n_layers)
            .filter_map(|l| self.params.theta(l).map(|t| t.to_f64()))
            .collect();
        ThetaBank::new(current, self.theta_init.clone()).expect("shapes fixed at construction")
    }

    pub fn theta_init(&self) -> &[Vec<f64>] {
        &self.theta_init
    }

    /// Records every parameter as a tape leaf, in layout order. Frozen
    /// angles are recorded as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .specs()
            .iter()
            .zip(self.params.tensors())
            .map(|(spec, t)| {
                if spec.kind == ParamKind::Theta && self.cfg.freeze_theta {
                    tape.constant(t.clone())
                } else {
                    tape.param(t.clone())
                }
            })
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::invalid("model", format!("missing parameter {name}")))
    }

    fn block_vars(&self, vars: &[Var], l: usize) -> Result<BlockVars> {
        let v = |s: &str| self.var(vars, &format!("blocks.{l}.{s}"));
        Ok(BlockVars {
            norm1: v("norm1.weight")?,
            wq: v("attn.wq")?,
            wk: v("attn.wk")?,
            wv: v("attn.wv")?,
            wo: v("attn.wo")?,
            theta: v("rotation.theta").ok(),
            norm2: v("norm2.weight")?,
            w_gate: v("ffn.w_gate")?,
            w_up: v("ffn.w_up")?,
            w_down: v("ffn.w_down")?,
        })
    }

    /// Token lookup followed by the configured DC handling: optional
    /// `√d` scaling, mean subtraction, then horn substitution.
    pub fn embed(&self, tape: &mut Tape<T>, vars: &[Var], tokens: &[usize], batch: usize, seq: usize) -> Result<Var> {
        Ok(self.embed_parts(tape, vars, tokens, batch, seq)?.output)
    }

    fn embed_parts(&self, tape: &mut Tape<T>, vars: &[Var], tokens: &[usize], batch: usize, seq: usize) -> Result<Embedded> {
        if batch * seq != tokens.len() || seq == 0 {
            return Err(Error::invalid(
                "embed",
                format!("{} tokens for batch {batch} × seq {seq}", tokens.len()),
            ));
        }
        if seq > self.cfg.max_seq_len {
            return Err(Error::invalid(
                "embed",
                format!("sequence length {seq} exceeds max_seq_len {}", self.cfg.max_seq_len),
            ));
        }
        let table = self.var(vars, "embed.weight")?;
        let mut x = tape.embedding(table, tokens, &[batch, seq])?;
        if self.cfg.scale_embedding {
            x = tape.scale(x, (self.cfg.d_model as f64).sqrt())?;
        }
        let pre_dc = x;
        let mut horn_col = None;
        if self.cfg.zero_mean_enforce {
            let m = tape.mean_last(x, true)?;
            x = tape.sub(x, m)?;
        }
        if self.cfg.horn_inject {
            let r = if self.cfg.learnable_horn {
                let p = self.var(vars, "horn.profile")?;
                let head = tape.slice(p, 0, 0, seq)?;
                tape.reshape(head, &[seq, 1])?
            } else {
                let horn = self.horn.as_ref().expect("fixed horn present");
                tape.constant(Tensor::from_f64(&[seq, 1], &horn.values()[..seq])?)
            };
            horn_col = Some(r);
            let m = tape.mean_last(x, true)?;
            let shift = tape.sub(r, m)?;
            x = tape.add(x, shift)?;
        }
        Ok(Embedded {
            output: x,
            pre_dc,
            horn_col,
        })
    }

    /// Weighted penalty on an embedded stream whose row means are pinned
    /// by the DC handling, differentiated through that handling as one op.
    fn pinned_penalty(&self, tape: &mut Tape<T>, e: &Embedded) -> Result<Var> {
        let (n, dp, d) = (self.phase.n_phases(), self.phase.d_phase(), self.phase.d_model());
        let sums: Vec<f64> = tape
            .value(e.output)
            .data()
            .chunks_exact(d)
            .map(|row| {
                row.chunks_exact(dp)
                    .map(|b| b.iter().map(|v| v.f64()).sum::<f64>() / dp as f64)
                    .sum()
            })
            .collect();
        let value = self.cfg.aux_coef * sums.iter().map(|s| s * s).sum::<f64>() / sums.len() as f64;
        let mut inputs = vec![e.pre_dc];
        inputs.extend(e.horn_col);
        let op = PinnedZeroSum {
            sums,
            coef: self.cfg.aux_coef,
            d_model: d,
            d_phase: dp,
            seq: tape.shape(e.output)[tape.shape(e.output).len() - 2],
        };
        debug_assert!(n * dp == d);
        tape.custom(&inputs, Tensor::scalar(T::of(value)), Box::new(op))
    }

    /// Unweighted mean over positions of the squared sum of phase means.
    pub fn zero_sum_penalty(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let mut split = shape[..shape.len() - 1].to_vec();
        split.extend([self.phase.n_phases(), self.phase.d_phase()]);
        let blocks = tape.reshape(x, &split)?;
        let means = tape.mean_last(blocks, false)?;
        let sums = tape.sum_last(means, false)?;
        let sq = tape.square(sums)?;
        tape.mean(sq)
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], tokens: &[usize], batch: usize, seq: usize) -> Result<Forward> {
        let parts = self.embed_parts(tape, vars, tokens, batch, seq)?;
        let embedded = parts.output;
        let aux = match (self.cfg.use_aux_loss, self.cfg.zero_mean_enforce || self.cfg.horn_inject) {
            (false, _) => None,
            (true, true) => Some(self.pinned_penalty(tape, &parts)?),
            (true, false) => {
                let p = self.zero_sum_penalty(tape, embedded)?;
                Some(tape.scale(p, self.cfg.aux_coef)?)
            }
        };
        let mut h = embedded;
        let mut blocks = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let bv = self.block_vars(vars, l)?;
            let trace = block_forward(tape, h, &bv, &self.cfg, &self.phase, &self.rope)?;
            h = trace.output;
            blocks.push(trace);
        }
        let gain = self.var(vars, "final_norm.weight")?;
        let final_normed = layers::rms_norm(tape, h, gain, self.cfg.norm_groups(), self.cfg.norm_eps)?;
        let head = self.var(vars, "lm_head.weight")?;
        let logits = tape.matmul(final_normed, head)?;
        Ok(Forward {
            logits,
            aux,
            embedded,
            blocks,
            final_normed,
        })
    }

    /// Cross-entropy (pad id 0 ignored) plus the aux term when enabled.
    pub fn loss(&self, tape: &mut Tape<T>, fwd: &Forward, targets: &[usize]) -> Result<Loss> {
        let ce = tape.cross_entropy(fwd.logits, targets, Some(crate::data::PAD_ID))?;
        let total = match fwd.aux {
            Some(aux) => tape.add(ce, aux)?,
            None => ce,
        };
        Ok(Loss {
            total,
            ce,
            aux: fwd.aux,
        })
    }

    /// Logits `[batch, seq, vocab]` on a fresh tape.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let fwd = self.forward(&mut tape, &vars, tokens, batch, seq)?;
        Ok(tape.value(fwd.logits).clone())
    }
}
