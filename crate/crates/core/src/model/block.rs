//! Attention, feed-forward and the decoder block wiring.

use std::sync::Arc;

use super::layers::{phase_rotation, rms_norm, rope, RopeCache};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::PhaseConfig;
use crate::tensor::{Scalar, Tape, Var};

/// Tape handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm1: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub theta: Option<Var>,
    pub norm2: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Intermediate handles kept for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub normed: Var,
    pub attn_out: Var,
    pub rotated: Var,
    pub output: Var,
}

/// Causal grouped-query attention over `x: [B, T, d]`. Head `h` reads the
/// contiguous channel slice `[h·d_head, (h+1)·d_head)`; every KV head serves
/// `n_q / n_kv` consecutive query heads.
pub fn gqa_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &BlockVars,
    cfg: &ModelConfig,
    rope_cache: &Arc<RopeCache>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::invalid("attention", format!("expected [B, T, d], got {shape:?}")));
    };
    let (nq, nkv, dh) = (cfg.n_q_heads, cfg.n_kv_heads, cfg.d_head());
    let heads = |tape: &mut Tape<T>, w: Var, n: usize| -> Result<Var> {
        let p = tape.matmul(x, w)?;
        let p = tape.reshape(p, &[b, t, n, dh])?;
        tape.permute(p, &[0, 2, 1, 3])
    };
    let q = heads(tape, vars.wq, nq)?;
    let k = heads(tape, vars.wk, nkv)?;
    let v = heads(tape, vars.wv, nkv)?;
    let q = rope(tape, q, rope_cache, 0)?;
    let k = rope(tape, k, rope_cache, 0)?;
    let (k, v) = if nq == nkv {
        (k, v)
    } else {
        let r = nq / nkv;
        (tape.repeat_interleave(k, 1, r)?, tape.repeat_interleave(v, 1, r)?)
    };
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let probs = tape.softmax_last(scores, true)?;
    let o = tape.matmul(probs, v)?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[b, t, d])?;
    tape.matmul(o, vars.wo)
}

/// `W_down · (SiLU(W_gate · x) ⊙ (W_up · x))`, bias-free.
pub fn swiglu_ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gate = tape.matmul(x, w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(x, w_up)?;
    let hidden = tape.mul(gate, up)?;
    tape.matmul(hidden, w_down)
}

/// Pre-norm attention, phase rotation, pre-norm FFN.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    vars: &BlockVars,
    cfg: &ModelConfig,
    phase: &PhaseConfig,
    rope_cache: &Arc<RopeCache>,
) -> Result<BlockTrace> {
    let groups = cfg.norm_groups();
    let normed = rms_norm(tape, h, vars.norm1, groups, cfg.norm_eps)?;
    let attn = gqa_attention(tape, normed, vars, cfg, rope_cache)?;
    let attn_out = tape.add(h, attn)?;
    let rotated = match vars.theta {
        Some(theta) if cfg.has_rotation() => {
            let pr = phase_rotation(tape, attn_out, theta, phase)?;
            if cfg.residual_pr {
                tape.add(attn_out, pr)?
            } else {
                pr
            }
        }
        _ => attn_out,
    };
    let n2 = rms_norm(tape, rotated, vars.norm2, groups, cfg.norm_eps)?;
    let ffn = swiglu_ffn(tape, n2, vars.w_gate, vars.w_up, vars.w_down)?;
    let output = tape.add(rotated, ffn)?;
    Ok(BlockTrace {
        normed,
        attn_out,
        rotated,
        output,
    })
}
