use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::data::window_count;
use crate::diagnostics::{phase_balance, phase_radii};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tape};

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}

/// Bits per UTF-8 byte for a per-token loss in nats.
pub fn bits_per_byte(loss: f64, bytes_per_token: f64) -> Result<f64> {
    if !(bytes_per_token > 0.0) {
        return Err(Error::invalid("bits_per_byte", "bytes_per_token must be positive"));
    }
    Ok(loss / (LN_2 * bytes_per_token))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub val_loss: f64,
    pub ppl: f64,
    pub bpb: f64,
    pub tokens: usize,
    /// Per-phase means of the embedded stream over every position.
    pub phase_means: Vec<f64>,
    pub zero_sum_residual: f64,
    /// Per-phase radii of the last block's output.
    pub phase_radii: Vec<f64>,
    /// Per-phase radii of each block's first normalised input.
    pub block_radii: Vec<Vec<f64>>,
}

/// Mean loss over sequential non-overlapping windows covering `ids`, plus
/// phase diagnostics gathered on the same forward passes.
pub fn evaluate<T: Scalar>(model: &Model<T>, ids: &[usize], seq: usize, batch: usize, bytes_per_token: f64) -> Result<EvalReport> {
    if ids.len() < 2 {
        return Err(Error::Data("validation set needs at least two tokens".into()));
    }
    let seq = seq.min(ids.len() - 1).min(model.config().max_seq_len);
    let n_windows = window_count(ids.len(), seq);
    let phase = *model.phase_config();
    let n = phase.n_phases();
    let layers = model.config().n_layers;

    let (mut loss_sum, mut tokens, mut rows) = (0.0f64, 0usize, 0usize);
    let mut means = vec![0.0; n];
    let mut residual = 0.0;
    let mut radii_sq = vec![0.0; n];
    let mut block_sq = vec![vec![0.0; n]; layers];

    let mut w = 0;
    while w < n_windows {
        let b = batch.min(n_windows - w);
        let (mut inputs, mut targets) = (Vec::with_capacity(b * seq), Vec::with_capacity(b * seq));
        for i in w..w + b {
            inputs.extend_from_slice(&ids[i * seq..i * seq + seq]);
            targets.extend_from_slice(&ids[i * seq + 1..i * seq + seq + 1]);
        }
        w += b;

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let fwd = model.forward(&mut tape, &vars, &inputs, b, seq)?;
        let loss = model.loss(&mut tape, &fwd, &targets)?;
        let counted = targets.iter().filter(|&&t| t != crate::data::PAD_ID).count();
        loss_sum += tape.value(loss.ce).item()?.f64() * counted as f64;
        tokens += counted;

        let r = b * seq;
        let (m, res) = phase_balance(tape.value(fwd.embedded), &phase)?;
        means.iter_mut().zip(&m).for_each(|(a, v)| *a += v * r as f64);
        residual += res * r as f64;
        if let Some(last) = fwd.blocks.last() {
            let pr = phase_radii(tape.value(last.output), &phase)?;
            radii_sq.iter_mut().zip(&pr).for_each(|(a, v)| *a += v * v * r as f64);
        }
        for (acc, trace) in block_sq.iter_mut().zip(&fwd.blocks) {
            let pr = phase_radii(tape.value(trace.normed), &phase)?;
            acc.iter_mut().zip(&pr).for_each(|(a, v)| *a += v * v * r as f64);
        }
        rows += r;
    }
    if tokens == 0 {
        return Err(Error::Data("validation set has no scored tokens".into()));
    }
    let rows_f = rows as f64;
    let val_loss = loss_sum / tokens as f64;
    Ok(EvalReport {
        val_loss,
        ppl: perplexity(val_loss),
        bpb: bits_per_byte(val_loss, bytes_per_token)?,
        tokens,
        phase_means: means.into_iter().map(|v| v / rows_f).collect(),
        zero_sum_residual: residual / rows_f,
        phase_radii: radii_sq.into_iter().map(|v| (v / rows_f).sqrt()).collect(),
        block_radii: block_sq
            .into_iter()
            .map(|b| b.into_iter().map(|v| (v / rows_f).sqrt()).collect())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_identities() {
        assert!((perplexity(10f64.ln()) - 10.0).abs() < 1e-12);
        assert!((bits_per_byte(2.7765, 3.69).unwrap() - 1.0855).abs() < 5e-4);
        assert!((bits_per_byte(LN_2, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(bits_per_byte(1.0, 0.0).is_err());
    }
}
