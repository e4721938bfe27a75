//! Cyclic N-phase geometry of the residual stream.
//!
//! The model dimension is split into `N` contiguous phase blocks of
//! `d_phase = d_model / N` channels. Phase `i` carries the fixed angular
//! offset `2πi/N`. Everything here is a pure function of its arguments;
//! the differentiable versions used inside the model live in
//! [`crate::model`] and are checked against these.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseConfig {
    n_phases: usize,
    d_model: usize,
}

impl PhaseConfig {
    pub fn new(n_phases: usize, d_model: usize) -> Result<Self> {
        if n_phases == 0 || d_model == 0 {
            return Err(Error::Config(format!(
                "n_phases ({n_phases}) and d_model ({d_model}) must be positive"
            )));
        }
        if d_model % n_phases != 0 {
            return Err(Error::Config(format!(
                "n_phases = {n_phases} does not divide d_model = {d_model}"
            )));
        }
        if (d_model / n_phases) % 2 != 0 {
            return Err(Error::Config(format!(
                "d_phase = {} must be even to form Givens pairs",
                d_model / n_phases
            )));
        }
        Ok(PhaseConfig { n_phases, d_model })
    }

    pub fn n_phases(&self) -> usize {
        self.n_phases
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_phase(&self) -> usize {
        self.d_model / self.n_phases
    }

    pub fn n_pairs(&self) -> usize {
        self.d_phase() / 2
    }

    /// `2πi/N` in radians, always derived from the stored `N`.
    pub fn offset(&self, phase: usize) -> f64 {
        TAU * phase as f64 / self.n_phases as f64
    }

    pub fn offsets(&self) -> Vec<f64> {
        (0..self.n_phases).map(|i| self.offset(i)).collect()
    }

    fn check_last_dim<T: Scalar>(&self, op: &'static str, x: &Tensor<T>) -> Result<()> {
        match x.shape().last() {
            Some(&d) if d == self.d_model => Ok(()),
            _ => Err(Error::shape(op, x.shape(), &[self.d_model])),
        }
    }
}

/// Absolute-position DC profile `r(t) = 1/(t+1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HornProfile {
    values: Vec<f64>,
    learnable: bool,
}

impl HornProfile {
    pub fn fixed(max_len: usize) -> Self {
        HornProfile {
            values: (0..max_len).map(|t| 1.0 / (t as f64 + 1.0)).collect(),
            learnable: false,
        }
    }

    /// Initial values of the learnable variant, one entry per position for
    /// `max_len` positions plus one (the learnable profile's own convention).
    pub fn learnable(seq_len: usize) -> Self {
        HornProfile {
            learnable: true,
            ..Self::fixed(seq_len + 1)
        }
    }

    /// Arbitrary profile values, e.g. a trained learnable horn.
    pub fn from_values(values: Vec<f64>, learnable: bool) -> Self {
        HornProfile { values, learnable }
    }

    /// Fault-injection hook: the same profile shifted by `delta` everywhere.
    pub fn perturbed(&self, delta: f64) -> Self {
        HornProfile {
            values: self.values.iter().map(|v| v + delta).collect(),
            learnable: self.learnable,
        }
    }

    pub fn max_len(&self) -> usize {
        self.values.len()
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: usize) -> f64 {
        self.values[t]
    }

    pub fn head(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

/// Per-layer rotation angles plus the snapshot taken at initialisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaBank {
    current: Vec<Vec<f64>>,
    init: Vec<Vec<f64>>,
}

impl ThetaBank {
    /// Depth-linear initialisation for `n_layers` blocks.
    pub fn depth_linear(n_layers: usize, d_phase: usize) -> Result<Self> {
        let init = (0..n_layers)
            .map(|l| theta_init(l, n_layers, d_phase))
            .collect::<Result<Vec<_>>>()?;
        Ok(ThetaBank {
            current: init.clone(),
            init,
        })
    }

    pub fn new(current: Vec<Vec<f64>>, init: Vec<Vec<f64>>) -> Result<Self> {
        let ok = current.len() == init.len()
            && current.iter().zip(&init).all(|(c, i)| c.len() == i.len());
        if !ok {
            return Err(Error::invalid(
                "theta_bank",
                "current angles and init snapshot differ in shape",
            ));
        }
        Ok(ThetaBank { current, init })
    }

    pub fn n_layers(&self) -> usize {
        self.current.len()
    }

    pub fn current(&self) -> &[Vec<f64>] {
        &self.current
    }

    pub fn init(&self) -> &[Vec<f64>] {
        &self.init
    }

    pub fn set_layer(&mut self, layer: usize, theta: Vec<f64>) -> Result<()> {
        if layer >= self.current.len() || theta.len() != self.init[layer].len() {
            return Err(Error::invalid("theta_bank", "layer index or length mismatch"));
        }
        self.current[layer] = theta;
        Ok(())
    }
}

/// `(ℓ + 1) · π / (2L)` for every one of the `d_phase / 2` pairs.
pub fn theta_init(layer: usize, n_layers: usize, d_phase: usize) -> Result<Vec<f64>> {
    if layer >= n_layers {
        return Err(Error::invalid(
            "theta_init",
            format!("layer {layer} out of range for {n_layers} layers"),
        ));
    }
    if d_phase == 0 || d_phase % 2 != 0 {
        return Err(Error::invalid(
            "theta_init",
            format!("d_phase = {d_phase} must be positive and even"),
        ));
    }
    let value = (layer as f64 + 1.0) * PI / (2.0 * n_layers as f64);
    Ok(vec![value; d_phase / 2])
}

/// Rotates consecutive pairs `(2k, 2k+1)` of `block` in place by
/// `theta[k] + offset`.
pub fn rotate_pairs_in_place<T: Scalar>(block: &mut [T], theta: &[T], offset: T) {
    debug_assert_eq!(block.len(), 2 * theta.len());
    for (pair, &th) in block.chunks_exact_mut(2).zip(theta) {
        let (s, c) = (th + offset).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Applies `givens_rotate_pairs` to every `d_phase`-length row of `x`.
pub fn givens_rotate_pairs<T: Scalar>(x: &Tensor<T>, theta: &[T], offset: f64) -> Result<Tensor<T>> {
    let d_phase = *x.shape().last().unwrap_or(&0);
    if d_phase % 2 != 0 {
        return Err(Error::invalid(
            "givens_rotate_pairs",
            format!("odd pair dimension {d_phase}"),
        ));
    }
    if d_phase != 2 * theta.len() {
        return Err(Error::shape("givens_rotate_pairs", x.shape(), &[2 * theta.len()]));
    }
    let mut out = x.clone();
    let offset = T::of(offset);
    for row in out.data_mut().chunks_exact_mut(d_phase) {
        rotate_pairs_in_place(row, theta, offset);
    }
    Ok(out)
}

/// Per-phase channel means `μ^(i)` for every position: `[positions][N]`.
pub fn per_phase_means<T: Scalar>(x: &Tensor<T>, cfg: &PhaseConfig) -> Result<Vec<Vec<f64>>> {
    cfg.check_last_dim("per_phase_means", x)?;
    let dp = cfg.d_phase();
    Ok(x
        .data()
        .chunks_exact(cfg.d_model())
        .map(|row| {
            row.chunks_exact(dp)
                .map(|block| block.iter().map(|v| v.f64()).sum::<f64>() / dp as f64)
                .collect()
        })
        .collect())
}

/// Average of the per-phase means at each position; shape is `x`'s shape
/// without the channel axis.
pub fn cross_phase_mean<T: Scalar>(x: &Tensor<T>, cfg: &PhaseConfig) -> Result<Tensor<T>> {
    let means = per_phase_means(x, cfg)?;
    let n = cfg.n_phases() as f64;
    let data = means
        .iter()
        .map(|m| T::of(m.iter().sum::<f64>() / n))
        .collect();
    Tensor::from_vec(&x.shape()[..x.rank() - 1], data)
}

/// `x + (r(t) − μ̄)` broadcast over channels. `x` is `[.., T, d_model]`.
pub fn horn_substitute<T: Scalar>(
    x: &Tensor<T>,
    horn: &HornProfile,
    cfg: &PhaseConfig,
) -> Result<Tensor<T>> {
    cfg.check_last_dim("horn_substitute", x)?;
    if x.rank() < 2 {
        return Err(Error::invalid("horn_substitute", "input must be [.., T, d_model]"));
    }
    let seq = x.shape()[x.rank() - 2];
    if seq > horn.max_len() {
        return Err(Error::invalid(
            "horn_substitute",
            format!("sequence length {seq} exceeds horn length {}", horn.max_len()),
        ));
    }
    let d = cfg.d_model();
    let mut out = x.clone();
    for (p, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let shift = T::of(horn.value(p % seq) - mean);
        row.iter_mut().for_each(|v| *v = *v + shift);
    }
    Ok(out)
}

/// Mean over positions of `|Σ_i μ^(i)|`.
pub fn zero_sum_residual<T: Scalar>(x: &Tensor<T>, cfg: &PhaseConfig) -> Result<f64> {
    let means = per_phase_means(x, cfg)?;
    if means.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = means.iter().map(|m| m.iter().sum::<f64>().abs()).sum();
    Ok(total / means.len() as f64)
}

/// Mean over positions of `(Σ_i μ^(i))²`, unweighted.
pub fn aux_zero_sum_loss<T: Scalar>(x: &Tensor<T>, cfg: &PhaseConfig) -> Result<f64> {
    let means = per_phase_means(x, cfg)?;
    if means.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = means.iter().map(|m| m.iter().sum::<f64>().powi(2)).sum();
    Ok(total / means.len() as f64)
}

/// `H_T = Σ_{k=1..T} 1/k`, summed smallest term first in `f64`.
pub fn harmonic(t: usize) -> f64 {
    (1..=t).rev().map(|k| 1.0 / k as f64).sum()
}

/// `N · H_T / T`: the zero-sum residual forced by horn substitution over a
/// full window of `T` positions.
///
/// # Panics
/// If either argument is zero.
pub fn analytic_pinned_residual(n_phases: usize, seq_len: usize) -> f64 {
    assert!(n_phases >= 1 && seq_len >= 1, "N and T must be at least 1");
    n_phases as f64 * harmonic(seq_len) / seq_len as f64
}
