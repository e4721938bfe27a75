//! Measurements of the phase structure: angle drift, phase balance and
//! per-phase activation radii.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{harmonic, per_phase_means, zero_sum_residual, PhaseConfig, ThetaBank};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThetaDrift {
    /// `‖θ − θ_init‖₂` per layer.
    pub l2: Vec<f64>,
    /// Mean angle per layer.
    pub mean: Vec<f64>,
    /// `|θ_k − θ_init,k|`, layer × pair.
    pub per_pair: Vec<Vec<f64>>,
}

impl ThetaDrift {
    /// Root-mean-square drift per angle of each layer.
    pub fn per_theta_rms(&self) -> Vec<f64> {
        self.l2
            .iter()
            .zip(&self.per_pair)
            .map(|(l2, p)| l2 / (p.len().max(1) as f64).sqrt())
            .collect()
    }
}

pub fn theta_drift(bank: &ThetaBank) -> ThetaDrift {
    let mut out = ThetaDrift::default();
    for (cur, init) in bank.current().iter().zip(bank.init()) {
        let pair: Vec<f64> = cur.iter().zip(init).map(|(c, i)| (c - i).abs()).collect();
        out.l2.push(pair.iter().map(|d| d * d).sum::<f64>().sqrt());
        out.mean.push(cur.iter().sum::<f64>() / cur.len().max(1) as f64);
        out.per_pair.push(pair);
    }
    out
}

/// Per-phase channel means averaged over every position, and the mean
/// absolute cross-phase sum.
pub fn phase_balance<T: Scalar>(x: &Tensor<T>, cfg: &PhaseConfig) -> Result<(Vec<f64>, f64)> {
    let means = per_phase_means(x, cfg)?;
    let n = means.len().max(1) as f64;
    let mut avg = vec![0.0; cfg.n_phases()];
    for m in &means {
        avg.iter_mut().zip(m).for_each(|(a, v)| *a += v);
    }
    avg.iter_mut().for_each(|a| *a /= n);
    Ok((avg, zero_sum_residual(x, cfg)?))
}

/// Measured phase means with the horn's analytic share `H_T / T` removed.
pub fn intrinsic_balance(phase_means: &[f64], seq_len: usize) -> Vec<f64> {
    let horn = harmonic(seq_len) / seq_len as f64;
    phase_means.iter().map(|m| m - horn).collect()
}

/// Quadratic mean over positions of each phase block's L2 norm, so the
/// radii combine to the full-width radius by Pythagoras.
pub fn phase_radii<T: Scalar>(h: &Tensor<T>, cfg: &PhaseConfig) -> Result<Vec<f64>> {
    if h.shape().last() != Some(&cfg.d_model()) {
        return Err(Error::shape("phase_radii", h.shape(), &[cfg.d_model()]));
    }
    let mut sq = vec![0.0f64; cfg.n_phases()];
    let mut rows = 0usize;
    for row in h.data().chunks_exact(cfg.d_model()) {
        rows += 1;
        for (s, block) in sq.iter_mut().zip(row.chunks_exact(cfg.d_phase())) {
            *s += block.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        }
    }
    Ok(sq.into_iter().map(|s| (s / rows.max(1) as f64).sqrt()).collect())
}

/// Full-width counterpart of [`phase_radii`].
pub fn full_radius<T: Scalar>(h: &Tensor<T>, d_model: usize) -> f64 {
    let rows = (h.len() / d_model.max(1)).max(1);
    (h.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>() / rows as f64).sqrt()
}

/// Relative spread `(max − min) / mean` of a set of radii.
pub fn radius_spread(radii: &[f64]) -> f64 {
    let max = radii.iter().copied().fold(f64::MIN, f64::max);
    let min = radii.iter().copied().fold(f64::MAX, f64::min);
    let mean = radii.iter().sum::<f64>() / radii.len().max(1) as f64;
    if mean == 0.0 {
        0.0
    } else {
        (max - min) / mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub csv: String,
    pub svg: String,
    /// `(layer, pair)` of each row's maximum, for rows whose maximum
    /// exceeds the threshold.
    pub marked: Vec<(usize, usize)>,
}

/// CSV `(layer, pair, drift)` rows and an SVG grid, one row per layer.
pub fn heatmap(per_pair: &[Vec<f64>], threshold: f64) -> Heatmap {
    let mut csv = String::from("layer,pair,drift\n");
    let mut marked = Vec::new();
    for (l, row) in per_pair.iter().enumerate() {
        for (k, d) in row.iter().enumerate() {
            let _ = writeln!(csv, "{l},{k},{d}");
        }
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)));
        if let Some((k, &d)) = arg {
            if d > threshold {
                marked.push((l, k));
            }
        }
    }

    let cell = 14.0;
    let cols = per_pair.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = (60.0 + cols as f64 * cell, 30.0 + per_pair.len() as f64 * cell);
    let max = per_pair.iter().flatten().copied().fold(0.0f64, f64::max);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"10\">\n"
    );
    for (l, row) in per_pair.iter().enumerate() {
        let y = 20.0 + l as f64 * cell;
        let _ = writeln!(svg, "<text x=\"4\" y=\"{}\">L{l}</text>", y + 10.0);
        for (k, d) in row.iter().enumerate() {
            let shade = if max > 0.0 { 255.0 - 255.0 * d / max } else { 255.0 };
            let s = shade.round() as u8;
            let _ = writeln!(
                svg,
                "<rect x=\"{}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb(255,{s},{s})\" stroke=\"#ccc\"/>",
                40.0 + k as f64 * cell
            );
        }
    }
    for &(l, k) in &marked {
        let _ = writeln!(
            svg,
            "<rect class=\"max\" x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>",
            40.0 + k as f64 * cell,
            20.0 + l as f64 * cell
        );
    }
    svg.push_str("</svg>\n");
    Heatmap { csv, svg, marked }
}

/// Writes `theta_drift.csv` and `theta_drift.svg` into `dir`.
pub fn export_heatmap(per_pair: &[Vec<f64>], threshold: f64, dir: &Path) -> Result<Heatmap> {
    let hm = heatmap(per_pair, threshold);
    for (name, body) in [("theta_drift.csv", &hm.csv), ("theta_drift.svg", &hm.svg)] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(hm)
}
