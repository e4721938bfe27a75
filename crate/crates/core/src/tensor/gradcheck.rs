//! Central finite-difference gradient checking.
//!
//! The oracle only evaluates the forward function, so it is independent of
//! the tape's backward rules it is used to check.

use crate::error::Result;

/// Denominator floor of [`relative_error`]; keeps gradients that are zero up
/// to rounding from producing meaningless ratios.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.probes.is_empty() && self.probes.iter().all(|p| p.rel_err < tol)
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for one coordinate.
pub fn central_difference(
    f: &mut impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    index: usize,
    h: f64,
) -> Result<f64> {
    let mut xp = x.to_vec();
    xp[index] += h;
    let fp = f(&xp)?;
    xp[index] = x[index] - h;
    let fm = f(&xp)?;
    Ok((fp - fm) / (2.0 * h))
}

/// Compares `analytic[i]` with central differences of `f` at each index.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let mut probes = Vec::with_capacity(indices.len());
    for &index in indices {
        let numeric = central_difference(&mut f, x, index, h)?;
        probes.push(Probe {
            index,
            analytic: analytic[index],
            numeric,
            rel_err: relative_error(analytic[index], numeric),
        });
    }
    Ok(GradCheckReport { probes })
}
