//! Model layers with hand-written vector-Jacobian products, recorded on the
//! tape as custom ops.

use crate::error::{Error, Result};
use crate::geometry::{rotate_pairs_in_place, PhaseConfig};
use crate::tensor::{CustomOp, Scalar, Tape, Tensor, Var};

// ── grouped RMSNorm ─────────────────────────────────────────────────

struct GroupedRmsNorm {
    groups: usize,
    eps: f64,
}

fn group_inv_rms<T: Scalar>(block: &[T], eps: f64) -> f64 {
    let ms = block.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / block.len() as f64;
    1.0 / (ms + eps).sqrt()
}

fn rms_norm_forward<T: Scalar>(x: &Tensor<T>, gain: &[T], groups: usize, eps: f64) -> Result<Tensor<T>> {
    let d = gain.len();
    if x.shape().last() != Some(&d) || d % groups != 0 {
        return Err(Error::shape("rms_norm", x.shape(), &[d]));
    }
    let w = d / groups;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for (gi, block) in row.chunks_exact_mut(w).enumerate() {
            let inv = T::of(group_inv_rms(block, eps));
            for (v, &g) in block.iter_mut().zip(&gain[gi * w..]) {
                *v = g * (*v * inv);
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> CustomOp<T> for GroupedRmsNorm {
    fn name(&self) -> &'static str {
        "rms_norm"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (x, gain) = (inputs[0], inputs[1].data());
        let d = gain.len();
        let w = d / self.groups;
        let mut dx = vec![T::zero(); x.len()];
        let mut dg = vec![0.0f64; d];
        for ((row, gy), dxr) in x
            .data()
            .chunks_exact(d)
            .zip(grad.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
        {
            for gi in 0..self.groups {
                let r = gi * w..(gi + 1) * w;
                let (xb, gyb, dxb) = (&row[r.clone()], &gy[r.clone()], &mut dxr[r.clone()]);
                let inv = group_inv_rms(xb, self.eps);
                // dot = mean_k (g_k dy_k x̂_k)
                let mut dot = 0.0f64;
                for k in 0..w {
                    let xh = xb[k].f64() * inv;
                    let gdy = gain[gi * w + k].f64() * gyb[k].f64();
                    dg[gi * w + k] += gyb[k].f64() * xh;
                    dot += gdy * xh;
                }
                dot /= w as f64;
                for k in 0..w {
                    let xh = xb[k].f64() * inv;
                    let gdy = gain[gi * w + k].f64() * gyb[k].f64();
                    dxb[k] = T::of(inv * (gdy - xh * dot));
                }
            }
        }
        Ok(vec![Some(dx), Some(dg.into_iter().map(T::of).collect())])
    }
}

/// RMS normalisation applied independently to `groups` contiguous channel
/// blocks of width `d / groups`, scaled by `gain`. One group is the ordinary
/// global RMSNorm.
pub fn rms_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, groups: usize, eps: f64) -> Result<Var> {
    if groups == 0 || !(eps > 0.0) {
        return Err(Error::invalid("rms_norm", "groups and eps must be positive"));
    }
    let out = rms_norm_forward(tape.value(x), tape.value(gain).data(), groups, eps)?;
    tape.custom(&[x, gain], out, Box::new(GroupedRmsNorm { groups, eps }))
}

// ── phase rotation ──────────────────────────────────────────────────

struct PhaseRotation {
    cfg: PhaseConfig,
}

fn rotate_phases<T: Scalar>(x: &mut [T], theta: &[T], cfg: &PhaseConfig, sign: f64) {
    let dp = cfg.d_phase();
    let theta: Vec<T> = theta.iter().map(|&t| T::of(sign) * t).collect();
    let offsets: Vec<T> = cfg.offsets().iter().map(|&o| T::of(sign * o)).collect();
    for row in x.chunks_exact_mut(cfg.d_model()) {
        for (block, &off) in row.chunks_exact_mut(dp).zip(&offsets) {
            rotate_pairs_in_place(block, &theta, off);
        }
    }
}

impl<T: Scalar> CustomOp<T> for PhaseRotation {
    fn name(&self) -> &'static str {
        "phase_rotation"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let theta = inputs[1].data();
        // orthogonal map: Rᵀ g is the rotation by the negated angles
        let mut dx = grad.to_vec();
        rotate_phases(&mut dx, theta, &self.cfg, -1.0);
        // ∂(out₀, out₁)/∂θ_k = (−out₁, out₀)
        let mut dtheta = vec![0.0f64; theta.len()];
        for (i, (o, g)) in output
            .data()
            .chunks_exact(2)
            .zip(grad.chunks_exact(2))
            .enumerate()
        {
            let k = i % theta.len();
            dtheta[k] += g[1].f64() * o[0].f64() - g[0].f64() * o[1].f64();
        }
        Ok(vec![Some(dx), Some(dtheta.into_iter().map(T::of).collect())])
    }
}

/// Rotates every phase block of `h` by `theta + 2πi/N`.
pub fn phase_rotation<T: Scalar>(tape: &mut Tape<T>, h: Var, theta: Var, cfg: &PhaseConfig) -> Result<Var> {
    let x = tape.value(h);
    if x.shape().last() != Some(&cfg.d_model()) {
        return Err(Error::shape("phase_rotation", x.shape(), &[cfg.d_model()]));
    }
    if tape.value(theta).len() != cfg.n_pairs() {
        return Err(Error::shape("phase_rotation", tape.shape(theta), &[cfg.n_pairs()]));
    }
    let mut out = x.clone();
    rotate_phases(out.data_mut(), tape.value(theta).data(), cfg, 1.0);
    tape.custom(&[h, theta], out, Box::new(PhaseRotation { cfg: *cfg }))
}

/// Inverse of [`phase_rotation`] on plain values.
pub fn unrotate_phases<T: Scalar>(h: &Tensor<T>, theta: &[T], cfg: &PhaseConfig) -> Tensor<T> {
    let mut out = h.clone();
    rotate_phases(out.data_mut(), theta, cfg, -1.0);
    out
}

// ── rotary position embedding ───────────────────────────────────────

/// Per-position cosines and sines of `p · base^(−2j/d_head)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeCache {
    d_head: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeCache {
    pub fn new(d_head: usize, max_len: usize, base: f64) -> Result<Self> {
        if d_head == 0 || d_head % 2 != 0 {
            return Err(Error::invalid("rope", format!("d_head = {d_head} must be even")));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for p in 0..max_len {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / d_head as f64);
                let (s, c) = (p as f64 * freq).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(RopeCache { d_head, cos, sin })
    }

    pub fn max_len(&self) -> usize {
        self.cos.len() / (self.d_head / 2)
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Half-split rotation of every `[.., T, d_head]` row, position
    /// `start + t`; `sign = -1` applies the inverse.
    fn rotate<T: Scalar>(&self, data: &mut [T], seq: usize, start: usize, sign: f64) {
        let half = self.d_head / 2;
        for (r, row) in data.chunks_exact_mut(self.d_head).enumerate() {
            let p = start + r % seq;
            let (c, s) = (&self.cos[p * half..(p + 1) * half], &self.sin[p * half..(p + 1) * half]);
            let (lo, hi) = row.split_at_mut(half);
            for j in 0..half {
                let (cj, sj) = (T::of(c[j]), T::of(sign * s[j]));
                let (a, b) = (lo[j], hi[j]);
                lo[j] = a * cj - b * sj;
                hi[j] = b * cj + a * sj;
            }
        }
    }

    /// Plain-value rotation of `x` (`[.., T, d_head]`) for positions
    /// `start..start + T`.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, start: usize) -> Result<Tensor<T>> {
        let seq = self.check(x.shape(), start)?;
        let mut out = x.clone();
        self.rotate(out.data_mut(), seq, start, 1.0);
        Ok(out)
    }

    fn check(&self, shape: &[usize], start: usize) -> Result<usize> {
        if shape.len() < 2 || shape[shape.len() - 1] != self.d_head {
            return Err(Error::shape("rope", shape, &[self.d_head]));
        }
        let seq = shape[shape.len() - 2];
        if start + seq > self.max_len() {
            return Err(Error::invalid(
                "rope",
                format!("positions up to {} exceed cache of {}", start + seq, self.max_len()),
            ));
        }
        Ok(seq)
    }
}

struct Rope {
    cache: std::sync::Arc<RopeCache>,
    seq: usize,
    start: usize,
}

impl<T: Scalar> CustomOp<T> for Rope {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let mut dx = grad.to_vec();
        self.cache.rotate(&mut dx, self.seq, self.start, -1.0);
        Ok(vec![Some(dx)])
    }
}

/// Differentiable RoPE on `[.., T, d_head]`.
pub fn rope<T: Scalar>(tape: &mut Tape<T>, x: Var, cache: &std::sync::Arc<RopeCache>, start: usize) -> Result<Var> {
    let out = cache.apply(tape.value(x), start)?;
    let seq = tape.shape(x)[tape.shape(x).len() - 2];
    let op = Rope {
        cache: cache.clone(),
        seq,
        start,
    };
    tape.custom(&[x], out, Box::new(op))
}
