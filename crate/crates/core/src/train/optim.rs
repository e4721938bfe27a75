use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn default_lr() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Also decay 1-D parameters (norm gains, angles, learnable horn).
    #[serde(default)]
    pub decay_vectors: bool,
    #[serde(default)]
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

impl OptimizerConfig {
    pub fn new(total_steps: u64) -> Self {
        OptimizerConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_wd(),
            decay_vectors: false,
            warmup_steps: 0,
            total_steps,
            grad_clip: default_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return fail(format!("betas must lie in (0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return fail("lr, eps and grad_clip must be positive and weight_decay non-negative".into());
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return fail(format!(
                "need 0 < total_steps and warmup_steps ≤ total_steps, got {} / {}",
                self.warmup_steps, self.total_steps
            ));
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Bias-corrected Adam with decoupled weight decay. Moments are stored in
/// the parameter dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar> {
    cfg: OptimizerConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimizerConfig, params: &[Tensor<T>]) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            cfg,
            t: 0,
        })
    }

    pub fn from_state(cfg: OptimizerConfig, m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: u64) -> Result<Self> {
        cfg.validate()?;
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Checkpoint("moment buffers differ in shape".into()));
        }
        Ok(AdamW { cfg, m, v, t })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// One update. `decay[i]` selects weight decay for parameter `i`;
    /// parameters with `active[i] == false` are left untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<f64>], decay: &[bool], active: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid("adamw", "parameter count changed"));
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            let wd = if decay[i] { self.cfg.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if g.len() != p.len() {
                return Err(Error::invalid("adamw", "gradient extent mismatch"));
            }
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let mj = T::of(b1 * m[j].f64() + (1.0 - b1) * g[j]);
                let vj = T::of(b2 * v[j].f64() + (1.0 - b2) * g[j] * g[j]);
                m[j] = mj;
                v[j] = vj;
                let mhat = mj.f64() / bc1;
                let vhat = vj.f64() / bc2;
                let mut x = w.f64();
                x -= lr * wd * x;
                x -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                *w = T::of(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(warmup: u64, total: u64) -> OptimizerConfig {
        OptimizerConfig {
            warmup_steps: warmup,
            ..OptimizerConfig::new(total)
        }
    }

    #[test]
    fn schedule_points() {
        let c = sched(10, 110);
        assert_eq!(lr_at(10, &c), c.lr);
        assert!(lr_at(110, &c).abs() < 1e-20);
        assert!((lr_at(60, &c) - 0.5 * c.lr).abs() < 1e-18);
        assert_eq!(lr_at(0, &c), 0.0);
    }

    #[test]
    fn schedule_monotone() {
        let c = sched(20, 200);
        for s in 0..20 {
            assert!(lr_at(s + 1, &c) > lr_at(s, &c));
        }
        for s in 20..200 {
            assert!(lr_at(s + 1, &c) < lr_at(s, &c));
        }
    }

    #[test]
    fn single_step_oracle() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimizerConfig::new(10)
        };
        let mut p = vec![Tensor::<f64>::zeros(&[1])];
        let mut opt = AdamW::new(cfg, &p).unwrap();
        opt.step(&mut p, &[vec![1.0]], &[true], &[true], 0.1).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_grads_leave_params() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::new(10)
        };
        let mut p = vec![Tensor::<f32>::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut opt = AdamW::new(cfg, &p).unwrap();
        opt.step(&mut p, &[vec![0.0; 3]], &[true], &[true], 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decay_is_decoupled_and_selective() {
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::new(10)
        };
        let mut p = vec![Tensor::<f64>::ones(&[1]), Tensor::<f64>::ones(&[1])];
        let mut opt = AdamW::new(cfg, &p).unwrap();
        opt.step(&mut p, &[vec![0.0], vec![0.0]], &[true, false], &[true, true], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p[1].data()[0], 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![6.0, 8.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 10.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.3]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.3);
    }

    #[test]
    fn config_checks() {
        assert!(sched(20, 10).validate().is_err());
        let bad = OptimizerConfig {
            beta2: 1.0,
            ..OptimizerConfig::new(10)
        };
        assert!(bad.validate().is_err());
    }
}
