use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PhaseConfig;

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_aux_coef() -> f64 {
    0.01
}

fn default_init_std() -> f64 {
    0.02
}

fn default_true() -> bool {
    true
}

/// Architecture and feature flags. `baseline_mode` turns the model into the
/// matched RoPE-only reference: global RMSNorm, no rotation, no horn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_phases: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_true")]
    pub horn_inject: bool,
    #[serde(default)]
    pub zero_mean_enforce: bool,
    #[serde(default)]
    pub use_aux_loss: bool,
    #[serde(default = "default_aux_coef")]
    pub aux_coef: f64,
    #[serde(default)]
    pub residual_pr: bool,
    #[serde(default)]
    pub learnable_horn: bool,
    #[serde(default)]
    pub scale_embedding: bool,
    #[serde(default)]
    pub baseline_mode: bool,
    /// Keeps the rotation angles at their initial values.
    #[serde(default)]
    pub freeze_theta: bool,
}

impl ModelConfig {
    /// The desk-scale 3PT configuration: d=192, 4 layers, 6Q/3KV, N=3.
    pub fn small(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 192,
            n_layers: 4,
            n_phases: 3,
            n_q_heads: 6,
            n_kv_heads: 3,
            d_ff: 512,
            max_seq_len,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
            init_std: default_init_std(),
            horn_inject: true,
            zero_mean_enforce: false,
            use_aux_loss: false,
            aux_coef: default_aux_coef(),
            residual_pr: false,
            learnable_horn: false,
            scale_embedding: false,
            baseline_mode: false,
            freeze_theta: false,
        }
    }

    /// The 768-wide, 12-layer shape with 12Q/3KV heads.
    pub fn large(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            d_model: 768,
            n_layers: 12,
            n_q_heads: 12,
            n_kv_heads: 3,
            d_ff: 2048,
            ..Self::small(vocab_size, max_seq_len)
        }
    }

    /// The matched RoPE-only baseline with the same dimensions.
    pub fn to_baseline(&self) -> Self {
        ModelConfig {
            baseline_mode: true,
            horn_inject: false,
            learnable_horn: false,
            residual_pr: false,
            zero_mean_enforce: false,
            use_aux_loss: false,
            scale_embedding: true,
            ..self.clone()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_q_heads.max(1)
    }

    pub fn phase_config(&self) -> Result<PhaseConfig> {
        PhaseConfig::new(self.n_phases, self.d_model)
    }

    pub fn has_rotation(&self) -> bool {
        !self.baseline_mode
    }

    /// Phase groups used by the norms; the baseline normalises globally.
    pub fn norm_groups(&self) -> usize {
        if self.baseline_mode {
            1
        } else {
            self.n_phases
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_phases", self.n_phases),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_q_heads != 0 {
            return fail(format!(
                "n_q_heads = {} does not divide d_model = {}",
                self.n_q_heads, self.d_model
            ));
        }
        if self.d_head() % 2 != 0 {
            return fail(format!("d_head = {} must be even for RoPE", self.d_head()));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_kv_heads = {} does not divide n_q_heads = {}",
                self.n_kv_heads, self.n_q_heads
            ));
        }
        self.phase_config()?;
        if !self.baseline_mode {
            if self.n_q_heads % self.n_phases != 0 || self.n_kv_heads % self.n_phases != 0 {
                return fail(format!(
                    "n_phases = {} must divide n_q_heads = {} and n_kv_heads = {}",
                    self.n_phases, self.n_q_heads, self.n_kv_heads
                ));
            }
        } else if self.horn_inject || self.learnable_horn || self.residual_pr {
            return fail("baseline_mode excludes horn_inject, learnable_horn and residual_pr".into());
        }
        if self.learnable_horn && !self.horn_inject {
            return fail("learnable_horn requires horn_inject".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if !(self.rope_base > 1.0) {
            return fail(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        if !(self.init_std > 0.0) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        if !(self.aux_coef >= 0.0) {
            return fail(format!("aux_coef must be non-negative, got {}", self.aux_coef));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_config_is_valid() {
        let c = ModelConfig::small(10_000, 128);
        c.validate().unwrap();
        assert_eq!(c.d_head(), 32);
        c.to_baseline().validate().unwrap();
        ModelConfig::large(32_000, 1024).validate().unwrap();
    }

    #[test]
    fn head_divisibility() {
        let c = ModelConfig {
            n_q_heads: 4,
            n_kv_heads: 2,
            ..ModelConfig::small(100, 16)
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("n_phases = 3 must divide"), "{msg}");
        // the baseline has no phase-alignment constraint
        c.to_baseline().validate().unwrap();

        let c = ModelConfig {
            n_kv_heads: 4,
            ..ModelConfig::small(100, 16)
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn flag_conflicts() {
        let mut c = ModelConfig::small(100, 16).to_baseline();
        c.horn_inject = true;
        assert!(c.validate().is_err());
        let c = ModelConfig {
            horn_inject: false,
            learnable_horn: true,
            ..ModelConfig::small(100, 16)
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::small(100, 16)).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
