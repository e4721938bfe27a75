use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{theta_init, HornProfile};
use crate::tensor::{numel, Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Linear,
    NormGain,
    Theta,
    Horn,
}

impl ParamKind {
    /// 1-D parameters are the ones exempt from weight decay by default.
    pub fn is_vector(self) -> bool {
        matches!(self, ParamKind::NormGain | ParamKind::Theta | ParamKind::Horn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Block index for per-layer parameters.
    pub layer: Option<usize>,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind, layer: Option<usize>) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
            layer,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Every trainable tensor of a model in a fixed order. Weights are stored
/// `[in, out]` so a projection is `x · W`.
pub fn layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let kv = cfg.n_kv_heads * cfg.d_head();
    let mut specs = vec![ParamSpec::new("embed.weight", &[cfg.vocab_size, d], ParamKind::Embedding, None)];
    if cfg.learnable_horn {
        let len = HornProfile::learnable(cfg.max_seq_len).max_len();
        specs.push(ParamSpec::new("horn.profile", &[len], ParamKind::Horn, None));
    }
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        let at = Some(l);
        specs.push(ParamSpec::new(p("norm1.weight"), &[d], ParamKind::NormGain, at));
        specs.push(ParamSpec::new(p("attn.wq"), &[d, d], ParamKind::Linear, at));
        specs.push(ParamSpec::new(p("attn.wk"), &[d, kv], ParamKind::Linear, at));
        specs.push(ParamSpec::new(p("attn.wv"), &[d, kv], ParamKind::Linear, at));
        specs.push(ParamSpec::new(p("attn.wo"), &[d, d], ParamKind::Linear, at));
        if cfg.has_rotation() {
            let pairs = d / cfg.n_phases / 2;
            specs.push(ParamSpec::new(p("rotation.theta"), &[pairs], ParamKind::Theta, at));
        }
        specs.push(ParamSpec::new(p("norm2.weight"), &[d], ParamKind::NormGain, at));
        specs.push(ParamSpec::new(p("ffn.w_gate"), &[d, cfg.d_ff], ParamKind::Linear, at));
        specs.push(ParamSpec::new(p("ffn.w_up"), &[d, cfg.d_ff], ParamKind::Linear, at));
        specs.push(ParamSpec::new(p("ffn.w_down"), &[cfg.d_ff, d], ParamKind::Linear, at));
    }
    specs.push(ParamSpec::new("final_norm.weight", &[d], ParamKind::NormGain, None));
    specs.push(ParamSpec::new("lm_head.weight", &[d, cfg.vocab_size], ParamKind::Linear, None));
    Ok(specs)
}

/// Total trainable scalars, computed from the layout without allocating.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(layout(cfg)?.iter().map(ParamSpec::numel).sum())
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    /// Fresh parameters. Draws happen in layout order from `rng`.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let specs = layout(cfg)?;
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            let t = match spec.kind {
                ParamKind::Embedding => Tensor::randn(&spec.shape, 1.0, rng)?,
                ParamKind::Linear => Tensor::randn(&spec.shape, cfg.init_std, rng)?,
                ParamKind::NormGain => Tensor::ones(&spec.shape),
                ParamKind::Theta => {
                    let layer = spec.layer.expect("theta belongs to a block");
                    let th = theta_init(layer, cfg.n_layers, cfg.d_model / cfg.n_phases)?;
                    Tensor::from_f64(&spec.shape, &th)?
                }
                ParamKind::Horn => {
                    Tensor::from_f64(&spec.shape, HornProfile::learnable(cfg.max_seq_len).values())?
                }
            };
            tensors.push(t);
        }
        Self::from_parts(specs, tensors)
    }

    pub fn from_parts(specs: Vec<ParamSpec>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::invalid("param_store", "spec and tensor counts differ"));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::shape("param_store", &s.shape, t.shape()));
            }
        }
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Ok(ParamStore {
            specs,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Rotation angles of block `layer`, if the model has them.
    pub fn theta(&self, layer: usize) -> Option<&Tensor<T>> {
        self.get(&format!("blocks.{layer}.rotation.theta"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_counts() {
        let c = ModelConfig::small(10_000, 128);
        assert_eq!(count_params(&c).unwrap(), 5_463_872);
        assert_eq!(count_params(&c.to_baseline()).unwrap(), 5_463_744);
    }

    #[test]
    fn large_theta_delta() {
        let c = ModelConfig::large(32_000, 1024);
        let delta = count_params(&c).unwrap() - count_params(&c.to_baseline()).unwrap();
        assert_eq!(delta, 1_536);
        assert_eq!(count_params(&c).unwrap(), 123_490_560);
    }

    #[test]
    fn learnable_horn_adds_seq_plus_one() {
        let c = ModelConfig::small(10_000, 128);
        let h = ModelConfig {
            learnable_horn: true,
            ..c.clone()
        };
        assert_eq!(count_params(&h).unwrap() - count_params(&c).unwrap(), 129);
    }

    #[test]
    fn phase_norm_is_parameter_neutral() {
        let c = ModelConfig::small(1000, 32);
        let specs = layout(&c).unwrap();
        let gains: usize = specs
            .iter()
            .filter(|s| s.kind == ParamKind::NormGain)
            .map(ParamSpec::numel)
            .sum();
        assert_eq!(gains, (2 * c.n_layers + 1) * c.d_model);
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig {
            d_model: 24,
            d_ff: 32,
            n_layers: 2,
            ..ModelConfig::small(50, 8)
        };
        let a = ParamStore::<f32>::init(&c, &mut Rng::new(3)).unwrap();
        let b = ParamStore::<f32>::init(&c, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.theta(1).unwrap().data(), &[std::f32::consts::FRAC_PI_2; 4]);
        assert!(a.get("final_norm.weight").unwrap().data().iter().all(|&g| g == 1.0));
    }
}
