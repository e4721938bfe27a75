//! Operator surface behind the `threephase` binary: run configuration,
//! subcommands and their report files.

mod commands;
pub mod svg;
mod verify;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use commands::{
    compare, compare_table, diagnose, eval, sweep_n, sweep_rule, sweep_table, sweep_threads, train, AlignedRow,
    CompareReport, DiagnoseReport, GroupStats, HornInspection, RunFinal, RunSummary, SweepRow, CHECKPOINT_DIR,
    CONFIG, METRICS, STEPS, SUMMARY,
};
pub use verify::{
    dead_aux_config, dead_aux_trajectories, micro_config, verify, SuiteResult, VerifyOptions, VerifyReport,
    PINNING_LENGTHS, PINNING_PHASES,
};

use crate::data::{synthetic_text, Corpus};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{OptimizerConfig, TrainConfig};

/// Process exit status for each outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    InvariantFailure = 1,
    ConfigError = 2,
    IoError = 3,
}

impl Error {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Data(_) => ExitCode::ConfigError,
            Error::Io { .. } | Error::Checkpoint(_) => ExitCode::IoError,
            _ => ExitCode::InvariantFailure,
        }
    }
}

fn default_synthetic_bytes() -> usize {
    100_000
}
fn default_seed() -> u64 {
    42
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// UTF-8 text file; relative paths resolve against the config file.
    /// When absent a synthetic grammar corpus is generated from the seed.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_synthetic_bytes")]
    pub synthetic_bytes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            synthetic_bytes: default_synthetic_bytes(),
        }
    }
}

/// A complete run description. `model.vocab_size` caps the vocabulary
/// built from the corpus and is replaced by the built vocabulary's size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Groups runs in comparison reports.
    #[serde(default)]
    pub label: Option<String>,
    /// Also checkpoint every this many steps (0: final checkpoint only).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line overrides applied on top of a [`RunConfig`].
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub deterministic: Option<bool>,
    pub steps: Option<u64>,
}

impl RunConfig {
    /// The toy configuration used by the examples and smoke runs.
    pub fn toy() -> Self {
        let model = ModelConfig {
            d_model: 48,
            n_layers: 2,
            n_q_heads: 6,
            n_kv_heads: 3,
            d_ff: 128,
            ..ModelConfig::small(1_000, 32)
        };
        RunConfig {
            model,
            optim: OptimizerConfig {
                lr: 1e-2,
                warmup_steps: 20,
                ..OptimizerConfig::new(300)
            },
            train: TrainConfig {
                eval_every: 50,
                ..TrainConfig::new(16, 32)
            },
            data: DataConfig::default(),
            seed: default_seed(),
            out_dir: default_out(),
            deterministic: true,
            label: None,
            checkpoint_every: 0,
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.train.validate(&self.model)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(d) = o.deterministic {
            self.deterministic = d;
        }
        if let Some(steps) = o.steps {
            self.optim.total_steps = steps;
            self.optim.warmup_steps = self.optim.warmup_steps.min(steps);
        }
        self.validate()
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            if self.model.baseline_mode {
                "baseline".into()
            } else {
                format!("3pt-n{}", self.model.n_phases)
            }
        })
    }

    /// Reads or generates the corpus and fixes `model.vocab_size` to the
    /// built vocabulary.
    pub fn corpus(&mut self) -> Result<Corpus> {
        let corpus = match &self.data.corpus {
            Some(p) => {
                let path = if p.is_absolute() { p.clone() } else { self.base_dir.join(p) };
                Corpus::from_file(&path, self.model.vocab_size)?
            }
            None => Corpus::from_text(&synthetic_text(self.data.synthetic_bytes, self.seed), self.model.vocab_size)?,
        };
        self.model.vocab_size = corpus.vocab.len();
        self.model.validate()?;
        Ok(corpus)
    }
}

pub fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub(crate) fn read_jsonl<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_round_trips() {
        let cfg = RunConfig::toy();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("")).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_invalid_keys() {
        let mut v = serde_json::to_value(RunConfig::toy()).unwrap();
        v["extra"] = serde_json::json!(1);
        let e = RunConfig::from_json(&v.to_string(), Path::new("")).unwrap_err();
        assert_eq!(e.exit_code(), ExitCode::ConfigError);

        let mut v = serde_json::to_value(RunConfig::toy()).unwrap();
        v["model"]["n_q_heads"] = serde_json::json!(4);
        v["model"]["n_kv_heads"] = serde_json::json!(2);
        let e = RunConfig::from_json(&v.to_string(), Path::new("")).unwrap_err();
        assert_eq!(e.exit_code(), ExitCode::ConfigError);
        assert!(e.to_string().contains("must divide"));
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::toy();
        cfg.apply(&Overrides {
            seed: Some(7),
            steps: Some(10),
            ..Default::default()
        })
        .unwrap();
        assert_eq!((cfg.seed, cfg.optim.total_steps, cfg.optim.warmup_steps), (7, 10, 10));
    }
}
