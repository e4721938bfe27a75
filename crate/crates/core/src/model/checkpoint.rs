//! On-disk checkpoints: `manifest.json` plus one raw little-endian blob,
//! `params.bin`, holding every tensor back to back.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{DType, RngState, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub rng: Option<RngState>,
    pub theta_init: Vec<Vec<f64>>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form state owned by the caller (e.g. the trainer).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn new(config: ModelConfig, step: u64, theta_init: Vec<Vec<f64>>) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            config,
            step,
            rng: None,
            theta_init,
            tensors: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }
}

/// Writes `tensors` and the manifest into `dir`, creating it if needed.
/// Entries of `manifest.tensors` are regenerated.
pub fn write<T: Scalar>(dir: &Path, mut manifest: Manifest, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    manifest.tensors.clear();
    for (name, t) in tensors {
        let offset = blob.len();
        for &v in t.data() {
            v.write_le(&mut blob);
        }
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            len: blob.len() - offset,
        });
    }
    let blob_path = dir.join(BLOB);
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST);
    std::fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

/// Reads the manifest and every tensor it lists, in order.
pub fn read<T: Scalar>(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(BLOB);
    let blob = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let size = T::DTYPE.size_of();
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("{} stored as {:?}, requested {:?}", e.name, e.dtype, T::DTYPE)));
        }
        let n = crate::tensor::numel(&e.shape);
        if e.len != n * size || e.offset + e.len > blob.len() {
            return Err(Error::Checkpoint(format!("{}: extent does not match blob", e.name)));
        }
        let data = blob[e.offset..e.offset + e.len].chunks_exact(size).map(T::read_le).collect();
        out.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    Ok((manifest, out))
}

impl<T: Scalar> Model<T> {
    /// Saves only the model parameters.
    pub fn save(&self, dir: &Path, step: u64) -> Result<()> {
        let manifest = Manifest::new(self.config().clone(), step, self.theta_init().to_vec());
        write(dir, manifest, &self.named_tensors())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.params()
            .specs()
            .iter()
            .zip(self.params().tensors())
            .map(|(s, t)| (s.name.clone(), t))
            .collect()
    }

    /// Rebuilds a model from a checkpoint directory, ignoring any
    /// non-parameter tensors stored alongside.
    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let (manifest, tensors) = read::<T>(dir)?;
        let specs = super::layout(&manifest.config)?;
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == spec.name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
            params.push(t);
        }
        let store = ParamStore::from_parts(specs, params)?;
        let model = Model::from_params(manifest.config.clone(), store, Some(manifest.theta_init.clone()))?;
        Ok((model, manifest))
    }
}
