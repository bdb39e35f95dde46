//! Checkpoints: a JSON manifest plus one blob of little-endian `f32` values
//! in manifest order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::sha256_hex;
use crate::model::{build_model, Adapter, Matrix, ModelError, ParamClass, ToyModel, ToyModelConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "step-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("blob digest mismatch: manifest says {expected}, blob hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("checkpoint layout error: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterEntry {
    pub rank: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub frozen: bool,
    pub adapter: Option<AdapterEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub class: ParamClass,
    pub frozen: bool,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ToyModelConfig,
    pub layers: Vec<LayerEntry>,
    pub tensors: Vec<TensorEntry>,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Paths of a checkpoint written by [`save_checkpoint`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub manifest: PathBuf,
    pub blob: PathBuf,
}

/// Serialises `model` as `<dir>/<stem>.json` and `<dir>/<stem>.bin`.
pub fn save_checkpoint<T: Scalar>(
    model: &ToyModel<T>,
    dir: &Path,
    stem: &str,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<CheckpointPaths, CheckpointError> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name,
            shape: p.tensor.shape().to_vec(),
            class: p.class,
            frozen: p.class == ParamClass::FrozenLayer,
            offset: blob.len() as u64,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let layers = model
        .layers
        .iter()
        .map(|l| LayerEntry {
            frozen: l.frozen,
            adapter: l.adapters.as_ref().map(|a| AdapterEntry { rank: a[0].rank(), scale: a[0].scale.as_f64() }),
        })
        .collect();
    let blob_name = format!("{stem}.bin");
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config,
        layers,
        tensors,
        blob: blob_name.clone(),
        blob_bytes: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
        metadata,
    };
    let paths = CheckpointPaths { manifest: dir.join(format!("{stem}.json")), blob: dir.join(blob_name) };
    std::fs::write(&paths.blob, &blob).map_err(io_err(&paths.blob))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&paths.manifest, text + "\n").map_err(io_err(&paths.manifest))?;
    Ok(paths)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Layout(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint after verifying the blob digest and every tensor's
/// name, shape and offset.
pub fn load_checkpoint<T: Scalar>(manifest_path: &Path) -> Result<(ToyModel<T>, Manifest), CheckpointError> {
    let manifest = read_manifest(manifest_path)?;
    let blob_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let actual = sha256_hex(&blob);
    if actual != manifest.blob_sha256 {
        return Err(CheckpointError::DigestMismatch { expected: manifest.blob_sha256.clone(), actual });
    }
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(CheckpointError::Layout(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes)));
    }

    let mut config = manifest.config;
    config.layer_count = manifest.layers.len();
    let mut model: ToyModel<T> = build_model(config, 0)?;
    let (d, f) = (config.hidden_dim, config.ffn_dim());
    for (layer, entry) in model.layers.iter_mut().zip(&manifest.layers) {
        layer.frozen = entry.frozen;
        layer.adapters = entry.adapter.as_ref().map(|a| {
            Box::new(Matrix::ALL.map(|m| {
                let (out, inp) = m.shape(d, f);
                Adapter {
                    a: Tensor::zeros(&[out, a.rank]),
                    b: Tensor::zeros(&[a.rank, inp]),
                    scale: T::from_f64_lossy(a.scale),
                }
            }))
        });
    }

    let params = model.params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(CheckpointError::Layout(format!(
            "manifest lists {} tensors, structure implies {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    let mut offset = 0u64;
    for (p, entry) in params.into_iter().zip(&manifest.tensors) {
        if p.name != entry.name || p.tensor.shape() != entry.shape.as_slice() || entry.offset != offset {
            return Err(CheckpointError::Layout(format!(
                "tensor {} {:?} at {} does not match expected {} {:?} at {offset}",
                entry.name,
                entry.shape,
                entry.offset,
                p.name,
                p.tensor.shape()
            )));
        }
        let bytes = &blob[offset as usize..offset as usize + 4 * p.tensor.len()];
        for (v, chunk) in p.tensor.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = T::from_f64_lossy(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64);
        }
        offset += bytes.len() as u64;
    }
    if offset != manifest.blob_bytes {
        return Err(CheckpointError::Layout(format!("{} trailing blob bytes", manifest.blob_bytes - offset)));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growth::{attach_to_frozen, freeze_layers, AdapterSpec};

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_model::<f32>(ToyModelConfig::new(12, 3, 2, 16), 4).unwrap();
        freeze_layers(&mut m, &[0, 1]).unwrap();
        attach_to_frozen(&mut m, &AdapterSpec::new(2, 1)).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), serde_json::json!(2));
        let paths = save_checkpoint(&m, dir.path(), "ckpt", meta).unwrap();
        let (loaded, manifest) = load_checkpoint::<f32>(&paths.manifest).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(manifest.metadata["stage"], 2);
        assert!(manifest.tensors.iter().filter(|t| t.frozen).all(|t| t.name.starts_with("layers.0") || t.name.starts_with("layers.1")));
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model::<f32>(ToyModelConfig::new(6, 1, 1, 4), 0).unwrap();
        let paths = save_checkpoint(&m, dir.path(), "c", BTreeMap::new()).unwrap();
        let mut blob = std::fs::read(&paths.blob).unwrap();
        blob[10] ^= 0x40;
        std::fs::write(&paths.blob, blob).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&paths.manifest), Err(CheckpointError::DigestMismatch { .. })));
    }
}
