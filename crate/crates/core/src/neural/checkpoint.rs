//! Checkpoints: a JSON manifest plus a contiguous little-endian `f32` blob.
//!
//! The blob sits next to the manifest with the extension `.bin`. Tensor
//! `offset` and `len` in the manifest count `f32` elements, not bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::policy::{ModelConfig, Policy};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(store: &ParamStore<f32>, config: &ModelConfig, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(store.params.num_scalars() * 4);
    let mut offset = 0;
    for (_, name, t) in store.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: *config,
        tensors,
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bin = blob_path(path);
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint back into its config and parameter store.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore<f32>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let bin = blob_path(path);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        if count != entry.len {
            return Err(Error::CheckpointShape {
                name: entry.name.clone(),
                msg: format!("shape {:?} holds {count} values but len is {}", entry.shape, entry.len),
            });
        }
        let (start, end) = (entry.offset * 4, (entry.offset + entry.len) * 4);
        if end > blob.len() {
            return Err(Error::CheckpointTruncated {
                needed: end,
                found: blob.len(),
            });
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.add(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?)?;
    }
    // A policy layout check turns mismatches between declared config and tensor
    // shapes into shape errors that name the tensor.
    if let Err(Error::ConfigMismatch(msg)) = Policy::from_store(manifest.config, store.clone()) {
        let name = msg
            .split('`')
            .nth(1)
            .unwrap_or("<config>")
            .to_string();
        return Err(Error::CheckpointShape { name, msg });
    }
    Ok((manifest.config, store))
}

/// Loads a checkpoint as a policy, failing if `expected` describes a different architecture.
pub fn load_policy(path: &Path, expected: Option<&ModelConfig>) -> Result<Policy<f32>> {
    let (config, store) = load_checkpoint(path)?;
    if let Some(want) = expected {
        want.check_compatible(&config)?;
    }
    Policy::from_store(config, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig {
            d,
            n_t: 2,
            heads: 4,
            pointer_heads: 2,
            d_k: 8,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck/model.json");
        let policy = Policy::<f32>::new(cfg(16), 1).unwrap();
        save_checkpoint(policy.store(), policy.config(), &path).unwrap();
        let (config, store) = load_checkpoint(&path).unwrap();
        assert_eq!(config, *policy.config());
        assert_eq!(store.params, policy.store().params);
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(manifest["version"], 1);
        assert_eq!(manifest["config"]["d"], 16);
        assert_eq!(manifest["tensors"][0]["name"], "embed.weight");
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let policy = Policy::<f32>::new(cfg(16), 2).unwrap();
        save_checkpoint(policy.store(), policy.config(), &path).unwrap();
        let original = fs::read_to_string(&path).unwrap();

        let mut m: serde_json::Value = serde_json::from_str(&original).unwrap();
        m["tensors"][1]["shape"] = serde_json::json!([3]);
        fs::write(&path, m.to_string()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointShape { .. })));

        let mut m: serde_json::Value = serde_json::from_str(&original).unwrap();
        m["tensors"][0]["shape"] = serde_json::json!([16, 24]);
        fs::write(&path, m.to_string()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointShape { .. })));

        let mut m: serde_json::Value = serde_json::from_str(&original).unwrap();
        m["version"] = serde_json::json!(2);
        fs::write(&path, m.to_string()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion { found: 2, .. })));

        fs::write(&path, &original).unwrap();
        let blob = fs::read(blob_path(&path)).unwrap();
        fs::write(blob_path(&path), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointTruncated { .. })));
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let policy = Policy::<f32>::new(cfg(64), 3).unwrap();
        save_checkpoint(policy.store(), policy.config(), &path).unwrap();
        assert!(matches!(load_policy(&path, Some(&cfg(128))), Err(Error::ConfigMismatch(_))));
        assert!(load_policy(&path, Some(&cfg(64))).is_ok());
    }
}
