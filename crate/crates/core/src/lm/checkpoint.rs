use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "unlearn-lab-checkpoint/1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub seed: u64,
    pub content_hash: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (method, config hash, parent checkpoint).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

fn le_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes `manifest.json` and one raw little-endian f64 blob per tensor into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    vocab_hash: &str,
    seed: u64,
    provenance: Option<serde_json::Value>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    for (i, name) in params.names().into_iter().enumerate() {
        let t = params.tensor(i);
        let bytes = le_bytes(t);
        let file = format!("{i:03}_{name}.f64");
        fs::write(dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: params.config().clone(),
        vocab_hash: vocab_hash.to_string(),
        seed,
        content_hash: params.content_hash(),
        tensors,
        provenance,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let m: CheckpointManifest = serde_json::from_slice(&fs::read(&path)?)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", m.format)));
    }
    Ok(m)
}

/// Loads and verifies a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let layout = ModelParams::layout(&m.config);
    if layout.len() != m.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, architecture needs {}",
            m.tensors.len(),
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.iter().zip(&m.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Checkpoint(format!("checksum mismatch for `{name}`")));
        }
        let n: usize = shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(Error::Checkpoint(format!("`{name}` has {} bytes, expected {}", bytes.len(), n * 8)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    let params = ModelParams::from_tensors(m.config.clone(), tensors)?;
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint contains non-finite parameters".into()));
    }
    if params.content_hash() != m.content_hash {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }
    Ok((params, m))
}
