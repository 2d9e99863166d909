//! Checkpoints: `manifest.json` (names, shapes, dtype, byte offsets, model
//! metadata) plus `tensors.bin`, a raw little-endian IEEE-754 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";
const FORMAT: &str = "mtf-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub blob: String,
    pub blob_bytes: usize,
    pub sha256: String,
    /// Free-form metadata; the model stores its configuration here.
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<S: Scalar>(dir: &Path, store: &ParamStore<S>, metadata: serde_json::Value) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let groups = [(TensorKind::Param, store.params()), (TensorKind::Buffer, store.buffers())];
    for (kind, map) in groups {
        for (name, t) in map {
            let offset = blob.len();
            t.data().iter().for_each(|v| v.write_le(&mut blob));
            tensors.push(TensorEntry {
                name: name.clone(),
                kind,
                shape: t.shape().to_vec(),
                dtype: S::DTYPE.to_string(),
                offset,
                bytes: blob.len() - offset,
            });
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: S::DTYPE.into(),
        blob: BLOB.into(),
        blob_bytes: blob.len(),
        sha256: hex::encode(Sha256::digest(&blob)),
        metadata,
        tensors,
    };
    fs::write(dir.join(BLOB), &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{} (want {FORMAT} v{VERSION})",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

fn decode(dtype: &str, bytes: &[u8]) -> Result<f64> {
    match dtype {
        "f32" => Ok(f32::read_le(bytes) as f64),
        "f64" => Ok(f64::read_le(bytes)),
        other => Err(Error::Format(format!("unknown dtype {other}"))),
    }
}

/// Loads a checkpoint into scalar type `S`. Loading into the stored dtype is bit-exact.
pub fn load<S: Scalar>(dir: &Path) -> Result<(ParamStore<S>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(&manifest.blob))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Corruption(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes)));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.sha256 {
        return Err(Error::Corruption("checkpoint blob checksum mismatch".into()));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        let numel: usize = entry.shape.iter().product();
        if numel * width != entry.bytes || entry.offset + entry.bytes > blob.len() {
            return Err(Error::Corruption(format!("tensor {} does not fit the blob", entry.name)));
        }
        let data = blob[entry.offset..entry.offset + entry.bytes]
            .chunks_exact(width)
            .map(|c| decode(&entry.dtype, c).map(S::of))
            .collect::<Result<Vec<S>>>()?;
        let t = Tensor::new(&entry.shape, data)?;
        match entry.kind {
            TensorKind::Param => store.insert_param(&entry.name, t),
            TensorKind::Buffer => store.insert_buffer(&entry.name, t),
        }
    }
    Ok((store, manifest))
}
