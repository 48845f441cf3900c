//! Model files: a JSON header next to a blob of little-endian `f32` values.
//!
//! `model.json` holds the layer chain, the input shape, and for every tensor
//! its shape plus byte offset and byte length inside the blob. The blob lives
//! beside the header with the `.bin` extension and is covered by a SHA-256
//! checksum stored in the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "skipsponge-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length; always `4 * prod(shape)`.
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    /// Blob file name, relative to the header's directory.
    pub blob: String,
    pub blob_len: usize,
    pub blob_sha256: String,
    pub layers: Vec<LayerSpec>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Path of the blob that accompanies a header path.
pub fn blob_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    model.validate()?;
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    let mut tensors = BTreeMap::new();
    for (name, t) in &model.params {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            name.clone(),
            TensorEntry { shape: t.shape().to_vec(), offset, length: blob.len() - offset },
        );
    }
    let bpath = blob_path(path);
    let header = ModelHeader {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        input_shape: model.input_shape.clone(),
        blob: bpath
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Config(format!("invalid model path {}", path.display())))?,
        blob_len: blob.len(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        layers: model.layers.clone(),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: ModelHeader = serde_json::from_str(&text)
        .map_err(|e| Error::load(path, format!("malformed header: {e}")))?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(Error::load(
            path,
            format!("unsupported format '{}' v{}", header.format, header.version),
        ));
    }
    let bpath = path.parent().unwrap_or(Path::new(".")).join(&header.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() != header.blob_len {
        return Err(Error::load(
            &bpath,
            format!("blob is {} bytes, header declares {} (truncated?)", blob.len(), header.blob_len),
        ));
    }
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != header.blob_sha256 {
        return Err(Error::load(&bpath, "checksum mismatch"));
    }

    let mut params = BTreeMap::new();
    for (name, e) in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.length != n * 4 {
            return Err(Error::load(
                path,
                format!("tensor '{name}': length {} inconsistent with shape {:?}", e.length, e.shape),
            ));
        }
        let bytes = e
            .offset
            .checked_add(e.length)
            .and_then(|end| blob.get(e.offset..end))
            .ok_or_else(|| {
                Error::load(path, format!("tensor '{name}': offset {} + {} exceeds blob", e.offset, e.length))
            })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::load(path, format!("tensor '{name}': {err}")))?;
        params.insert(name.clone(), t);
    }

    let model = ModelGraph { input_shape: header.input_shape, layers: header.layers, params };
    model
        .validate()
        .map_err(|e| Error::load(path, e.to_string()))?;
    Ok(model)
}
