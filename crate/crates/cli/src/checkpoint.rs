//! Single-file checkpoints.
//!
//! ```text
//! bytes 0..8     magic "BEVCKPT\0"
//! bytes 8..16    manifest length n, u64 little-endian
//! bytes 16..16+n manifest, UTF-8 JSON
//! rest           tensor blobs, f32 little-endian, row-major, in manifest order
//! ```
//!
//! The manifest holds the format version, the run configuration, the
//! SHA-256 of the model configuration JSON, the step count, the output class
//! order and, per tensor, its name, shape and byte offset into the blob
//! section.

use std::io::Write;
use std::path::Path;

use bevcar_core::head::output_classes;
use bevcar_core::{BevCar, ModelConfig};
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{ckpt_err, Result};

pub const MAGIC: &[u8; 8] = b"BEVCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub step: usize,
    pub class_order: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn config_hash(model: &ModelConfig) -> String {
    let json = serde_json::to_string(model).expect("model config serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(path: &Path, model: &BevCar, config: &RunConfig, step: usize) -> Result<()> {
    let vars = model.params().named_vars();
    let mut tensors = Vec::with_capacity(vars.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, var) in &vars {
        let values: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
            offset: blob.len() as u64,
        });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut cfg = config.clone();
    cfg.model = model.config.clone();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(&cfg.model),
        config: cfg,
        step,
        class_order: output_classes().into_iter().map(String::from).collect(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&blob)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads and checks the manifest; returns it with the blob section.
pub fn read_checkpoint(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint (bad magic)"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + n {
        return Err(ckpt_err(path, "truncated manifest"));
    }
    let raw: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).map_err(|e| ckpt_err(path, e))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(ckpt_err(path, format!("format version {version:?}, this build reads {FORMAT_VERSION}")));
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| ckpt_err(path, e))?;
    if config_hash(&manifest.config.model) != manifest.config_hash {
        return Err(ckpt_err(path, "config hash does not match the stored model config"));
    }
    let classes: Vec<String> = output_classes().into_iter().map(String::from).collect();
    if manifest.class_order != classes {
        return Err(ckpt_err(path, format!("class order {:?} differs from {:?}", manifest.class_order, classes)));
    }
    Ok((manifest, bytes[16 + n..].to_vec()))
}

/// Copies checkpoint weights into `model`, whose config must hash equal.
pub fn load_into(path: &Path, model: &BevCar) -> Result<Manifest> {
    let (manifest, blob) = read_checkpoint(path)?;
    let want = config_hash(&model.config);
    if manifest.config_hash != want {
        return Err(ckpt_err(path, format!("config hash {} does not match the model's {want}", manifest.config_hash)));
    }
    let names: Vec<String> = model.params().named_vars().into_iter().map(|(n, _)| n).collect();
    let stored: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    if names.iter().map(String::as_str).ne(stored.iter().copied()) {
        return Err(ckpt_err(path, "tensor names differ from the model's parameters"));
    }
    for t in &manifest.tensors {
        let count: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 4 * count;
        if end > blob.len() {
            return Err(ckpt_err(path, format!("tensor {} runs past the end of the file", t.name)));
        }
        let values: Vec<f32> = blob[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let tensor = Tensor::from_vec(values, t.shape.as_slice(), model.device())?;
        model.params().set(&t.name, &tensor)?;
    }
    Ok(manifest)
}

/// Builds the model described by a checkpoint and loads its weights.
pub fn load_model(path: &Path, device: &Device) -> Result<(BevCar, Manifest)> {
    let (manifest, _) = read_checkpoint(path)?;
    let model = BevCar::new(manifest.config.model.clone(), manifest.config.seed, DType::F32, device)?;
    let manifest = load_into(path, &model)?;
    Ok((model, manifest))
}
