//! Parameter checkpoint format.
//!
//! Layout: 8-byte magic `SSCK0001`, 4-byte little-endian unsigned manifest
//! length, UTF-8 JSON manifest (precision, model config, bin edges, ordered
//! parameter names and shapes), then each parameter's little-endian float
//! payload concatenated in manifest order. Save/load round trips are
//! bit-exact at the stored precision.

use crate::autodiff::{Scalar, Tensor};
use crate::error::TrainError;
use crate::model::ModelConfig;
use crate::mtlr::MtlrConfig;
use crate::params::ParamStore;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SSCK0001";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub precision: String,
    pub model: ModelConfig,
    pub mtlr_edges: Vec<f64>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &ModelConfig,
    mtlr: &MtlrConfig,
    store: &ParamStore<T>,
) -> Result<(), TrainError> {
    let manifest = CheckpointManifest {
        precision: T::NAME.to_string(),
        model: model.clone(),
        mtlr_edges: mtlr.edges.clone(),
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let payload: usize = store.iter().map(|(_, t)| t.numel() * T::BYTES).sum();
    let mut out = Vec::with_capacity(12 + manifest_bytes.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for (_, tensor) in store.iter() {
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

/// Reads only the manifest (to pick the right precision before loading).
pub fn peek_manifest(path: &Path) -> Result<CheckpointManifest, TrainError> {
    let bytes = read_all(path)?;
    parse_manifest(&bytes).map(|(m, _)| m)
}

/// Loads a checkpoint whose stored precision must match `T`.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ModelConfig, MtlrConfig, ParamStore<T>), TrainError> {
    let bytes = read_all(path)?;
    let (manifest, mut at) = parse_manifest(&bytes)?;
    if manifest.precision != T::NAME {
        return Err(TrainError::BadCheckpoint(format!(
            "stored precision {} but {} requested",
            manifest.precision,
            T::NAME
        )));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let span = numel * T::BYTES;
        if at + span > bytes.len() {
            return Err(TrainError::BadCheckpoint(format!(
                "payload truncated at parameter {}",
                entry.name
            )));
        }
        let data: Vec<T> = bytes[at..at + span]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        at += span;
        store.add(
            entry.name.clone(),
            Tensor::new(entry.shape.clone(), data)
                .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?,
        );
    }
    if at != bytes.len() {
        return Err(TrainError::BadCheckpoint(format!(
            "{} trailing bytes after parameters",
            bytes.len() - at
        )));
    }
    let mtlr = MtlrConfig::new(manifest.mtlr_edges.clone())
        .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
    Ok((manifest.model, mtlr, store))
}

/// Checks a loaded store against the shapes a config implies; the error
/// lists every mismatched parameter.
pub fn validate_shapes<T: Scalar>(
    cfg: &ModelConfig,
    mtlr: &MtlrConfig,
    store: &ParamStore<T>,
) -> Result<(), TrainError> {
    let expected = crate::model::expected_shapes(cfg, mtlr);
    let mut mismatches = Vec::new();
    for (name, shape) in &expected {
        match store.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => mismatches.push(format!(
                "{name}: expected {shape:?}, found {:?}",
                t.shape()
            )),
            None => mismatches.push(format!("{name}: missing")),
        }
    }
    for (name, _) in store.iter() {
        if !expected.iter().any(|(n, _)| n == name) {
            mismatches.push(format!("{name}: unexpected"));
        }
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(TrainError::CheckpointMismatch(mismatches.join("; ")))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    Ok(bytes)
}

fn parse_manifest(bytes: &[u8]) -> Result<(CheckpointManifest, usize), TrainError> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(TrainError::BadCheckpoint(
            "missing SSCK0001 magic".to_string(),
        ));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + len {
        return Err(TrainError::BadCheckpoint("manifest truncated".to_string()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..12 + len])?;
    Ok((manifest, 12 + len))
}
