//! Parameter container file: one line of JSON manifest followed by a single
//! little-endian blob holding every parameter back to back in name order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const FORMAT: &str = "pin-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub rng_seed: u64,
    pub blob_len: usize,
    pub params: Vec<ManifestEntry>,
    /// Caller-defined payload (model config, vocabulary, ontology).
    pub metadata: serde_json::Value,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(store.numel() * T::BYTES);
    let mut params = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        params.push(ManifestEntry {
            name: name.to_string(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            byte_offset: blob.len(),
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        dtype: T::DTYPE.to_string(),
        rng_seed: store.rng_seed(),
        blob_len: blob.len(),
        params,
        metadata,
    };
    let mut out =
        serde_json::to_vec(&manifest).map_err(|e| Error::CorruptCheckpoint(format!("manifest encode: {e}")))?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

fn split(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptCheckpoint("no manifest terminator".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::CorruptCheckpoint(format!(
            "unknown format `{}`",
            manifest.format
        )));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != manifest.blob_len {
        return Err(Error::CorruptCheckpoint(format!(
            "blob is {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    Ok((manifest, blob))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, serde_json::Value)> {
    let (manifest, blob) = split(bytes)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::CorruptCheckpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let mut store = ParamStore::new(manifest.rng_seed);
    let mut expected_offset = 0;
    for entry in &manifest.params {
        if entry.dtype != T::DTYPE || entry.byte_offset != expected_offset {
            return Err(Error::CorruptCheckpoint(format!(
                "entry `{}` has dtype {} at offset {}",
                entry.name, entry.dtype, entry.byte_offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let end = entry.byte_offset + numel * T::BYTES;
        let bytes = blob
            .get(entry.byte_offset..end)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("entry `{}` runs past the blob", entry.name)))?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::CorruptCheckpoint(format!("entry `{}`: {e}", entry.name)))?;
        store.insert(entry.name.clone(), tensor)?;
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing blob bytes",
            blob.len() - expected_offset
        )));
    }
    Ok((store, manifest.metadata))
}

/// Reads just the manifest, e.g. to dispatch on dtype.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, metadata: serde_json::Value) -> Result<()> {
    let bytes = encode(store, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
