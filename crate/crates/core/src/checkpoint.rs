//! Network checkpoints: a JSON manifest next to a little-endian payload.
//!
//! `foo.json` names every tensor with its shape, dtype and byte range inside
//! `foo.bin`. Loading reproduces the parameters bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Network, NetworkSpec, Param};

pub const CHECKPOINT_FORMAT: &str = "coinlab-checkpoint/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("checkpoint {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub payload: String,
    pub spec: NetworkSpec,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Serialises `net` into `(manifest, payload bytes)`.
pub fn encode<P: Param>(net: &Network<P>, payload_name: &str, meta: serde_json::Value) -> (CheckpointManifest, Vec<u8>) {
    let mut payload = Vec::with_capacity(net.param_count() * P::BYTES);
    let mut tensors = Vec::new();
    let names = net.spec().tensor_names();
    let shapes = net.spec().layer_shapes();
    for (i, data) in net.tensors().into_iter().enumerate() {
        let (inputs, outputs) = shapes[i / 2];
        let shape = if i % 2 == 0 {
            vec![inputs, outputs]
        } else {
            vec![outputs]
        };
        let offset = payload.len();
        for &v in data {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: names[i].clone(),
            shape,
            offset,
            bytes: payload.len() - offset,
        });
    }
    (
        CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            dtype: P::DTYPE.into(),
            payload: payload_name.into(),
            spec: net.spec().clone(),
            tensors,
            meta,
        },
        payload,
    )
}

pub fn decode<P: Param>(manifest: &CheckpointManifest, payload: &[u8]) -> Result<Network<P>, CheckpointError> {
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Invalid(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    if manifest.dtype != P::DTYPE {
        return Err(CheckpointError::Invalid(format!(
            "dtype {} cannot be loaded as {}",
            manifest.dtype,
            P::DTYPE
        )));
    }
    let mut net = Network::<P>::zeros(manifest.spec.clone());
    let names = manifest.spec.tensor_names();
    if manifest.tensors.len() != names.len() {
        return Err(CheckpointError::Invalid("tensor count mismatch".into()));
    }
    for ((entry, name), dst) in manifest.tensors.iter().zip(&names).zip(net.tensors_mut()) {
        if &entry.name != name || entry.bytes != dst.len() * P::BYTES {
            return Err(CheckpointError::Invalid(format!("tensor {name} has wrong name or size")));
        }
        let src = payload
            .get(entry.offset..entry.offset + entry.bytes)
            .ok_or_else(|| CheckpointError::Invalid(format!("payload too short for {name}")))?;
        for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(P::BYTES)) {
            *d = P::read_le(chunk);
        }
    }
    Ok(net)
}

pub fn save<P: Param>(net: &Network<P>, manifest_path: &Path, meta: serde_json::Value) -> Result<(), CheckpointError> {
    let bin = payload_path(manifest_path);
    let payload_name = bin
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (manifest, payload) = encode(net, &payload_name, meta);
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| CheckpointError::Json {
        path: manifest_path.into(),
        source,
    })?;
    write(manifest_path, (json + "\n").as_bytes())?;
    write(&bin, &payload)
}

pub fn load<P: Param>(manifest_path: &Path) -> Result<(Network<P>, serde_json::Value), CheckpointError> {
    let text = read(manifest_path)?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&text).map_err(|source| CheckpointError::Json {
            path: manifest_path.into(),
            source,
        })?;
    let bin = manifest_path.with_file_name(&manifest.payload);
    let payload = read(&bin)?;
    let net = decode(&manifest, &payload)?;
    Ok((net, manifest.meta))
}

/// Creates the parent directory of `path` if it is missing.
pub fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    ensure_parent(path).and_then(|()| fs::write(path, bytes)).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HeadSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = NetworkSpec {
            input: 11,
            hidden: vec![6, 4],
            heads: vec![
                HeadSpec { name: "policy".into(), size: 9, init_scale: 0.01 },
                HeadSpec { name: "value".into(), size: 1, init_scale: 1.0 },
            ],
        };
        let net: Network = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(9));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save(&net, &path, serde_json::json!({"kind": "policy"})).unwrap();
        let (back, meta) = load::<f32>(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta["kind"], "policy");
        let bytes = fs::read(payload_path(&path)).unwrap();
        save(&back, &path, serde_json::json!({"kind": "policy"})).unwrap();
        assert_eq!(fs::read(payload_path(&path)).unwrap(), bytes);
        assert!(load::<f64>(&path).is_err());
    }
}
