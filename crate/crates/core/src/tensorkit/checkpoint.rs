//! Checkpoint serialization.
//!
//! Layout: one JSON header line (format tag, module tag, parameter names and
//! shapes in declaration order, caller metadata) terminated by `\n`, followed
//! by the raw parameter values as little-endian `f32` in that same order.
//!
//! Serialization is deterministic: equal stores and metadata produce equal
//! bytes, so content hashes identify checkpoints. Callers must keep wall
//! clock time and other nondeterminism out of `meta`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor, TensorError};
use crate::scalar::Scalar;

pub const FORMAT_TAG: &str = "deltabridge-ckpt";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub module: String,
    pub params: Vec<ParamEntry>,
    pub meta: serde_json::Value,
}

/// Full checkpoint bytes for a store. The basis of both saving and hashing.
pub fn serialize_checkpoint<S: Scalar>(
    store: &ParamStore<S>,
    module: &str,
    meta: &serde_json::Value,
) -> Vec<u8> {
    let header = CheckpointHeader {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        module: module.to_string(),
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
        meta: meta.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (_, t) in store.iter() {
        for v in t.to_f32_vec() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<S: Scalar>(
    store: &ParamStore<S>,
    module: &str,
    meta: &serde_json::Value,
    path: &Path,
) -> Result<(), TensorError> {
    fs::write(path, serialize_checkpoint(store, module, meta))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(ParamStore<S>, CheckpointHeader), TensorError> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TensorError::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| TensorError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format {:?} version {}",
            header.format, header.version
        )));
    }
    let expected: usize = header
        .params
        .iter()
        .map(|p| p.shape[0] * p.shape[1] * 4)
        .sum();
    let payload = &bytes[nl + 1..];
    if payload.len() != expected {
        return Err(TensorError::Checkpoint(format!(
            "payload is {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut at = 0;
    for entry in &header.params {
        let numel = entry.shape[0] * entry.shape[1];
        let mut vals = Vec::with_capacity(numel);
        for k in 0..numel {
            let mut b = [0u8; 4];
            b.copy_from_slice(&payload[at + 4 * k..at + 4 * k + 4]);
            let v = f32::from_le_bytes(b);
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    context: format!("checkpoint value in {:?}", entry.name),
                });
            }
            vals.push(v);
        }
        at += numel * 4;
        store.insert(
            &entry.name,
            Tensor::from_f32_vec(entry.shape[0], entry.shape[1], &vals)?,
        )?;
    }
    Ok((store, header))
}

/// Hex SHA-256 of the canonical checkpoint bytes for a store.
pub fn store_hash<S: Scalar>(store: &ParamStore<S>, module: &str) -> String {
    hash_bytes(&serialize_checkpoint(
        store,
        module,
        &serde_json::Value::Null,
    ))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, TensorError> {
    Ok(hash_bytes(&fs::read(path)?))
}

fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w1", Tensor::randn(&mut stream(3, "ck", 0), 2, 3, 1.0))
            .unwrap();
        s.insert("b1", Tensor::randn(&mut stream(3, "ck", 1), 1, 3, 1.0))
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let store = sample_store();
        let meta = serde_json::json!({"stage": "test", "seed": 3});
        save_checkpoint(&store, "demo", &meta, &path).unwrap();
        let first = fs::read(&path).unwrap();

        let (loaded, header) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(header.module, "demo");
        let path2 = dir.path().join("b.ckpt");
        save_checkpoint(&loaded, "demo", &meta, &path2).unwrap();
        let second = fs::read(&path2).unwrap();
        assert_eq!(first, second, "save . load . save must reproduce the bytes");
    }

    #[test]
    fn loaded_values_match_f32_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let store = sample_store();
        save_checkpoint(&store, "demo", &serde_json::Value::Null, &path).unwrap();
        let (loaded, _) = load_checkpoint::<f64>(&path).unwrap();
        for ((_, orig), (_, got)) in store.iter().zip(loaded.iter()) {
            assert_eq!(orig.quantize_f32().data(), got.data());
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&sample_store(), "demo", &serde_json::Value::Null, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");
    }

    #[test]
    fn header_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&sample_store(), "demo", &serde_json::Value::Null, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let text = String::from_utf8(bytes[..nl].to_vec()).unwrap();
        let tampered = text.replace("[2,3]", "[2,4]");
        let mut out = tampered.into_bytes();
        out.push(b'\n');
        out.extend_from_slice(&bytes[nl + 1..]);
        fs::write(&path, out).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn hash_is_content_stable() {
        let a = store_hash(&sample_store(), "demo");
        let b = store_hash(&sample_store(), "demo");
        assert_eq!(a, b);
        let c = store_hash(&sample_store(), "other");
        assert_ne!(a, c);
    }
}
