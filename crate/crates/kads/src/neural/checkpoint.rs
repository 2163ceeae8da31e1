//! Checkpoint files: a JSON manifest followed by a little-endian f64 blob.
//!
//! Layout on disk:
//!
//! ```text
//! [u64 le: manifest byte length][manifest JSON][tensor data, f64 le]
//! ```
//!
//! The manifest carries a format version plus vocabulary and config hashes;
//! loading verifies all three before touching the blob, so a checkpoint can
//! never be silently reinterpreted against the wrong vocabulary or model
//! shape. Weights and both optimizer moments are stored, which makes resumed
//! training bit-identical to uninterrupted training.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::store::ParamStore;
use crate::neural::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub vocab_hash: String,
    pub config_hash: String,
    pub step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, counted in f64 elements.
    offset: usize,
    len: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().fold(String::new(), |mut s, b| {
        s.push_str(&format!("{b:02x}"));
        s
    })
}

pub fn save_checkpoint(
    store: &ParamStore,
    path: &Path,
    vocab_hash: &str,
    config_hash: &str,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let mut push = |prefix: &str, name: &str, t: &Tensor, tensors: &mut Vec<TensorEntry>, blob: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name: format!("{prefix}/{name}"),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        for &x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        offset += t.len();
    };
    for (name, t) in &store.params {
        push("p", name, t, &mut tensors, &mut blob);
        push("m", name, &store.m[name], &mut tensors, &mut blob);
        push("v", name, &store.v[name], &mut tensors, &mut blob);
    }
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        vocab_hash: vocab_hash.to_string(),
        config_hash: config_hash.to_string(),
        step: store.step,
        tensors,
    };
    let manifest = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(8 + manifest.len() + blob.len());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint, verifying format version and, when given, the
/// vocabulary and config hashes. A mismatch is an incompatibility error; a
/// short or malformed file is a parse error and no store is produced.
pub fn load_checkpoint(
    path: &Path,
    expect_vocab: Option<&str>,
    expect_config: Option<&str>,
) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::parse("checkpoint", "file shorter than header"));
    }
    let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + mlen {
        return Err(Error::parse("checkpoint", "truncated manifest"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[8..8 + mlen])
        .map_err(|e| Error::parse("checkpoint manifest", &e.to_string()))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {} (expected {})",
            meta.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    if let Some(v) = expect_vocab {
        if v != meta.vocab_hash {
            return Err(Error::Incompatible(format!(
                "vocabulary hash mismatch: checkpoint {}, expected {v}",
                meta.vocab_hash
            )));
        }
    }
    if let Some(c) = expect_config {
        if c != meta.config_hash {
            return Err(Error::Incompatible(format!(
                "config hash mismatch: checkpoint {}, expected {c}",
                meta.config_hash
            )));
        }
    }
    let blob = &bytes[8 + mlen..];
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for entry in &meta.tensors {
        let end = (entry.offset + entry.len) * 8;
        if end > blob.len() {
            return Err(Error::parse(
                "checkpoint",
                &format!("truncated tensor data for {}", entry.name),
            ));
        }
        if entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::parse(
                "checkpoint",
                &format!("shape/length mismatch for {}", entry.name),
            ));
        }
        let mut data = Vec::with_capacity(entry.len);
        for i in 0..entry.len {
            let at = (entry.offset + i) * 8;
            data.push(f64::from_le_bytes(blob[at..at + 8].try_into().unwrap()));
        }
        let t = Tensor::from_raw(entry.shape.clone(), data);
        let (kind, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| Error::parse("checkpoint", &format!("bad tensor key {}", entry.name)))?;
        match kind {
            "p" => params.insert(name.to_string(), t),
            "m" => m.insert(name.to_string(), t),
            "v" => v.insert(name.to_string(), t),
            _ => {
                return Err(Error::parse(
                    "checkpoint",
                    &format!("unknown tensor kind {kind}"),
                ))
            }
        };
    }
    for name in params.keys() {
        if !m.contains_key(name) || !v.contains_key(name) {
            return Err(Error::parse(
                "checkpoint",
                &format!("missing optimizer moments for {name}"),
            ));
        }
    }
    let store = ParamStore {
        params,
        m,
        v,
        step: meta.step,
        version: 0,
    };
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        s.insert_randn("enc.w0", vec![4, 3], 0.5, &mut rng);
        s.insert_randn("enc.b0", vec![3], 0.5, &mut rng);
        s.insert_randn("gen.tok", vec![7, 3], 0.5, &mut rng);
        s.step = 42;
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let s = random_store();
        save_checkpoint(&s, &path, "vh", "ch").unwrap();
        let (loaded, meta) = load_checkpoint(&path, Some("vh"), Some("ch")).unwrap();
        assert_eq!(meta.step, 42);
        assert_eq!(loaded.step, 42);
        for (name, t) in &s.params {
            for (a, b) in t.data().iter().zip(loaded.params[name].data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        for (name, t) in &s.m {
            assert_eq!(t.data(), loaded.m[name].data());
        }
    }

    #[test]
    fn wrong_vocab_hash_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&random_store(), &path, "vh", "ch").unwrap();
        match load_checkpoint(&path, Some("other"), Some("ch")) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("vocabulary")),
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&random_store(), &path, "vh", "ch").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_checkpoint(&path, Some("vh"), Some("ch")) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
