//! Versioned binary checkpoints: magic, format version, a JSON header with
//! the model config and step counter, then every parameter as f32 LE.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{build_model, KHeadModel, ModelConfig, Segmenter};
use crate::data;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"UGSSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Training step at which the weights were taken.
    pub step: u64,
    pub param_count: usize,
}

pub fn encode(model: &KHeadModel, step: u64) -> Vec<u8> {
    let header = CheckpointHeader {
        model: *model.config(),
        step,
        param_count: model.param_count(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * header.param_count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(KHeadModel, u64)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedFormat(format!("checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut model = build_model(&header.model, 0)?;
    if model.param_count() != header.param_count {
        return Err(bad("parameter count does not match config"));
    }
    let values = &bytes[16 + len..];
    if values.len() != 4 * header.param_count {
        return Err(bad("parameter block has the wrong length"));
    }
    let mut chunks = values.chunks_exact(4);
    for p in model.params_mut() {
        for v in p.value.iter_mut() {
            *v = f32::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
    }
    Ok((model, header.step))
}

pub fn save(model: &KHeadModel, step: u64, path: &Path) -> Result<()> {
    data::write_atomic(path, &encode(model, step))
}

pub fn load(path: &Path) -> Result<(KHeadModel, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            k: 2,
            levels: 1,
            base_channels: 2,
            num_classes: 5,
            head_depth: 1,
        }
    }

    #[test]
    fn round_trip_preserves_weights_and_step() {
        let m = build_model(&config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&m, 42, &path).unwrap();
        let (back, step) = load(&path).unwrap();
        assert_eq!(step, 42);
        let a: Vec<_> = m.params().iter().map(|p| p.value.clone()).collect();
        let b: Vec<_> = back.params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(a, b);
        assert_eq!(encode(&back, 42), encode(&m, 42));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = encode(&build_model(&config(), 5).unwrap(), 1);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        assert!(decode(b"garbage").is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(Error::UnsupportedFormat(_))));
    }
}
