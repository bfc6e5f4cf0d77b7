//! Weights as raw little-endian `f64` in `checkpoint.bin`, described by a
//! JSON index in `checkpoint.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_BIN: &str = "checkpoint.bin";
pub const CHECKPOINT_INDEX: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    /// Position of the first value in the binary file, in bytes.
    pub byte_offset: usize,
    pub dims: Vec<String>,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub model: ModelConfig,
    pub entries: Vec<CheckpointEntry>,
}

/// Writes `checkpoint.bin` and `checkpoint.json` into `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(params.num_values() * 8);
    let mut entries = Vec::new();
    for (name, t) in params.entries() {
        entries.push(CheckpointEntry {
            name,
            byte_offset: bytes.len(),
            dims: t.names().to_vec(),
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(CHECKPOINT_BIN), bytes)?;
    let index = CheckpointIndex {
        model: cfg.clone(),
        entries,
    };
    fs::write(dir.join(CHECKPOINT_INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Every weight the
/// stored config implies must be present with matching dims.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ModelParams)> {
    let index: CheckpointIndex = serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_INDEX))?)?;
    let bytes = fs::read(dir.join(CHECKPOINT_BIN))?;
    let mut params = build_model(&index.model, 0)?;
    let expected = params.entries().len();
    if index.entries.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint lists {} tensors, model needs {expected}",
            index.entries.len()
        )));
    }
    for (name, t) in params.entries_mut() {
        let e = index
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing '{name}'")))?;
        if e.dims != t.names() || e.shape != t.shape() {
            return Err(Error::Shape(format!(
                "'{name}' stored as {:?} {:?}, model expects {:?}",
                e.dims,
                e.shape,
                t.dims()
            )));
        }
        let end = e.byte_offset + t.len() * 8;
        let raw = bytes.get(e.byte_offset..end).ok_or_else(|| {
            Error::Config(format!("'{name}' runs past the end of {CHECKPOINT_BIN}"))
        })?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok((index.model, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MoePlacement;
    use crate::routing::RouterConfig;

    #[test]
    fn roundtrip_is_exact() {
        let mut cfg = ModelConfig::dense(2, 8, 2, 12, 16, 4);
        cfg.moe_placement = MoePlacement::LastK { k: 1 };
        cfg.router = RouterConfig::new(3, 2, 1.5);
        let p = build_model(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &p).unwrap();
        let (c2, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let cfg = ModelConfig::dense(1, 4, 1, 4, 8, 2);
        let p = build_model(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &p).unwrap();
        let bin = dir.path().join(CHECKPOINT_BIN);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
