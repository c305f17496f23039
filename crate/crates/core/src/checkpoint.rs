//! Self-describing checkpoint container.
//!
//! Layout: magic, little-endian u64 header length, JSON header (model spec,
//! named parameter shapes, tokenizer hash, iteration counter, optional
//! optimizer/trainer state), then raw little-endian f64 blobs in header
//! order. Save -> load -> save reproduces identical bytes.

use crate::model::{Model, ModelSpec};
use crate::optimizer::{AdamConfig, OptimizerState};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SLCP0001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint header: {0}")]
    BadHeader(String),
    #[error("checkpoint parameter {name} has wrong length: {got} vs {expected}")]
    BadBlob {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("checkpoint was built with a different tokenizer (hash {found} vs {expected})")]
    TokenizerMismatch { found: String, expected: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Early-stopping bookkeeping carried across a resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StopState {
    pub best_val_ppl: Option<f64>,
    pub evals_since_improvement: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    params: Vec<ParamEntry>,
    tokenizer_hash: String,
    iteration: u64,
    adam: Option<AdamConfig>,
    adam_step: u64,
    stop_state: Option<StopState>,
}

/// Everything needed to resume training exactly, or to evaluate/sample.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub tokenizer_hash: String,
    pub iteration: u64,
    pub optimizer: Option<OptimizerState>,
    pub stop_state: Option<StopState>,
}

impl Checkpoint {
    pub fn for_eval(model: Model, tokenizer_hash: &str, iteration: u64) -> Checkpoint {
        Checkpoint {
            model,
            tokenizer_hash: tokenizer_hash.to_string(),
            iteration,
            optimizer: None,
            stop_state: None,
        }
    }

    /// Refuse to pair a checkpoint with a tokenizer it was not built with.
    pub fn verify_tokenizer(&self, hash: &str) -> Result<(), CheckpointError> {
        if self.tokenizer_hash != hash {
            return Err(CheckpointError::TokenizerMismatch {
                found: hash.to_string(),
                expected: self.tokenizer_hash.clone(),
            });
        }
        Ok(())
    }
}

pub fn save(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut params = Vec::new();
    checkpoint.model.for_each_param(|name, t| {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    });
    let header = Header {
        spec: checkpoint.model.spec.clone(),
        params,
        tokenizer_hash: checkpoint.tokenizer_hash.clone(),
        iteration: checkpoint.iteration,
        adam: checkpoint.optimizer.as_ref().map(|o| o.config),
        adam_step: checkpoint.optimizer.as_ref().map(|o| o.step).unwrap_or(0),
        stop_state: checkpoint.stop_state.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    checkpoint.model.for_each_param(|_, t| {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    if let Some(opt) = &checkpoint.optimizer {
        for moments in [&opt.first_moments, &opt.second_moments] {
            for m in moments {
                for v in m {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&out).map_err(io_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err)?;

    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut cursor = MAGIC.len();
    let header_len = u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap()) as usize;
    cursor += 8;
    if bytes.len() < cursor + header_len {
        return Err(CheckpointError::BadHeader("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[cursor..cursor + header_len])
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    cursor += header_len;

    let mut read_blob = |numel: usize, name: &str| -> Result<Vec<f64>, CheckpointError> {
        let bytes_needed = numel * 8;
        if bytes.len() < cursor + bytes_needed {
            return Err(CheckpointError::BadBlob {
                name: name.to_string(),
                got: (bytes.len() - cursor) / 8,
                expected: numel,
            });
        }
        let blob = bytes[cursor..cursor + bytes_needed]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += bytes_needed;
        Ok(blob)
    };

    // Rebuild the model, then overwrite parameters from the blobs.
    let mut model = Model::init(&header.spec, 0)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let mut blobs = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        blobs.push(read_blob(numel, &entry.name)?);
    }
    let mut idx = 0;
    let mut mismatch = None;
    model.for_each_param_mut(|name, t| {
        if mismatch.is_some() {
            return;
        }
        if idx >= blobs.len() || header.params[idx].name != name {
            mismatch = Some(name.to_string());
            return;
        }
        if blobs[idx].len() != t.numel() {
            mismatch = Some(name.to_string());
            return;
        }
        t.values_mut().copy_from_slice(&blobs[idx]);
        idx += 1;
    });
    if let Some(name) = mismatch {
        return Err(CheckpointError::BadHeader(format!(
            "parameter list mismatch at {name}"
        )));
    }

    let optimizer = match header.adam {
        Some(config) => {
            let mut state = OptimizerState::new(&model, config);
            state.step = header.adam_step;
            for moments in [&mut state.first_moments, &mut state.second_moments] {
                for m in moments.iter_mut() {
                    let numel = m.len();
                    m.copy_from_slice(&read_blob(numel, "adam")?);
                }
            }
            Some(state)
        }
        None => None,
    };

    Ok(Checkpoint {
        model,
        tokenizer_hash: header.tokenizer_hash,
        iteration: header.iteration,
        optimizer,
        stop_state: header.stop_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::optimizer::AdamConfig;

    fn tiny_model() -> Model {
        let spec = ModelSpec {
            vocab_size: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            tie_embeddings: true,
            dropout: 0.0,
        };
        Model::init(&spec, 11).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let mut opt = OptimizerState::new(&model, AdamConfig::default());
        opt.step = 42;
        opt.first_moments[0][3] = 0.125;
        let ck = Checkpoint {
            model,
            tokenizer_hash: "abc123".into(),
            iteration: 17,
            optimizer: Some(opt),
            stop_state: Some(StopState {
                best_val_ppl: Some(12.5),
                evals_since_improvement: 1,
            }),
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&ck, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let expected_values = model.tok_emb.values().to_vec();
        let ck = Checkpoint::for_eval(model, "hash", 3);
        let path = dir.path().join("c.ckpt");
        save(&ck, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.iteration, 3);
        assert_eq!(loaded.tokenizer_hash, "hash");
        assert_eq!(loaded.model.tok_emb.values(), &expected_values[..]);
        assert!(loaded.optimizer.is_none());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn tokenizer_hash_guard() {
        let ck = Checkpoint::for_eval(tiny_model(), "expected", 0);
        assert!(ck.verify_tokenizer("expected").is_ok());
        assert!(matches!(
            ck.verify_tokenizer("other"),
            Err(CheckpointError::TokenizerMismatch { .. })
        ));
    }
}
