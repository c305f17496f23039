//! Run configuration: one JSON file driving the whole pipeline.

use crate::model::ModelSpec;
use crate::objectives::ScoredSpan;
use crate::sampler::SamplerConfig;
use crate::schedule::TrainSchedule;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("config field {field}: {message}")]
    Invalid { field: String, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPaths {
    pub stories: PathBuf,
    pub books: PathBuf,
    pub ranking: PathBuf,
    pub pairs: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> DataPaths {
        DataPaths {
            stories: dir.join("stories.jsonl"),
            books: dir.join("books.jsonl"),
            ranking: dir.join("ranking.jsonl"),
            pairs: dir.join("pairs.jsonl"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    #[serde(default = "default_distractors")]
    pub n_distractors: usize,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub scored_span: ScoredSpan,
}

fn default_distractors() -> usize {
    9
}
fn default_samples() -> usize {
    1000
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_distractors: default_distractors(),
            n_samples: default_samples(),
            scored_span: ScoredSpan::default(),
        }
    }
}

/// Everything a run needs: paths, architecture, schedule, sampler, eval
/// options, and the single global seed all substreams derive from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataPaths,
    pub tokenizer_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,
    /// Target tokenizer vocabulary size (specials + alphabet + merges).
    #[serde(default = "default_vocab_size")]
    pub tokenizer_vocab_size: usize,
    /// `vocab_size` 0 means "take it from the trained tokenizer".
    pub model: ModelSpec,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    /// Fraction of stories held out for validation.
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
}

fn default_vocab_size() -> usize {
    512
}
fn default_val_fraction() -> f64 {
    0.1
}

impl RunConfig {
    /// A ready-to-run desk-scale configuration rooted at `dir`.
    pub fn desk_default(dir: &Path) -> RunConfig {
        RunConfig {
            seed: 0,
            data: DataPaths::in_dir(&dir.join("data")),
            tokenizer_path: dir.join("tokenizer.json"),
            checkpoint_dir: dir.join("checkpoints"),
            metrics_path: Some(dir.join("metrics.jsonl")),
            tokenizer_vocab_size: default_vocab_size(),
            model: ModelSpec {
                vocab_size: 0,
                ..ModelSpec::desk_default(0)
            },
            schedule: TrainSchedule::scaled_to(3_000),
            sampler: SamplerConfig::default(),
            eval: EvalOptions::default(),
            validation_fraction: default_val_fraction(),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, json).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Field-level validation; model vocab may stay 0 until the tokenizer
    /// exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, message: String| ConfigError::Invalid {
            field: field.to_string(),
            message,
        };
        if self.model.vocab_size != 0 {
            self.model
                .validate()
                .map_err(|e| invalid("model", e.to_string()))?;
        } else {
            let mut probe = self.model.clone();
            probe.vocab_size = self.tokenizer_vocab_size.max(4);
            probe
                .validate()
                .map_err(|e| invalid("model", e.to_string()))?;
        }
        self.schedule
            .validate()
            .map_err(|message| invalid("schedule", message))?;
        self.sampler
            .validate()
            .map_err(|e| invalid("sampler", e.to_string()))?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(invalid(
                "validation_fraction",
                format!("must be in [0,1), got {}", self.validation_fraction),
            ));
        }
        if self.tokenizer_vocab_size < 8 {
            return Err(invalid(
                "tokenizer_vocab_size",
                "too small to hold specials plus an alphabet".into(),
            ));
        }
        if self.eval.n_samples == 0 {
            return Err(invalid("eval.n_samples", "must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join("stage1.ckpt")
    }

    pub fn stage2_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join("stage2.ckpt")
    }

    pub fn stage2_best(&self) -> PathBuf {
        self.checkpoint_dir.join("stage2-best.ckpt")
    }
}
