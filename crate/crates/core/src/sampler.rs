//! Nucleus (top-p) sampling for story generation.

use crate::data;
use crate::model::{Model, ModelError};
use crate::rng::{self, stream};
use crate::tokenizer::{TokenizerError, Vocab, BOS_ID, EOS_ID};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    BadConfig(String),
    #[error("nucleus filter input sums to {0}, not a distribution")]
    NotNormalized(f64),
    #[error("prompt occupies {got} tokens; at most {max} fit before generation")]
    PromptTooLong { got: usize, max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    /// Generation stops when this token is produced; length caps always
    /// apply as well.
    #[serde(default = "default_stop_token")]
    pub stop_token: Option<u32>,
}

fn default_p() -> f64 {
    0.9
}
fn default_max_new_tokens() -> usize {
    64
}
fn default_temperature() -> f64 {
    1.0
}
fn default_stop_token() -> Option<u32> {
    Some(EOS_ID)
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            p: default_p(),
            max_new_tokens: default_max_new_tokens(),
            temperature: default_temperature(),
            seed: 0,
            stop_token: default_stop_token(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(SamplerError::BadConfig(format!(
                "p must be in (0, 1], got {}",
                self.p
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(SamplerError::BadConfig("max_new_tokens must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(SamplerError::BadConfig("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// The nucleus: kept token ids (by descending probability, ties broken by
/// token id) and their renormalized probabilities.
#[derive(Debug, Clone)]
pub struct Nucleus {
    pub token_ids: Vec<u32>,
    pub probs: Vec<f64>,
}

impl Nucleus {
    pub fn contains(&self, id: u32) -> bool {
        self.token_ids.contains(&id)
    }

    /// Draw one token id from the renormalized nucleus.
    pub fn sample(&self, rng: &mut impl Rng) -> u32 {
        let x: f64 = rng.gen();
        let mut cumulative = 0.0;
        for (id, p) in self.token_ids.iter().zip(&self.probs) {
            cumulative += p;
            if x < cumulative {
                return *id;
            }
        }
        *self.token_ids.last().expect("nucleus never empty")
    }
}

/// Keep the smallest prefix of tokens, in descending probability order,
/// whose cumulative mass reaches `p`; renormalize over the kept set.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Nucleus, SamplerError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(SamplerError::BadConfig(format!("p must be in (0, 1], got {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SamplerError::NotNormalized(total));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for idx in order {
        kept.push(idx);
        mass += probs[idx];
        if mass >= p {
            break;
        }
    }
    let norm: f64 = kept.iter().map(|&i| probs[i]).sum();
    Ok(Nucleus {
        token_ids: kept.iter().map(|&i| i as u32).collect(),
        probs: kept.iter().map(|&i| probs[i] / norm).collect(),
    })
}

fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Generated text plus the token-level trace for auditing.
#[derive(Debug, Clone)]
pub struct GeneratedStory {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub prompt_token_count: usize,
}

/// Autoregressive nucleus sampling. With a prompt the sequence seeds from
/// the formatted prompt prefix; without one the model writes its own
/// prompt starting from the template's opening token. Each step recomputes
/// the full prefix; generation stops at the stop token, the new-token cap,
/// or the context limit.
pub fn generate(
    model: &Model,
    vocab: &Vocab,
    config: &SamplerConfig,
    prompt_text: Option<&str>,
) -> Result<GeneratedStory, SamplerError> {
    config.validate()?;
    let mut ids = vec![BOS_ID];
    match prompt_text {
        Some(prompt) => {
            ids.extend(vocab.encode_ids(&data::format_prompt_prefix(prompt))?);
        }
        None => {
            // opening of the prompt-story template; the model continues it
            ids.extend(vocab.encode_ids("Prompt:")?);
        }
    }
    if ids.len() >= model.spec.max_seq_len {
        return Err(SamplerError::PromptTooLong {
            got: ids.len(),
            max: model.spec.max_seq_len - 1,
        });
    }
    let prompt_token_count = ids.len();
    let mut rng = rng::substream(config.seed, stream::SAMPLE, 0);

    for _ in 0..config.max_new_tokens {
        if ids.len() >= model.spec.max_seq_len {
            break;
        }
        let logits = model.logits(&ids)?;
        let (rows, vocab_size) = logits.dims2();
        let last = &logits.values()[(rows - 1) * vocab_size..];
        let probs = softmax_with_temperature(last, config.temperature);
        let nucleus = nucleus_filter(&probs, config.p)?;
        let next = nucleus.sample(&mut rng);
        ids.push(next);
        if Some(next) == config.stop_token {
            break;
        }
    }

    let body: Vec<u32> = ids[1..]
        .iter()
        .copied()
        .filter(|&id| Some(id) != config.stop_token)
        .collect();
    Ok(GeneratedStory {
        text: vocab.decode(&body)?,
        token_ids: ids,
        prompt_token_count,
    })
}
