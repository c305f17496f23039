//! Dataset schemas, JSONL ingestion, and example formatting: prompt-story
//! concatenation, ranking packing, truncation, and batching.

use crate::objectives::RankingChoices;
use crate::tokenizer::{TokenizerError, Vocab, BOS_ID, EOS_ID, PAD_ID, SEP};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {message}")]
    Validation {
        path: String,
        line: usize,
        message: String,
    },
    #[error("ranking item invalid: {0}")]
    BadItem(String),
    #[error("truncation removed every continuation token of choice {choice}")]
    ContinuationLost { choice: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// A prompt paired with its story; both whitespace-normalized, non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryExample {
    pub prompt: String,
    pub story: String,
}

impl StoryExample {
    pub fn new(prompt: &str, story: &str) -> Option<StoryExample> {
        let prompt = normalize_ws(prompt);
        let story = normalize_ws(story);
        if prompt.is_empty() || story.is_empty() {
            return None;
        }
        Some(StoryExample { prompt, story })
    }
}

/// A shared context with one sensible choice among distractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingItem {
    #[serde(default)]
    pub context: String,
    pub choices: Vec<String>,
    pub correct_index: usize,
}

impl RankingItem {
    pub fn validate(&self) -> Result<(), String> {
        if self.choices.len() < 2 {
            return Err(format!("need at least 2 choices, got {}", self.choices.len()));
        }
        if self.correct_index >= self.choices.len() {
            return Err(format!(
                "correct_index {} out of range for {} choices",
                self.correct_index,
                self.choices.len()
            ));
        }
        for (i, a) in self.choices.iter().enumerate() {
            if normalize_ws(a).is_empty() {
                return Err(format!("choice {i} is empty"));
            }
            for (j, b) in self.choices.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(format!("choices {i} and {j} are duplicates"));
                }
            }
        }
        Ok(())
    }
}

/// Raw schema of synthetic human/machine text pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub human: String,
    pub machine: String,
}

impl From<SyntheticPair> for RankingItem {
    fn from(pair: SyntheticPair) -> RankingItem {
        RankingItem {
            context: String::new(),
            choices: vec![pair.human, pair.machine],
            correct_index: 0,
        }
    }
}

/// Raw schema of book-corpus lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BookLine {
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Lm,
    Ranking,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Lm => write!(f, "lm"),
            TaskKind::Ranking => write!(f, "ranking"),
        }
    }
}

/// Padded token matrix with a mask; pad positions never enter a loss.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    pub task: TaskKind,
}

impl Batch {
    /// Pack variable-length sequences into a right-padded matrix.
    pub fn from_sequences(sequences: Vec<Vec<u32>>, task: TaskKind) -> Batch {
        let width = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut rows = Vec::with_capacity(sequences.len());
        let mut mask = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let mut m = vec![true; seq.len()];
            m.resize(width, false);
            let mut row = seq;
            row.resize(width, PAD_ID);
            rows.push(row);
            mask.push(m);
        }
        Batch {
            rows,
            mask,
            task,
        }
    }

    /// Recover the unpadded sequences.
    pub fn sequences(&self) -> Vec<Vec<u32>> {
        self.rows
            .iter()
            .zip(&self.mask)
            .map(|(row, mask)| {
                row.iter()
                    .zip(mask)
                    .filter(|(_, keep)| **keep)
                    .map(|(id, _)| *id)
                    .collect()
            })
            .collect()
    }
}

pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Render a prompt-story pair as one model input. The separator token's
/// surface form splits the two fields unambiguously because normalized
/// prompts cannot contain a line break.
pub fn format_prompt_story(example: &StoryExample) -> String {
    format!(
        "Prompt: {}\n{SEP}\nStory: {}",
        example.prompt, example.story
    )
}

/// The prompt-side prefix of the formatted pair, up to and including the
/// story marker; story tokens follow after one space.
pub fn format_prompt_prefix(prompt: &str) -> String {
    format!("Prompt: {}\n{SEP}\nStory:", normalize_ws(prompt))
}

/// Invert [`format_prompt_story`].
pub fn parse_prompt_story(text: &str) -> Option<StoryExample> {
    let marker = format!("\n{SEP}\nStory: ");
    let rest = text.strip_prefix("Prompt: ")?;
    let split = rest.find(&marker)?;
    let prompt = &rest[..split];
    let story = &rest[split + marker.len()..];
    StoryExample::new(prompt, story)
}

/// Token sequence for LM training/evaluation of one formatted text:
/// `BOS … EOS`, truncated to `max_seq_len`.
pub fn encode_for_lm(
    vocab: &Vocab,
    text: &str,
    max_seq_len: usize,
) -> Result<Vec<u32>, DataError> {
    let mut ids = vec![BOS_ID];
    ids.extend(vocab.encode_ids(text)?);
    ids.push(EOS_ID);
    ids.truncate(max_seq_len);
    Ok(ids)
}

/// Pack a ranking item: each choice becomes `encode(context + " " + choice)`
/// truncated to `max_seq_len - 1` (an anchor token is added at scoring
/// time). Items whose truncation would erase a whole continuation are
/// rejected, never silently kept.
pub fn pack_ranking_item(
    item: &RankingItem,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<RankingChoices, DataError> {
    item.validate().map_err(DataError::BadItem)?;
    let context = normalize_ws(&item.context);
    let context_ids = if context.is_empty() {
        Vec::new()
    } else {
        vocab.encode_ids(&context)?
    };
    let budget = max_seq_len.saturating_sub(1);
    let mut sequences = Vec::with_capacity(item.choices.len());
    for (i, choice) in item.choices.iter().enumerate() {
        let full = if context.is_empty() {
            normalize_ws(choice)
        } else {
            format!("{} {}", context, normalize_ws(choice))
        };
        let mut ids = vocab.encode_ids(&full)?;
        ids.truncate(budget);
        if ids.len() <= context_ids.len() {
            return Err(DataError::ContinuationLost { choice: i });
        }
        sequences.push(ids);
    }
    Ok(RankingChoices {
        sequences,
        context_len: context_ids.len(),
        correct_index: item.correct_index,
    })
}

fn load_lines<T, F>(path: &Path, mut convert: F) -> Result<Vec<T>, DataError>
where
    F: FnMut(serde_json::Value, usize) -> Result<T, DataError>,
    T: Sized,
{
    let display = path.display().to_string();
    let content = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| DataError::Parse {
                path: display.clone(),
                line: line_no,
                message: e.to_string(),
            })?;
        out.push(convert(value, line_no)?);
    }
    Ok(out)
}

fn field_error(path: &Path, line: usize, err: serde_json::Error) -> DataError {
    DataError::Validation {
        path: path.display().to_string(),
        line,
        message: format!("schema violation: {err}"),
    }
}

pub fn load_stories(path: &Path) -> Result<Vec<StoryExample>, DataError> {
    load_lines(path, |value, line| {
        let raw: StoryExample =
            serde_json::from_value(value).map_err(|e| field_error(path, line, e))?;
        StoryExample::new(&raw.prompt, &raw.story).ok_or_else(|| DataError::Validation {
            path: path.display().to_string(),
            line,
            message: "prompt and story must be non-empty".into(),
        })
    })
}

pub fn load_books(path: &Path) -> Result<Vec<String>, DataError> {
    load_lines(path, |value, line| {
        let raw: BookLine =
            serde_json::from_value(value).map_err(|e| field_error(path, line, e))?;
        let text = normalize_ws(&raw.text);
        if text.is_empty() {
            return Err(DataError::Validation {
                path: path.display().to_string(),
                line,
                message: "text must be non-empty".into(),
            });
        }
        Ok(text)
    })
}

pub fn load_ranking(path: &Path) -> Result<Vec<RankingItem>, DataError> {
    load_lines(path, |value, line| {
        let item: RankingItem =
            serde_json::from_value(value).map_err(|e| field_error(path, line, e))?;
        item.validate().map_err(|message| DataError::Validation {
            path: path.display().to_string(),
            line,
            message,
        })?;
        Ok(item)
    })
}

/// Synthetic pairs normalize into 2-way ranking items with the human
/// text at index 0.
pub fn load_synthetic_pairs(path: &Path) -> Result<Vec<RankingItem>, DataError> {
    load_lines(path, |value, line| {
        let pair: SyntheticPair =
            serde_json::from_value(value).map_err(|e| field_error(path, line, e))?;
        let item: RankingItem = pair.into();
        item.validate().map_err(|message| DataError::Validation {
            path: path.display().to_string(),
            line,
            message,
        })?;
        Ok(item)
    })
}

pub fn save_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DataError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("serializable row"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
