//! Evaluation harness: subword and estimated word-level perplexity, prompt
//! ranking, and multiple-choice ranking accuracy.
//!
//! Per-item terms are computed independently (in parallel when enabled),
//! collected in item order, then pooled with compensated summation, so
//! results do not depend on thread count.

use crate::data::{self, StoryExample};
use crate::model::{Model, ModelError};
use crate::objectives::{self, RankingChoices, ScoredSpan};
use crate::rng::{self, stream};
use crate::tensor::kernels::kahan_sum;
use crate::tokenizer::{Vocab, BOS_ID};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate on an empty corpus")]
    EmptyCorpus,
    #[error("corpus has no words to score")]
    NoWords,
    #[error("prompt ranking needs more than {needed} stories, got {got}")]
    NotEnoughPrompts { needed: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] objectives::ObjectiveError),
    #[error(transparent)]
    Data(#[from] data::DataError),
}

/// One evaluation sequence: anchor token first, word-start flags aligned
/// with the token ids.
#[derive(Debug, Clone)]
pub struct EvalSequence {
    pub ids: Vec<u32>,
    pub word_starts: Vec<bool>,
}

impl EvalSequence {
    /// Anchor + encoded text, truncated to `max_seq_len`.
    pub fn from_text(vocab: &Vocab, text: &str, max_seq_len: usize) -> Result<Self, EvalError> {
        let enc = vocab.encode(text).map_err(data::DataError::from)?;
        let mut ids = vec![BOS_ID];
        let mut word_starts = vec![false];
        ids.extend(&enc.token_ids);
        word_starts.extend(&enc.word_starts);
        ids.truncate(max_seq_len);
        word_starts.truncate(max_seq_len);
        Ok(EvalSequence { ids, word_starts })
    }
}

fn map_sequences<T, F>(items: &[T], f: F) -> Vec<Result<(f64, usize, usize), EvalError>>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, usize, usize), EvalError> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Pooled negative log-likelihood over a corpus: returns
/// (total nll, predicted token count, predicted word count).
fn corpus_nll(model: &Model, corpus: &[EvalSequence]) -> Result<(f64, usize, usize), EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let per_seq = map_sequences(corpus, |seq| {
        if seq.ids.len() < 2 {
            return Ok((0.0, 0, 0));
        }
        let lps = model.sequence_log_probs(&seq.ids)?;
        let nll = -kahan_sum(&lps);
        let words = seq.word_starts[1..].iter().filter(|w| **w).count();
        Ok((nll, lps.len(), words))
    });
    let mut nlls = Vec::with_capacity(per_seq.len());
    let mut tokens = 0usize;
    let mut words = 0usize;
    for r in per_seq {
        let (nll, t, w) = r?;
        nlls.push(nll);
        tokens += t;
        words += w;
    }
    if tokens == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok((kahan_sum(&nlls), tokens, words))
}

/// Corpus-pooled subword perplexity: `exp(total nll / predicted tokens)`.
pub fn subword_perplexity(model: &Model, corpus: &[EvalSequence]) -> Result<f64, EvalError> {
    let (nll, tokens, _) = corpus_nll(model, corpus)?;
    Ok((nll / tokens as f64).exp())
}

/// Word-level perplexity estimated by grouping subword log-probabilities
/// into their words: `exp(total nll / word count)`. Algebraically equals
/// `subword_ppl ^ (subword_count / word_count)`.
pub fn word_perplexity(model: &Model, corpus: &[EvalSequence]) -> Result<f64, EvalError> {
    let (nll, _, words) = corpus_nll(model, corpus)?;
    if words == 0 {
        return Err(EvalError::NoWords);
    }
    Ok((nll / words as f64).exp())
}

/// Both perplexities in one pass, with the counts they pooled over.
pub fn perplexities(
    model: &Model,
    corpus: &[EvalSequence],
) -> Result<(f64, f64, usize, usize), EvalError> {
    let (nll, tokens, words) = corpus_nll(model, corpus)?;
    if words == 0 {
        return Err(EvalError::NoWords);
    }
    Ok((
        (nll / tokens as f64).exp(),
        (nll / words as f64).exp(),
        tokens,
        words,
    ))
}

/// Conditional story perplexity: the story's tokens scored under the
/// formatted prompt prefix, normalized over story tokens only.
pub fn conditional_story_ppl(
    model: &Model,
    vocab: &Vocab,
    prompt: &str,
    story: &str,
) -> Result<f64, EvalError> {
    let prefix_ids = vocab
        .encode_ids(&data::format_prompt_prefix(prompt))
        .map_err(data::DataError::from)?;
    let story_ids = vocab.encode_ids(story).map_err(data::DataError::from)?;
    let mut ids = Vec::with_capacity(1 + prefix_ids.len() + story_ids.len());
    ids.push(BOS_ID);
    ids.extend(&prefix_ids);
    ids.extend(&story_ids);
    ids.truncate(model.spec.max_seq_len);
    let ctx_end = (1 + prefix_ids.len()).min(ids.len());
    let score = objectives::rank_score(
        model,
        &ids[1..ctx_end],
        &ids[ctx_end..],
        ScoredSpan::ContinuationOnly,
    )?;
    Ok((-score).exp())
}

/// Prompt-ranking accuracy: each sampled story is scored under its true
/// prompt and `n_distractors` other prompts drawn without replacement; a
/// sample counts only when the true prompt yields the strict minimum
/// conditional perplexity. Ties count as incorrect.
pub fn prompt_ranking(
    model: &Model,
    vocab: &Vocab,
    stories: &[StoryExample],
    n_distractors: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if stories.len() <= n_distractors {
        return Err(EvalError::NotEnoughPrompts {
            needed: n_distractors,
            got: stories.len(),
        });
    }
    // Pre-draw all candidate sets so scoring can run in parallel.
    let mut draws: Vec<(usize, Vec<usize>)> = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let mut rng = rng::substream(seed, stream::EVAL, s as u64);
        let story_idx = rand::Rng::gen_range(&mut rng, 0..stories.len());
        // distractor prompts come from other stories, without replacement
        let pool: Vec<usize> = (0..stories.len()).filter(|&i| i != story_idx).collect();
        let picked = sample_indices(&mut rng, pool.len(), n_distractors);
        let distractors: Vec<usize> = picked.iter().map(|i| pool[i]).collect();
        draws.push((story_idx, distractors));
    }

    let outcomes: Vec<Result<bool, EvalError>> = {
        let score_one = |(story_idx, distractors): &(usize, Vec<usize>)| -> Result<bool, EvalError> {
            let story = &stories[*story_idx].story;
            let true_ppl = conditional_story_ppl(model, vocab, &stories[*story_idx].prompt, story)?;
            let mut strictly_best = true;
            for &d in distractors {
                let ppl = conditional_story_ppl(model, vocab, &stories[d].prompt, story)?;
                if ppl <= true_ppl {
                    strictly_best = false;
                    break;
                }
            }
            Ok(strictly_best)
        };
        #[cfg(feature = "parallel")]
        {
            draws.par_iter().map(score_one).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            draws.iter().map(score_one).collect()
        }
    };

    let mut correct = 0usize;
    for o in outcomes {
        if o? {
            correct += 1;
        }
    }
    Ok(correct as f64 / n_samples as f64)
}

/// Multiple-choice accuracy: the model's perplexity over each packed choice
/// sequence, correct when the lowest perplexity lands on the answer.
/// Exact ties are incorrect.
pub fn mc_ranking_accuracy(
    model: &Model,
    items: &[RankingChoices],
    span: ScoredSpan,
) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let verdicts: Vec<Result<bool, EvalError>> = {
        let judge = |item: &RankingChoices| -> Result<bool, EvalError> {
            let ranked = objectives::ranked_scores(model, item, span)?;
            // lowest perplexity <=> highest length-normalized score
            let ppls: Vec<f64> = ranked.scores.iter().map(|s| (-s).exp()).collect();
            let best = ppls[ranked.correct_index];
            let strictly_lowest = ppls
                .iter()
                .enumerate()
                .all(|(i, &p)| i == ranked.correct_index || p > best);
            Ok(strictly_lowest)
        };
        #[cfg(feature = "parallel")]
        {
            items.par_iter().map(judge).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            items.iter().map(judge).collect()
        }
    };
    let mut correct = 0usize;
    for v in verdicts {
        if v? {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Accuracy with its sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub count: usize,
}

/// Full evaluation report mirroring the harness's metric columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub subword_ppl: f64,
    pub word_ppl: f64,
    pub prompt_ranking: Option<Accuracy>,
    pub mc_accuracies: BTreeMap<String, Accuracy>,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub checkpoint: String,
    pub seed: u64,
    pub dataset_hashes: BTreeMap<String, String>,
    /// Token-weighted pooling over the corpus, whitespace word definition.
    pub pooling: String,
    pub scored_span: ScoredSpan,
    pub subword_tokens: usize,
    pub words: usize,
}

impl EvalReport {
    /// Metric columns as one CSV row (`header()` gives the column names).
    pub fn csv_row(&self) -> String {
        let pr = self
            .prompt_ranking
            .map(|a| format!("{:.4}", a.accuracy))
            .unwrap_or_default();
        let mut cols = vec![
            format!("{:.4}", self.subword_ppl),
            format!("{:.4}", self.word_ppl),
            pr,
        ];
        for (name, acc) in &self.mc_accuracies {
            cols.push(format!("{}={:.4}", name, acc.accuracy));
        }
        cols.join(",")
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["subword_ppl".into(), "word_ppl".into(), "prompt_ranking".into()];
        for name in self.mc_accuracies.keys() {
            cols.push(name.clone());
        }
        cols.join(",")
    }
}
