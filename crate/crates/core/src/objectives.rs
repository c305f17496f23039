//! The two training losses: next-token cross-entropy and a ranking loss
//! over length-normalized sequence log-probabilities.
//!
//! The ranking loss softmaxes per-sequence scores `(1/T_i) * log P(S_i)`
//! and charges the negative log-likelihood of the correct choice. It reuses
//! the model's own output distribution and introduces no parameters.

use crate::model::{Model, ModelError, StagedParams};
use crate::tensor::{Graph, NodeId};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("sequence has no predictable positions")]
    NoPredictablePositions,
    #[error("ranking needs at least 2 choices, got {0}")]
    TooFewChoices(usize),
    #[error("scored span is empty")]
    EmptyScoredSpan,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which tokens of a packed choice sequence enter the normalized score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoredSpan {
    /// Context and continuation both count toward `T_i`.
    #[default]
    Full,
    /// Context tokens condition only; `T_i` counts the continuation.
    ContinuationOnly,
}

/// One ranking example: token sequences sharing a context prefix, plus
/// the index of the sensible choice.
#[derive(Debug, Clone)]
pub struct RankingChoices {
    pub sequences: Vec<Vec<u32>>,
    /// Context prefix length (tokens, excluding the leading anchor) shared
    /// by every sequence; zero for standalone pairs.
    pub context_len: usize,
    pub correct_index: usize,
}

/// Length-normalized scores ready for the ranking softmax.
#[derive(Debug, Clone)]
pub struct RankedScores {
    pub scores: Vec<f64>,
    pub correct_index: usize,
}

/// Mean negative log-likelihood per predicted token, differentiable
/// w.r.t. the staged parameters. `token_ids` must start with the anchor
/// (BOS) so every real token is predicted.
pub fn lm_loss_staged(
    model: &Model,
    graph: &mut Graph,
    staged: &StagedParams,
    token_ids: &[u32],
) -> Result<NodeId, ObjectiveError> {
    ce_over_span(model, graph, staged, token_ids, 0, None)
}

/// Train-mode variant: dropout fires when the model spec asks for it.
pub fn lm_loss_staged_train(
    model: &Model,
    graph: &mut Graph,
    staged: &StagedParams,
    token_ids: &[u32],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, ObjectiveError> {
    ce_over_span(model, graph, staged, token_ids, 0, dropout_rng)
}

/// Cross-entropy over predicted positions `skip..T-1` of `token_ids`
/// (targets `skip+1..T`). `skip` counts conditioning-only predictions
/// to drop from the mean.
fn ce_over_span(
    model: &Model,
    graph: &mut Graph,
    staged: &StagedParams,
    token_ids: &[u32],
    skip: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, ObjectiveError> {
    let t = token_ids.len();
    if t < 2 || skip >= t - 1 {
        return Err(ObjectiveError::NoPredictablePositions);
    }
    let vocab = model.spec.vocab_size;
    let logits = model.forward_staged(graph, staged, token_ids, dropout_rng)?;
    // predicted rows are skip..t-1; slice contiguous rows via reshape+narrow
    let n_pred = t - 1 - skip;
    let flat = graph.reshape(logits, 1, t * vocab).map_err(ModelError::from)?;
    let span = graph
        .narrow_cols(flat, skip * vocab, n_pred * vocab)
        .map_err(ModelError::from)?;
    let pred_logits = graph.reshape(span, n_pred, vocab).map_err(ModelError::from)?;
    let targets: Vec<usize> = token_ids[skip + 1..].iter().map(|&i| i as usize).collect();
    let loss = graph
        .cross_entropy(pred_logits, &targets, None)
        .map_err(ModelError::from)?;
    Ok(loss)
}

/// One-shot LM loss value for a sequence (fresh graph, no gradient kept).
pub fn lm_loss(model: &Model, token_ids: &[u32]) -> Result<f64, ObjectiveError> {
    let mut graph = Graph::new();
    let staged = model.stage(&mut graph);
    let loss = lm_loss_staged(model, &mut graph, &staged, token_ids)?;
    Ok(graph.values(loss)[0])
}

/// Arithmetic mean of per-token log-probabilities: the `(1/T) log P`
/// score behind both ranking training and perplexity ranking.
pub fn normalized_score(log_probs: &[f64]) -> f64 {
    assert!(!log_probs.is_empty(), "normalized_score over empty span");
    crate::tensor::kernels::kahan_sum(log_probs) / log_probs.len() as f64
}

/// Length-normalized log-probability of `continuation` after `context`.
/// The anchor token starts every sequence; with `ScoredSpan::Full` the
/// context tokens are scored too, otherwise they only condition.
pub fn rank_score(
    model: &Model,
    context_ids: &[u32],
    continuation_ids: &[u32],
    span: ScoredSpan,
) -> Result<f64, ObjectiveError> {
    let mut ids = Vec::with_capacity(1 + context_ids.len() + continuation_ids.len());
    ids.push(crate::tokenizer::BOS_ID);
    ids.extend_from_slice(context_ids);
    ids.extend_from_slice(continuation_ids);
    if ids.len() < 2 {
        return Err(ObjectiveError::EmptyScoredSpan);
    }
    let skip = match span {
        ScoredSpan::Full => 0,
        ScoredSpan::ContinuationOnly => context_ids.len(),
    };
    let log_probs = model.sequence_log_probs(&ids)?;
    if skip >= log_probs.len() {
        return Err(ObjectiveError::EmptyScoredSpan);
    }
    Ok(normalized_score(&log_probs[skip..]))
}

/// Scores for every choice of a packed ranking example.
pub fn ranked_scores(
    model: &Model,
    choices: &RankingChoices,
    span: ScoredSpan,
) -> Result<RankedScores, ObjectiveError> {
    if choices.sequences.len() < 2 {
        return Err(ObjectiveError::TooFewChoices(choices.sequences.len()));
    }
    let mut scores = Vec::with_capacity(choices.sequences.len());
    for seq in &choices.sequences {
        let (ctx, cont) = seq.split_at(choices.context_len.min(seq.len()));
        scores.push(rank_score(model, ctx, cont, span)?);
    }
    Ok(RankedScores {
        scores,
        correct_index: choices.correct_index,
    })
}

/// Closed-form ranking loss over plain scores:
/// `-log softmax(scores)[correct]`.
pub fn ranking_loss_from_scores(scores: &[f64], correct_index: usize) -> f64 {
    assert!(scores.len() >= 2 && correct_index < scores.len());
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    log_sum - scores[correct_index]
}

/// Differentiable ranking loss. Each choice runs its own forward pass over
/// the shared staged parameters; the per-choice normalized scores feed one
/// softmax cross-entropy, so gradients flow into the model through every
/// choice and no new parameters appear.
pub fn ranking_loss_staged(
    model: &Model,
    graph: &mut Graph,
    staged: &StagedParams,
    choices: &RankingChoices,
    span: ScoredSpan,
) -> Result<NodeId, ObjectiveError> {
    ranking_loss_staged_train(model, graph, staged, choices, span, None)
}

/// Train-mode variant with optional dropout.
pub fn ranking_loss_staged_train(
    model: &Model,
    graph: &mut Graph,
    staged: &StagedParams,
    choices: &RankingChoices,
    span: ScoredSpan,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, ObjectiveError> {
    let n = choices.sequences.len();
    if n < 2 {
        return Err(ObjectiveError::TooFewChoices(n));
    }
    let mut score_nodes = Vec::with_capacity(n);
    for seq in &choices.sequences {
        if seq.is_empty() {
            return Err(ObjectiveError::EmptyScoredSpan);
        }
        let mut ids = Vec::with_capacity(seq.len() + 1);
        ids.push(crate::tokenizer::BOS_ID);
        ids.extend_from_slice(seq);
        let skip = match span {
            ScoredSpan::Full => 0,
            ScoredSpan::ContinuationOnly => choices.context_len,
        };
        let ce = ce_over_span(model, graph, staged, &ids, skip, dropout_rng.as_deref_mut())?;
        // score = -ce = (1/T) sum log P
        let score = graph.scale(ce, -1.0).map_err(ModelError::from)?;
        score_nodes.push(score);
    }
    let scores = graph.concat_cols(&score_nodes).map_err(ModelError::from)?;
    let loss = graph
        .cross_entropy(scores, &[choices.correct_index], None)
        .map_err(ModelError::from)?;
    Ok(loss)
}

/// One-shot ranking loss value (fresh graph, no gradients kept).
pub fn ranking_loss(
    model: &Model,
    choices: &RankingChoices,
    span: ScoredSpan,
) -> Result<f64, ObjectiveError> {
    let mut graph = Graph::new();
    let staged = model.stage(&mut graph);
    let loss = ranking_loss_staged(model, &mut graph, &staged, choices, span)?;
    Ok(graph.values(loss)[0])
}
