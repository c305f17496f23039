//! High-level pipeline steps behind the CLI: fixture generation, tokenizer
//! training, the two training stages, evaluation, and sampling.

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::{self, DataError, StoryExample};
use crate::evaluator::{self, Accuracy, EvalError, EvalReport, EvalSequence, ReportMetadata};
use crate::fixtures::{self, FixtureSizes};
use crate::model::{Model, ModelError, ModelSpec};
use crate::objectives::RankingChoices;
use crate::rng::{self};
use crate::sampler::{self, GeneratedStory, SamplerError};
use crate::tokenizer::{TokenizerError, Vocab};
use crate::trainer::{
    self, MetricsLog, Stage1Data, Stage2Data, TrainState, TrainerError, TrainerOptions,
};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Usage(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Usage(_) => 2,
            PipelineError::Trainer(TrainerError::Config(_)) => 2,
            PipelineError::Data(_) | PipelineError::Tokenizer(_) => 3,
            PipelineError::Checkpoint(_) => 3,
            PipelineError::Trainer(TrainerError::Numeric { .. }) => 4,
            PipelineError::Model(ModelError::Tensor(_)) => 4,
            _ => 1,
        }
    }

    /// Stable single-line prefix for scripts.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            4 => "numeric",
            _ => "runtime",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Emit the four fixture files into `out_dir`.
pub fn run_fixtures(
    out_dir: &Path,
    seed: u64,
    sizes: FixtureSizes,
) -> Result<fixtures::FixturePaths, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    Ok(fixtures::write(out_dir, seed, sizes)?)
}

/// Train the tokenizer on the story and book corpora named by the config
/// and persist it.
pub fn run_tokenizer(config: &RunConfig) -> Result<Vocab, PipelineError> {
    config.validate()?;
    let stories = data::load_stories(&config.data.stories)?;
    let books = data::load_books(&config.data.books)?;
    let mut corpus: Vec<String> = stories.iter().map(data::format_prompt_story).collect();
    corpus.extend(books);
    let vocab = Vocab::train(
        corpus.iter().map(String::as_str),
        config.tokenizer_vocab_size,
    )?;
    if let Some(parent) = config.tokenizer_path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    vocab.save(&config.tokenizer_path)?;
    Ok(vocab)
}

fn resolved_spec(config: &RunConfig, vocab: &Vocab) -> Result<ModelSpec, PipelineError> {
    let mut spec = config.model.clone();
    if spec.vocab_size == 0 {
        spec.vocab_size = vocab.size();
    }
    spec.validate()?;
    Ok(spec)
}

/// Deterministic train/validation split of the stories.
pub fn split_stories(
    stories: &[StoryExample],
    fraction: f64,
    seed: u64,
) -> (Vec<StoryExample>, Vec<StoryExample>) {
    let mut indices: Vec<usize> = (0..stories.len()).collect();
    let mut rng = rng::substream(seed, "split", 0);
    indices.shuffle(&mut rng);
    let n_val = ((stories.len() as f64 * fraction).round() as usize).min(stories.len() / 2);
    let (val_idx, train_idx) = indices.split_at(n_val);
    let pick = |idx: &[usize]| idx.iter().map(|&i| stories[i].clone()).collect();
    (pick(train_idx), pick(val_idx))
}

fn encode_stories_for_lm(
    vocab: &Vocab,
    stories: &[StoryExample],
    max_seq_len: usize,
) -> Result<Vec<Vec<u32>>, PipelineError> {
    stories
        .iter()
        .map(|s| Ok(data::encode_for_lm(vocab, &data::format_prompt_story(s), max_seq_len)?))
        .collect()
}

fn eval_sequences(
    vocab: &Vocab,
    stories: &[StoryExample],
    max_seq_len: usize,
) -> Result<Vec<EvalSequence>, PipelineError> {
    stories
        .iter()
        .map(|s| {
            Ok(EvalSequence::from_text(
                vocab,
                &data::format_prompt_story(s),
                max_seq_len,
            )?)
        })
        .collect()
}

fn pack_items(
    items: &[data::RankingItem],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<Vec<RankingChoices>, PipelineError> {
    items
        .iter()
        .map(|item| Ok(data::pack_ranking_item(item, vocab, max_seq_len)?))
        .collect()
}

pub struct PreparedStage2 {
    pub data: Stage2Data,
    pub validation_stories: Vec<StoryExample>,
}

pub fn prepare_stage1(config: &RunConfig, vocab: &Vocab) -> Result<Stage1Data, PipelineError> {
    let spec = resolved_spec(config, vocab)?;
    let books = data::load_books(&config.data.books)?;
    let corpus = books
        .iter()
        .map(|text| Ok(data::encode_for_lm(vocab, text, spec.max_seq_len)?))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(Stage1Data { corpus })
}

pub fn prepare_stage2(config: &RunConfig, vocab: &Vocab) -> Result<PreparedStage2, PipelineError> {
    let spec = resolved_spec(config, vocab)?;
    let stories = data::load_stories(&config.data.stories)?;
    let (train, val) = split_stories(&stories, config.validation_fraction, config.seed);
    let swag = pack_items(&data::load_ranking(&config.data.ranking)?, vocab, spec.max_seq_len)?;
    let synthetic = pack_items(
        &data::load_synthetic_pairs(&config.data.pairs)?,
        vocab,
        spec.max_seq_len,
    )?;
    Ok(PreparedStage2 {
        data: Stage2Data {
            stories: encode_stories_for_lm(vocab, &train, spec.max_seq_len)?,
            validation: eval_sequences(vocab, &val, spec.max_seq_len)?,
            swag,
            synthetic,
        },
        validation_stories: val,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    All,
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "all" => Ok(Stage::All),
            other => Err(format!("stage must be 1, 2, or all, got {other}")),
        }
    }
}

fn metrics_for(config: &RunConfig) -> Result<MetricsLog, PipelineError> {
    match &config.metrics_path {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            MetricsLog::to_file(path).map_err(io_err(path))
        }
        None => Ok(MetricsLog::disabled()),
    }
}

/// Run the requested training stage(s). Stage 2 loads the stage-1
/// checkpoint unless `from_scratch` is set.
pub fn run_train(
    config: &RunConfig,
    stage: Stage,
    from_scratch: bool,
) -> Result<(), PipelineError> {
    config.validate()?;
    let vocab = Vocab::load(&config.tokenizer_path)?;
    let hash = vocab.content_hash();
    std::fs::create_dir_all(&config.checkpoint_dir).map_err(io_err(&config.checkpoint_dir))?;
    let mut metrics = metrics_for(config)?;

    if matches!(stage, Stage::One | Stage::All) {
        let spec = resolved_spec(config, &vocab)?;
        let model = Model::init(&spec, config.seed)?;
        let mut state = TrainState::fresh(model, Default::default());
        let opts = TrainerOptions {
            checkpoint_path: Some(config.stage1_checkpoint()),
            ..TrainerOptions::new(config.seed, &hash)
        };
        let data = prepare_stage1(config, &vocab)?;
        trainer::train_stage1(&mut state, &data, &config.schedule, &opts, &mut metrics)?;
    }

    if matches!(stage, Stage::Two | Stage::All) {
        let model = if from_scratch {
            let spec = resolved_spec(config, &vocab)?;
            Model::init(&spec, config.seed)?
        } else {
            let stage1 = config.stage1_checkpoint();
            if !stage1.exists() {
                return Err(PipelineError::Usage(format!(
                    "stage 2 needs the stage-1 checkpoint at {}; run stage 1 first or pass --from-scratch",
                    stage1.display()
                )));
            }
            let ck = checkpoint::load(&stage1)?;
            ck.verify_tokenizer(&hash)?;
            ck.model
        };
        // the stage-2 recipe restarts the schedule from iteration zero
        let mut state = TrainState::fresh(model, Default::default());
        let opts = TrainerOptions {
            scored_span: config.eval.scored_span,
            checkpoint_path: Some(config.stage2_checkpoint()),
            best_path: Some(config.stage2_best()),
            ..TrainerOptions::new(config.seed, &hash)
        };
        let prepared = prepare_stage2(config, &vocab)?;
        trainer::train_stage2(&mut state, &prepared.data, &config.schedule, &opts, &mut metrics)?;
    }
    Ok(())
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Evaluate a checkpoint: perplexities and prompt ranking on the held-out
/// story split, multiple-choice accuracy on the ranking and pair files.
pub fn run_eval(config: &RunConfig, checkpoint_path: &Path) -> Result<EvalReport, PipelineError> {
    config.validate()?;
    let vocab = Vocab::load(&config.tokenizer_path)?;
    let ck = checkpoint::load(checkpoint_path)?;
    ck.verify_tokenizer(&vocab.content_hash())?;
    let model = ck.model;

    let stories = data::load_stories(&config.data.stories)?;
    let (_, val) = split_stories(&stories, config.validation_fraction, config.seed);
    let val_seqs = eval_sequences(&vocab, &val, model.spec.max_seq_len)?;
    let (subword_ppl, word_ppl, tokens, words) = evaluator::perplexities(&model, &val_seqs)?;

    let prompt_ranking = if val.len() > config.eval.n_distractors {
        Some(Accuracy {
            accuracy: evaluator::prompt_ranking(
                &model,
                &vocab,
                &val,
                config.eval.n_distractors,
                config.eval.n_samples,
                config.seed,
            )?,
            count: config.eval.n_samples,
        })
    } else {
        None
    };

    let mut mc_accuracies = BTreeMap::new();
    let mut dataset_hashes = BTreeMap::new();
    for (name, path, loader) in [
        (
            "ranking",
            &config.data.ranking,
            data::load_ranking as fn(&Path) -> Result<Vec<data::RankingItem>, DataError>,
        ),
        ("pairs", &config.data.pairs, data::load_synthetic_pairs),
    ] {
        let items = loader(path)?;
        let packed = pack_items(&items, &vocab, model.spec.max_seq_len)?;
        let accuracy =
            evaluator::mc_ranking_accuracy(&model, &packed, config.eval.scored_span)?;
        mc_accuracies.insert(
            name.to_string(),
            Accuracy {
                accuracy,
                count: packed.len(),
            },
        );
        dataset_hashes.insert(name.to_string(), file_hash(path)?);
    }
    dataset_hashes.insert("stories".into(), file_hash(&config.data.stories)?);

    Ok(EvalReport {
        subword_ppl,
        word_ppl,
        prompt_ranking,
        mc_accuracies,
        metadata: ReportMetadata {
            checkpoint: format!(
                "{} iteration {} params {}",
                checkpoint_path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "checkpoint".into()),
                ck.iteration,
                file_hash(checkpoint_path)?
            ),
            seed: config.seed,
            dataset_hashes,
            pooling: "token-weighted over the corpus; whitespace-delimited words".into(),
            scored_span: config.eval.scored_span,
            subword_tokens: tokens,
            words,
        },
    })
}

/// Generate one story from a checkpoint, optionally seeded with a prompt.
pub fn run_sample(
    config: &RunConfig,
    checkpoint_path: &Path,
    prompt: Option<&str>,
) -> Result<GeneratedStory, PipelineError> {
    config.validate()?;
    let vocab = Vocab::load(&config.tokenizer_path)?;
    let ck = checkpoint::load(checkpoint_path)?;
    ck.verify_tokenizer(&vocab.content_hash())?;
    Ok(sampler::generate(&ck.model, &vocab, &config.sampler, prompt)?)
}

/// Convenience for tests and the `train --stage all` smoke path: fixtures,
/// tokenizer, both stages, one eval line.
pub fn ensure_dirs(config: &RunConfig) -> Result<(), PipelineError> {
    if let Some(parent) = config.data.stories.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::create_dir_all(&config.checkpoint_dir).map_err(io_err(&config.checkpoint_dir))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> RunConfig {
        let mut config = RunConfig::desk_default(dir);
        config.tokenizer_vocab_size = 160;
        config.model = ModelSpec {
            vocab_size: 0,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 64,
            tie_embeddings: true,
            dropout: 0.0,
        };
        config.schedule = crate::schedule::TrainSchedule {
            warmup_iters: 2,
            max_lr: 3e-3,
            total_iters: 8,
            synth_period: 4,
            rank_period: 8,
            batch_size: 2,
            ranking_batch_size: 2,
            eval_every: 4,
            patience: 2,
            both_aux_on_shared_multiple: true,
            checkpoint_every: 0,
        };
        config.eval.n_samples = 20;
        config.eval.n_distractors = 3;
        config
    }

    #[test]
    fn full_pipeline_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        ensure_dirs(&config).unwrap();
        run_fixtures(
            config.data.stories.parent().unwrap(),
            config.seed,
            FixtureSizes {
                stories: 24,
                book_lines: 24,
                ranking_items: 12,
                synthetic_pairs: 12,
            },
        )
        .unwrap();
        run_tokenizer(&config).unwrap();
        run_train(&config, Stage::All, false).unwrap();
        assert!(config.stage1_checkpoint().exists());
        assert!(config.stage2_checkpoint().exists());

        let report = run_eval(&config, &config.stage2_checkpoint()).unwrap();
        assert!(report.subword_ppl.is_finite() && report.subword_ppl > 1.0);
        assert!(report.word_ppl >= report.subword_ppl);
        assert_eq!(report.mc_accuracies.len(), 2);

        let story = run_sample(&config, &config.stage2_checkpoint(), Some("the small dog"))
            .unwrap();
        assert!(!story.text.is_empty());
    }

    #[test]
    fn stage2_without_stage1_checkpoint_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        ensure_dirs(&config).unwrap();
        run_fixtures(
            config.data.stories.parent().unwrap(),
            config.seed,
            FixtureSizes {
                stories: 12,
                book_lines: 12,
                ranking_items: 8,
                synthetic_pairs: 8,
            },
        )
        .unwrap();
        run_tokenizer(&config).unwrap();
        let err = run_train(&config, Stage::Two, false).unwrap_err();
        assert!(err.to_string().contains("stage1.ckpt"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let stories: Vec<StoryExample> = (0..20)
            .map(|i| StoryExample::new(&format!("p {i}"), &format!("s {i}")).unwrap())
            .collect();
        let (train_a, val_a) = split_stories(&stories, 0.25, 7);
        let (train_b, val_b) = split_stories(&stories, 0.25, 7);
        assert_eq!(train_a, train_b);
        assert_eq!(val_a, val_b);
        assert_eq!(train_a.len() + val_a.len(), 20);
        for v in &val_a {
            assert!(!train_a.contains(v));
        }
    }
}
