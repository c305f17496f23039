//! `storylab` — batch laboratory for training, evaluating, and sampling a
//! small story-writing language model with ranking-based auxiliary tasks.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use storylab_core::config::RunConfig;
use storylab_core::fixtures::FixtureSizes;
use storylab_core::pipeline::{self, PipelineError, Stage};

#[derive(Parser)]
#[command(
    name = "storylab",
    about = "Fixture generation, tokenizer training, two-stage model training, evaluation, and sampling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring every run-config field; flags override the file.
#[derive(Args, Debug, Default, Clone)]
struct ConfigOverrides {
    /// Path to the run configuration JSON
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every random substream derives from it
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding stories/books/ranking/pairs JSONL files
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Stories JSONL path (overrides --data-dir)
    #[arg(long)]
    stories: Option<PathBuf>,
    /// Books JSONL path (overrides --data-dir)
    #[arg(long)]
    books: Option<PathBuf>,
    /// Ranking JSONL path (overrides --data-dir)
    #[arg(long)]
    ranking: Option<PathBuf>,
    /// Synthetic pairs JSONL path (overrides --data-dir)
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Tokenizer vocabulary file
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Metrics JSONL path ("none" disables logging)
    #[arg(long)]
    metrics: Option<String>,
    /// Target tokenizer vocabulary size
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Fraction of stories held out for validation
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Model width
    #[arg(long)]
    d_model: Option<usize>,
    /// Transformer layers
    #[arg(long)]
    n_layers: Option<usize>,
    /// Attention heads
    #[arg(long)]
    n_heads: Option<usize>,
    /// Feed-forward inner width
    #[arg(long)]
    d_ff: Option<usize>,
    /// Context window
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Tie input and output embeddings
    #[arg(long)]
    tie_embeddings: Option<bool>,
    /// Dropout rate during training
    #[arg(long)]
    dropout: Option<f64>,
    /// Warmup iterations of the triangular schedule
    #[arg(long)]
    warmup_iters: Option<u64>,
    /// Peak learning rate
    #[arg(long)]
    max_lr: Option<f64>,
    /// Total schedule length (warmup + decay)
    #[arg(long)]
    total_iters: Option<u64>,
    /// Synthetic ranking step period
    #[arg(long)]
    synth_period: Option<u64>,
    /// Multiple-choice ranking step period
    #[arg(long)]
    rank_period: Option<u64>,
    /// LM batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Ranking items per ranking step
    #[arg(long)]
    ranking_batch_size: Option<usize>,
    /// Validation cadence in iterations
    #[arg(long)]
    eval_every: Option<u64>,
    /// Consecutive non-improving validations before stopping
    #[arg(long)]
    patience: Option<usize>,
    /// Run both ranking steps when periods coincide
    #[arg(long)]
    both_aux_on_shared_multiple: Option<bool>,
    /// Periodic checkpoint cadence (0 = end only)
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Nucleus mass threshold
    #[arg(long)]
    p: Option<f64>,
    /// New tokens per sample
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Softmax temperature before filtering
    #[arg(long)]
    temperature: Option<f64>,
    /// Sampling seed (defaults to the global seed)
    #[arg(long)]
    sample_seed: Option<u64>,
    /// Distractor prompts per prompt-ranking sample
    #[arg(long)]
    n_distractors: Option<usize>,
    /// Prompt-ranking sample count
    #[arg(long)]
    n_samples: Option<usize>,
    /// Ranking score span: full or continuation_only
    #[arg(long)]
    scored_span: Option<String>,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let base = self
                    .data_dir
                    .clone()
                    .unwrap_or_else(|| PathBuf::from("."));
                RunConfig::desk_default(&base)
            }
        };
        if let Some(dir) = &self.data_dir {
            config.data = storylab_core::config::DataPaths::in_dir(dir);
        }
        if let Some(v) = &self.stories {
            config.data.stories = v.clone();
        }
        if let Some(v) = &self.books {
            config.data.books = v.clone();
        }
        if let Some(v) = &self.ranking {
            config.data.ranking = v.clone();
        }
        if let Some(v) = &self.pairs {
            config.data.pairs = v.clone();
        }
        if let Some(v) = &self.tokenizer {
            config.tokenizer_path = v.clone();
        }
        if let Some(v) = &self.checkpoint_dir {
            config.checkpoint_dir = v.clone();
        }
        if let Some(v) = &self.metrics {
            config.metrics_path = if v == "none" {
                None
            } else {
                Some(PathBuf::from(v))
            };
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.vocab_size {
            config.tokenizer_vocab_size = v;
        }
        if let Some(v) = self.validation_fraction {
            config.validation_fraction = v;
        }
        if let Some(v) = self.d_model {
            config.model.d_model = v;
        }
        if let Some(v) = self.n_layers {
            config.model.n_layers = v;
        }
        if let Some(v) = self.n_heads {
            config.model.n_heads = v;
        }
        if let Some(v) = self.d_ff {
            config.model.d_ff = v;
        }
        if let Some(v) = self.max_seq_len {
            config.model.max_seq_len = v;
        }
        if let Some(v) = self.tie_embeddings {
            config.model.tie_embeddings = v;
        }
        if let Some(v) = self.dropout {
            config.model.dropout = v;
        }
        if let Some(v) = self.warmup_iters {
            config.schedule.warmup_iters = v;
        }
        if let Some(v) = self.max_lr {
            config.schedule.max_lr = v;
        }
        if let Some(v) = self.total_iters {
            config.schedule.total_iters = v;
        }
        if let Some(v) = self.synth_period {
            config.schedule.synth_period = v;
        }
        if let Some(v) = self.rank_period {
            config.schedule.rank_period = v;
        }
        if let Some(v) = self.batch_size {
            config.schedule.batch_size = v;
        }
        if let Some(v) = self.ranking_batch_size {
            config.schedule.ranking_batch_size = v;
        }
        if let Some(v) = self.eval_every {
            config.schedule.eval_every = v;
        }
        if let Some(v) = self.patience {
            config.schedule.patience = v;
        }
        if let Some(v) = self.both_aux_on_shared_multiple {
            config.schedule.both_aux_on_shared_multiple = v;
        }
        if let Some(v) = self.checkpoint_every {
            config.schedule.checkpoint_every = v;
        }
        if let Some(v) = self.p {
            config.sampler.p = v;
        }
        if let Some(v) = self.max_new_tokens {
            config.sampler.max_new_tokens = v;
        }
        if let Some(v) = self.temperature {
            config.sampler.temperature = v;
        }
        config.sampler.seed = self.sample_seed.unwrap_or(config.seed);
        if let Some(v) = self.n_distractors {
            config.eval.n_distractors = v;
        }
        if let Some(v) = self.n_samples {
            config.eval.n_samples = v;
        }
        if let Some(v) = &self.scored_span {
            config.eval.scored_span = match v.as_str() {
                "full" => storylab_core::objectives::ScoredSpan::Full,
                "continuation_only" => storylab_core::objectives::ScoredSpan::ContinuationOnly,
                other => {
                    return Err(PipelineError::Usage(format!(
                        "scored_span must be full or continuation_only, got {other}"
                    )))
                }
            };
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate miniature stories/books/ranking/pairs datasets
    Fixtures {
        /// Output directory for the four JSONL files
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        stories: usize,
        #[arg(long, default_value_t = 500)]
        book_lines: usize,
        #[arg(long, default_value_t = 100)]
        ranking_items: usize,
        #[arg(long, default_value_t = 100)]
        synthetic_pairs: usize,
    },
    /// Train the subword tokenizer on the story and book corpora
    Tokenizer {
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Run the training pipeline
    Train {
        /// 1 (domain adaptation), 2 (multi-task), or all
        #[arg(long, default_value = "all")]
        stage: Stage,
        /// Start stage 2 from fresh weights instead of the stage-1 checkpoint
        #[arg(long)]
        from_scratch: bool,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Evaluate a checkpoint and emit a JSON report
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also append a CSV row (with header when the file is new)
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Generate a story from a checkpoint
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt text; omit to let the model write its own prompt
        #[arg(long)]
        prompt: Option<String>,
        /// Read the prompt from a file instead
        #[arg(long, conflicts_with = "prompt")]
        prompt_file: Option<PathBuf>,
        /// Write the story here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Write a default run configuration to stdout or a file
    InitConfig {
        /// Root directory the config's paths point into
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Fixtures {
            out,
            seed,
            stories,
            book_lines,
            ranking_items,
            synthetic_pairs,
        } => {
            let paths = pipeline::run_fixtures(
                &out,
                seed,
                FixtureSizes {
                    stories,
                    book_lines,
                    ranking_items,
                    synthetic_pairs,
                },
            )?;
            println!(
                "wrote {}, {}, {}, {}",
                paths.stories.display(),
                paths.books.display(),
                paths.ranking.display(),
                paths.pairs.display()
            );
            Ok(())
        }
        Command::Tokenizer { overrides } => {
            let config = overrides.resolve()?;
            let vocab = pipeline::run_tokenizer(&config)?;
            println!(
                "trained tokenizer: {} pieces ({} merges) -> {}",
                vocab.size(),
                vocab.merges().len(),
                config.tokenizer_path.display()
            );
            Ok(())
        }
        Command::Train {
            stage,
            from_scratch,
            overrides,
        } => {
            let config = overrides.resolve()?;
            pipeline::run_train(&config, stage, from_scratch)?;
            println!("training complete; checkpoints in {}", config.checkpoint_dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            out,
            csv,
            overrides,
        } => {
            let config = overrides.resolve()?;
            let report = pipeline::run_eval(&config, &checkpoint)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(path) => std::fs::write(&path, &json).map_err(|source| {
                    PipelineError::Io {
                        path: path.display().to_string(),
                        source,
                    }
                })?,
                None => println!("{json}"),
            }
            if let Some(path) = csv {
                let mut row = String::new();
                if !path.exists() {
                    row.push_str(&report.csv_header());
                    row.push('\n');
                }
                row.push_str(&report.csv_row());
                row.push('\n');
                use std::io::Write;
                let mut file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|source| PipelineError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                file.write_all(row.as_bytes()).map_err(|source| PipelineError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
            Ok(())
        }
        Command::Sample {
            checkpoint,
            prompt,
            prompt_file,
            out,
            overrides,
        } => {
            let config = overrides.resolve()?;
            let prompt = match (prompt, prompt_file) {
                (Some(text), _) => Some(text),
                (None, Some(path)) => Some(
                    std::fs::read_to_string(&path)
                        .map_err(|source| PipelineError::Io {
                            path: path.display().to_string(),
                            source,
                        })?
                        .trim()
                        .to_string(),
                ),
                (None, None) => None,
            };
            let story = pipeline::run_sample(&config, &checkpoint, prompt.as_deref())?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &story.text).map_err(|source| PipelineError::Io {
                        path: path.display().to_string(),
                        source,
                    })?
                }
                None => println!("{}", story.text),
            }
            Ok(())
        }
        Command::InitConfig { dir, out } => {
            let config = RunConfig::desk_default(&dir);
            let json = serde_json::to_string_pretty(&config).expect("config serializes");
            match out {
                Some(path) => std::fs::write(&path, &json).map_err(|source| {
                    PipelineError::Io {
                        path: path.display().to_string(),
                        source,
                    }
                })?,
                None => println!("{json}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {}", err.kind(), err);
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
