//! Triangular learning-rate schedule and per-iteration task selection.

use serde::{Deserialize, Serialize};

/// Complete two-stage training recipe: LR curve, task alternation periods,
/// batch size, and the stopping rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Linear ramp 0 -> max_lr over this many iterations.
    #[serde(default = "default_warmup")]
    pub warmup_iters: u64,
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    /// Warmup plus decay; the LR reaches zero here.
    #[serde(default = "default_total")]
    pub total_iters: u64,
    /// Synthetic-pair ranking step fires every this many iterations.
    #[serde(default = "default_synth_period")]
    pub synth_period: u64,
    /// Multiple-choice ranking step fires every this many iterations.
    #[serde(default = "default_rank_period")]
    pub rank_period: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Ranking steps score this many items per step.
    #[serde(default = "default_rank_batch")]
    pub ranking_batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Stop after this many consecutive non-improving validations.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// When an iteration is a shared multiple of both periods, run both
    /// ranking steps (`true`) or only the multiple-choice one (`false`).
    #[serde(default = "default_true")]
    pub both_aux_on_shared_multiple: bool,
    /// Save a checkpoint every this many iterations (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_warmup() -> u64 {
    1_000
}
fn default_max_lr() -> f64 {
    5e-5
}
fn default_total() -> u64 {
    100_000
}
fn default_synth_period() -> u64 {
    15
}
fn default_rank_period() -> u64 {
    30
}
fn default_batch_size() -> usize {
    16
}
fn default_rank_batch() -> usize {
    4
}
fn default_eval_every() -> u64 {
    500
}
fn default_patience() -> usize {
    3
}
fn default_true() -> bool {
    true
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            warmup_iters: default_warmup(),
            max_lr: default_max_lr(),
            total_iters: default_total(),
            synth_period: default_synth_period(),
            rank_period: default_rank_period(),
            batch_size: default_batch_size(),
            ranking_batch_size: default_rank_batch(),
            eval_every: default_eval_every(),
            patience: default_patience(),
            both_aux_on_shared_multiple: default_true(),
            checkpoint_every: 0,
        }
    }
}

impl TrainSchedule {
    /// Shrink the default 1k/99k recipe to `total_iters`, preserving the
    /// 1:99 warmup:decay split.
    pub fn scaled_to(total_iters: u64) -> TrainSchedule {
        let warmup = (total_iters / 100).max(1);
        TrainSchedule {
            warmup_iters: warmup,
            total_iters,
            ..TrainSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.warmup_iters == 0 || self.warmup_iters >= self.total_iters {
            return Err(format!(
                "warmup_iters must satisfy 0 < {} < total_iters {}",
                self.warmup_iters, self.total_iters
            ));
        }
        if self.synth_period == 0 || self.rank_period == 0 {
            return Err("task periods must be >= 1".into());
        }
        if self.max_lr <= 0.0 {
            return Err("max_lr must be positive".into());
        }
        if self.batch_size == 0 || self.ranking_batch_size == 0 {
            return Err("batch sizes must be >= 1".into());
        }
        if self.eval_every == 0 {
            return Err("eval_every must be >= 1".into());
        }
        Ok(())
    }
}

/// Piecewise-linear triangular schedule: 0 at iteration 0, `max_lr` at
/// `warmup_iters`, back to 0 at `total_iters` and beyond.
pub fn lr_at(schedule: &TrainSchedule, iter: u64) -> f64 {
    if iter <= schedule.warmup_iters {
        schedule.max_lr * iter as f64 / schedule.warmup_iters as f64
    } else if iter >= schedule.total_iters {
        0.0
    } else {
        let decay_span = (schedule.total_iters - schedule.warmup_iters) as f64;
        let into_decay = (iter - schedule.warmup_iters) as f64;
        schedule.max_lr * (1.0 - into_decay / decay_span)
    }
}

/// A single optimizer step's task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lm,
    Synthetic,
    Swag,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Lm => write!(f, "lm"),
            Task::Synthetic => write!(f, "synthetic"),
            Task::Swag => write!(f, "swag"),
        }
    }
}

/// Ordered task list for a 1-based training iteration: always the LM step,
/// plus the ranking steps on their periods.
pub fn tasks_at(schedule: &TrainSchedule, iter: u64) -> Vec<Task> {
    assert!(iter >= 1, "training iterations are 1-based");
    let mut tasks = vec![Task::Lm];
    let synth_due = iter % schedule.synth_period == 0;
    let swag_due = iter % schedule.rank_period == 0;
    if synth_due && !(swag_due && !schedule.both_aux_on_shared_multiple) {
        tasks.push(Task::Synthetic);
    }
    if swag_due {
        tasks.push(Task::Swag);
    }
    tasks
}
