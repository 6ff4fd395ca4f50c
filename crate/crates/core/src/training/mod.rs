//! Optimization: learning-rate schedules, Adam, token-budget batching,
//! checkpoint files and averaging, and the training and fine-tuning loops.

use serde::{Deserialize, Serialize};

use crate::decoding::BeamConfig;
use crate::error::{Error, Result};

mod batching;
mod checkpoint;
mod optimizer;
mod trainer;

pub use batching::make_batches;
pub use checkpoint::{average_checkpoints, checkpoint_path, list_checkpoints, Checkpoint, FORMAT_VERSION};
pub use optimizer::{clip_grad_norm, Adam};
pub use trainer::{compare_finetune_schedules, evaluate_dev, finetune, prepare_examples, train_loop, DevScores, DevSet, MetricsRecord, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear warmup, then inverse square root decay.
    Rsqrt,
    /// Linear warmup, then constant.
    LinearConstant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    /// Per batch: sentence count times the longest framed sequence.
    pub batch_tokens: usize,
    pub checkpoint_every: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Pairs with more subword pieces on either side are dropped.
    pub max_pieces: usize,
    pub log_every: usize,
    /// Decode the dev set at every checkpoint to log F0.5.
    pub score_dev: bool,
    /// Dev sentences decoded for F0.5; 0 means all.
    pub dev_decode_limit: usize,
    pub dev_beam: BeamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            warmup_steps: 8000,
            schedule: Schedule::Rsqrt,
            batch_tokens: 4096,
            checkpoint_every: 1000,
            max_steps: 20000,
            seed: 1,
            clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            max_pieces: 150,
            log_every: 100,
            score_dev: true,
            dev_decode_limit: 0,
            dev_beam: BeamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Warmup to 3e-4 over 20,000 steps, then constant.
    pub fn finetune_defaults() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            warmup_steps: 20_000,
            schedule: Schedule::LinearConstant,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        if self.batch_tokens < self.max_pieces + 1 {
            return Err(Error::Config(format!(
                "batch_tokens {} cannot hold a sentence of max_pieces {} plus framing",
                self.batch_tokens, self.max_pieces
            )));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("checkpoint_every and log_every must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("peak_lr must be > 0 and clip_norm >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        self.dev_beam.validate()
    }
}

/// `peak * min(step / warmup, sqrt(warmup / step))` for rsqrt, or
/// `peak * min(step / warmup, 1)` for linear-then-constant. Zero at step 0.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let s = step as f64;
    let w = cfg.warmup_steps.max(1) as f64;
    let warm = s / w;
    match cfg.schedule {
        Schedule::Rsqrt => cfg.peak_lr * warm.min((w / s).sqrt()),
        Schedule::LinearConstant => cfg.peak_lr * warm.min(1.0),
    }
}

/// Linear warmup to `peak_lr`, constant afterwards, whatever `cfg.schedule` says.
pub fn finetune_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    lr_schedule(
        step,
        &TrainConfig {
            schedule: Schedule::LinearConstant,
            ..cfg.clone()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch_schedule() -> TrainConfig {
        TrainConfig {
            peak_lr: 0.011,
            warmup_steps: 8000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rsqrt_points() {
        let c = scratch_schedule();
        assert!((lr_schedule(8000, &c) - 0.011).abs() < 1e-15);
        assert!((lr_schedule(4000, &c) - 0.0055).abs() < 1e-15);
        assert!((lr_schedule(32000, &c) - 0.0055).abs() < 1e-15);
        assert_eq!(lr_schedule(0, &c), 0.0);
    }

    #[test]
    fn finetune_points() {
        let c = TrainConfig::finetune_defaults();
        assert!((finetune_schedule(20_000, &c) - 3e-4).abs() < 1e-18);
        assert!((finetune_schedule(10_000, &c) - 1.5e-4).abs() < 1e-18);
        assert!((finetune_schedule(1_000_000, &c) - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn continuous_at_warmup() {
        for schedule in [Schedule::Rsqrt, Schedule::LinearConstant] {
            let c = TrainConfig {
                schedule,
                ..scratch_schedule()
            };
            let a = lr_schedule(7999, &c);
            let b = lr_schedule(8000, &c);
            let d = lr_schedule(8001, &c);
            assert!((a - b).abs() < 2e-6 && (d - b).abs() < 2e-6);
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_tokens: 100,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
