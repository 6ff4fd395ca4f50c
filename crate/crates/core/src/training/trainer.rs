use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batching::make_batches;
use super::checkpoint::{checkpoint_path, Checkpoint};
use super::optimizer::{clip_grad_norm, Adam};
use super::{lr_schedule, Schedule, TrainConfig};
use crate::corpus::SentencePair;
use crate::decoding::{correct_all, IterativeConfig, ModelCorrector};
use crate::error::{Error, Result};
use crate::eval::{score_corpus, ScoreReport, ScoredSentence};
use crate::model::{make_example, Example, ModelConfig, Mode, Transformer};
use crate::noising::derived_rng;
use crate::subword::SubwordVocab;
use crate::tokenize::tokenize;

/// Encodes pairs and drops those longer than `max_pieces` on either side.
pub fn prepare_examples(vocab: &SubwordVocab, pairs: &[SentencePair], mle_weight: f64, max_pieces: usize) -> Vec<Example> {
    pairs
        .par_iter()
        .map(|p| make_example(vocab, p, mle_weight))
        .filter(|e| e.src.len() <= max_pieces + 1 && e.labels.len() <= max_pieces + 1)
        .collect()
}

/// Held-out pairs with their encoded form.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub pairs: Vec<SentencePair>,
    pub examples: Vec<Example>,
}

impl DevSet {
    pub fn new(vocab: &SubwordVocab, pairs: Vec<SentencePair>, mle_weight: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("dev set".into()));
        }
        let examples = pairs.par_iter().map(|p| make_example(vocab, p, mle_weight)).collect();
        Ok(DevSet { pairs, examples })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevScores {
    /// Weighted loss per target token, eval mode.
    pub loss: f64,
    pub report: Option<ScoreReport>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean weighted training loss per target token since the previous record.
    pub loss: Option<f64>,
    pub dev_loss: Option<f64>,
    pub dev_p: Option<f64>,
    pub dev_r: Option<f64>,
    pub dev_f05: Option<f64>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<MetricsRecord>,
    /// Checkpoint with the highest dev F0.5, when the dev set was scored.
    pub best_checkpoint: Option<(PathBuf, f64)>,
}

/// Dev loss, plus F0.5 from single-pass decoding when `cfg.score_dev` is set.
pub fn evaluate_dev(model: &Transformer<f32>, vocab: &SubwordVocab, dev: &DevSet, cfg: &TrainConfig) -> Result<DevScores> {
    let sums = model.loss(&dev.examples, Mode::Eval)?;
    let report = if cfg.score_dev {
        let n = if cfg.dev_decode_limit == 0 {
            dev.pairs.len()
        } else {
            cfg.dev_decode_limit.min(dev.pairs.len())
        };
        let pairs = &dev.pairs[..n];
        let corrector = ModelCorrector {
            model,
            vocab,
            beam: cfg.dev_beam.clone(),
        };
        let sources: Vec<String> = pairs.iter().map(SentencePair::source_text).collect();
        let outputs = correct_all(&corrector, &sources, &IterativeConfig::default())?;
        let scored: Vec<ScoredSentence> = pairs
            .iter()
            .zip(outputs)
            .map(|(p, o)| ScoredSentence {
                source: p.source.clone(),
                hypothesis: tokenize(&o),
                reference: p.target.clone(),
            })
            .collect();
        Some(score_corpus(&scored))
    } else {
        None
    };
    Ok(DevScores {
        loss: sums.per_token(),
        report,
    })
}

fn dev_record(step: usize, lr: f64, loss: Option<f64>, dev: &DevScores, checkpoint: Option<&Path>) -> MetricsRecord {
    MetricsRecord {
        step,
        lr,
        loss,
        dev_loss: Some(dev.loss),
        dev_p: dev.report.map(|r| r.precision),
        dev_r: dev.report.map(|r| r.recall),
        dev_f05: dev.report.map(|r| r.f05),
        checkpoint: checkpoint.map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()),
    }
}

fn write_record(w: &mut impl Write, path: &Path, r: &MetricsRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, r)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Trains for `cfg.max_steps` optimizer steps, writing a checkpoint every
/// `cfg.checkpoint_every` steps (and at the end) plus `metrics.jsonl` into `out_dir`.
///
/// Single-threaded runs with the same seed produce identical checkpoints and logs.
pub fn train_loop(
    mut model: Transformer<f32>,
    vocab: &SubwordVocab,
    train: &[Example],
    dev: &DevSet,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Transformer<f32>, TrainOutcome)> {
    cfg.validate()?;
    if train.is_empty() && cfg.max_steps > 0 {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if dev.pairs.is_empty() || dev.examples.is_empty() {
        return Err(Error::EmptyDataset("dev set".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    let vocab_fp = vocab.fingerprint();

    let mut outcome = TrainOutcome {
        steps: 0,
        checkpoints: Vec::new(),
        metrics: Vec::new(),
        best_checkpoint: None,
    };
    let initial = evaluate_dev(&model, vocab, dev, &TrainConfig { score_dev: false, ..cfg.clone() })?;
    let rec = dev_record(0, 0.0, None, &initial, None);
    write_record(&mut log, &metrics_path, &rec)?;
    outcome.metrics.push(rec);

    let mut adam = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut step = 0;
    let mut epoch = 0u64;
    let mut window_loss = 0.0;
    let mut window_tokens = 0usize;
    while step < cfg.max_steps {
        let batches = make_batches(train, cfg.batch_tokens, &mut derived_rng(cfg.seed, epoch));
        epoch += 1;
        for batch in batches {
            if step >= cfg.max_steps {
                break;
            }
            step += 1;
            let lr = lr_schedule(step, cfg);
            let examples: Vec<Example> = batch.iter().map(|&i| train[i].clone()).collect();
            let tokens: usize = examples.iter().map(Example::target_len).sum();
            let mut grads = model.params().zeros_like();
            let seed = derived_rng(cfg.seed, u64::MAX - step as u64).next_u64();
            let sums = model
                .loss_and_grad(&examples, Mode::Train { seed }, 1.0 / tokens as f64, &mut grads)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { step },
                    other => other,
                })?;
            if !sums.weighted_nll.is_finite() {
                return Err(Error::Diverged { step });
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adam.step(model.params_mut(), &grads, lr);
            window_loss += sums.weighted_nll;
            window_tokens += sums.tokens;

            let at_ckpt = step % cfg.checkpoint_every == 0 || step == cfg.max_steps;
            if at_ckpt {
                let path = checkpoint_path(out_dir, step as u64);
                Checkpoint {
                    step: step as u64,
                    vocab_fingerprint: vocab_fp.clone(),
                    params: model.params().clone(),
                }
                .save(&path)?;
                let scores = evaluate_dev(&model, vocab, dev, cfg)?;
                let loss = (window_tokens > 0).then(|| window_loss / window_tokens as f64);
                let rec = dev_record(step, lr, loss, &scores, Some(&path));
                window_loss = 0.0;
                window_tokens = 0;
                if let Some(f) = rec.dev_f05 {
                    if outcome.best_checkpoint.as_ref().is_none_or(|(_, b)| f > *b) {
                        outcome.best_checkpoint = Some((path.clone(), f));
                    }
                }
                log::info!(
                    "step {step} lr {lr:.3e} loss {:.4} dev loss {:.4}{}",
                    rec.loss.unwrap_or(f64::NAN),
                    scores.loss,
                    scores.report.map(|r| format!(" dev {r}")).unwrap_or_default()
                );
                write_record(&mut log, &metrics_path, &rec)?;
                outcome.metrics.push(rec);
                outcome.checkpoints.push(path);
            } else if step % cfg.log_every == 0 {
                let rec = MetricsRecord {
                    step,
                    lr,
                    loss: Some(window_loss / window_tokens.max(1) as f64),
                    dev_loss: None,
                    dev_p: None,
                    dev_r: None,
                    dev_f05: None,
                    checkpoint: None,
                };
                window_loss = 0.0;
                window_tokens = 0;
                log::debug!("step {step} lr {lr:.3e} loss {:.4}", rec.loss.unwrap());
                write_record(&mut log, &metrics_path, &rec)?;
                outcome.metrics.push(rec);
            }
        }
    }
    outcome.steps = step;
    Ok((model, outcome))
}

/// Continues training `base` on new data with `cfg`'s schedule, after
/// checking that vocabulary and model shape match.
pub fn finetune(
    base: &Checkpoint,
    model_cfg: &ModelConfig,
    vocab: &SubwordVocab,
    train: &[Example],
    dev: &DevSet,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Transformer<f32>, TrainOutcome)> {
    if base.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::Config(format!(
            "vocabulary fingerprint {} differs from the base checkpoint's {}",
            vocab.fingerprint(),
            base.vocab_fingerprint
        )));
    }
    if model_cfg.fingerprint() != base.config_fingerprint() {
        return Err(Error::Config("model configuration does not match the base checkpoint".into()));
    }
    let mut params = base.params.clone();
    // dropout and loss weight come from the current configuration
    params.config = model_cfg.clone();
    train_loop(Transformer::new(params)?, vocab, train, dev, cfg, out_dir)
}

/// Fine-tunes twice from the same base, once per schedule, and returns the
/// best dev F0.5 (or lowest dev loss when unscored) of each run: `(rsqrt, linear-constant)`.
pub fn compare_finetune_schedules(
    base: &Checkpoint,
    model_cfg: &ModelConfig,
    vocab: &SubwordVocab,
    train: &[Example],
    dev: &DevSet,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(f64, f64)> {
    let mut results = Vec::new();
    for (name, schedule) in [("rsqrt", Schedule::Rsqrt), ("linear-constant", Schedule::LinearConstant)] {
        let c = TrainConfig { schedule, ..cfg.clone() };
        let (_, out) = finetune(base, model_cfg, vocab, train, dev, &c, &out_dir.join(name))?;
        let best = match out.best_checkpoint {
            Some((_, f)) => f,
            None => out.metrics.iter().filter_map(|m| m.dev_loss).fold(f64::INFINITY, f64::min),
        };
        results.push(best);
    }
    Ok((results[0], results[1]))
}
