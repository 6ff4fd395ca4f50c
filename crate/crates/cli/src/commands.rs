use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Subcommand};
use gec_core::corpus::{self, load_tsv, stats_by_tag, write_tsv, SentencePair};
use gec_core::decoding::{correct_all, grid_search as run_grid, ModelCorrector};
use gec_core::eval::{dev_combined, ScoredSentence};
use gec_core::model::{ModelParams, Transformer};
use gec_core::noising::synthetic::generate_clean_sentences;
use gec_core::noising::wikidump::{read_dump, read_snapshot_dir};
use gec_core::noising::{derived_rng, extract_revision_pairs, make_synthetic_corpus};
use gec_core::subword::SubwordVocab;
use gec_core::tokenize::tokenize;
use gec_core::training::{
    average_checkpoints, compare_finetune_schedules, finetune as run_finetune, list_checkpoints, prepare_examples, train_loop, Checkpoint, DevSet, Schedule, TrainConfig,
};
use serde_json::json;

use crate::config::{Config, ModelSection};
use crate::manifest::{manifest_path_for, now, RunManifest};
use crate::UsageError;

/// Per-invocation state: the effective configuration and what goes into the manifest.
pub struct Ctx {
    pub cfg: Config,
    pub argv: Vec<String>,
    pub started: String,
}

impl Ctx {
    pub fn new(cfg: Config, argv: Vec<String>) -> Self {
        Ctx { cfg, argv, started: now() }
    }

    /// Writes the manifest for `primary` (the main output) and returns it.
    fn finish(&self, command: &str, inputs: &[&Path], outputs: &[&Path], primary: &Path, summary: serde_json::Value) -> Result<Vec<RunManifest>> {
        let m = RunManifest {
            command: command.to_string(),
            argv: self.argv.clone(),
            cwd: std::env::current_dir()?,
            config: self.cfg.clone(),
            seed: self.cfg.seed,
            workers: self.cfg.workers,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started.clone(),
            finished_at: now(),
            summary,
        };
        m.write(&manifest_path_for(primary))?;
        Ok(vec![m])
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn read_pairs(paths: &[PathBuf], tag: &str) -> Result<Vec<SentencePair>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_tsv(p, tag)?);
    }
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| gec_core::Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| gec_core::Error::io(path, e).into())
}

fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| gec_core::Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{}", l.as_ref()).map_err(|e| gec_core::Error::io(path, e))?;
    }
    w.flush().map_err(|e| gec_core::Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| gec_core::Error::io(path, e))?;
    Ok(())
}

fn parse_multiplier(s: &str) -> Result<(String, usize), String> {
    let (tag, n) = s.rsplit_once('=').ok_or_else(|| format!("expected TAG=N, got {s:?}"))?;
    let n = n.parse().map_err(|e| format!("bad multiplier in {s:?}: {e}"))?;
    Ok((tag.to_string(), n))
}

// ---------------------------------------------------------------- corpus

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Sentence count and error rate per dataset tag.
    Stats {
        #[arg(long = "in", value_name = "TSV", required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        default_tag: Option<String>,
    },
    /// Repeat pairs per tag and shuffle.
    Oversample {
        #[arg(long = "in", value_name = "TSV", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Total copies for a tag, as TAG=N; repeatable.
        #[arg(long = "multiplier", value_parser = parse_multiplier)]
        multipliers: Vec<(String, usize)>,
        /// Copies for tags without a multiplier.
        #[arg(long)]
        default_multiplier: Option<usize>,
        /// Fail on tags without a multiplier.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        default_tag: Option<String>,
    },
}

pub fn corpus(mut ctx: Ctx, cmd: CorpusCmd) -> Result<Vec<RunManifest>> {
    match cmd {
        CorpusCmd::Stats { inputs, out, default_tag } => {
            set(&mut ctx.cfg.corpus.default_tag, default_tag);
            let pairs = read_pairs(&inputs, &ctx.cfg.corpus.default_tag)?;
            let per_tag = stats_by_tag(&pairs)?;
            let total = corpus::compute_stats(&pairs)?;
            println!("{:<16} {:>10} {:>10} {:>10} {:>8}", "tag", "sentences", "non-match", "edges", "err%");
            for (tag, s) in per_tag.iter().map(|(t, s)| (t.as_str(), s)).chain([("total", &total)]) {
                println!(
                    "{:<16} {:>10} {:>10} {:>10} {:>8.2}",
                    tag,
                    s.sentence_count,
                    s.non_match_edges,
                    s.total_edges,
                    100.0 * s.error_rate
                );
            }
            let report = json!({ "tags": per_tag, "total": total });
            match out {
                Some(out) => {
                    write_json(&out, &report)?;
                    let ins: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
                    ctx.finish("corpus stats", &ins, &[&out], &out, report)
                }
                None => Ok(Vec::new()),
            }
        }
        CorpusCmd::Oversample {
            inputs,
            out,
            multipliers,
            default_multiplier,
            strict,
            default_tag,
        } => {
            set(&mut ctx.cfg.corpus.default_tag, default_tag);
            ctx.cfg.oversample.multipliers.extend(multipliers);
            set(&mut ctx.cfg.oversample.default_multiplier, default_multiplier);
            ctx.cfg.oversample.strict |= strict;
            let pairs = read_pairs(&inputs, &ctx.cfg.corpus.default_tag)?;
            let mixed = corpus::oversample(&pairs, &ctx.cfg.oversample, ctx.cfg.seed)?;
            write_tsv(&out, &mixed)?;
            log::info!("{} pairs -> {} after oversampling", pairs.len(), mixed.len());
            let ins: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            ctx.finish("corpus oversample", &ins, &[&out], &out, json!({ "input_pairs": pairs.len(), "output_pairs": mixed.len() }))
        }
    }
}

// ---------------------------------------------------------------- vocab

#[derive(Debug, Subcommand)]
pub enum VocabCmd {
    /// Learn BPE merges from both sides of parallel corpora and/or plain text.
    Train {
        #[arg(long = "in", value_name = "TSV")]
        inputs: Vec<PathBuf>,
        /// Plain text, one sentence per line.
        #[arg(long = "text", value_name = "FILE")]
        texts: Vec<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment text into pieces (or ids) line by line.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write ids instead of pieces.
        #[arg(long)]
        ids: bool,
    },
}

pub fn vocab(mut ctx: Ctx, cmd: VocabCmd) -> Result<Vec<RunManifest>> {
    match cmd {
        VocabCmd::Train { inputs, texts, size, out } => {
            if inputs.is_empty() && texts.is_empty() {
                return Err(UsageError("vocab train needs at least one --in or --text file".into()).into());
            }
            set(&mut ctx.cfg.vocab.size, size);
            let mut corpus_text = Vec::new();
            for p in read_pairs(&inputs, &ctx.cfg.corpus.default_tag)? {
                corpus_text.push(p.source_text());
                corpus_text.push(p.target_text());
            }
            for t in &texts {
                corpus_text.extend(read_lines(t)?);
            }
            let v = SubwordVocab::train(&corpus_text, ctx.cfg.vocab.size)?;
            v.save(&out)?;
            log::info!("vocabulary of {} pieces written to {}", v.size(), out.display());
            let ins: Vec<&Path> = inputs.iter().chain(&texts).map(PathBuf::as_path).collect();
            ctx.finish("vocab train", &ins, &[&out], &out, json!({ "size": v.size(), "fingerprint": v.fingerprint() }))
        }
        VocabCmd::Encode { vocab, input, out, ids } => {
            let v = SubwordVocab::load(&vocab)?;
            let lines = read_lines(&input)?;
            let encoded: Vec<String> = lines
                .iter()
                .map(|l| {
                    let e = v.encode(l);
                    if ids {
                        e.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
                    } else {
                        e.iter().map(|&i| v.piece(i).unwrap_or("?")).collect::<Vec<_>>().join(" ")
                    }
                })
                .collect();
            write_lines(&out, &encoded)?;
            ctx.finish("vocab encode", &[&vocab, &input], &[&out], &out, serde_json::Value::Null)
        }
    }
}

// ---------------------------------------------------------------- noise

#[derive(Debug, Subcommand)]
pub enum NoiseCmd {
    /// Mine (older, newer) pairs from a revision dump or snapshot directory.
    WikiPairs {
        /// MediaWiki XML export (optionally .gz) or a directory of page snapshot folders.
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        keep_every: Option<usize>,
        #[arg(long)]
        max_context: Option<usize>,
        #[arg(long)]
        max_pair_tokens: Option<usize>,
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        p_spell: Option<f64>,
        #[arg(long)]
        p_infill: Option<f64>,
        #[arg(long)]
        identity_keep: Option<f64>,
    },
    /// Corrupt clean sentences into (noisy, clean) pairs.
    Synth {
        /// Clean sentences, one per line; generated when absent.
        #[arg(long)]
        clean: Option<PathBuf>,
        /// How many sentences to generate.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Split the last `dev-size` pairs into this file.
        #[arg(long)]
        dev_out: Option<PathBuf>,
        #[arg(long)]
        dev_size: Option<usize>,
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        p_word: Option<f64>,
        #[arg(long)]
        p_spell: Option<f64>,
        #[arg(long)]
        p_infill: Option<f64>,
    },
}

pub fn noise(mut ctx: Ctx, cmd: NoiseCmd) -> Result<Vec<RunManifest>> {
    match cmd {
        NoiseCmd::WikiPairs {
            dump,
            out,
            keep_every,
            max_context,
            max_pair_tokens,
            tag,
            p_spell,
            p_infill,
            identity_keep,
        } => {
            let c = &mut ctx.cfg;
            set(&mut c.revision.keep_every, keep_every);
            set(&mut c.revision.max_context, max_context);
            set(&mut c.revision.max_pair_tokens, max_pair_tokens);
            set(&mut c.revision.dataset_tag, tag);
            set(&mut c.noise.p_spell, p_spell);
            set(&mut c.noise.p_infill, p_infill);
            set(&mut c.noise.identity_keep, identity_keep);
            c.noise.rng_seed = c.seed;
            c.noise.validate()?;
            if c.revision.keep_every == 0 {
                bail!("keep_every must be >= 1");
            }
            let pages = if dump.is_dir() { read_snapshot_dir(&dump)? } else { read_dump(&dump)? };
            let (pairs, counts) = extract_revision_pairs(&pages, &c.revision, &c.noise);
            write_tsv(&out, &pairs)?;
            log::info!("{counts:?}");
            ctx.finish("noise wiki-pairs", &[&dump], &[&out], &out, serde_json::to_value(counts)?)
        }
        NoiseCmd::Synth {
            clean,
            count,
            out,
            dev_out,
            dev_size,
            tag,
            p_word,
            p_spell,
            p_infill,
        } => {
            let s = &mut ctx.cfg.synth;
            set(&mut s.count, count);
            set(&mut s.dev_size, dev_size);
            set(&mut s.tag, tag);
            set(&mut s.p_word, p_word);
            set(&mut s.p_spell, p_spell);
            set(&mut s.p_infill, p_infill);
            let seed = ctx.cfg.seed;
            let sentences = match &clean {
                Some(p) => read_lines(p)?,
                None => generate_clean_sentences(ctx.cfg.synth.count, seed),
            };
            // separate stream from the sentence generator
            let noise_cfg = ctx.cfg.synth.noise(seed ^ 0x6e_6f69_7365);
            noise_cfg.validate()?;
            let pairs = make_synthetic_corpus(&sentences, &noise_cfg, &ctx.cfg.synth.tag);
            let mut outputs = vec![out.as_path()];
            let (train, dev) = match &dev_out {
                Some(d) => {
                    if ctx.cfg.synth.dev_size >= pairs.len() {
                        bail!("dev_size {} leaves no training pairs out of {}", ctx.cfg.synth.dev_size, pairs.len());
                    }
                    outputs.push(d);
                    pairs.split_at(pairs.len() - ctx.cfg.synth.dev_size)
                }
                None => (&pairs[..], &pairs[..0]),
            };
            write_tsv(&out, train)?;
            if let Some(d) = &dev_out {
                write_tsv(d, dev)?;
            }
            let stats = corpus::compute_stats(&pairs)?;
            log::info!("{} pairs, error rate {:.2}%", pairs.len(), 100.0 * stats.error_rate);
            let ins: Vec<&Path> = clean.iter().map(PathBuf::as_path).collect();
            ctx.finish(
                "noise synth",
                &ins,
                &outputs,
                &out,
                json!({ "train_pairs": train.len(), "dev_pairs": dev.len(), "error_rate": stats.error_rate }),
            )
        }
    }
}

// ---------------------------------------------------------------- train / finetune

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// rsqrt or linear-constant.
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<Schedule>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    max_pieces: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Dev sentences decoded at each checkpoint (0 = all).
    #[arg(long)]
    dev_decode_limit: Option<usize>,
    /// Beam size for the dev decode at checkpoints.
    #[arg(long)]
    dev_beam_size: Option<usize>,
    /// Skip dev decoding; only dev loss is logged.
    #[arg(long)]
    no_score_dev: bool,
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    match s {
        "rsqrt" => Ok(Schedule::Rsqrt),
        "linear-constant" => Ok(Schedule::LinearConstant),
        _ => Err(format!("unknown schedule {s:?} (expected rsqrt or linear-constant)")),
    }
}

impl TrainFlags {
    fn apply(self, t: &mut TrainConfig) {
        set(&mut t.max_steps, self.max_steps);
        set(&mut t.peak_lr, self.peak_lr);
        set(&mut t.warmup_steps, self.warmup_steps);
        set(&mut t.schedule, self.schedule);
        set(&mut t.batch_tokens, self.batch_tokens);
        set(&mut t.checkpoint_every, self.checkpoint_every);
        set(&mut t.log_every, self.log_every);
        set(&mut t.max_pieces, self.max_pieces);
        set(&mut t.clip_norm, self.clip_norm);
        set(&mut t.dev_decode_limit, self.dev_decode_limit);
        set(&mut t.dev_beam.beam_size, self.dev_beam_size);
        if self.no_score_dev {
            t.score_dev = false;
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// desk, base or big.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    internal_dropout: Option<f64>,
    #[arg(long)]
    source_word_dropout: Option<f64>,
    #[arg(long)]
    target_word_dropout: Option<f64>,
    /// Loss weight on target tokens that differ from the source.
    #[arg(long)]
    mle_weight: Option<f64>,
}

impl ModelFlags {
    fn apply(self, m: &mut ModelSection) {
        fn keep<T>(slot: &mut Option<T>, v: Option<T>) {
            if v.is_some() {
                *slot = v;
            }
        }
        keep(&mut m.preset, self.preset);
        keep(&mut m.layers, self.layers);
        keep(&mut m.heads, self.heads);
        keep(&mut m.d_model, self.d_model);
        keep(&mut m.d_ff, self.d_ff);
        keep(&mut m.internal_dropout, self.internal_dropout);
        keep(&mut m.source_word_dropout, self.source_word_dropout);
        keep(&mut m.target_word_dropout, self.target_word_dropout);
        keep(&mut m.mle_weight, self.mle_weight);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training pairs (TSV); repeatable.
    #[arg(long = "train", value_name = "TSV", required = true)]
    train: Vec<PathBuf>,
    #[arg(long, value_name = "TSV")]
    dev: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Receives checkpoints, metrics.jsonl and the manifest.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    flags: TrainFlags,
}

fn summarize(out: &gec_core::training::TrainOutcome) -> serde_json::Value {
    json!({
        "steps": out.steps,
        "checkpoints": out.checkpoints.len(),
        "best_checkpoint": out.best_checkpoint.as_ref().map(|(p, f)| json!({ "path": p, "dev_f05": f })),
        "final": out.metrics.last(),
    })
}

pub fn train(mut ctx: Ctx, a: TrainArgs) -> Result<Vec<RunManifest>> {
    a.model.apply(&mut ctx.cfg.model);
    a.flags.apply(&mut ctx.cfg.train);
    ctx.cfg.train.seed = ctx.cfg.seed;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let model_cfg = ctx.cfg.model.build(vocab.size())?;
    let train_pairs = read_pairs(&a.train, &ctx.cfg.corpus.default_tag)?;
    let dev_pairs = load_tsv(&a.dev, &ctx.cfg.corpus.default_tag)?;
    let examples = prepare_examples(&vocab, &train_pairs, model_cfg.mle_weight, ctx.cfg.train.max_pieces);
    log::info!("{} of {} training pairs within {} pieces", examples.len(), train_pairs.len(), ctx.cfg.train.max_pieces);
    let dev = DevSet::new(&vocab, dev_pairs, model_cfg.mle_weight)?;
    let params = ModelParams::init(&model_cfg, &mut derived_rng(ctx.cfg.seed, 0))?;
    log::info!("model with {} parameters", params.num_params());
    let (_, out) = train_loop(Transformer::new(params)?, &vocab, &examples, &dev, &ctx.cfg.train, &a.out_dir)?;
    if let Some((p, f)) = &out.best_checkpoint {
        println!("best dev F0.5 {:.2} at {}", 100.0 * f, p.display());
    }
    let mut ins: Vec<&Path> = a.train.iter().map(PathBuf::as_path).collect();
    ins.extend([a.dev.as_path(), a.vocab.as_path()]);
    ctx.finish("train", &ins, &[&a.out_dir], &a.out_dir, summarize(&out))
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Checkpoint to start from.
    #[arg(long)]
    base: PathBuf,
    #[arg(long = "train", value_name = "TSV", required = true)]
    train: Vec<PathBuf>,
    #[arg(long, value_name = "TSV")]
    dev: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Run both schedules from the same base and report each one's best dev score.
    #[arg(long)]
    compare_schedules: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    flags: TrainFlags,
}

pub fn finetune(mut ctx: Ctx, a: FinetuneArgs) -> Result<Vec<RunManifest>> {
    a.model.apply(&mut ctx.cfg.model);
    a.flags.apply(&mut ctx.cfg.finetune);
    ctx.cfg.finetune.seed = ctx.cfg.seed;
    if ctx.cfg.model.changes_shape() {
        log::warn!("model shape settings are ignored when fine-tuning; the base checkpoint fixes them");
    }
    let vocab = SubwordVocab::load(&a.vocab)?;
    let base = Checkpoint::load(&a.base)?;
    let shape_only = ModelSection {
        preset: None,
        layers: None,
        heads: None,
        d_model: None,
        d_ff: None,
        ..ctx.cfg.model.clone()
    };
    let model_cfg = shape_only.apply(base.params.config.clone());
    let train_pairs = read_pairs(&a.train, &ctx.cfg.corpus.default_tag)?;
    let dev = DevSet::new(&vocab, load_tsv(&a.dev, &ctx.cfg.corpus.default_tag)?, model_cfg.mle_weight)?;
    let examples = prepare_examples(&vocab, &train_pairs, model_cfg.mle_weight, ctx.cfg.finetune.max_pieces);
    let mut ins: Vec<&Path> = a.train.iter().map(PathBuf::as_path).collect();
    ins.extend([a.base.as_path(), a.dev.as_path(), a.vocab.as_path()]);
    fs::create_dir_all(&a.out_dir).map_err(|e| gec_core::Error::io(&a.out_dir, e))?;
    if a.compare_schedules {
        let (rsqrt, linear) = compare_finetune_schedules(&base, &model_cfg, &vocab, &examples, &dev, &ctx.cfg.finetune, &a.out_dir)?;
        println!("best dev score: rsqrt {rsqrt:.4}, linear-constant {linear:.4}");
        return ctx.finish("finetune", &ins, &[&a.out_dir], &a.out_dir, json!({ "rsqrt": rsqrt, "linear_constant": linear }));
    }
    let (_, out) = run_finetune(&base, &model_cfg, &vocab, &examples, &dev, &ctx.cfg.finetune, &a.out_dir)?;
    if let Some((p, f)) = &out.best_checkpoint {
        println!("best dev F0.5 {:.2} at {}", 100.0 * f, p.display());
    }
    ctx.finish("finetune", &ins, &[&a.out_dir], &a.out_dir, summarize(&out))
}

// ---------------------------------------------------------------- checkpoints

#[derive(Debug, Subcommand)]
pub enum CheckpointsCmd {
    /// Elementwise mean of checkpoints.
    Average {
        /// Directory holding ckpt-*.bin files.
        #[arg(long, conflicts_with = "inputs")]
        dir: Option<PathBuf>,
        /// Average the last N checkpoints of `--dir`.
        #[arg(long)]
        last: Option<usize>,
        /// Explicit checkpoint files.
        #[arg(long = "input", value_name = "CKPT")]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn checkpoints(mut ctx: Ctx, cmd: CheckpointsCmd) -> Result<Vec<RunManifest>> {
    let CheckpointsCmd::Average { dir, last, inputs, out } = cmd;
    set(&mut ctx.cfg.average.last, last);
    let paths: Vec<PathBuf> = match dir {
        Some(d) => {
            let all = list_checkpoints(&d)?;
            let k = ctx.cfg.average.last;
            if k == 0 {
                bail!("--last must be >= 1");
            }
            if all.len() < k {
                log::warn!("only {} checkpoints in {}, averaging all of them", all.len(), d.display());
            }
            all[all.len().saturating_sub(k)..].iter().map(|(_, p)| p.clone()).collect()
        }
        None if inputs.is_empty() => return Err(UsageError("give --dir or at least one --input".into()).into()),
        None => inputs,
    };
    let ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<gec_core::Result<Vec<_>>>()?;
    let vfp = &ckpts[0].vocab_fingerprint;
    if let Some(c) = ckpts.iter().find(|c| &c.vocab_fingerprint != vfp) {
        bail!("checkpoint at step {} was trained with a different vocabulary", c.step);
    }
    let avg = Checkpoint {
        step: ckpts.iter().map(|c| c.step).max().unwrap_or(0),
        vocab_fingerprint: vfp.clone(),
        params: average_checkpoints(&ckpts)?,
    };
    avg.save(&out)?;
    log::info!("averaged {} checkpoints into {}", ckpts.len(), out.display());
    let ins: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let steps: Vec<u64> = ckpts.iter().map(|c| c.step).collect();
    ctx.finish("checkpoints average", &ins, &[&out], &out, json!({ "steps": steps }))
}

// ---------------------------------------------------------------- decode / grid / evaluate

fn load_model(checkpoint: &Path, vocab: &SubwordVocab) -> Result<Transformer<f32>> {
    let c = Checkpoint::load(checkpoint)?;
    if c.vocab_fingerprint != vocab.fingerprint() {
        bail!("{} was trained with a different vocabulary", checkpoint.display());
    }
    Ok(Transformer::new(c.params)?)
}

#[derive(Debug, Args)]
pub struct DecodeFlags {
    #[arg(long)]
    beam_size: Option<usize>,
    /// Length penalty exponent.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_output_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// One sentence per line, or a pair TSV with `--tsv`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Read the source column of a pair TSV.
    #[arg(long)]
    tsv: bool,
    #[arg(long)]
    out: PathBuf,
    /// Accept a rewrite while its cost is below threshold times the identity cost.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[command(flatten)]
    beam: DecodeFlags,
}

impl DecodeFlags {
    fn apply(self, d: &mut crate::config::DecodeSection) {
        set(&mut d.beam_size, self.beam_size);
        set(&mut d.alpha, self.alpha);
        set(&mut d.max_output_len, self.max_output_len);
    }
}

pub fn decode(mut ctx: Ctx, a: DecodeArgs) -> Result<Vec<RunManifest>> {
    a.beam.apply(&mut ctx.cfg.decode);
    set(&mut ctx.cfg.decode.threshold, a.threshold);
    set(&mut ctx.cfg.decode.max_iters, a.max_iters);
    let vocab = SubwordVocab::load(&a.vocab)?;
    let model = load_model(&a.checkpoint, &vocab)?;
    let sentences: Vec<String> = if a.tsv {
        load_tsv(&a.input, &ctx.cfg.corpus.default_tag)?.iter().map(SentencePair::source_text).collect()
    } else {
        read_lines(&a.input)?
    };
    let corrector = ModelCorrector {
        model: &model,
        vocab: &vocab,
        beam: ctx.cfg.decode.beam(),
    };
    let outputs = correct_all(&corrector, &sentences, &ctx.cfg.decode.iterative())?;
    write_lines(&a.out, &outputs)?;
    let changed = sentences.iter().zip(&outputs).filter(|(s, o)| s != o).count();
    log::info!("{changed} of {} sentences changed", sentences.len());
    ctx.finish(
        "decode",
        &[&a.checkpoint, &a.vocab, &a.input],
        &[&a.out],
        &a.out,
        json!({ "sentences": sentences.len(), "changed": changed }),
    )
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_name = "TSV")]
    dev: PathBuf,
    /// Matrix of P, R and F0.5 per cell.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    max_iters: Option<Vec<usize>>,
    /// Use only the first N dev pairs (0 = all).
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    beam: DecodeFlags,
}

pub fn grid_search(mut ctx: Ctx, a: GridArgs) -> Result<Vec<RunManifest>> {
    a.beam.apply(&mut ctx.cfg.decode);
    set(&mut ctx.cfg.grid.thresholds, a.thresholds);
    set(&mut ctx.cfg.grid.max_iters, a.max_iters);
    set(&mut ctx.cfg.grid.limit, a.limit);
    let vocab = SubwordVocab::load(&a.vocab)?;
    let model = load_model(&a.checkpoint, &vocab)?;
    let mut dev = load_tsv(&a.dev, &ctx.cfg.corpus.default_tag)?;
    if ctx.cfg.grid.limit > 0 {
        dev.truncate(ctx.cfg.grid.limit);
    }
    let corrector = ModelCorrector {
        model: &model,
        vocab: &vocab,
        beam: ctx.cfg.decode.beam(),
    };
    let g = run_grid(&corrector, &dev, &ctx.cfg.grid.thresholds, &ctx.cfg.grid.max_iters)?;
    fs::write(&a.out, g.to_tsv()).map_err(|e| gec_core::Error::io(&a.out, e))?;
    print!("{}", g.to_tsv());
    let best = g.best_cell();
    println!("best: threshold {} max_iters {}: {}", best.threshold, best.max_iters, best.report);
    ctx.finish(
        "grid-search",
        &[&a.checkpoint, &a.vocab, &a.dev],
        &[&a.out],
        &a.out,
        json!({ "best": { "threshold": best.threshold, "max_iters": best.max_iters, "report": best.report.to_json() } }),
    )
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// System output, one sentence per line, aligned with `--ref`.
    #[arg(long)]
    hyp: PathBuf,
    /// Pair TSV whose source column was corrected and whose target column is the reference.
    #[arg(long = "ref", value_name = "TSV")]
    reference: PathBuf,
    /// Expected subset tags; defaults to the tags present.
    #[arg(long, value_delimiter = ',')]
    subsets: Option<Vec<String>>,
    /// JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn evaluate(ctx: Ctx, a: EvalArgs) -> Result<Vec<RunManifest>> {
    let pairs = load_tsv(&a.reference, &ctx.cfg.corpus.default_tag)?;
    let hyps = read_lines(&a.hyp)?;
    if hyps.len() != pairs.len() {
        bail!("{} has {} lines but {} has {} pairs", a.hyp.display(), hyps.len(), a.reference.display(), pairs.len());
    }
    let subsets: Vec<String> = match a.subsets {
        Some(s) => s,
        None => corpus::tags(&pairs).into_iter().collect(),
    };
    let tagged: Vec<(String, ScoredSentence)> = pairs
        .into_iter()
        .zip(&hyps)
        .map(|(p, h)| {
            (
                p.dataset_tag,
                ScoredSentence {
                    source: p.source,
                    hypothesis: tokenize(h),
                    reference: p.target,
                },
            )
        })
        .collect();
    let report = dev_combined(&tagged, &subsets)?;
    print!("{}", report.table());
    match a.out {
        Some(out) => {
            write_json(&out, &report.to_json())?;
            ctx.finish("evaluate", &[&a.hyp, &a.reference], &[&out], &out, report.to_json())
        }
        None => Ok(Vec::new()),
    }
}
