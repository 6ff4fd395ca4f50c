//! `gec`: corpus tooling, vocabulary, noising, training, decoding and scoring
//! behind one command line.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod manifest;
mod pipeline;

use config::Config;
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "gec", version, about = "Grammatical error correction toolkit", propagate_version = true)]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores, 1 = bit-reproducible).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parallel corpus statistics and oversampling.
    #[command(subcommand)]
    Corpus(commands::CorpusCmd),
    /// Subword vocabulary training and encoding.
    #[command(subcommand)]
    Vocab(commands::VocabCmd),
    /// Weakly supervised pairs from revision histories or synthetic corruption.
    #[command(subcommand)]
    Noise(commands::NoiseCmd),
    /// Train a model from scratch.
    Train(commands::TrainArgs),
    /// Continue training a checkpoint on new data.
    Finetune(commands::FinetuneArgs),
    /// Checkpoint utilities.
    #[command(subcommand)]
    Checkpoints(commands::CheckpointsCmd),
    /// Correct sentences with iterative beam decoding.
    Decode(commands::DecodeArgs),
    /// Score a threshold by max-iterations grid on a dev set.
    GridSearch(commands::GridArgs),
    /// Score system output against reference corrections.
    Evaluate(commands::EvalArgs),
    /// Run the stages of a recipe file in order.
    Pipeline(PipelineArgs),
    /// Rerun the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, value_name = "FILE")]
    recipe: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    manifest: PathBuf,
}

/// Command-line misuse; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Effective configuration: file (or `base`), then global flags.
pub fn resolve_config(cli: &Cli, base: Option<Config>) -> Result<Config> {
    let mut cfg = match (base, &cli.config) {
        (Some(c), _) => c,
        (None, Some(path)) => Config::load(path)?,
        (None, None) => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

pub fn run(cli: Cli, cfg: Config, argv: Vec<String>) -> Result<Vec<RunManifest>> {
    let ctx = commands::Ctx::new(cfg, argv);
    match cli.command {
        Command::Corpus(c) => commands::corpus(ctx, c),
        Command::Vocab(c) => commands::vocab(ctx, c),
        Command::Noise(c) => commands::noise(ctx, c),
        Command::Train(a) => commands::train(ctx, a),
        Command::Finetune(a) => commands::finetune(ctx, a),
        Command::Checkpoints(c) => commands::checkpoints(ctx, c),
        Command::Decode(a) => commands::decode(ctx, a),
        Command::GridSearch(a) => commands::grid_search(ctx, a),
        Command::Evaluate(a) => commands::evaluate(ctx, a),
        Command::Pipeline(a) => pipeline::run_recipe(&a.recipe, &ctx),
        Command::Replay(a) => replay(&a.manifest),
    }
}

fn replay(path: &std::path::Path) -> Result<Vec<RunManifest>> {
    let m = RunManifest::load(path)?;
    let cli = Cli::try_parse_from(&m.argv).map_err(|e| UsageError(format!("manifest argv does not parse: {e}")))?;
    std::env::set_current_dir(&m.cwd).map_err(|e| anyhow::anyhow!("cannot enter {}: {e}", m.cwd.display()))?;
    let cfg = resolve_config(&cli, Some(m.config.clone()))?;
    run(cli, cfg, m.argv)
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(&cli);
    let result = resolve_config(&cli, None).and_then(|cfg| {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global()?;
        run(cli, cfg, argv)
    });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
