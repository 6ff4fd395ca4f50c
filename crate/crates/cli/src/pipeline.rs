//! Recipe files: ordered `gec` invocations sharing one workspace directory.
//!
//! ```toml
//! workspace = "work"        # relative to the recipe file
//! config = "desk.toml"      # optional, passed to stages without their own --config
//! [[stage]]
//! args = ["noise", "synth", "--out", "train.tsv"]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::commands::Ctx;
use crate::manifest::{now, RunManifest};
use crate::{resolve_config, run, Cli, Command, UsageError};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Recipe {
    workspace: Option<PathBuf>,
    config: Option<PathBuf>,
    #[serde(default)]
    stage: Vec<Stage>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage {
    args: Vec<String>,
}

#[derive(Debug, Serialize)]
struct StageRecord {
    index: usize,
    args: Vec<String>,
    manifests: Vec<RunManifest>,
}

#[derive(Debug, Serialize)]
struct PipelineManifest {
    recipe: PathBuf,
    workspace: PathBuf,
    toolkit_version: String,
    started_at: String,
    finished_at: String,
    stages: Vec<StageRecord>,
}

fn has_flag(args: &[String], flag: &str) -> bool {
    args.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")))
}

/// Runs every stage in order from inside the workspace and stops at the first
/// failure. Global `--seed` and `--workers` given to the pipeline apply to
/// stages that do not set them.
pub fn run_recipe(path: &Path, parent: &Ctx) -> Result<Vec<RunManifest>> {
    let text = std::fs::read_to_string(path).map_err(|e| gec_core::Error::io(path, e))?;
    let recipe: Recipe = toml::from_str(&text).with_context(|| format!("invalid recipe {}", path.display()))?;
    if recipe.stage.is_empty() {
        log::info!("recipe has no stages");
        return Ok(Vec::new());
    }
    let recipe_path = path.canonicalize().map_err(|e| gec_core::Error::io(path, e))?;
    let base = recipe_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let workspace = base.join(recipe.workspace.as_deref().unwrap_or(Path::new(".")));
    std::fs::create_dir_all(&workspace).map_err(|e| gec_core::Error::io(&workspace, e))?;
    let config = recipe.config.as_ref().map(|c| base.join(c));
    let started = now();
    std::env::set_current_dir(&workspace).map_err(|e| gec_core::Error::io(&workspace, e))?;

    let mut records = Vec::new();
    for (index, stage) in recipe.stage.iter().enumerate() {
        let mut argv = vec!["gec".to_string()];
        if let (Some(c), false) = (&config, has_flag(&stage.args, "--config")) {
            argv.extend(["--config".into(), c.display().to_string()]);
        }
        if !has_flag(&stage.args, "--seed") && parent.argv.iter().any(|a| a.starts_with("--seed")) {
            argv.extend(["--seed".into(), parent.cfg.seed.to_string()]);
        }
        argv.extend(stage.args.iter().cloned());
        let name = stage.args.iter().take(2).cloned().collect::<Vec<_>>().join(" ");
        let fail = |e: anyhow::Error| e.context(format!("stage {index} ({name}) failed"));
        let cli = Cli::try_parse_from(&argv).map_err(|e| fail(UsageError(e.to_string()).into()))?;
        if matches!(cli.command, Command::Pipeline(_) | Command::Replay(_)) {
            return Err(fail(UsageError("recipes cannot nest pipeline or replay".into()).into()));
        }
        log::info!("stage {index}: {}", stage.args.join(" "));
        let manifests = resolve_config(&cli, None).and_then(|cfg| run(cli, cfg, argv.clone())).map_err(fail)?;
        records.push(StageRecord {
            index,
            args: stage.args.clone(),
            manifests,
        });
    }

    let consolidated = PipelineManifest {
        recipe: recipe_path,
        workspace: workspace.clone(),
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: started,
        finished_at: now(),
        stages: records,
    };
    let out = workspace.join("pipeline.manifest.json");
    std::fs::write(&out, serde_json::to_string_pretty(&consolidated)? + "\n").map_err(|e| anyhow!("cannot write {}: {e}", out.display()))?;
    Ok(consolidated.stages.into_iter().flat_map(|s| s.manifests).collect())
}
