//! The run configuration file. Every command-line flag has a key here; flags win.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gec_core::corpus::OversampleSpec;
use gec_core::decoding::{BeamConfig, IterativeConfig};
use gec_core::model::ModelConfig;
use gec_core::noising::synthetic::calibrated_config;
use gec_core::noising::{NoiseConfig, RevisionConfig};
use gec_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Base seed for every random choice. Overrides `train.seed` and the noise seeds.
    pub seed: u64,
    /// Worker threads; 0 uses every core, 1 gives bit-identical reruns.
    pub workers: usize,
    pub corpus: CorpusSection,
    pub oversample: OversampleSpec,
    pub vocab: VocabSection,
    pub noise: NoiseConfig,
    pub revision: RevisionConfig,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub decode: DecodeSection,
    pub grid: GridSection,
    pub average: AverageSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            workers: 0,
            corpus: CorpusSection::default(),
            oversample: OversampleSpec::new(Vec::<(String, usize)>::new()),
            vocab: VocabSection::default(),
            noise: NoiseConfig::default(),
            revision: RevisionConfig::default(),
            synth: SynthSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig::finetune_defaults(),
            decode: DecodeSection::default(),
            grid: GridSection::default(),
            average: AverageSection::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Tag for TSV rows without a third column.
    pub default_tag: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { default_tag: "main".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub size: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection { size: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Clean sentences generated when no input file is given.
    pub count: usize,
    /// Trailing pairs split off as a dev set when a dev output is requested.
    pub dev_size: usize,
    pub tag: String,
    pub p_word: f64,
    pub p_spell: f64,
    pub p_infill: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = calibrated_config(0);
        SynthSection {
            count: 52_000,
            dev_size: 2_000,
            tag: "synth".into(),
            p_word: c.p_word,
            p_spell: c.p_spell,
            p_infill: c.p_infill,
        }
    }
}

impl SynthSection {
    pub fn noise(&self, seed: u64) -> NoiseConfig {
        NoiseConfig {
            p_word: self.p_word,
            p_spell: self.p_spell,
            p_infill: self.p_infill,
            ..calibrated_config(seed)
        }
    }
}

/// A named preset with optional per-field overrides. The vocabulary size
/// always comes from the vocabulary file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub internal_dropout: Option<f64>,
    pub source_word_dropout: Option<f64>,
    pub target_word_dropout: Option<f64>,
    pub mle_weight: Option<f64>,
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> Result<ModelConfig> {
        let base = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => ModelConfig::desk(vocab_size),
            "base" => ModelConfig::base(vocab_size),
            "big" => ModelConfig::big(vocab_size),
            other => bail!("unknown model preset {other:?} (expected desk, base or big)"),
        };
        let cfg = self.apply(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlays the fields that are set onto `base`.
    pub fn apply(&self, base: ModelConfig) -> ModelConfig {
        ModelConfig {
            layers: self.layers.unwrap_or(base.layers),
            heads: self.heads.unwrap_or(base.heads),
            d_model: self.d_model.unwrap_or(base.d_model),
            d_ff: self.d_ff.unwrap_or(base.d_ff),
            internal_dropout: self.internal_dropout.unwrap_or(base.internal_dropout),
            source_word_dropout: self.source_word_dropout.unwrap_or(base.source_word_dropout),
            target_word_dropout: self.target_word_dropout.unwrap_or(base.target_word_dropout),
            mle_weight: self.mle_weight.unwrap_or(base.mle_weight),
            vocab_size: base.vocab_size,
        }
    }

    pub fn changes_shape(&self) -> bool {
        self.preset.is_some() || self.layers.is_some() || self.heads.is_some() || self.d_model.is_some() || self.d_ff.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam_size: usize,
    pub alpha: f64,
    pub max_output_len: usize,
    pub threshold: f64,
    pub max_iters: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let b = BeamConfig::default();
        let i = IterativeConfig::default();
        DecodeSection {
            beam_size: b.beam_size,
            alpha: b.alpha,
            max_output_len: b.max_output_len,
            threshold: i.threshold,
            max_iters: i.max_iters,
        }
    }
}

impl DecodeSection {
    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            alpha: self.alpha,
            max_output_len: self.max_output_len,
        }
    }

    pub fn iterative(&self) -> IterativeConfig {
        IterativeConfig {
            threshold: self.threshold,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub thresholds: Vec<f64>,
    pub max_iters: Vec<usize>,
    /// Dev sentences used; 0 means all.
    pub limit: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            thresholds: vec![0.8, 0.9, 1.0, 1.1, 1.2, 1.3],
            max_iters: vec![1, 2, 3, 4],
            limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AverageSection {
    pub last: usize,
}

impl Default for AverageSection {
    fn default() -> Self {
        AverageSection { last: 8 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = Config::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<Config>(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: Config = toml::from_str("seed = 7\n[train]\nmax_steps = 10\n[model]\nd_model = 64\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.max_steps, 10);
        assert_eq!(c.train.warmup_steps, TrainConfig::default().warmup_steps);
        assert_eq!(c.model.build(300).unwrap().d_model, 64);
        assert_eq!(c.finetune, TrainConfig::finetune_defaults());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Config>("sede = 7\n").is_err());
        assert!(toml::from_str::<Config>("[decode]\nbeam = 4\n").is_err());
    }
}
