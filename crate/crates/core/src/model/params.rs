use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder layers; the decoder has the same number.
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Dropout on sublayer outputs and embeddings.
    pub internal_dropout: f64,
    /// Probability of zeroing a whole source word embedding.
    pub source_word_dropout: f64,
    /// Probability of zeroing a whole target word embedding (decoder input).
    pub target_word_dropout: f64,
    /// Loss weight for target subwords that are not matched in the source.
    pub mle_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(4000)
    }
}

impl ModelConfig {
    /// 2+2 layers, d_model 128, 4 heads, d_ff 512.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size,
            internal_dropout: 0.1,
            source_word_dropout: 0.2,
            target_word_dropout: 0.1,
            mle_weight: 3.0,
        }
    }

    /// transformer_base dimensions.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 6,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            ..ModelConfig::desk(vocab_size)
        }
    }

    /// transformer_big dimensions.
    pub fn big(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 6,
            heads: 16,
            d_model: 1024,
            d_ff: 4096,
            internal_dropout: 0.3,
            ..ModelConfig::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::Config("layers, d_ff and vocab_size must be positive".into()));
        }
        for (name, p) in [
            ("internal_dropout", self.internal_dropout),
            ("source_word_dropout", self.source_word_dropout),
            ("target_word_dropout", self.target_word_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} must be in [0, 1)")));
            }
        }
        if !(self.mle_weight >= 1.0) {
            return Err(Error::Config(format!("mle_weight = {} must be >= 1", self.mle_weight)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Hash of the shape-defining fields; checkpoints with equal fingerprints are averageable.
    pub fn fingerprint(&self) -> String {
        let key = format!(
            "layers={};heads={};d_model={};d_ff={};vocab={}",
            self.layers, self.heads, self.d_model, self.d_ff, self.vocab_size
        );
        hex::encode(&Sha256::digest(key.as_bytes())[..16])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerIdx {
    pub ln1: NormIdx,
    pub attn: AttnIdx,
    pub ln2: NormIdx,
    pub ff1: LinearIdx,
    pub ff2: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerIdx {
    pub ln1: NormIdx,
    pub self_attn: AttnIdx,
    pub ln2: NormIdx,
    pub cross_attn: AttnIdx,
    pub ln3: NormIdx,
    pub ff1: LinearIdx,
    pub ff2: LinearIdx,
}

/// Positions of every named tensor in [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub embed: usize,
    pub encoder: Vec<EncoderLayerIdx>,
    pub encoder_norm: NormIdx,
    pub decoder: Vec<DecoderLayerIdx>,
    pub decoder_norm: NormIdx,
    pub output: LinearIdx,
}

enum Init {
    Zeros,
    Ones,
    /// Uniform in +-1/sqrt(fan_in).
    FanIn(usize),
    /// Uniform with variance 1/d.
    Embedding(usize),
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIdx {
        LinearIdx {
            w: self.push(format!("{name}.w"), vec![din, dout], Init::FanIn(din)),
            b: self.push(format!("{name}.b"), vec![dout], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        NormIdx {
            g: self.push(format!("{name}.g"), vec![d], Init::Ones),
            b: self.push(format!("{name}.b"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
}

fn build(cfg: &ModelConfig) -> (Layout, Builder) {
    let d = cfg.d_model;
    let mut b = Builder { specs: Vec::new() };
    let embed = b.push("embed".into(), vec![cfg.vocab_size, d], Init::Embedding(d));
    let encoder = (0..cfg.layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayerIdx {
                ln1: b.norm(&format!("{p}.ln1"), d),
                attn: b.attn(&format!("{p}.self_attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                ff1: b.linear(&format!("{p}.ff1"), d, cfg.d_ff),
                ff2: b.linear(&format!("{p}.ff2"), cfg.d_ff, d),
            }
        })
        .collect();
    let encoder_norm = b.norm("encoder.norm", d);
    let decoder = (0..cfg.layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayerIdx {
                ln1: b.norm(&format!("{p}.ln1"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln3: b.norm(&format!("{p}.ln3"), d),
                ff1: b.linear(&format!("{p}.ff1"), d, cfg.d_ff),
                ff2: b.linear(&format!("{p}.ff2"), cfg.d_ff, d),
            }
        })
        .collect();
    let decoder_norm = b.norm("decoder.norm", d);
    let output = b.linear("output", d, cfg.vocab_size);
    (
        Layout {
            embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
        },
        b,
    )
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        build(cfg).0
    }
}

/// Named parameter tensors of the encoder-decoder model, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Float> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (_, builder) = build(config);
        let tensors = builder
            .specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::FanIn(fan_in) => {
                        let a = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
                    }
                    Init::Embedding(d) => {
                        let a = (3.0 / d as f64).sqrt();
                        (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
                    }
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), &t.shape))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Checks that tensor names and shapes match what `config` prescribes.
    pub fn check_layout(&self) -> Result<()> {
        let (_, builder) = build(&self.config);
        if builder.specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                builder.specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape, _), t) in builder.specs.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {} does not match the configuration", t.name)));
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| U::of(x.f64())).collect(),
                })
                .collect(),
        }
    }

    /// Errors with the first tensor holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(t.name.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_matches_tensors() {
        let cfg = ModelConfig::desk(100);
        let p: ModelParams<f32> = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.check_layout().unwrap();
        let layout = Layout::new(&cfg);
        assert_eq!(p.tensors[layout.embed].name, "embed");
        assert_eq!(p.tensors[layout.output.w].shape, vec![128, 100]);
        assert_eq!(p.tensors[layout.decoder[1].cross_attn.k.w].name, "decoder.1.cross_attn.k.w");
    }

    #[test]
    fn rejects_bad_heads() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::desk(10)
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            source_word_dropout: 1.0,
            ..ModelConfig::desk(10)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_dropout() {
        let a = ModelConfig::desk(10);
        let b = ModelConfig {
            source_word_dropout: 0.0,
            mle_weight: 1.0,
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), ModelConfig::desk(11).fingerprint());
    }
}
