use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderState, EncodedSource, Float, Transformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    /// Hard cap on generated tokens, EOS included. Model decoding also stops
    /// at twice the source length plus 10.
    pub max_output_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            alpha: 0.6,
            max_output_len: 256,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha = {} must be >= 0", self.alpha)));
        }
        if self.max_output_len == 0 {
            return Err(Error::Config("max_output_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// `((5 + len) / 6) ^ alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Length-normalized negative log-probability; `len` counts EOS for finished hypotheses.
pub fn hypothesis_cost(raw_logprob: f64, len: usize, alpha: f64) -> f64 {
    -raw_logprob / length_penalty(len, alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<u32>,
    pub raw_logprob: f64,
    pub cost: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    /// Ascending cost, ties broken by token order.
    pub hypotheses: Vec<Hypothesis>,
    /// True when no hypothesis reached EOS and the list holds partial ones.
    pub unfinished: bool,
}

/// Anything that scores the next token given a per-hypothesis state.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn start(&self) -> Self::State;
    /// Feeds `tokens[i]` to `states[i]` and returns next-token log-probabilities.
    fn step(&self, states: &mut [Self::State], tokens: &[u32]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone)]
pub struct SearchSpec {
    pub beam_size: usize,
    pub alpha: f64,
    pub max_len: usize,
    pub start_token: u32,
    pub eos: u32,
    /// Tokens never generated.
    pub banned: Vec<u32>,
}

fn by_cost(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    a.cost.total_cmp(&b.cost).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search keeping the `beam_size` best extensions by raw log-probability
/// at every step. Extensions ending in EOS leave the beam as finished hypotheses.
pub fn beam_search<M: StepModel>(model: &M, spec: &SearchSpec) -> Result<BeamOutput> {
    if spec.beam_size == 0 || spec.max_len == 0 {
        return Err(Error::Config("beam_size and max_len must be >= 1".into()));
    }
    let v = model.vocab_size();
    let mut banned = vec![false; v];
    for &b in &spec.banned {
        if let Some(x) = banned.get_mut(b as usize) {
            *x = true;
        }
    }
    let lp_max = length_penalty(spec.max_len, spec.alpha);

    let mut alive_tokens: Vec<Vec<u32>> = vec![Vec::new()];
    let mut alive_raw: Vec<f64> = vec![0.0];
    let mut states = vec![model.start()];
    let mut feed = vec![spec.start_token];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..spec.max_len {
        let lps = model.step(&mut states, &feed)?;
        // (raw, parent, token)
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(lps.len() * v);
        for (i, row) in lps.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                if !banned[tok] && lp.is_finite() {
                    cands.push((alive_raw[i] + lp, i, tok as u32));
                }
            }
        }
        let order = |a: &(f64, usize, u32), b: &(f64, usize, u32)| {
            b.0.total_cmp(&a.0)
                .then_with(|| alive_tokens[a.1].cmp(&alive_tokens[b.1]))
                .then_with(|| a.2.cmp(&b.2))
        };
        if cands.len() > spec.beam_size {
            cands.select_nth_unstable_by(spec.beam_size - 1, order);
            cands.truncate(spec.beam_size);
        }
        cands.sort_by(order);

        let mut next_tokens = Vec::new();
        let mut next_raw = Vec::new();
        let mut next_states = Vec::new();
        for (raw, parent, tok) in cands {
            if tok == spec.eos {
                let tokens = alive_tokens[parent].clone();
                let cost = hypothesis_cost(raw, tokens.len() + 1, spec.alpha);
                finished.push(Hypothesis {
                    tokens,
                    raw_logprob: raw,
                    cost,
                    finished: true,
                });
            } else {
                let mut t = alive_tokens[parent].clone();
                t.push(tok);
                next_tokens.push(t);
                next_raw.push(raw);
                next_states.push(states[parent].clone());
            }
        }
        alive_tokens = next_tokens;
        alive_raw = next_raw;
        states = next_states;
        if alive_tokens.is_empty() {
            break;
        }
        if finished.len() >= spec.beam_size {
            finished.sort_by(by_cost);
            let kth = finished[spec.beam_size - 1].cost;
            let best_alive = alive_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // extensions only lower the raw score and the penalty peaks at max_len
            if -best_alive / lp_max > kth {
                break;
            }
        }
        feed = alive_tokens.iter().map(|t| *t.last().unwrap()).collect();
    }

    if finished.is_empty() {
        let mut partial: Vec<Hypothesis> = alive_tokens
            .into_iter()
            .zip(alive_raw)
            .map(|(tokens, raw)| Hypothesis {
                cost: hypothesis_cost(raw, tokens.len(), spec.alpha),
                tokens,
                raw_logprob: raw,
                finished: false,
            })
            .collect();
        partial.sort_by(by_cost);
        partial.truncate(spec.beam_size);
        return Ok(BeamOutput {
            hypotheses: partial,
            unfinished: true,
        });
    }
    finished.sort_by(by_cost);
    finished.truncate(spec.beam_size);
    Ok(BeamOutput {
        hypotheses: finished,
        unfinished: false,
    })
}

/// Adapts a transformer with an encoded source to [`StepModel`].
pub struct TransformerStepper<'a, T> {
    pub model: &'a Transformer<T>,
    pub source: Arc<EncodedSource<T>>,
}

impl<T: Float> StepModel for TransformerStepper<'_, T> {
    type State = DecoderState<T>;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn start(&self) -> Self::State {
        self.model.start_state(&self.source)
    }

    fn step(&self, states: &mut [Self::State], tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.model.decode_step(states, tokens)
    }
}
