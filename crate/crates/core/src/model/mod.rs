//! Encoder-decoder transformer with hand-written reverse mode, whole-word
//! embedding dropout and the edited-MLE objective.
//!
//! The model is generic over [`Float`] so that the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

use rand::Rng;

use crate::align::{align_tokens, Alignment, Edge};
use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::subword::SubwordVocab;

mod incremental;
mod layers;
pub mod params;
pub mod tensor;
mod transformer;

pub use incremental::{DecoderState, EncodedSource};
pub use params::{Layout, ModelConfig, ModelParams};
pub use tensor::{Float, Tensor};
pub use transformer::{Example, LossSums, Mode, Transformer, MAX_POSITIONS};

/// Word index for positions that word dropout never touches (BOS, EOS).
pub const NO_WORD: u32 = u32::MAX;

/// One keep flag per position. Each distinct word is dropped with probability
/// `p`, taking all of its positions with it.
pub fn word_keep_flags<R: Rng + ?Sized>(words: &[u32], p: f64, rng: &mut R) -> Vec<bool> {
    if p <= 0.0 {
        return vec![true; words.len()];
    }
    let n_words = words.iter().filter(|&&w| w != NO_WORD).map(|&w| w as usize + 1).max().unwrap_or(0);
    let dropped: Vec<bool> = (0..n_words).map(|_| rng.gen_bool(p.min(1.0))).collect();
    words.iter().map(|&w| w == NO_WORD || !dropped[w as usize]).collect()
}

/// Zeroes the `d`-wide embedding rows of dropped words in place, without
/// rescaling the survivors. Returns the keep flag of every row.
pub fn word_dropout<T: Float, R: Rng + ?Sized>(embedded: &mut [T], d: usize, words: &[u32], p: f64, rng: &mut R, train: bool) -> Vec<bool> {
    assert_eq!(embedded.len(), words.len() * d, "one word index per embedded row");
    if !train {
        return vec![true; words.len()];
    }
    let keep = word_keep_flags(words, p, rng);
    for (row, &k) in embedded.chunks_exact_mut(d).zip(&keep) {
        if !k {
            row.fill(T::zero());
        }
    }
    keep
}

/// Loss weight per target position: 1 where the alignment matches the
/// source, `mle_weight` where the target token is substituted or inserted.
pub fn target_weights(alignment: &Alignment, tgt_len: usize, mle_weight: f64) -> Result<Vec<f64>> {
    let mut weights = Vec::with_capacity(tgt_len);
    for edge in &alignment.edges {
        match *edge {
            Edge::Match { tgt, .. } | Edge::Sub { tgt, .. } | Edge::Ins { tgt } => {
                if tgt != weights.len() {
                    return Err(Error::LengthMismatch(format!("alignment skips or repeats target position {tgt}")));
                }
                weights.push(if edge.is_match() { 1.0 } else { mle_weight });
            }
            Edge::Del { .. } => {}
        }
    }
    if weights.len() != tgt_len {
        return Err(Error::LengthMismatch(format!(
            "alignment covers {} target positions, target has {tgt_len}",
            weights.len()
        )));
    }
    Ok(weights)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleLoss {
    pub sum: f64,
    pub per_token: f64,
}

/// `-sum_t weights[t] * log_probs[t][tgt[t]]`, also divided by the target length.
pub fn edited_mle_loss<R: AsRef<[f64]>>(log_probs: &[R], tgt: &[u32], weights: &[f64]) -> Result<MleLoss> {
    if log_probs.len() != tgt.len() || tgt.len() != weights.len() {
        return Err(Error::LengthMismatch(format!(
            "{} rows, {} targets, {} weights",
            log_probs.len(),
            tgt.len(),
            weights.len()
        )));
    }
    let mut sum = 0.0;
    for (t, ((row, &y), &w)) in log_probs.iter().zip(tgt).zip(weights).enumerate() {
        let row = row.as_ref();
        let lp = *row.get(y as usize).ok_or(Error::IdOutOfRange { id: y, size: row.len() })?;
        if !lp.is_finite() {
            return Err(Error::NonFinite(format!("log-probability at target position {t}")));
        }
        sum -= w * lp;
    }
    Ok(MleLoss {
        sum,
        per_token: if tgt.is_empty() { 0.0 } else { sum / tgt.len() as f64 },
    })
}

/// Encodes a sentence pair into a framed example with edited-MLE weights
/// computed over subword ids.
pub fn make_example(vocab: &SubwordVocab, pair: &SentencePair, mle_weight: f64) -> Example {
    let (src, sw) = vocab.encode_with_words(&pair.source_text());
    let (tgt, tw) = vocab.encode_with_words(&pair.target_text());
    let weights = target_weights(&align_tokens(&src, &tgt), tgt.len(), mle_weight).expect("alignment of the same sequences");
    Example::new(&src, &sw, &tgt, &tw, &weights).expect("encoder returns one word index per piece")
}

#[cfg(test)]
mod tests;
