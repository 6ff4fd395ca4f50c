//! Length-normalized beam search, iterative correction and threshold grid search.

use rayon::prelude::*;

use crate::error::Result;
use crate::model::{Transformer, MAX_POSITIONS};
use crate::subword::{SubwordVocab, BOS, EOS, PAD};

mod beam;
mod grid;
mod iterative;

pub use beam::{beam_search, hypothesis_cost, length_penalty, BeamConfig, BeamOutput, Hypothesis, SearchSpec, StepModel, TransformerStepper};
pub use grid::{grid_search, CachedCorrector, GridCell, GridResult};
pub use iterative::{iterative_decode, iterative_decode_traced, BeamItem, Corrector, IterativeConfig, IterativeTrace, StopReason};

/// Decodes text through a trained model and a subword vocabulary.
pub struct ModelCorrector<'a> {
    pub model: &'a Transformer<f32>,
    pub vocab: &'a SubwordVocab,
    pub beam: BeamConfig,
}

impl ModelCorrector<'_> {
    /// Raw beam over subword ids for an encoded source.
    pub fn search_ids(&self, src: &[u32]) -> Result<BeamOutput> {
        let stepper = TransformerStepper {
            model: self.model,
            source: self.model.encode_source(src)?,
        };
        let spec = SearchSpec {
            beam_size: self.beam.beam_size,
            alpha: self.beam.alpha,
            max_len: self.beam.max_output_len.min(2 * src.len() + 10).min(MAX_POSITIONS - 1),
            start_token: BOS,
            eos: EOS,
            banned: vec![PAD, BOS],
        };
        beam_search(&stepper, &spec)
    }
}

impl Corrector for ModelCorrector<'_> {
    /// Distinct texts in ascending cost. A source too long for the position
    /// table yields only the identity item.
    fn beam(&self, sentence: &str) -> Result<Vec<BeamItem>> {
        self.beam.validate()?;
        let src = self.vocab.encode(sentence);
        if src.len() + 1 > MAX_POSITIONS {
            log::warn!("source of {} pieces left uncorrected", src.len());
            return Ok(vec![BeamItem {
                text: sentence.to_string(),
                cost: 0.0,
            }]);
        }
        let out = self.search_ids(&src)?;
        if out.unfinished {
            log::debug!("no hypothesis finished for {sentence:?}");
        }
        let mut items: Vec<BeamItem> = Vec::with_capacity(out.hypotheses.len());
        for h in out.hypotheses {
            let text = self.vocab.decode(&h.tokens)?;
            if !items.iter().any(|b| b.text == text) {
                items.push(BeamItem { text, cost: h.cost });
            }
        }
        Ok(items)
    }
}

/// Runs iterative decoding over every sentence, in parallel, preserving order.
pub fn correct_all<C: Corrector + ?Sized, S: AsRef<str> + Sync>(corrector: &C, sentences: &[S], cfg: &IterativeConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    sentences.par_iter().map(|s| iterative_decode(corrector, s.as_ref(), cfg)).collect()
}
