use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use super::iterative::{iterative_decode_traced, BeamItem, Corrector, IterativeConfig};
use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::eval::{score_corpus, ScoreReport, ScoredSentence};
use crate::tokenize::tokenize;

/// Memoizes beams by input text, so revisiting a sentence costs no decode.
pub struct CachedCorrector<'a, C: ?Sized> {
    inner: &'a C,
    cache: Mutex<HashMap<String, Arc<Vec<BeamItem>>>>,
}

impl<'a, C: Corrector + ?Sized> CachedCorrector<'a, C> {
    pub fn new(inner: &'a C) -> Self {
        CachedCorrector {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached_sentences(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

impl<C: Corrector + ?Sized> Corrector for CachedCorrector<'_, C> {
    fn beam(&self, sentence: &str) -> Result<Vec<BeamItem>> {
        if let Some(b) = self.cache.lock().unwrap().get(sentence) {
            return Ok(b.as_ref().clone());
        }
        let beam = Arc::new(self.inner.beam(sentence)?);
        self.cache.lock().unwrap().insert(sentence.to_string(), Arc::clone(&beam));
        Ok(beam.as_ref().clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub threshold: f64,
    pub max_iters: usize,
    pub report: ScoreReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// Row-major over thresholds, then max_iters, in the order given.
    pub cells: Vec<GridCell>,
    /// Index of the highest-F0.5 cell; the first one wins ties.
    pub best: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }

    /// `threshold, max_iters, P, R, F0.5` with percentages.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("threshold\tmax_iters\tP\tR\tF0.5\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}\n",
                c.threshold,
                c.max_iters,
                100.0 * c.report.precision,
                100.0 * c.report.recall,
                100.0 * c.report.f05
            ));
        }
        out
    }

    pub fn cell(&self, threshold: f64, max_iters: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.threshold == threshold && c.max_iters == max_iters)
    }
}

/// Scores every `(threshold, max_iters)` combination on `dev`. Each threshold
/// is decoded once up to the largest `max_iters`; smaller caps reuse the trace.
pub fn grid_search<C: Corrector + ?Sized>(corrector: &C, dev: &[SentencePair], thresholds: &[f64], max_iters_list: &[usize]) -> Result<GridResult> {
    if thresholds.is_empty() || max_iters_list.is_empty() {
        return Err(Error::Config("grid needs at least one threshold and one max_iters value".into()));
    }
    if dev.is_empty() {
        return Err(Error::EmptyDataset("dev set".into()));
    }
    let top = *max_iters_list.iter().max().unwrap();
    let cached = CachedCorrector::new(corrector);
    let sources: Vec<String> = dev.iter().map(SentencePair::source_text).collect();
    let mut cells = Vec::with_capacity(thresholds.len() * max_iters_list.len());
    for &threshold in thresholds {
        let cfg = IterativeConfig { threshold, max_iters: top };
        cfg.validate()?;
        let traces = sources
            .par_iter()
            .map(|s| iterative_decode_traced(&cached, s, &cfg))
            .collect::<Result<Vec<_>>>()?;
        for &max_iters in max_iters_list {
            if max_iters == 0 {
                return Err(Error::Config("max_iters must be >= 1".into()));
            }
            let scored: Vec<ScoredSentence> = dev
                .iter()
                .zip(&traces)
                .map(|(p, t)| ScoredSentence {
                    source: p.source.clone(),
                    hypothesis: tokenize(t.output_at(max_iters)),
                    reference: p.target.clone(),
                })
                .collect();
            cells.push(GridCell {
                threshold,
                max_iters,
                report: score_corpus(&scored),
            });
        }
    }
    let mut best = 0;
    for (i, c) in cells.iter().enumerate() {
        if c.report.f05 > cells[best].report.f05 {
            best = i;
        }
    }
    Ok(GridResult { cells, best })
}
