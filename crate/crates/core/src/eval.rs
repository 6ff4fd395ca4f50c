//! Span-level edit extraction and exact-match precision/recall/F0.5.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::align::align_tokens;
use crate::error::{Error, Result};

/// Replace source tokens `[start, end)` with `replacement`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edit {
    pub start: usize,
    pub end: usize,
    pub replacement: Vec<String>,
}

/// Aligns the two token sequences and merges each maximal run of adjacent
/// non-match edges into one edit.
pub fn extract_edits<S: AsRef<str>>(source: &[S], hypothesis: &[S]) -> Vec<Edit> {
    let src: Vec<&str> = source.iter().map(AsRef::as_ref).collect();
    let hyp: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    let alignment = align_tokens(&src, &hyp);
    let mut edits = Vec::new();
    let mut pos = 0;
    let mut open: Option<Edit> = None;
    for edge in &alignment.edges {
        if edge.is_match() {
            if let Some(e) = open.take() {
                edits.push(e);
            }
            pos += 1;
            continue;
        }
        let e = open.get_or_insert_with(|| Edit {
            start: pos,
            end: pos,
            replacement: Vec::new(),
        });
        if edge.src().is_some() {
            e.end += 1;
            pos += 1;
        }
        if let Some(t) = edge.tgt() {
            e.replacement.push(hyp[t].to_string());
        }
    }
    edits.extend(open);
    edits
}

/// Applies non-overlapping edits sorted by position.
pub fn apply_edits<S: AsRef<str>>(source: &[S], edits: &[Edit]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(source.len());
    let mut pos = 0;
    for e in edits {
        if e.start < pos || e.end < e.start || e.end > source.len() {
            return Err(Error::LengthMismatch(format!(
                "edit [{}, {}) does not fit after position {pos} in a {}-token source",
                e.start,
                e.end,
                source.len()
            )));
        }
        out.extend(source[pos..e.start].iter().map(|s| s.as_ref().to_string()));
        out.extend(e.replacement.iter().cloned());
        pos = e.end;
    }
    out.extend(source[pos..].iter().map(|s| s.as_ref().to_string()));
    Ok(out)
}

/// `(1 + b^2) P R / (b^2 P + R)`, zero when both are zero.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Exact `(span, replacement)` matches between hypothesis and reference edits of one sentence.
pub fn sentence_counts(hyp_edits: &[Edit], ref_edits: &[Edit]) -> Counts {
    let mut refs: Vec<&Edit> = ref_edits.iter().collect();
    let mut tp = 0;
    for h in hyp_edits {
        if let Some(i) = refs.iter().position(|r| *r == h) {
            refs.swap_remove(i);
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: hyp_edits.len() - tp,
        fn_: ref_edits.len() - tp,
    }
}

/// Precision, recall and F0.5 as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
}

impl ScoreReport {
    /// Empty hypothesis (or reference) edit sets give precision (or recall) 1.
    pub fn from_counts(counts: Counts) -> Self {
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.fn_);
        ScoreReport {
            counts,
            precision,
            recall,
            f05: f_beta(precision, recall, 0.5),
        }
    }

    /// Counts are kept raw; P, R and F0.5 are percentages rounded to 2 decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let r2 = |x: f64| (x * 10000.0).round() / 100.0;
        serde_json::json!({
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn_,
            "P": r2(self.precision),
            "R": r2(self.recall),
            "F0.5": r2(self.f05),
        })
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P {:6.2}  R {:6.2}  F0.5 {:6.2}  (tp {}, fp {}, fn {})",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f05,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_
        )
    }
}

/// One tokenized dev sentence with the system output and the reference correction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSentence {
    pub source: Vec<String>,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

pub fn sentence_edit_counts(s: &ScoredSentence) -> Counts {
    sentence_counts(&extract_edits(&s.source, &s.hypothesis), &extract_edits(&s.source, &s.reference))
}

/// Micro-averaged score over sentences; order does not matter.
pub fn score_corpus(sentences: &[ScoredSentence]) -> ScoreReport {
    let mut c = Counts::default();
    for s in sentences {
        c.add(&sentence_edit_counts(s));
    }
    ScoreReport::from_counts(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub combined: ScoreReport,
    pub subsets: BTreeMap<String, ScoreReport>,
}

impl CombinedReport {
    pub fn to_json(&self) -> serde_json::Value {
        let subsets: serde_json::Map<String, serde_json::Value> = self.subsets.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
        serde_json::json!({ "combined": self.combined.to_json(), "subsets": subsets })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for (tag, r) in &self.subsets {
            out.push_str(&format!("{tag:<12} {r}\n"));
        }
        out.push_str(&format!("{:<12} {}\n", "combined", self.combined));
        out
    }
}

/// Per-subset scores plus the micro average over their concatenation.
/// Every tag must be one of `subsets`.
pub fn dev_combined<S: AsRef<str>>(tagged: &[(String, ScoredSentence)], subsets: &[S]) -> Result<CombinedReport> {
    let mut per: BTreeMap<String, Counts> = subsets.iter().map(|s| (s.as_ref().to_string(), Counts::default())).collect();
    let mut total = Counts::default();
    for (tag, s) in tagged {
        let c = sentence_edit_counts(s);
        per.get_mut(tag).ok_or_else(|| Error::UnknownTag(tag.clone()))?.add(&c);
        total.add(&c);
    }
    Ok(CombinedReport {
        combined: ScoreReport::from_counts(total),
        subsets: per.into_iter().map(|(k, c)| (k, ScoreReport::from_counts(c))).collect(),
    })
}
