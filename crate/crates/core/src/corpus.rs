//! Parallel correction data: ingestion, error-rate statistics and oversampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::align_tokens;
use crate::error::{Error, Result};
use crate::tokenize::{detokenize, tokenize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub dataset_tag: String,
    pub is_identity: bool,
}

impl SentencePair {
    pub fn new(source: Vec<String>, target: Vec<String>, dataset_tag: impl Into<String>) -> Self {
        let is_identity = source == target;
        SentencePair {
            source,
            target,
            dataset_tag: dataset_tag.into(),
            is_identity,
        }
    }

    /// Builds a pair from raw text, running both sides through the rule tokenizer.
    pub fn from_text(source: &str, target: &str, dataset_tag: impl Into<String>) -> Self {
        SentencePair::new(tokenize(source), tokenize(target), dataset_tag)
    }

    pub fn source_text(&self) -> String {
        detokenize(&self.source)
    }

    pub fn target_text(&self) -> String {
        detokenize(&self.target)
    }
}

/// Anything carrying a dataset tag can be oversampled.
pub trait Tagged {
    fn tag(&self) -> &str;
}

impl Tagged for SentencePair {
    fn tag(&self) -> &str {
        &self.dataset_tag
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sentence_count: usize,
    pub non_match_edges: usize,
    pub total_edges: usize,
    pub error_rate: f64,
}

fn edge_counts(pair: &SentencePair) -> (usize, usize) {
    let a = align_tokens(&pair.source, &pair.target);
    (a.cost(), a.len())
}

/// Micro-averaged error rate: total non-match edges over total edges.
pub fn compute_stats(pairs: &[SentencePair]) -> Result<DatasetStats> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no sentence pairs".into()));
    }
    let (non_match, total) = pairs
        .par_iter()
        .map(edge_counts)
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let error_rate = if total == 0 { 0.0 } else { non_match as f64 / total as f64 };
    Ok(DatasetStats {
        sentence_count: pairs.len(),
        non_match_edges: non_match,
        total_edges: total,
        error_rate,
    })
}

pub fn stats_by_tag(pairs: &[SentencePair]) -> Result<BTreeMap<String, DatasetStats>> {
    let mut groups: BTreeMap<&str, Vec<SentencePair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.tag()).or_default().push(p.clone());
    }
    groups
        .into_iter()
        .map(|(tag, ps)| Ok((tag.to_string(), compute_stats(&ps)?)))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OversampleSpec {
    /// Total copy count per tag. Tags not listed get `default_multiplier`.
    pub multipliers: BTreeMap<String, usize>,
    #[serde(default = "one")]
    pub default_multiplier: usize,
    /// Reject corpus tags missing from `multipliers`.
    #[serde(default)]
    pub strict: bool,
}

fn one() -> usize {
    1
}

impl OversampleSpec {
    pub fn new<I, S>(multipliers: I) -> Self
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        OversampleSpec {
            multipliers: multipliers.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            default_multiplier: 1,
            strict: false,
        }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn multiplier(&self, tag: &str) -> Result<usize> {
        match self.multipliers.get(tag) {
            Some(&m) => Ok(m),
            None if self.strict => Err(Error::UnknownTag(tag.to_string())),
            None => Ok(self.default_multiplier),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.default_multiplier == 0 {
            return Err(Error::Config("default multiplier must be >= 1".into()));
        }
        if let Some((tag, _)) = self.multipliers.iter().find(|(_, &m)| m == 0) {
            return Err(Error::Config(format!("multiplier for {tag:?} must be >= 1")));
        }
        Ok(())
    }
}

/// Expected size of an oversampled mixture given per-tag counts.
pub fn oversampled_size(counts: &BTreeMap<String, usize>, spec: &OversampleSpec) -> Result<usize> {
    spec.validate()?;
    counts
        .iter()
        .map(|(tag, &n)| Ok(spec.multiplier(tag)? * n))
        .sum()
}

/// Repeats every item `multiplier[tag]` times in total, then shuffles under `seed`.
pub fn oversample<T: Tagged + Clone>(items: &[T], spec: &OversampleSpec, seed: u64) -> Result<Vec<T>> {
    spec.validate()?;
    let mut out = Vec::new();
    for item in items {
        let m = spec.multiplier(item.tag())?;
        for _ in 0..m {
            out.push(item.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParallelSource {
    /// `source TAB target [TAB tag]` per line.
    Tsv(PathBuf),
    /// Line-aligned source and target files.
    TwoFiles { source: PathBuf, target: PathBuf },
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

/// Loads a parallel corpus. Pairs without an explicit tag get `default_tag`.
pub fn load_parallel(src: &ParallelSource, default_tag: &str) -> Result<Vec<SentencePair>> {
    match src {
        ParallelSource::Tsv(path) => load_tsv(path, default_tag),
        ParallelSource::TwoFiles { source, target } => load_two_files(source, target, default_tag),
    }
}

pub fn load_tsv(path: &Path, default_tag: &str) -> Result<Vec<SentencePair>> {
    let mut pairs = Vec::new();
    for (idx, line) in read_lines(path)?.into_iter().enumerate() {
        let row = idx + 1;
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            row,
            message: message.to_string(),
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (s, t, tag) = match fields.as_slice() {
            [s, t] => (*s, *t, default_tag),
            [s, t, tag] => (*s, *t, *tag),
            [_] => return Err(parse_err("missing tab separator")),
            _ => return Err(parse_err("too many tab-separated fields")),
        };
        let pair = SentencePair::from_text(s, t, tag);
        if pair.source.is_empty() || pair.target.is_empty() {
            return Err(parse_err("empty side"));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_two_files(source: &Path, target: &Path, tag: &str) -> Result<Vec<SentencePair>> {
    let src_lines = read_lines(source)?;
    let tgt_lines = read_lines(target)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            source_path: source.to_path_buf(),
            target_path: target.to_path_buf(),
            source_lines: src_lines.len(),
            target_lines: tgt_lines.len(),
            line: src_lines.len().min(tgt_lines.len()) + 1,
        });
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (idx, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let pair = SentencePair::from_text(s, t, tag);
        if pair.source.is_empty() || pair.target.is_empty() {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                row: idx + 1,
                message: "empty side".into(),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Writes `source TAB target TAB tag` lines.
pub fn write_tsv(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", p.source_text(), p.target_text(), p.dataset_tag)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The set of dataset tags present, in sorted order.
pub fn tags(pairs: &[SentencePair]) -> BTreeSet<String> {
    pairs.iter().map(|p| p.dataset_tag.clone()).collect()
}
