//! Mining (older, newer) training pairs from consecutive page snapshots.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_infill_noise, apply_spelling_noise, derived_rng, downsample_identity, NoiseConfig};
use crate::align::{align_tokens, Edge};
use crate::corpus::SentencePair;
use crate::tokenize::{detokenize, tokenize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RevisionConfig {
    /// Keep snapshots 0, k, 2k, ... of each page.
    pub keep_every: usize,
    /// Matching tokens kept on each side of an edit.
    pub max_context: usize,
    /// Pairs with a side longer than this are dropped.
    pub max_pair_tokens: usize,
    /// Above this many DP cells the changed middle is taken as a single edit.
    pub max_align_cells: usize,
    pub dataset_tag: String,
}

impl Default for RevisionConfig {
    fn default() -> Self {
        RevisionConfig {
            keep_every: 2,
            max_context: 8,
            max_pair_tokens: 150,
            max_align_cells: 4_000_000,
            dataset_tag: "wiki".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub timestamp: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageHistory {
    pub page_id: u64,
    pub title: String,
    /// Chronological snapshots, markup already stripped.
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotPair {
    pub page_id: u64,
    pub older_timestamp: String,
    pub newer_timestamp: String,
    pub older_text: String,
    pub newer_text: String,
}

/// Consecutive retained snapshots after keep-every-k downsampling.
pub fn snapshot_pairs(page: &PageHistory, keep_every: usize) -> Vec<SnapshotPair> {
    let kept: Vec<&Snapshot> = page
        .snapshots
        .iter()
        .step_by(keep_every.max(1))
        .filter(|s| !s.text.trim().is_empty())
        .collect();
    kept.windows(2)
        .map(|w| SnapshotPair {
            page_id: page.page_id,
            older_timestamp: w[0].timestamp.clone(),
            newer_timestamp: w[1].timestamp.clone(),
            older_text: w[0].text.clone(),
            newer_text: w[1].text.clone(),
        })
        .collect()
}

fn is_sentence_end(tok: &str) -> bool {
    matches!(tok, "." | "!" | "?")
}

/// Token alignment that only runs the DP over the changed middle.
fn align_large(old: &[String], new: &[String], max_cells: usize) -> Vec<Edge> {
    let prefix = old.iter().zip(new).take_while(|(a, b)| a == b).count();
    let suffix = old[prefix..]
        .iter()
        .rev()
        .zip(new[prefix..].iter().rev())
        .take_while(|(a, b)| a == b)
        .count();
    let (om, nm) = (&old[prefix..old.len() - suffix], &new[prefix..new.len() - suffix]);
    let mut edges: Vec<Edge> = (0..prefix).map(|i| Edge::Match { src: i, tgt: i }).collect();
    if om.len().saturating_mul(nm.len()) <= max_cells {
        for e in align_tokens(om, nm).edges {
            edges.push(match e {
                Edge::Match { src, tgt } => Edge::Match { src: src + prefix, tgt: tgt + prefix },
                Edge::Sub { src, tgt } => Edge::Sub { src: src + prefix, tgt: tgt + prefix },
                Edge::Ins { tgt } => Edge::Ins { tgt: tgt + prefix },
                Edge::Del { src } => Edge::Del { src: src + prefix },
            });
        }
    } else {
        edges.extend((0..om.len()).map(|i| Edge::Del { src: prefix + i }));
        edges.extend((0..nm.len()).map(|j| Edge::Ins { tgt: prefix + j }));
    }
    let (os, ns) = (old.len() - suffix, new.len() - suffix);
    edges.extend((0..suffix).map(|k| Edge::Match { src: os + k, tgt: ns + k }));
    edges
}

/// Extracts pairs from one snapshot pair.
///
/// Each maximal run of non-matching edges yields an (older, newer) pair with
/// up to `max_context` matching tokens on either side. Matching stretches
/// that contain whole sentences yield identity pairs, one per sentence.
pub fn pairs_from_snapshots(pair: &SnapshotPair, cfg: &RevisionConfig) -> Vec<SentencePair> {
    let old = tokenize(&pair.older_text);
    let new = tokenize(&pair.newer_text);
    let edges = align_large(&old, &new, cfg.max_align_cells);

    // Runs of edges: (is_match, start_edge, end_edge)
    let mut runs: Vec<(bool, usize, usize)> = Vec::new();
    for (k, e) in edges.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.0 == e.is_match() => r.2 = k + 1,
            _ => runs.push((e.is_match(), k, k + 1)),
        }
    }
    // Position in (old, new) before edge k.
    let mut pos = Vec::with_capacity(edges.len() + 1);
    let (mut i, mut j) = (0usize, 0usize);
    pos.push((i, j));
    for e in &edges {
        if e.src().is_some() {
            i += 1;
        }
        if e.tgt().is_some() {
            j += 1;
        }
        pos.push((i, j));
    }

    let mut out = Vec::new();
    for (r, &(is_match, start, end)) in runs.iter().enumerate() {
        let (s0, t0) = pos[start];
        let (s1, t1) = pos[end];
        if is_match {
            emit_identity_sentences(&old[s0..s1], s0 == 0, s1 == old.len(), cfg, &mut out);
            continue;
        }
        let left = if r > 0 { (runs[r - 1].2 - runs[r - 1].1).min(cfg.max_context) } else { 0 };
        let right = if r + 1 < runs.len() {
            (runs[r + 1].2 - runs[r + 1].1).min(cfg.max_context)
        } else {
            0
        };
        let src = &old[s0 - left..s1 + right];
        let tgt = &new[t0 - left..t1 + right];
        if src.is_empty() || tgt.is_empty() || src.len() > cfg.max_pair_tokens || tgt.len() > cfg.max_pair_tokens {
            continue;
        }
        out.push(SentencePair::new(src.to_vec(), tgt.to_vec(), cfg.dataset_tag.clone()));
    }
    out
}

fn emit_identity_sentences(
    tokens: &[String],
    starts_text: bool,
    ends_text: bool,
    cfg: &RevisionConfig,
    out: &mut Vec<SentencePair>,
) {
    // Only complete sentences: bounded by a sentence end or the text edge on both sides.
    let mut bounds = Vec::new();
    let mut begin = if starts_text {
        Some(0)
    } else {
        None
    };
    for (k, t) in tokens.iter().enumerate() {
        if is_sentence_end(t) {
            if let Some(b) = begin {
                bounds.push((b, k + 1));
            }
            begin = Some(k + 1);
        }
    }
    if ends_text {
        if let Some(b) = begin {
            if b < tokens.len() {
                bounds.push((b, tokens.len()));
            }
        }
    }
    for (b, e) in bounds {
        let sent = &tokens[b..e];
        if !sent.is_empty() && sent.len() <= cfg.max_pair_tokens {
            out.push(SentencePair::new(sent.to_vec(), sent.to_vec(), cfg.dataset_tag.clone()));
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionCounts {
    pub pages: usize,
    pub snapshot_pairs: usize,
    pub extracted: usize,
    pub identity_before_downsample: usize,
    pub kept: usize,
}

/// Full mining pipeline for a set of pages.
///
/// Per page: downsample snapshots, extract pairs from consecutive snapshots,
/// add spelling and infill noise to the older side, then downsample the
/// pairs that are still identical. Each page draws from its own generator
/// seeded by `(noise.rng_seed, page_id)`, so the result does not depend on
/// thread scheduling.
pub fn extract_revision_pairs(
    pages: &[PageHistory],
    rev: &RevisionConfig,
    noise: &NoiseConfig,
) -> (Vec<SentencePair>, ExtractionCounts) {
    let per_page: Vec<(Vec<SentencePair>, ExtractionCounts)> = pages
        .par_iter()
        .map(|page| {
            let mut rng = derived_rng(noise.rng_seed, page.page_id);
            let sps = snapshot_pairs(page, rev.keep_every);
            let mut counts = ExtractionCounts {
                pages: 1,
                snapshot_pairs: sps.len(),
                ..Default::default()
            };
            let mut pairs = Vec::new();
            for sp in &sps {
                for p in pairs_from_snapshots(sp, rev) {
                    counts.extracted += 1;
                    let noisy = apply_infill_noise(&apply_spelling_noise(&p.source_text(), noise, &mut rng), noise, &mut rng);
                    let source = tokenize(&noisy);
                    if source.is_empty() {
                        continue;
                    }
                    pairs.push(SentencePair::new(source, p.target, p.dataset_tag));
                }
            }
            counts.identity_before_downsample = pairs.iter().filter(|p| p.is_identity).count();
            let kept = downsample_identity(pairs, noise, &mut rng);
            counts.kept = kept.len();
            (kept, counts)
        })
        .collect();

    let mut all = Vec::new();
    let mut total = ExtractionCounts::default();
    for (pairs, c) in per_page {
        all.extend(pairs);
        total.pages += c.pages;
        total.snapshot_pairs += c.snapshot_pairs;
        total.extracted += c.extracted;
        total.identity_before_downsample += c.identity_before_downsample;
        total.kept += c.kept;
    }
    (all, total)
}

/// Convenience for a single page given as plain snapshot texts.
pub fn extract_page_pairs(snapshots: &[&str], rev: &RevisionConfig) -> Vec<SentencePair> {
    let page = PageHistory {
        page_id: 0,
        title: String::new(),
        snapshots: snapshots
            .iter()
            .enumerate()
            .map(|(i, t)| Snapshot {
                timestamp: i.to_string(),
                text: t.to_string(),
            })
            .collect(),
    };
    snapshot_pairs(&page, rev.keep_every)
        .iter()
        .flat_map(|sp| pairs_from_snapshots(sp, rev))
        .collect()
}

pub fn pair_text(p: &SentencePair) -> (String, String) {
    (detokenize(&p.source), detokenize(&p.target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn every(k: usize) -> RevisionConfig {
        RevisionConfig {
            keep_every: k,
            ..RevisionConfig::default()
        }
    }

    #[test]
    fn identical_snapshots_give_identity_only() {
        let pairs = extract_page_pairs(&["the cat sat", "the cat sat"], &every(1));
        assert!(!pairs.is_empty());
        assert!(pairs.iter().all(|p| p.is_identity));
        assert_eq!(pair_text(&pairs[0]).0, "the cat sat");
    }

    #[test]
    fn edit_with_anchor_context() {
        let pairs = extract_page_pairs(&["he go home now", "he goes home now"], &every(1));
        assert_eq!(pairs.len(), 1);
        assert_eq!(
            pair_text(&pairs[0]),
            ("he go home now".to_string(), "he goes home now".to_string())
        );
    }

    #[test]
    fn context_is_capped() {
        let cfg = RevisionConfig {
            keep_every: 1,
            max_context: 2,
            ..RevisionConfig::default()
        };
        let pairs = extract_page_pairs(&["a b c d X e f g h", "a b c d Y e f g h"], &cfg);
        assert_eq!(pair_text(&pairs[0]), ("c d X e f".into(), "c d Y e f".into()));
    }

    #[test]
    fn complete_sentences_become_identity_pairs() {
        let pairs = extract_page_pairs(
            &["One fine day . He go home . The end .", "One fine day . He goes home . The end ."],
            &RevisionConfig {
                keep_every: 1,
                max_context: 1,
                ..RevisionConfig::default()
            },
        );
        let texts: Vec<(String, String)> = pairs.iter().map(pair_text).collect();
        assert!(texts.contains(&("One fine day .".into(), "One fine day .".into())));
        assert!(texts.contains(&("The end .".into(), "The end .".into())));
        assert!(texts.contains(&("He go home".into(), "He goes home".into())));
        assert_eq!(texts.len(), 3);
    }

    #[test]
    fn downsampled_snapshot_pairs_count() {
        let page = PageHistory {
            page_id: 9,
            title: "t".into(),
            snapshots: (0..10)
                .map(|i| Snapshot {
                    timestamp: i.to_string(),
                    text: format!("text {i}"),
                })
                .collect(),
        };
        assert_eq!(snapshot_pairs(&page, 2).len(), 4);
        assert_eq!(snapshot_pairs(&page, 1).len(), 9);
    }

    #[test]
    fn single_snapshot_is_not_an_error() {
        assert!(extract_page_pairs(&["only one"], &every(1)).is_empty());
    }

    #[test]
    fn large_middle_falls_back() {
        let cfg = RevisionConfig {
            keep_every: 1,
            max_align_cells: 1,
            ..RevisionConfig::default()
        };
        let pairs = extract_page_pairs(&["a x y b", "a p q b"], &cfg);
        assert_eq!(pair_text(&pairs[0]), ("a x y b".into(), "a p q b".into()));
    }

    #[test]
    fn pipeline_is_seed_deterministic_and_keeps_edits() {
        let pages: Vec<PageHistory> = (0..20)
            .map(|id| PageHistory {
                page_id: id,
                title: format!("p{id}"),
                snapshots: vec![
                    Snapshot { timestamp: "1".into(), text: "A first sentence . He go home . Last one .".into() },
                    Snapshot { timestamp: "2".into(), text: "A first sentence . He goes home . Last one .".into() },
                ],
            })
            .collect();
        let noise = NoiseConfig {
            rng_seed: 5,
            ..NoiseConfig::default()
        };
        let rev = every(1);
        let (a, ca) = extract_revision_pairs(&pages, &rev, &noise);
        let (b, _) = extract_revision_pairs(&pages, &rev, &noise);
        assert_eq!(a, b);
        assert_eq!(ca.pages, 20);
        assert_eq!(ca.extracted, 60);
        assert!(a.iter().filter(|p| !p.is_identity).count() >= 20);
    }
}
