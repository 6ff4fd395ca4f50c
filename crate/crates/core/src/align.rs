//! Minimal edit alignment between two token sequences.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Edge {
    Match { src: usize, tgt: usize },
    Sub { src: usize, tgt: usize },
    Ins { tgt: usize },
    Del { src: usize },
}

impl Edge {
    pub fn is_match(&self) -> bool {
        matches!(self, Edge::Match { .. })
    }

    pub fn src(&self) -> Option<usize> {
        match *self {
            Edge::Match { src, .. } | Edge::Sub { src, .. } | Edge::Del { src } => Some(src),
            Edge::Ins { .. } => None,
        }
    }

    pub fn tgt(&self) -> Option<usize> {
        match *self {
            Edge::Match { tgt, .. } | Edge::Sub { tgt, .. } | Edge::Ins { tgt } => Some(tgt),
            Edge::Del { .. } => None,
        }
    }
}

/// An edit path from a source sequence to a target sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Alignment {
    pub edges: Vec<Edge>,
}

impl Alignment {
    /// Number of non-MATCH edges.
    pub fn cost(&self) -> usize {
        self.edges.iter().filter(|e| !e.is_match()).count()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Checks that the edges walk both sequences monotonically without gaps.
    pub fn is_valid_for(&self, src_len: usize, tgt_len: usize) -> bool {
        let (mut i, mut j) = (0, 0);
        for e in &self.edges {
            if let Some(s) = e.src() {
                if s != i {
                    return false;
                }
                i += 1;
            }
            if let Some(t) = e.tgt() {
                if t != j {
                    return false;
                }
                j += 1;
            }
        }
        i == src_len && j == tgt_len
    }
}

/// Levenshtein alignment of `src` to `tgt`.
///
/// Among equal-cost paths the traceback prefers the diagonal (MATCH/SUB),
/// then insertion, then deletion.
pub fn align_tokens<T: PartialEq>(src: &[T], tgt: &[T]) -> Alignment {
    let n = src.len();
    let m = tgt.len();
    let w = m + 1;
    let mut d = vec![0u32; (n + 1) * w];
    for j in 0..=m {
        d[j] = j as u32;
    }
    for i in 1..=n {
        d[i * w] = i as u32;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + u32::from(src[i - 1] != tgt[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = diag.min(ins).min(del);
        }
    }

    let mut edges = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let same = src[i - 1] == tgt[j - 1];
            if d[(i - 1) * w + j - 1] + u32::from(!same) == cur {
                edges.push(if same {
                    Edge::Match { src: i - 1, tgt: j - 1 }
                } else {
                    Edge::Sub { src: i - 1, tgt: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == cur {
            edges.push(Edge::Ins { tgt: j - 1 });
            j -= 1;
        } else {
            edges.push(Edge::Del { src: i - 1 });
            i -= 1;
        }
    }
    edges.reverse();
    Alignment { edges }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity() {
        let a = align_tokens(&toks("a b c"), &toks("a b c"));
        assert_eq!(a.len(), 3);
        assert_eq!(a.cost(), 0);
    }

    #[test]
    fn single_insertion() {
        let a = align_tokens(&toks("a b"), &toks("a x b"));
        assert_eq!(
            a.edges,
            vec![
                Edge::Match { src: 0, tgt: 0 },
                Edge::Ins { tgt: 1 },
                Edge::Match { src: 1, tgt: 2 }
            ]
        );
    }

    #[test]
    fn disjoint_is_all_substitution() {
        let a = align_tokens(&toks("a b"), &toks("c d"));
        assert_eq!(a.edges, vec![Edge::Sub { src: 0, tgt: 0 }, Edge::Sub { src: 1, tgt: 1 }]);
    }

    #[test]
    fn empty_sides() {
        let empty: Vec<&str> = vec![];
        assert!(align_tokens(&empty, &empty).is_empty());
        let a = align_tokens(&toks("a b"), &empty);
        assert_eq!(a.edges, vec![Edge::Del { src: 0 }, Edge::Del { src: 1 }]);
        let a = align_tokens(&empty, &toks("a"));
        assert_eq!(a.edges, vec![Edge::Ins { tgt: 0 }]);
    }

    #[test]
    fn deletion_at_front() {
        let a = align_tokens(&toks("a b"), &toks("b"));
        assert_eq!(a.edges, vec![Edge::Del { src: 0 }, Edge::Match { src: 1, tgt: 0 }]);
    }

    #[test]
    fn valid_paths() {
        let a = align_tokens(&toks("x a b c y"), &toks("a q c z z"));
        assert!(a.is_valid_for(5, 5));
        assert!(!a.is_valid_for(4, 5));
    }
}
