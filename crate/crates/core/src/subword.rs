//! Byte-pair-encoding subword vocabulary with byte fallback.
//!
//! Text is cut into segments of `leading whitespace + non-whitespace run`;
//! merges never cross a segment boundary, so each segment is one word for
//! word-level dropout. Pieces are exact substrings of the input, which makes
//! `decode(encode(s)) == s` hold for every string. Characters not seen in
//! training fall back to their UTF-8 bytes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SentencePair;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const FILL: u32 = 4;

/// Reserved infill marker; always encodes to the single piece [`FILL`].
pub const FILL_MARKER: &str = "⟨FILL⟩";

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", FILL_MARKER];
const FIRST_BYTE: u32 = SPECIALS.len() as u32;
const FIRST_CHAR: u32 = FIRST_BYTE + 256;
const FORMAT_HEADER: &str = "gec-bpe 1";

/// Number of ids that exist before any character is added.
pub const RESERVED: usize = FIRST_CHAR as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    chars: Vec<char>,
    merges: Vec<Merge>,
    char_ids: HashMap<char, u32>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

/// Splits text into `whitespace* non-whitespace*` segments covering it exactly.
pub fn segments(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut seen_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if seen_word {
                out.push(&text[start..i]);
                start = i;
                seen_word = false;
            }
        } else {
            seen_word = true;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Splits a segment around infill markers: `Some(part)` for text, `None` for a marker.
fn marker_parts(segment: &str) -> Vec<Option<&str>> {
    let mut parts = Vec::new();
    let mut rest = segment;
    while let Some(pos) = rest.find(FILL_MARKER) {
        if pos > 0 {
            parts.push(Some(&rest[..pos]));
        }
        parts.push(None);
        rest = &rest[pos + FILL_MARKER.len()..];
    }
    if !rest.is_empty() {
        parts.push(Some(rest));
    }
    parts
}

impl SubwordVocab {
    fn from_parts(chars: Vec<char>, merges: Vec<Merge>) -> Result<Self> {
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        pieces.extend((0..=255u8).map(|b| format!("<0x{b:02X}>")));
        let mut char_ids = HashMap::new();
        for &c in &chars {
            if char_ids.insert(c, pieces.len() as u32).is_some() {
                return Err(Error::VocabFormat(format!("duplicate base character {c:?}")));
            }
            pieces.push(c.to_string());
        }
        let mut ranks = HashMap::new();
        for (rank, m) in merges.iter().enumerate() {
            let (l, r) = (m.left as usize, m.right as usize);
            if l >= pieces.len() || r >= pieces.len() || l < FIRST_CHAR as usize || r < FIRST_CHAR as usize {
                return Err(Error::VocabFormat(format!("merge {rank} references invalid piece")));
            }
            let text = format!("{}{}", pieces[l], pieces[r]);
            let res = m.result as usize;
            if res == pieces.len() {
                pieces.push(text);
            } else if res >= pieces.len() || pieces[res] != text {
                return Err(Error::VocabFormat(format!("merge {rank} has inconsistent result id")));
            }
            ranks.insert((m.left, m.right), (rank, m.result));
        }
        Ok(SubwordVocab {
            pieces,
            chars,
            merges,
            char_ids,
            ranks,
        })
    }

    /// Learns merges until the vocabulary holds `target_size` pieces or no pair remains.
    ///
    /// The base vocabulary is the special pieces, 256 byte pieces and every
    /// character in the corpus. Frequency ties pick the lexicographically
    /// smallest `(left, right)` piece pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        let mut word_freq: HashMap<&str, u64> = HashMap::new();
        for line in corpus {
            for seg in segments(line.as_ref()) {
                for part in marker_parts(seg).into_iter().flatten() {
                    *word_freq.entry(part).or_default() += 1;
                }
            }
        }
        if word_freq.is_empty() {
            return Err(Error::EmptyDataset("subword training corpus is empty".into()));
        }
        let mut chars: Vec<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        let mut vocab = SubwordVocab::from_parts(chars, Vec::new())?;
        let base = vocab.pieces.len();
        if target_size < base {
            return Err(Error::Config(format!(
                "target size {target_size} is below the {base} base symbols"
            )));
        }

        // Sorted for determinism independent of hash order.
        let mut words: Vec<(&str, u64)> = word_freq.into_iter().collect();
        words.sort_unstable();
        let mut symbols: Vec<Vec<u32>> = words
            .iter()
            .map(|(w, _)| w.chars().map(|c| vocab.char_ids[&c]).collect())
            .collect();
        let freqs: Vec<i64> = words.iter().map(|&(_, f)| f as i64).collect();

        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut pair_words: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for (wi, syms) in symbols.iter().enumerate() {
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += freqs[wi];
                pair_words.entry((p[0], p[1])).or_default().push(wi);
            }
        }

        let mut piece_index: HashMap<String, u32> = vocab
            .pieces
            .iter()
            .enumerate()
            .skip(FIRST_CHAR as usize)
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();

        while vocab.pieces.len() < target_size {
            let mut best: Option<((u32, u32), i64)> = None;
            for (&pair, &count) in &pair_counts {
                if count <= 0 {
                    continue;
                }
                best = match best {
                    None => Some((pair, count)),
                    Some((bp, bc)) => {
                        let better = count > bc
                            || (count == bc
                                && (vocab.pieces[pair.0 as usize].as_str(), vocab.pieces[pair.1 as usize].as_str())
                                    < (vocab.pieces[bp.0 as usize].as_str(), vocab.pieces[bp.1 as usize].as_str()));
                        if better {
                            Some((pair, count))
                        } else {
                            Some((bp, bc))
                        }
                    }
                };
            }
            let Some(((left, right), _)) = best else { break };

            let text = format!("{}{}", vocab.pieces[left as usize], vocab.pieces[right as usize]);
            let result = match piece_index.get(&text) {
                Some(&id) => id,
                None => {
                    let id = vocab.pieces.len() as u32;
                    vocab.pieces.push(text.clone());
                    piece_index.insert(text, id);
                    id
                }
            };
            vocab.ranks.insert((left, right), (vocab.merges.len(), result));
            vocab.merges.push(Merge { left, right, result });

            let mut affected = pair_words.remove(&(left, right)).unwrap_or_default();
            affected.sort_unstable();
            affected.dedup();
            for wi in affected {
                let old = &symbols[wi];
                if !old.windows(2).any(|p| p[0] == left && p[1] == right) {
                    continue;
                }
                let f = freqs[wi];
                for p in old.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() -= f;
                }
                let merged = apply_merge(old, left, right, result);
                for p in merged.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += f;
                    pair_words.entry((p[0], p[1])).or_default().push(wi);
                }
                symbols[wi] = merged;
            }
            pair_counts.retain(|_, c| *c > 0);
        }
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn base_size(&self) -> usize {
        FIRST_CHAR as usize + self.chars.len()
    }

    fn encode_part(&self, part: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = Vec::with_capacity(part.len());
        for c in part.chars() {
            match self.char_ids.get(&c) {
                Some(&id) => syms.push(id),
                None => {
                    let mut buf = [0u8; 4];
                    syms.extend(c.encode_utf8(&mut buf).bytes().map(|b| FIRST_BYTE + b as u32));
                }
            }
        }
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&(rank, res)| (rank, p[0], p[1], res)))
                .min();
            let Some((_, l, r, res)) = best else { break };
            syms = apply_merge(&syms, l, r, res);
        }
        out.extend(syms);
    }

    /// Encodes text to piece ids (no BOS/EOS framing).
    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_words(text).0
    }

    /// Encodes text and returns, per piece, the index of the segment (word) it came from.
    pub fn encode_with_words(&self, text: &str) -> (Vec<u32>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut words = Vec::new();
        for (wi, seg) in segments(text).into_iter().enumerate() {
            for part in marker_parts(seg) {
                match part {
                    Some(p) => self.encode_part(p, &mut ids),
                    None => ids.push(FILL),
                }
            }
            words.resize(ids.len(), wi);
        }
        (ids, words)
    }

    /// Decodes ids back to text. BOS, EOS and PAD are skipped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        let mut bytes: Vec<u8> = Vec::new();
        for &id in ids {
            if id as usize >= self.pieces.len() {
                return Err(Error::IdOutOfRange { id, size: self.pieces.len() });
            }
            if (FIRST_BYTE..FIRST_CHAR).contains(&id) {
                bytes.push((id - FIRST_BYTE) as u8);
                continue;
            }
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(&bytes));
                bytes.clear();
            }
            match id {
                PAD | BOS | EOS => {}
                _ => out.push_str(&self.pieces[id as usize]),
            }
        }
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(&bytes));
        }
        Ok(out)
    }

    /// Serializes to the versioned text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{FORMAT_HEADER}").unwrap();
        writeln!(s, "size {}", self.pieces.len()).unwrap();
        for (id, name) in SPECIALS.iter().enumerate() {
            writeln!(s, "special {id} {}", escape(name)).unwrap();
        }
        writeln!(s, "chars {}", self.chars.len()).unwrap();
        for c in &self.chars {
            writeln!(s, "{}", escape(&c.to_string())).unwrap();
        }
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for m in &self.merges {
            writeln!(s, "{} {} {} {}", m.left, m.right, m.result, escape(&self.pieces[m.result as usize])).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::VocabFormat(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT_HEADER) {
            return Err(bad("missing or unsupported version header"));
        }
        let size: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("size "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing size line"))?;
        for (id, name) in SPECIALS.iter().enumerate() {
            let expected = format!("special {id} {}", escape(name));
            if lines.next() != Some(expected.as_str()) {
                return Err(bad("special token table does not match this version"));
            }
        }
        let n_chars: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("chars "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing chars line"))?;
        let mut chars = Vec::with_capacity(n_chars);
        for _ in 0..n_chars {
            let line = lines.next().ok_or_else(|| bad("truncated char table"))?;
            let s = unescape(line).ok_or_else(|| bad("bad escape in char table"))?;
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(bad("char table entry is not a single character")),
            }
        }
        let n_merges: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing merges line"))?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("truncated merge list"))?;
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 4 {
                return Err(bad("merge line needs 4 fields"));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad("bad merge id"));
            merges.push(Merge {
                left: num(f[0])?,
                right: num(f[1])?,
                result: num(f[2])?,
            });
        }
        let vocab = SubwordVocab::from_parts(chars, merges)?;
        if vocab.size() != size {
            return Err(bad("size line disagrees with contents"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SubwordVocab::from_text(&text)
    }

    /// SHA-256 of the serialized vocabulary.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn apply_merge(syms: &[u32], left: u32, right: u32, result: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c == '\\' || c.is_whitespace() || c.is_control() {
            write!(out, "\\u{{{:x}}}", c as u32).unwrap();
        } else {
            out.push(c);
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::new();
    let mut rest = s;
    while let Some(pos) = rest.find('\\') {
        out.push_str(&rest[..pos]);
        let tail = rest[pos..].strip_prefix("\\u{")?;
        let end = tail.find('}')?;
        out.push(char::from_u32(u32::from_str_radix(&tail[..end], 16).ok()?)?);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Some(out)
}

/// Keeps pairs whose source and target both encode to at most `max_pieces` pieces.
pub fn filter_by_length(pairs: &[SentencePair], vocab: &SubwordVocab, max_pieces: usize) -> Vec<SentencePair> {
    pairs
        .iter()
        .filter(|p| {
            vocab.encode(&p.source_text()).len() <= max_pieces && vocab.encode(&p.target_text()).len() <= max_pieces
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> SubwordVocab {
        let corpus = ["hello world", "hello there world", "the world is wide"];
        SubwordVocab::train(&corpus, RESERVED + 40).unwrap()
    }

    #[test]
    fn segments_cover_text() {
        let s = "  a bb\tc  ";
        let segs = segments(s);
        assert_eq!(segs, vec!["  a", " bb", "\tc", "  "]);
        assert_eq!(segs.concat(), s);
    }

    #[test]
    fn single_merge_is_aa() {
        let v0 = SubwordVocab::train(&["aaab aaab"], 0).err();
        assert!(v0.is_some());
        let base = SubwordVocab::train(&["aaab aaab"], RESERVED + 3).unwrap();
        assert_eq!(base.base_size(), RESERVED + 3);
        assert!(base.merges().is_empty());
        let v = SubwordVocab::train(&["aaab aaab"], RESERVED + 4).unwrap();
        assert_eq!(v.merges().len(), 1);
        assert_eq!(v.piece(v.merges()[0].result), Some("aa"));
    }

    #[test]
    fn character_vocabulary_encodes_per_char() {
        let v = SubwordVocab::train(&["abc"], RESERVED + 3).unwrap();
        assert_eq!(v.encode("cab").len(), 3);
    }

    #[test]
    fn deterministic_training() {
        assert_eq!(small_vocab().merges(), small_vocab().merges());
    }

    #[test]
    fn round_trip_basic() {
        let v = small_vocab();
        for s in ["hello world", "", "  spaced   out  ", "héllo wörld ✓", "tab\tnew\nline"] {
            assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        }
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn unseen_script_uses_bytes() {
        let v = small_vocab();
        let ids = v.encode("日本");
        assert!(!ids.contains(&UNK));
        assert_eq!(ids.len(), 6);
        assert!(ids.iter().all(|&i| (FIRST_BYTE..FIRST_CHAR).contains(&i)));
    }

    #[test]
    fn marker_is_single_piece() {
        let v = small_vocab();
        let s = format!("hel{FILL_MARKER}rld");
        let (ids, words) = v.encode_with_words(&s);
        assert_eq!(ids.iter().filter(|&&i| i == FILL).count(), 1);
        assert!(words.iter().all(|&w| w == 0));
        assert_eq!(v.decode(&ids).unwrap(), s);
    }

    #[test]
    fn word_indices() {
        let v = small_vocab();
        let (ids, words) = v.encode_with_words("hello wide world");
        assert_eq!(ids.len(), words.len());
        assert_eq!(words.first(), Some(&0));
        assert_eq!(words.last(), Some(&2));
        assert!(words.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
    }

    #[test]
    fn decode_out_of_range() {
        let v = small_vocab();
        assert!(matches!(v.decode(&[v.size() as u32]), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn serialization_is_exact() {
        let v = SubwordVocab::train(&["a\\b c\td", "a\\b x"], RESERVED + 12).unwrap();
        let text = v.to_text();
        let back = SubwordVocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn rejects_bad_header() {
        assert!(SubwordVocab::from_text("gec-bpe 2\n").is_err());
    }

    #[test]
    fn length_filter_boundary() {
        let v = SubwordVocab::train(&["x y"], RESERVED + 3).unwrap();
        // "x" repeated without spaces: one piece per char in a char vocabulary.
        let make = |n: usize| "x".repeat(n);
        let pairs = vec![
            SentencePair::from_text(&make(150), &make(150), "t"),
            SentencePair::from_text(&make(151), &make(10), "t"),
            SentencePair::from_text(&make(10), &make(151), "t"),
        ];
        let kept = filter_by_length(&pairs, &v, 150);
        assert_eq!(kept, vec![pairs[0].clone()]);
        assert!(filter_by_length(&[], &v, 150).is_empty());
    }
}
