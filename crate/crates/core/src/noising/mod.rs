//! Weakly supervised training data: character noise, infill masking,
//! identity downsampling, revision mining and a synthetic corruption corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::subword::FILL_MARKER;

pub mod revision;
pub mod synthetic;
pub mod wikidump;

pub use revision::{extract_revision_pairs, RevisionConfig, SnapshotPair};
pub use synthetic::{generate_clean_sentences, make_synthetic_corpus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Per-character probability of a spelling edit.
    pub p_spell: f64,
    /// Per-sentence probability of replacing a substring with the infill marker.
    pub p_infill: f64,
    pub infill_max_len: usize,
    /// Fraction of identity pairs kept by [`downsample_identity`].
    pub identity_keep: f64,
    /// Per-token probability of a word-level corruption (synthetic corpora only).
    pub p_word: f64,
    pub rng_seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            p_spell: 0.003,
            p_infill: 0.01,
            infill_max_len: 8,
            identity_keep: 0.04,
            p_word: 0.0,
            rng_seed: 0,
        }
    }
}

impl NoiseConfig {
    /// All noise switched off.
    pub fn none() -> Self {
        NoiseConfig {
            p_spell: 0.0,
            p_infill: 0.0,
            p_word: 0.0,
            ..NoiseConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_spell", self.p_spell),
            ("p_infill", self.p_infill),
            ("identity_keep", self.identity_keep),
            ("p_word", self.p_word),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.infill_max_len == 0 {
            return Err(Error::Config("infill_max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic per-item generator derived from a base seed and an item key.
pub fn derived_rng(seed: u64, key: u64) -> ChaCha8Rng {
    // splitmix64 finalizer decorrelates neighbouring keys
    let mut z = key.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(seed ^ z)
}

fn random_printable<R: Rng + ?Sized>(rng: &mut R) -> char {
    rng.gen_range(0x20u8..=0x7e) as char
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpellEdit {
    Insert,
    Delete,
    Transpose,
    Replace,
}

/// Character-level spelling noise: at each position, with probability
/// `p_spell`, insert a random character before it, delete it, swap it with
/// the next character, or replace it.
pub fn apply_spelling_noise<R: Rng + ?Sized>(text: &str, cfg: &NoiseConfig, rng: &mut R) -> String {
    spelling_noise_traced(text, cfg.p_spell, rng).0
}

/// Same as [`apply_spelling_noise`] but also reports which edits fired.
pub fn spelling_noise_traced<R: Rng + ?Sized>(text: &str, p: f64, rng: &mut R) -> (String, Vec<SpellEdit>) {
    let mut edits = Vec::new();
    if p <= 0.0 {
        return (text.to_string(), edits);
    }
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 4);
    let mut i = 0;
    while i < chars.len() {
        if !rng.gen_bool(p) {
            out.push(chars[i]);
            i += 1;
            continue;
        }
        let edit = match rng.gen_range(0..4) {
            0 => SpellEdit::Insert,
            1 => SpellEdit::Delete,
            2 => SpellEdit::Transpose,
            _ => SpellEdit::Replace,
        };
        match edit {
            SpellEdit::Insert => {
                out.push(random_printable(rng));
                out.push(chars[i]);
                i += 1;
            }
            SpellEdit::Delete => i += 1,
            SpellEdit::Transpose => {
                if i + 1 < chars.len() {
                    out.push(chars[i + 1]);
                    out.push(chars[i]);
                    i += 2;
                } else {
                    out.push(chars[i]);
                    i += 1;
                }
            }
            SpellEdit::Replace => {
                out.push(random_printable(rng));
                i += 1;
            }
        }
        edits.push(edit);
    }
    (out, edits)
}

/// With probability `p_infill`, replaces one substring of 1..=`infill_max_len`
/// characters with the infill marker. Text already holding a marker is returned unchanged.
pub fn apply_infill_noise<R: Rng + ?Sized>(text: &str, cfg: &NoiseConfig, rng: &mut R) -> String {
    if cfg.p_infill <= 0.0 || text.contains(FILL_MARKER) || !rng.gen_bool(cfg.p_infill) {
        return text.to_string();
    }
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return String::new();
    }
    let len = rng.gen_range(1..=cfg.infill_max_len.min(chars.len()));
    let start = rng.gen_range(0..=chars.len() - len);
    let mut out: String = chars[..start].iter().collect();
    out.push_str(FILL_MARKER);
    out.extend(&chars[start + len..]);
    out
}

/// Keeps every non-identity pair and each identity pair with probability `identity_keep`.
pub fn downsample_identity<R: Rng + ?Sized>(pairs: Vec<SentencePair>, cfg: &NoiseConfig, rng: &mut R) -> Vec<SentencePair> {
    if cfg.identity_keep >= 1.0 {
        return pairs;
    }
    pairs
        .into_iter()
        .filter(|p| !p.is_identity || rng.gen_bool(cfg.identity_keep))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn spell(p: f64) -> NoiseConfig {
        NoiseConfig {
            p_spell: p,
            ..NoiseConfig::none()
        }
    }

    #[test]
    fn zero_probability_is_identity() {
        let mut r = rng(1);
        assert_eq!(apply_spelling_noise("hello world", &spell(0.0), &mut r), "hello world");
        assert_eq!(apply_infill_noise("hello world", &NoiseConfig::none(), &mut r), "hello world");
        assert_eq!(apply_spelling_noise("", &spell(0.5), &mut r), "");
    }

    // Replays the generator by hand: one Bernoulli draw per position, then the
    // edit kind and (for insert/replace) a printable character.
    fn manual_trace(text: &str, p: f64, seed: u64) -> String {
        let mut r = rng(seed);
        let chars: Vec<char> = text.chars().collect();
        let mut out = String::new();
        let mut i = 0;
        while i < chars.len() {
            if r.gen_bool(p) {
                let kind: u32 = r.gen_range(0..4);
                match kind {
                    0 => {
                        out.push(r.gen_range(0x20u8..=0x7e) as char);
                        out.push(chars[i]);
                        i += 1;
                    }
                    1 => i += 1,
                    2 if i + 1 < chars.len() => {
                        out.push(chars[i + 1]);
                        out.push(chars[i]);
                        i += 2;
                    }
                    2 => {
                        out.push(chars[i]);
                        i += 1;
                    }
                    _ => {
                        out.push(r.gen_range(0x20u8..=0x7e) as char);
                        i += 1;
                    }
                }
            } else {
                out.push(chars[i]);
                i += 1;
            }
        }
        out
    }

    #[test]
    fn golden_spelling_noise() {
        let got = apply_spelling_noise("hello", &spell(0.2), &mut rng(4));
        assert_eq!(got, manual_trace("hello", 0.2, 4));
        assert_eq!(got, "h;=lo");
        assert_eq!(apply_spelling_noise("hello", &spell(0.2), &mut rng(4)), got);
    }

    #[test]
    fn golden_infill() {
        let cfg = NoiseConfig {
            p_infill: 1.0,
            ..NoiseConfig::none()
        };
        let got = apply_infill_noise("abcdefghij", &cfg, &mut rng(7));
        assert_eq!(got, format!("a{FILL_MARKER}defghij"));
        assert_eq!(apply_infill_noise("abcdefghij", &cfg, &mut rng(7)), got);
    }

    #[test]
    fn infill_respects_existing_marker_and_empty() {
        let cfg = NoiseConfig {
            p_infill: 1.0,
            ..NoiseConfig::none()
        };
        let s = format!("ab{FILL_MARKER}cd");
        assert_eq!(apply_infill_noise(&s, &cfg, &mut rng(0)), s);
        assert_eq!(apply_infill_noise("", &cfg, &mut rng(0)), "");
    }

    #[test]
    fn infill_replaces_bounded_substring() {
        let cfg = NoiseConfig {
            p_infill: 1.0,
            ..NoiseConfig::none()
        };
        let text = "the quick brown fox";
        for seed in 0..200 {
            let out = apply_infill_noise(text, &cfg, &mut rng(seed));
            let pos = out.find(FILL_MARKER).unwrap();
            let removed = text.chars().count() - (out.chars().count() - FILL_MARKER.chars().count());
            assert!((1..=8).contains(&removed), "removed {removed}");
            assert!(text.starts_with(&out[..pos]));
            assert!(text.ends_with(&out[pos + FILL_MARKER.len()..]));
        }
    }

    #[test]
    fn spelling_length_change_matches_edits() {
        let text = "grammatical error correction is fun";
        for seed in 0..300 {
            let (out, edits) = spelling_noise_traced(text, 0.1, &mut rng(seed));
            let ins = edits.iter().filter(|e| **e == SpellEdit::Insert).count() as i64;
            let del = edits.iter().filter(|e| **e == SpellEdit::Delete).count() as i64;
            assert_eq!(out.chars().count() as i64 - text.chars().count() as i64, ins - del);
        }
    }

    #[test]
    fn downsample_keeps_non_identity() {
        let pairs: Vec<SentencePair> = (0..100)
            .map(|i| {
                if i % 2 == 0 {
                    SentencePair::from_text("a", "a", "t")
                } else {
                    SentencePair::from_text("a", "b", "t")
                }
            })
            .collect();
        let cfg = NoiseConfig {
            identity_keep: 0.0,
            ..NoiseConfig::default()
        };
        let kept = downsample_identity(pairs.clone(), &cfg, &mut rng(3));
        assert_eq!(kept.len(), 50);
        assert!(kept.iter().all(|p| !p.is_identity));
        let all = NoiseConfig {
            identity_keep: 1.0,
            ..NoiseConfig::default()
        };
        assert_eq!(downsample_identity(pairs.clone(), &all, &mut rng(3)), pairs);
    }

    #[test]
    fn derived_rngs_differ() {
        let a = derived_rng(1, 1).next_u64();
        let b = derived_rng(1, 2).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, derived_rng(1, 1).next_u64());
    }

    #[test]
    fn config_validation() {
        assert!(NoiseConfig::default().validate().is_ok());
        let bad = NoiseConfig {
            p_spell: 1.5,
            ..NoiseConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseConfig {
            infill_max_len: 0,
            ..NoiseConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
