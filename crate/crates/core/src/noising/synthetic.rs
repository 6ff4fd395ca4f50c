//! Desk-scale stand-in for annotated learner corpora: a small English
//! sentence generator and a word-level corruption model applied on top of
//! the character noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{apply_infill_noise, apply_spelling_noise, derived_rng, NoiseConfig};
use crate::corpus::SentencePair;
use crate::tokenize::{detokenize, tokenize};

// (singular, plural)
const NOUNS: &[(&str, &str)] = &[
    ("cat", "cats"),
    ("dog", "dogs"),
    ("student", "students"),
    ("teacher", "teachers"),
    ("apple", "apples"),
    ("engineer", "engineers"),
    ("idea", "ideas"),
    ("book", "books"),
    ("city", "cities"),
    ("child", "children"),
    ("box", "boxes"),
    ("friend", "friends"),
    ("house", "houses"),
    ("car", "cars"),
    ("computer", "computers"),
    ("letter", "letters"),
    ("orange", "oranges"),
    ("umbrella", "umbrellas"),
    ("animal", "animals"),
    ("artist", "artists"),
    ("doctor", "doctors"),
    ("song", "songs"),
    ("window", "windows"),
    ("problem", "problems"),
    ("owl", "owls"),
    ("island", "islands"),
    ("hour", "hours"),
    ("egg", "eggs"),
    ("neighbour", "neighbours"),
    ("garden", "gardens"),
    ("table", "tables"),
    ("picture", "pictures"),
];

const ADJECTIVES: &[&str] = &[
    "old", "new", "big", "small", "happy", "red", "interesting", "important", "honest", "expensive", "useful",
    "quiet", "young", "early", "angry", "ugly", "elegant", "beautiful", "strange", "tired", "excellent", "open",
];

// (base, third person singular, past)
const VERBS: &[(&str, &str, &str)] = &[
    ("like", "likes", "liked"),
    ("want", "wants", "wanted"),
    ("see", "sees", "saw"),
    ("have", "has", "had"),
    ("need", "needs", "needed"),
    ("buy", "buys", "bought"),
    ("find", "finds", "found"),
    ("open", "opens", "opened"),
    ("watch", "watches", "watched"),
    ("carry", "carries", "carried"),
    ("visit", "visits", "visited"),
    ("clean", "cleans", "cleaned"),
    ("love", "loves", "loved"),
    ("paint", "paints", "painted"),
];

// (base, 3sg, past, preposition)
const PREP_VERBS: &[(&str, &str, &str, &str)] = &[
    ("listen", "listens", "listened", "to"),
    ("look", "looks", "looked", "at"),
    ("depend", "depends", "depended", "on"),
    ("wait", "waits", "waited", "for"),
    ("talk", "talks", "talked", "about"),
    ("belong", "belongs", "belonged", "to"),
    ("agree", "agrees", "agreed", "with"),
];

const PLACES: &[&str] = &["in the garden", "at the station", "on the table", "in the city", "at home", "on the island"];
const PRESENT_TIME: &[&str] = &["every day", "every morning", "on weekends", "at night"];
const PAST_TIME: &[&str] = &["yesterday", "last week", "two days ago", "last year"];
const NUMBERS: &[&str] = &["two", "three", "five", "many", "some"];

fn starts_with_vowel_sound(w: &str) -> bool {
    w == "hour" || (w.starts_with(['a', 'e', 'i', 'o', 'u']) && !w.starts_with("use"))
}

fn article_for(next: &str) -> &'static str {
    if starts_with_vowel_sound(next) {
        "an"
    } else {
        "a"
    }
}

struct NounPhrase {
    words: Vec<String>,
    plural: bool,
}

fn noun_phrase<R: Rng + ?Sized>(rng: &mut R, allow_pronoun: bool) -> NounPhrase {
    if allow_pronoun && rng.gen_bool(0.25) {
        let (w, plural) = *[("he", false), ("she", false), ("we", true), ("they", true)].choose(rng).unwrap();
        return NounPhrase {
            words: vec![w.to_string()],
            plural,
        };
    }
    let plural = rng.gen_bool(0.4);
    let &(sg, pl) = NOUNS.choose(rng).unwrap();
    let adj = if rng.gen_bool(0.4) { Some(*ADJECTIVES.choose(rng).unwrap()) } else { None };
    let first = adj.unwrap_or(if plural { pl } else { sg });
    let det = if plural {
        *["the", "these", "my", "our", NUMBERS.choose(rng).unwrap()].choose(rng).unwrap()
    } else {
        *["the", "a", "this", "my", "every", "a"].choose(rng).unwrap()
    };
    let det = if det == "a" { article_for(first) } else { det };
    let mut words = vec![det.to_string()];
    if let Some(a) = adj {
        words.push(a.to_string());
    }
    words.push(if plural { pl } else { sg }.to_string());
    NounPhrase { words, plural }
}

fn be(past: bool, plural: bool) -> &'static str {
    match (past, plural) {
        (false, false) => "is",
        (false, true) => "are",
        (true, false) => "was",
        (true, true) => "were",
    }
}

fn clause<R: Rng + ?Sized>(rng: &mut R, past: bool) -> Vec<String> {
    let subj = noun_phrase(rng, true);
    let mut out = subj.words.clone();
    match rng.gen_range(0..3) {
        0 => {
            let &(base, s3, pst) = VERBS.choose(rng).unwrap();
            let v = if past {
                pst
            } else if subj.plural {
                base
            } else {
                s3
            };
            out.push(v.to_string());
            out.extend(noun_phrase(rng, false).words);
            if rng.gen_bool(0.3) {
                out.extend(PLACES.choose(rng).unwrap().split(' ').map(String::from));
            }
        }
        1 => {
            let &(base, s3, pst, prep) = PREP_VERBS.choose(rng).unwrap();
            let v = if past {
                pst
            } else if subj.plural {
                base
            } else {
                s3
            };
            out.push(v.to_string());
            out.push(prep.to_string());
            out.extend(noun_phrase(rng, false).words);
        }
        _ => {
            out.push(be(past, subj.plural).to_string());
            if rng.gen_bool(0.3) {
                out.push("very".into());
            }
            out.push(ADJECTIVES.choose(rng).unwrap().to_string());
        }
    }
    out
}

/// Generates grammatical English sentences from a small template grammar.
///
/// Articles agree with the following word, verbs agree with their subject,
/// prepositions are fixed by the verb, and time adverbials agree with tense,
/// so the corruptions below are recoverable from context.
pub fn generate_clean_sentences(n: usize, seed: u64) -> Vec<String> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, i as u64);
            let past = rng.gen_bool(0.5);
            let mut words = clause(&mut rng, past);
            if rng.gen_bool(0.25) {
                words.push(if rng.gen_bool(0.5) { "and" } else { "because" }.into());
                words.extend(clause(&mut rng, past));
            }
            if rng.gen_bool(0.5) {
                let t = if past { PAST_TIME } else { PRESENT_TIME };
                words.extend(t.choose(&mut rng).unwrap().split(' ').map(String::from));
            }
            if let Some(first) = words.first_mut() {
                let mut c = first.chars();
                if let Some(h) = c.next() {
                    *first = h.to_uppercase().chain(c).collect();
                }
            }
            words.push(".".into());
            detokenize(&words)
        })
        .collect()
}

const CONFUSION_SETS: &[&[&str]] = &[
    &["a", "an"],
    &["is", "are"],
    &["was", "were"],
    &["has", "have"],
    &["this", "these"],
    &["in", "on", "at"],
    &["to", "for", "with", "about"],
];

const DELETABLE: &[&str] = &["a", "an", "the", "to", "at", "on", "for", "with", "about", "is", "are", "was", "were"];

fn confusion_alternative<R: Rng + ?Sized>(word: &str, rng: &mut R) -> Option<String> {
    let lower = word.to_lowercase();
    let set = CONFUSION_SETS.iter().find(|s| s.contains(&lower.as_str()))?;
    let others: Vec<&&str> = set.iter().filter(|w| **w != lower).collect();
    Some(others.choose(rng)?.to_string())
}

fn is_word(w: &str) -> bool {
    w.chars().all(|c| c.is_alphabetic())
}

fn toggle_suffix(w: &str) -> Option<String> {
    if !is_word(w) || w.len() < 3 {
        return None;
    }
    if let Some(stem) = w.strip_suffix("es").filter(|s| s.ends_with("ch") || s.ends_with('x')) {
        return Some(stem.to_string());
    }
    match w.strip_suffix('s') {
        Some(stem) if !w.ends_with("ss") => Some(stem.to_string()),
        _ => Some(format!("{w}s")),
    }
}

/// Word-level corruption: each token, with probability `p_word`, is replaced
/// from its confusion set, has its plural/agreement suffix toggled, is
/// deleted, duplicated, or swapped with its right neighbour.
pub fn corrupt_words<R: Rng + ?Sized>(tokens: &[String], p_word: f64, rng: &mut R) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tokens.len() + 2);
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        if p_word <= 0.0 || !rng.gen_bool(p_word) || !is_word(tok) {
            out.push(tok.clone());
            i += 1;
            continue;
        }
        let lower = tok.to_lowercase();
        match rng.gen_range(0..10) {
            0..=3 => match confusion_alternative(tok, rng).or_else(|| toggle_suffix(tok)) {
                Some(w) => out.push(w),
                None => out.push(tok.clone()),
            },
            4..=5 => out.push(toggle_suffix(tok).unwrap_or_else(|| tok.clone())),
            6..=7 => {
                if !DELETABLE.contains(&lower.as_str()) {
                    out.push(tok.clone());
                    out.push(tok.clone());
                }
            }
            8 => {
                out.push(tok.clone());
                out.push(tok.clone());
            }
            _ => {
                if i + 1 < tokens.len() && is_word(&tokens[i + 1]) {
                    out.push(tokens[i + 1].clone());
                    out.push(tok.clone());
                    i += 1;
                } else {
                    out.push(tok.clone());
                }
            }
        }
        i += 1;
    }
    out
}

/// Pairs each clean sentence (target) with a corrupted copy (source).
///
/// Sentence `i` draws from a generator seeded by `(cfg.rng_seed, i)`.
pub fn make_synthetic_corpus<S: AsRef<str> + Sync>(clean: &[S], cfg: &NoiseConfig, tag: &str) -> Vec<SentencePair> {
    clean
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let mut rng = derived_rng(cfg.rng_seed, i as u64);
            let target = tokenize(s.as_ref());
            if target.is_empty() {
                return None;
            }
            let words = corrupt_words(&target, cfg.p_word, &mut rng);
            let noisy = apply_spelling_noise(&detokenize(&words), cfg, &mut rng);
            let noisy = apply_infill_noise(&noisy, cfg, &mut rng);
            let source = tokenize(&noisy);
            if source.is_empty() {
                return None;
            }
            Some(SentencePair::new(source, target, tag))
        })
        .collect()
}

/// Noise settings whose corpus error rate sits in the 10-15% band on
/// [`generate_clean_sentences`] output.
pub fn calibrated_config(seed: u64) -> NoiseConfig {
    NoiseConfig {
        p_spell: 0.004,
        p_infill: 0.01,
        p_word: 0.1,
        rng_seed: seed,
        ..NoiseConfig::default()
    }
}
