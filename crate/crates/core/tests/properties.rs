//! Property tests for the module invariants.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use gec_core::align::align_tokens;
use gec_core::corpus::{compute_stats, oversample, OversampleSpec, SentencePair};
use gec_core::decoding::{beam_search, hypothesis_cost, iterative_decode_traced, BeamItem, Corrector, IterativeConfig, SearchSpec, StepModel};
use gec_core::eval::{apply_edits, extract_edits, score_corpus, ScoredSentence};
use gec_core::model::{word_dropout, ModelConfig, ModelParams, NO_WORD};
use gec_core::noising::revision::extract_page_pairs;
use gec_core::noising::{apply_infill_noise, derived_rng, downsample_identity, spelling_noise_traced, NoiseConfig, RevisionConfig, SpellEdit};
use gec_core::noising::synthetic::generate_clean_sentences;
use gec_core::subword::{filter_by_length, SubwordVocab};
use gec_core::training::{lr_schedule, Checkpoint, Schedule, TrainConfig};
use proptest::prelude::*;

fn token() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "the", "cat", "sat", ",", "."]).prop_map(String::from)
}

fn tokens(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(token(), 0..max)
}

fn pair() -> impl Strategy<Value = SentencePair> {
    (tokens(8), tokens(8), prop::sample::select(vec!["x", "y", "z"])).prop_map(|(s, t, tag)| SentencePair::new(s, t, tag))
}

/// Vocabularies of increasing size learned from one corpus.
fn vocabs() -> &'static [SubwordVocab] {
    static V: OnceLock<Vec<SubwordVocab>> = OnceLock::new();
    V.get_or_init(|| {
        let corpus = generate_clean_sentences(500, 1);
        [300, 350, 450, 600].iter().map(|&n| SubwordVocab::train(&corpus, n).unwrap()).collect()
    })
}

proptest! {
    // ---------------------------------------------------------- corpus

    #[test]
    fn identity_corpus_has_zero_error_rate(sents in prop::collection::vec(tokens(10), 1..20)) {
        let pairs: Vec<SentencePair> = sents.iter().map(|s| SentencePair::new(s.clone(), s.clone(), "t")).collect();
        prop_assert_eq!(compute_stats(&pairs).unwrap().error_rate, 0.0);
    }

    #[test]
    fn disjoint_equal_length_pairs_have_rate_one(n in 1usize..10, k in 1usize..5) {
        let pairs: Vec<SentencePair> = (0..k)
            .map(|_| SentencePair::new(vec!["a".into(); n], vec!["b".into(); n], "t"))
            .collect();
        prop_assert_eq!(compute_stats(&pairs).unwrap().error_rate, 1.0);
    }

    #[test]
    fn oversample_size_and_multiset(pairs in prop::collection::vec(pair(), 0..30), mx in 1usize..4, my in 1usize..4, seed in any::<u64>()) {
        let spec = OversampleSpec::new([("x", mx), ("y", my)]);
        let out = oversample(&pairs, &spec, seed).unwrap();
        let m = |t: &str| match t { "x" => mx, "y" => my, _ => 1 };
        prop_assert_eq!(out.len(), pairs.iter().map(|p| m(&p.dataset_tag)).sum::<usize>());
        let mut expected: BTreeMap<String, usize> = BTreeMap::new();
        for p in &pairs {
            *expected.entry(format!("{:?}", p)).or_default() += m(&p.dataset_tag);
        }
        let mut got: BTreeMap<String, usize> = BTreeMap::new();
        for p in &out {
            *got.entry(format!("{:?}", p)).or_default() += 1;
        }
        prop_assert_eq!(got, expected);
        prop_assert_eq!(oversample(&pairs, &spec, seed).unwrap(), out);
    }

    #[test]
    fn alignment_cost_is_symmetric_and_bounded(a in tokens(10), b in tokens(10)) {
        let ab = align_tokens(&a, &b);
        prop_assert!(ab.is_valid_for(a.len(), b.len()));
        prop_assert_eq!(ab.cost(), align_tokens(&b, &a).cost());
        prop_assert!(ab.cost() <= a.len().max(b.len()));
    }

    // ---------------------------------------------------------- subword

    #[test]
    fn subword_round_trip(s in any::<String>()) {
        let v = &vocabs()[1];
        prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }

    #[test]
    fn larger_vocab_never_lengthens(s in "[a-z .,']{0,60}") {
        let lens: Vec<usize> = vocabs().iter().map(|v| v.encode(&s).len()).collect();
        prop_assert!(lens.windows(2).all(|w| w[1] <= w[0]), "{:?}", lens);
    }

    #[test]
    fn length_filter_is_ordered_subset(pairs in prop::collection::vec(pair(), 0..20), max in 0usize..20) {
        let kept = filter_by_length(&pairs, &vocabs()[0], max);
        let mut it = pairs.iter();
        for k in &kept {
            prop_assert!(it.any(|p| p == k), "not an ordered subsequence");
        }
    }

    // ---------------------------------------------------------- noising

    #[test]
    fn spelling_noise_length_accounting(text in "[a-zA-Z ]{0,80}", p in 0.0f64..0.5, seed in any::<u64>()) {
        let (noisy, edits) = spelling_noise_traced(&text, p, &mut derived_rng(seed, 0));
        let ins = edits.iter().filter(|e| **e == SpellEdit::Insert).count() as i64;
        let del = edits.iter().filter(|e| **e == SpellEdit::Delete).count() as i64;
        prop_assert_eq!(noisy.chars().count() as i64 - text.chars().count() as i64, ins - del);
        let again = spelling_noise_traced(&text, p, &mut derived_rng(seed, 0));
        prop_assert_eq!(again, (noisy, edits));
    }

    #[test]
    fn infill_is_deterministic(text in "[a-z ]{0,60}", seed in any::<u64>()) {
        let cfg = NoiseConfig { p_infill: 0.7, ..NoiseConfig::default() };
        prop_assert_eq!(
            apply_infill_noise(&text, &cfg, &mut derived_rng(seed, 1)),
            apply_infill_noise(&text, &cfg, &mut derived_rng(seed, 1))
        );
    }

    #[test]
    fn downsampling_keeps_every_edit_pair(pairs in prop::collection::vec(pair(), 0..40), keep in 0.0f64..1.0, seed in any::<u64>()) {
        let cfg = NoiseConfig { identity_keep: keep, ..NoiseConfig::default() };
        let kept = downsample_identity(pairs.clone(), &cfg, &mut derived_rng(seed, 2));
        let edits: Vec<&SentencePair> = pairs.iter().filter(|p| !p.is_identity).collect();
        let kept_edits: Vec<&SentencePair> = kept.iter().filter(|p| !p.is_identity).collect();
        prop_assert_eq!(edits, kept_edits);
    }

    #[test]
    fn identical_snapshots_give_identity_pairs(words in prop::collection::vec("[a-z]{1,6}", 1..30)) {
        let text = format!("{} .", words.join(" "));
        let rev = RevisionConfig { keep_every: 1, ..RevisionConfig::default() };
        for p in extract_page_pairs(&[&text, &text, &text], &rev) {
            prop_assert!(p.is_identity);
        }
    }

    // ---------------------------------------------------------- model

    #[test]
    fn word_dropout_takes_whole_words(words_per in prop::collection::vec(1usize..4, 1..10), p in 0.0f64..1.0, seed in any::<u64>()) {
        let mut words: Vec<u32> = words_per.iter().enumerate().flat_map(|(w, &n)| std::iter::repeat_n(w as u32, n)).collect();
        words.push(NO_WORD);
        let d = 3;
        let mut emb = vec![1.0f64; words.len() * d];
        let keep = word_dropout(&mut emb, d, &words, p, &mut derived_rng(seed, 3), true);
        prop_assert!(*keep.last().unwrap());
        for (i, &w) in words.iter().enumerate() {
            let zeroed = emb[i * d..(i + 1) * d].iter().all(|&x| x == 0.0);
            prop_assert_eq!(zeroed, !keep[i]);
            for (j, &v) in words.iter().enumerate() {
                if v == w {
                    prop_assert_eq!(keep[i], keep[j]);
                }
            }
        }
    }

    // ---------------------------------------------------------- training

    #[test]
    fn schedules_are_continuous_and_bounded(warmup in 1usize..5000, step in 1usize..100_000) {
        for schedule in [Schedule::Rsqrt, Schedule::LinearConstant] {
            let c = TrainConfig { warmup_steps: warmup, schedule, peak_lr: 1e-3, ..TrainConfig::default() };
            let lr = lr_schedule(step, &c);
            prop_assert!(lr > 0.0 && lr <= 1e-3 + 1e-18);
            let jump = (lr_schedule(warmup + 1, &c) - lr_schedule(warmup, &c)).abs();
            prop_assert!(jump <= 1e-3 / warmup as f64 + 1e-15);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), step in any::<u64>(), fp in "[0-9a-f]{0,16}") {
        let cfg = ModelConfig { layers: 1, heads: 2, d_model: 8, d_ff: 16, ..ModelConfig::desk(11) };
        let ck = Checkpoint { step, vocab_fingerprint: fp, params: ModelParams::init(&cfg, &mut derived_rng(seed, 5)).unwrap() };
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }

    // ---------------------------------------------------------- decoding

    #[test]
    fn beam_output_is_sorted_and_distinct(seed in any::<u64>(), beam_size in 1usize..6, alpha in 0.0f64..1.5, max_len in 1usize..7) {
        let m = Table { seed, vocab: 5 };
        let spec = SearchSpec { beam_size, alpha, max_len, start_token: 0, eos: 1, banned: vec![0] };
        let out = beam_search(&m, &spec).unwrap();
        prop_assert!(!out.hypotheses.is_empty() && out.hypotheses.len() <= beam_size);
        prop_assert!(out.hypotheses.windows(2).all(|w| w[0].cost <= w[1].cost));
        let mut seen = std::collections::HashSet::new();
        for h in &out.hypotheses {
            prop_assert!(seen.insert(h.tokens.clone()), "duplicate hypothesis");
            prop_assert!(!h.tokens.contains(&0) && !h.tokens.contains(&1));
            if h.finished {
                let expect = hypothesis_cost(h.raw_logprob, h.tokens.len() + 1, alpha);
                prop_assert!((h.cost - expect).abs() <= 1e-9 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn iterative_decoding_invariants(
        costs in prop::collection::vec((0.1f64..5.0, 0.1f64..5.0), 1..6),
        t1 in 0.0f64..2.0,
        dt in 0.0f64..1.0,
        max_iters in 1usize..5,
    ) {
        // a chain s0 -> s1 -> ... where state k offers (identity cost, next cost)
        let beams: HashMap<String, Vec<BeamItem>> = costs
            .iter()
            .enumerate()
            .map(|(k, &(ic, nc))| {
                (format!("s{k}"), vec![BeamItem { text: format!("s{k}"), cost: ic }, BeamItem { text: format!("s{}", k + 1), cost: nc }])
            })
            .collect();
        let c = Chain(beams);
        let low = iterative_decode_traced(&c, "s0", &IterativeConfig { threshold: t1, max_iters }).unwrap();
        let high = iterative_decode_traced(&c, "s0", &IterativeConfig { threshold: t1 + dt, max_iters }).unwrap();
        prop_assert!(low.states.len() - 1 <= max_iters);
        prop_assert!(high.states.len() >= low.states.len());
        prop_assert_eq!(&high.states[..low.states.len()], &low.states[..]);
        let tiny = iterative_decode_traced(&c, "s0", &IterativeConfig { threshold: 1e-12, max_iters: 1 }).unwrap();
        prop_assert_eq!(tiny.output(), "s0");
    }

    // ---------------------------------------------------------- eval

    #[test]
    fn edits_round_trip(src in tokens(12), hyp in tokens(12)) {
        let edits = extract_edits(&src, &hyp);
        prop_assert_eq!(apply_edits(&src, &edits).unwrap(), hyp);
        for e in &edits {
            prop_assert!(e.start <= e.end && e.end <= src.len());
        }
    }

    #[test]
    fn scoring_ignores_order_and_perfect_output_is_clean(rows in prop::collection::vec((tokens(8), tokens(8), tokens(8)), 1..15), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let scored: Vec<ScoredSentence> = rows.iter().map(|(s, h, r)| ScoredSentence { source: s.clone(), hypothesis: h.clone(), reference: r.clone() }).collect();
        let mut shuffled = scored.clone();
        shuffled.shuffle(&mut derived_rng(seed, 4));
        prop_assert_eq!(score_corpus(&scored), score_corpus(&shuffled));
        let perfect: Vec<ScoredSentence> = scored.iter().map(|s| ScoredSentence { hypothesis: s.reference.clone(), ..s.clone() }).collect();
        let r = score_corpus(&perfect);
        prop_assert_eq!((r.counts.fp, r.counts.fn_), (0, 0));
    }
}

struct Chain(HashMap<String, Vec<BeamItem>>);

impl Corrector for Chain {
    fn beam(&self, s: &str) -> gec_core::Result<Vec<BeamItem>> {
        Ok(self.0.get(s).cloned().unwrap_or_else(|| vec![BeamItem { text: s.into(), cost: 1.0 }]))
    }
}

/// Deterministic next-token distribution keyed on the prefix.
struct Table {
    seed: u64,
    vocab: usize,
}

impl StepModel for Table {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Vec<u32> {
        Vec::new()
    }

    fn step(&self, states: &mut [Vec<u32>], tokens: &[u32]) -> gec_core::Result<Vec<Vec<f64>>> {
        use rand::Rng;
        Ok(states
            .iter_mut()
            .zip(tokens)
            .map(|(s, &t)| {
                s.push(t);
                let key = s.iter().fold(0u64, |h, &x| h.wrapping_mul(31).wrapping_add(x as u64 + 1));
                let mut rng = derived_rng(self.seed, key);
                let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let z = logits.iter().map(|l: &f64| l.exp()).sum::<f64>().ln();
                logits.iter().map(|l| l - z).collect()
            })
            .collect())
    }
}
