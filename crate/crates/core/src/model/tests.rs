use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::subword::{BOS, EOS, RESERVED};

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab,
        internal_dropout: 0.1,
        source_word_dropout: 0.2,
        target_word_dropout: 0.1,
        mle_weight: 3.0,
    }
}

fn model<T: Float>(cfg: &ModelConfig, seed: u64) -> Transformer<T> {
    Transformer::new(ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()).unwrap()
}

fn random_examples(n: usize, vocab: u32, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ls = rng.gen_range(1..7);
            let lt = rng.gen_range(1..7);
            let src: Vec<u32> = (0..ls).map(|_| rng.gen_range(5..vocab)).collect();
            let tgt: Vec<u32> = (0..lt).map(|_| rng.gen_range(5..vocab)).collect();
            // pairs of pieces share a word
            let sw: Vec<usize> = (0..ls).map(|i| i / 2).collect();
            let tw: Vec<usize> = (0..lt).map(|i| i / 2).collect();
            let w = target_weights(&align_tokens(&src, &tgt), lt, 3.0).unwrap();
            Example::new(&src, &sw, &tgt, &tw, &w).unwrap()
        })
        .collect()
}

#[test]
fn rows_are_normalized_and_eval_is_deterministic() {
    let m: Transformer<f32> = model(&tiny_config(40), 1);
    let ex = &random_examples(1, 40, 2)[0];
    let a = m.log_probs(ex, Mode::Eval).unwrap();
    assert_eq!(a.len(), ex.labels.len());
    for row in &a {
        let s: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
        assert!((s - 1.0).abs() < 1e-5, "{s}");
    }
    assert_eq!(a, m.log_probs(ex, Mode::Eval).unwrap());
}

#[test]
fn untrained_loss_near_uniform() {
    let vocab = 200;
    let m: Transformer<f32> = model(&tiny_config(vocab), 3);
    let ex = random_examples(20, vocab as u32, 4);
    let loss = m.loss(&ex, Mode::Eval).unwrap();
    let per_token = loss.nll / loss.tokens as f64;
    let uniform = (vocab as f64).ln();
    assert!((per_token - uniform).abs() < 0.1 * uniform, "{per_token} vs {uniform}");
}

#[test]
fn out_of_range_id_is_error() {
    let m: Transformer<f32> = model(&tiny_config(20), 1);
    let ex = Example::unweighted(&[5, 25], &[6]);
    assert!(matches!(m.log_probs(&ex, Mode::Eval), Err(Error::IdOutOfRange { id: 25, size: 20 })));
}

#[test]
fn example_framing() {
    let e = Example::new(&[7, 8], &[0, 0], &[9], &[0], &[3.0]).unwrap();
    assert_eq!(e.src, vec![7, 8, EOS]);
    assert_eq!(e.tgt_in, vec![BOS, 9]);
    assert_eq!(e.labels, vec![9, EOS]);
    assert_eq!(e.weights, vec![3.0, 1.0]);
    assert_eq!(e.src_words, vec![0, 0, NO_WORD]);
}

#[test]
fn train_mode_is_seeded() {
    let m: Transformer<f64> = model(&tiny_config(30), 5);
    let ex = random_examples(4, 30, 6);
    let a = m.loss(&ex, Mode::Train { seed: 9 }).unwrap();
    let b = m.loss(&ex, Mode::Train { seed: 9 }).unwrap();
    let c = m.loss(&ex, Mode::Train { seed: 10 }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.weighted_nll, c.weighted_nll);
}

fn sampled_gradient_check(mode: Mode, lambda: f64) {
    let mut cfg = tiny_config(32);
    cfg.mle_weight = lambda;
    let mut m: Transformer<f64> = model(&cfg, 11);
    let mut ex = random_examples(3, 32, 12);
    for e in &mut ex {
        for w in &mut e.weights {
            if *w != 1.0 {
                *w = lambda;
            }
        }
    }
    let mut grads = m.params().zeros_like();
    m.loss_and_grad(&ex, mode, 1.0, &mut grads).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let eps = 1e-5;
    let mut bad = 0;
    let n = 60;
    for _ in 0..n {
        let ti = rng.gen_range(0..grads.tensors.len());
        let ci = rng.gen_range(0..grads.tensors[ti].len());
        let orig = m.params().tensors[ti].data[ci];
        m.params_mut().tensors[ti].data[ci] = orig + eps;
        let up = m.loss(&ex, mode).unwrap().weighted_nll;
        m.params_mut().tensors[ti].data[ci] = orig - eps;
        let down = m.loss(&ex, mode).unwrap().weighted_nll;
        m.params_mut().tensors[ti].data[ci] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.tensors[ti].data[ci];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel >= 1e-3 {
            bad += 1;
        }
        assert!(analytic != 0.0 || numeric.abs() < 1e-8);
    }
    assert!(bad <= 1, "{bad} of {n} coordinates disagree");
}

#[test]
fn gradients_match_finite_differences_eval() {
    sampled_gradient_check(Mode::Eval, 1.0);
}

#[test]
fn gradients_match_finite_differences_with_dropout() {
    sampled_gradient_check(Mode::Train { seed: 3 }, 3.0);
}

#[test]
fn zero_weights_give_zero_gradients() {
    let m: Transformer<f64> = model(&tiny_config(30), 2);
    let mut ex = random_examples(3, 30, 3);
    for e in &mut ex {
        e.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let mut g = m.params().zeros_like();
    m.loss_and_grad(&ex, Mode::Train { seed: 1 }, 1.0, &mut g).unwrap();
    assert!(g.tensors.iter().all(|t| t.data.iter().all(|&x| x == 0.0)));
}

#[test]
fn unused_embedding_rows_have_zero_gradient() {
    let m: Transformer<f64> = model(&tiny_config(30), 2);
    let ex = vec![Example::unweighted(&[5, 6, 7], &[8, 9])];
    let mut g = m.params().zeros_like();
    m.loss_and_grad(&ex, Mode::Eval, 1.0, &mut g).unwrap();
    let d = 16;
    let embed = g.get("embed").unwrap();
    let used = [BOS, EOS, 5, 6, 7, 8, 9];
    for id in 0..30u32 {
        let row = &embed.data[id as usize * d..(id as usize + 1) * d];
        assert_eq!(row.iter().all(|&x| x == 0.0), !used.contains(&id), "row {id}");
    }
}

#[test]
fn sharding_does_not_change_results() {
    let m: Transformer<f64> = model(&tiny_config(30), 4);
    // enough rows to force several shards
    let ex = random_examples(600, 30, 5);
    let total = m.loss(&ex, Mode::Eval).unwrap();
    let single: f64 = ex.iter().map(|e| m.loss(std::slice::from_ref(e), Mode::Eval).unwrap().weighted_nll).sum();
    assert_eq!(total.tokens, ex.iter().map(Example::target_len).sum::<usize>());
    assert!((total.weighted_nll - single).abs() < 1e-9 * single.abs());
}

#[test]
fn incremental_matches_full_forward() {
    let m: Transformer<f64> = model(&tiny_config(30), 8);
    let src = [5, 9, 12, 7];
    let tgt = [6, 6, 11];
    let full = m.log_probs(&Example::unweighted(&src, &tgt), Mode::Eval).unwrap();
    let enc = m.encode_source(&src).unwrap();
    let mut states = vec![m.start_state(&enc)];
    let mut feed = vec![BOS];
    feed.extend_from_slice(&tgt);
    for (t, &tok) in feed.iter().enumerate() {
        let lp = m.decode_step(&mut states, &[tok]).unwrap();
        for (a, b) in lp[0].iter().zip(&full[t]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn word_dropout_extremes_and_whole_words() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let words = [0, 0, 1, 2, 2, 2, NO_WORD];
    let mut x = vec![1.0f64; words.len() * 3];
    assert!(word_dropout(&mut x, 3, &words, 0.0, &mut rng, true).iter().all(|&k| k));
    assert!(x.iter().all(|&v| v == 1.0));
    let keep = word_dropout(&mut x, 3, &words, 1.0, &mut rng, true);
    assert_eq!(keep, vec![false, false, false, false, false, false, true]);
    assert!(x[..18].iter().all(|&v| v == 0.0));
    let mut y = vec![1.0f64; 6];
    assert!(word_dropout(&mut y, 3, &[0, 1], 1.0, &mut rng, false).iter().all(|&k| k));
    for seed in 0..200 {
        let keep = word_keep_flags(&words, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(keep[0], keep[1]);
        assert_eq!(keep[3], keep[4]);
        assert_eq!(keep[4], keep[5]);
        assert!(keep[6]);
    }
}

#[test]
fn word_dropout_rate() {
    let words: Vec<u32> = (0..100_000).collect();
    let keep = word_keep_flags(&words, 0.2, &mut ChaCha8Rng::seed_from_u64(42));
    let frac = keep.iter().filter(|&&k| !k).count() as f64 / words.len() as f64;
    // 3 sigma of Binomial(1e5, 0.2) / 1e5
    let sigma = (0.2f64 * 0.8 / 1e5).sqrt();
    assert!((frac - 0.2).abs() <= 3.0 * sigma, "{frac}");
}

#[test]
fn weights_follow_alignment() {
    let a = align_tokens(&["a", "b"], &["a", "x", "b"]);
    assert_eq!(target_weights(&a, 3, 3.0).unwrap(), vec![1.0, 3.0, 1.0]);
    let id = align_tokens(&[1, 2, 3], &[1, 2, 3]);
    assert_eq!(target_weights(&id, 3, 3.0).unwrap(), vec![1.0; 3]);
    let sub = align_tokens(&[1, 2], &[3, 4, 5]);
    assert_eq!(target_weights(&sub, 3, 1.0).unwrap(), vec![1.0; 3]);
    let del = align_tokens(&[1, 2, 3], &[1, 3]);
    assert_eq!(target_weights(&del, 2, 3.0).unwrap(), vec![1.0, 1.0]);
    assert!(target_weights(&a, 4, 3.0).is_err());
}

#[test]
fn loss_closed_forms() {
    let v = 7usize;
    let uniform = vec![vec![-(v as f64).ln(); v]; 3];
    let l = edited_mle_loss(&uniform, &[1, 2, 3], &[1.0, 3.0, 1.0]).unwrap();
    assert!((l.sum - 5.0 * (v as f64).ln()).abs() < 1e-12);
    assert!((l.per_token - l.sum / 3.0).abs() < 1e-12);
    let rows = vec![vec![-0.5, -1.5], vec![-2.0, -0.1]];
    let ins2 = edited_mle_loss(&rows, &[0, 1], &[2.0, 2.0]).unwrap().sum;
    let ins4 = edited_mle_loss(&rows, &[0, 1], &[4.0, 4.0]).unwrap().sum;
    assert!((ins4 - 2.0 * ins2).abs() < 1e-12);
    let bad = vec![vec![f64::NAN, 0.0]];
    assert!(matches!(edited_mle_loss(&bad, &[0], &[1.0]), Err(Error::NonFinite(_))));
    assert!(edited_mle_loss(&rows, &[0], &[1.0]).is_err());
}

#[test]
fn make_example_uses_subword_alignment() {
    let vocab = SubwordVocab::train(&["the cat sat", "the cats sat"], RESERVED + 20).unwrap();
    let pair = SentencePair::from_text("the cat sat", "the cat sat", "t");
    let e = make_example(&vocab, &pair, 3.0);
    assert!(e.weights.iter().all(|&w| w == 1.0));
    let pair = SentencePair::from_text("the cat sat", "the cat sat down", "t");
    let e = make_example(&vocab, &pair, 3.0);
    assert!(e.weights.contains(&3.0));
    assert_eq!(*e.weights.last().unwrap(), 1.0);
}
