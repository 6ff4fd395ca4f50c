//! Step-by-step decoding with cached keys and values.

use std::sync::Arc;

use super::layers::*;
use super::tensor::Float;
use super::transformer::{log_softmax_in_place, Transformer, MAX_POSITIONS};
use crate::error::{Error, Result};
use crate::subword::EOS;

/// Encoder output projected to cross-attention keys and values, per decoder layer.
#[derive(Debug)]
pub struct EncodedSource<T> {
    len: usize,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

impl<T> EncodedSource<T> {
    /// Source positions, including the closing EOS.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Self-attention cache of one partial hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    src: Arc<EncodedSource<T>>,
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    pos: usize,
}

impl<T> DecoderState<T> {
    /// Number of tokens fed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn attend_one<T: Float>(q: &[T], k: &[T], v: &[T], heads: usize, out: &mut [T], scores: &mut Vec<T>) {
    let d = q.len();
    let dh = d / heads;
    let t = k.len() / d;
    let scale = T::one() / T::of(dh as f64).sqrt();
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        scores.clear();
        for j in 0..t {
            let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
            scores.push(qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale);
        }
        softmax_prefix(scores, t);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.fill(T::zero());
        for (j, &p) in scores.iter().enumerate() {
            let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, &x) in oh.iter_mut().zip(vj) {
                *o += p * x;
            }
        }
    }
}

impl<T: Float> Transformer<T> {
    /// Runs the encoder in eval mode on `pieces` followed by EOS.
    pub fn encode_source(&self, pieces: &[u32]) -> Result<Arc<EncodedSource<T>>> {
        let mut src = pieces.to_vec();
        src.push(EOS);
        self.check_ids(&src)?;
        let cfg = self.config();
        let p = self.params();
        let layout = self.layout();
        let d = cfg.d_model;
        let n = src.len();
        let positions: Vec<usize> = (0..n).collect();
        let mut x = self.embed_rows(&src, &positions, &vec![true; n]);
        let segs = [Segment { q0: 0, nq: n, k0: 0, nk: n }];
        for li in &layout.encoder {
            let (h1, _) = layer_norm_forward(p, li.ln1, &x, d);
            let (a, _) = attention_forward(p, &li.attn, &h1, &h1, &segs, cfg.heads, false, d);
            add_in_place(&mut x, &a);
            let (h2, _) = layer_norm_forward(p, li.ln2, &x, d);
            let (f, _) = ffn_forward(p, li.ff1, li.ff2, &h2, n);
            add_in_place(&mut x, &f);
        }
        let (enc_out, _) = layer_norm_forward(p, layout.encoder_norm, &x, d);
        let cross_k = layout.decoder.iter().map(|li| linear_forward(p, li.cross_attn.k, &enc_out, n)).collect();
        let cross_v = layout.decoder.iter().map(|li| linear_forward(p, li.cross_attn.v, &enc_out, n)).collect();
        Ok(Arc::new(EncodedSource { len: n, cross_k, cross_v }))
    }

    pub fn start_state(&self, src: &Arc<EncodedSource<T>>) -> DecoderState<T> {
        let layers = self.config().layers;
        DecoderState {
            src: Arc::clone(src),
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            pos: 0,
        }
    }

    /// Feeds one token to each state and returns next-token log-probabilities.
    pub fn decode_step(&self, states: &mut [DecoderState<T>], tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        if states.len() != tokens.len() {
            return Err(Error::LengthMismatch(format!("{} states, {} tokens", states.len(), tokens.len())));
        }
        self.check_ids(tokens)?;
        if let Some(s) = states.iter().find(|s| s.pos >= MAX_POSITIONS) {
            return Err(Error::LengthMismatch(format!("decoder position {} exceeds {MAX_POSITIONS}", s.pos)));
        }
        let cfg = self.config();
        let p = self.params();
        let layout = self.layout();
        let d = cfg.d_model;
        let b = states.len();
        let positions: Vec<usize> = states.iter().map(|s| s.pos).collect();
        let mut y = self.embed_rows(tokens, &positions, &vec![true; b]);
        let mut ctx = vec![T::zero(); b * d];
        let mut scores = Vec::new();
        for (l, li) in layout.decoder.iter().enumerate() {
            let (h1, _) = layer_norm_forward(p, li.ln1, &y, d);
            let q = linear_forward(p, li.self_attn.q, &h1, b);
            let k = linear_forward(p, li.self_attn.k, &h1, b);
            let v = linear_forward(p, li.self_attn.v, &h1, b);
            for (i, s) in states.iter_mut().enumerate() {
                s.self_k[l].extend_from_slice(&k[i * d..(i + 1) * d]);
                s.self_v[l].extend_from_slice(&v[i * d..(i + 1) * d]);
                attend_one(&q[i * d..(i + 1) * d], &s.self_k[l], &s.self_v[l], cfg.heads, &mut ctx[i * d..(i + 1) * d], &mut scores);
            }
            add_in_place(&mut y, &linear_forward(p, li.self_attn.o, &ctx, b));

            let (h2, _) = layer_norm_forward(p, li.ln2, &y, d);
            let q = linear_forward(p, li.cross_attn.q, &h2, b);
            for (i, s) in states.iter().enumerate() {
                attend_one(&q[i * d..(i + 1) * d], &s.src.cross_k[l], &s.src.cross_v[l], cfg.heads, &mut ctx[i * d..(i + 1) * d], &mut scores);
            }
            add_in_place(&mut y, &linear_forward(p, li.cross_attn.o, &ctx, b));

            let (h3, _) = layer_norm_forward(p, li.ln3, &y, d);
            let (f, _) = ffn_forward(p, li.ff1, li.ff2, &h3, b);
            add_in_place(&mut y, &f);
        }
        for s in states.iter_mut() {
            s.pos += 1;
        }
        let (out, _) = layer_norm_forward(p, layout.decoder_norm, &y, d);
        let mut logits = linear_forward(p, layout.output, &out, b);
        Ok(logits
            .chunks_exact_mut(cfg.vocab_size)
            .map(|row| {
                log_softmax_in_place(row);
                row.iter().map(|x| x.f64()).collect()
            })
            .collect())
    }
}
