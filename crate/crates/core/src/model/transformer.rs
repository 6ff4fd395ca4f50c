use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::*;
use super::params::{Layout, ModelConfig, ModelParams};
use super::tensor::Float;
use super::{word_keep_flags, NO_WORD};
use crate::error::{Error, Result};
use crate::noising::derived_rng;
use crate::subword::{BOS, EOS};

/// Longest source or decoder-input sequence the position table covers.
pub const MAX_POSITIONS: usize = 1024;

/// Packed target rows per gradient shard; bounds the size of the logit buffer.
const SHARD_TARGET_ROWS: usize = 1024;

/// One training or scoring instance, already framed.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Source pieces followed by EOS.
    pub src: Vec<u32>,
    /// Word index of each source position; [`NO_WORD`] is never dropped.
    pub src_words: Vec<u32>,
    /// BOS followed by the target pieces.
    pub tgt_in: Vec<u32>,
    pub tgt_words: Vec<u32>,
    /// Target pieces followed by EOS.
    pub labels: Vec<u32>,
    /// Loss weight per label.
    pub weights: Vec<f64>,
}

impl Example {
    /// Frames unframed piece sequences. `tgt_weights` covers the target pieces;
    /// the closing EOS gets weight 1.
    pub fn new(src: &[u32], src_words: &[usize], tgt: &[u32], tgt_words: &[usize], tgt_weights: &[f64]) -> Result<Self> {
        if src.len() != src_words.len() || tgt.len() != tgt_words.len() || tgt.len() != tgt_weights.len() {
            return Err(Error::LengthMismatch(format!(
                "pieces/words/weights: source {}/{}, target {}/{}/{}",
                src.len(),
                src_words.len(),
                tgt.len(),
                tgt_words.len(),
                tgt_weights.len()
            )));
        }
        let mut e = Example {
            src: src.to_vec(),
            src_words: src_words.iter().map(|&w| w as u32).collect(),
            tgt_in: Vec::with_capacity(tgt.len() + 1),
            tgt_words: Vec::with_capacity(tgt.len() + 1),
            labels: tgt.to_vec(),
            weights: tgt_weights.to_vec(),
        };
        e.src.push(EOS);
        e.src_words.push(NO_WORD);
        e.tgt_in.push(BOS);
        e.tgt_in.extend_from_slice(tgt);
        e.tgt_words.push(NO_WORD);
        e.tgt_words.extend(tgt_words.iter().map(|&w| w as u32));
        e.labels.push(EOS);
        e.weights.push(1.0);
        Ok(e)
    }

    /// Every piece is its own word and every weight is 1.
    pub fn unweighted(src: &[u32], tgt: &[u32]) -> Self {
        let sw: Vec<usize> = (0..src.len()).collect();
        let tw: Vec<usize> = (0..tgt.len()).collect();
        Example::new(src, &sw, tgt, &tw, &vec![1.0; tgt.len()]).expect("lengths agree by construction")
    }

    pub fn target_len(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Deterministic: no dropout of any kind.
    Eval,
    /// Word and internal dropout, with masks drawn from `seed` and the example's index in the batch.
    Train { seed: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSums {
    /// Sum of `weight * -log p(label)`.
    pub weighted_nll: f64,
    /// Unweighted sum of `-log p(label)`.
    pub nll: f64,
    pub tokens: usize,
}

impl LossSums {
    pub fn add(&mut self, other: &LossSums) {
        self.weighted_nll += other.weighted_nll;
        self.nll += other.nll;
        self.tokens += other.tokens;
    }

    pub fn per_token(&self) -> f64 {
        self.weighted_nll / self.tokens.max(1) as f64
    }
}

/// Pre-LN encoder-decoder transformer with shared source/target embeddings.
#[derive(Debug, Clone)]
pub struct Transformer<T> {
    params: ModelParams<T>,
    layout: Layout,
    positions: Vec<T>,
    embed_scale: T,
}

struct Shard<'a> {
    examples: &'a [Example],
    first_index: usize,
    src_off: Vec<usize>,
    tgt_off: Vec<usize>,
    enc_segs: Vec<Segment>,
    self_segs: Vec<Segment>,
    cross_segs: Vec<Segment>,
}

impl<'a> Shard<'a> {
    fn new(examples: &'a [Example], first_index: usize) -> Self {
        let mut src_off = vec![0];
        let mut tgt_off = vec![0];
        let mut enc_segs = Vec::with_capacity(examples.len());
        let mut self_segs = Vec::with_capacity(examples.len());
        let mut cross_segs = Vec::with_capacity(examples.len());
        for e in examples {
            let (s0, t0) = (*src_off.last().unwrap(), *tgt_off.last().unwrap());
            let (n, m) = (e.src.len(), e.tgt_in.len());
            enc_segs.push(Segment { q0: s0, nq: n, k0: s0, nk: n });
            self_segs.push(Segment { q0: t0, nq: m, k0: t0, nk: m });
            cross_segs.push(Segment { q0: t0, nq: m, k0: s0, nk: n });
            src_off.push(s0 + n);
            tgt_off.push(t0 + m);
        }
        Shard {
            examples,
            first_index,
            src_off,
            tgt_off,
            enc_segs,
            self_segs,
            cross_segs,
        }
    }

    fn src_rows(&self) -> usize {
        *self.src_off.last().unwrap()
    }

    fn tgt_rows(&self) -> usize {
        *self.tgt_off.last().unwrap()
    }
}

struct EncLayerCache<T> {
    ln1: NormCache<T>,
    h1: Vec<T>,
    attn: AttnCache<T>,
    mask1: Option<Vec<T>>,
    ln2: NormCache<T>,
    h2: Vec<T>,
    ffn: FfnCache<T>,
    mask2: Option<Vec<T>>,
}

struct DecLayerCache<T> {
    ln1: NormCache<T>,
    h1: Vec<T>,
    self_attn: AttnCache<T>,
    mask1: Option<Vec<T>>,
    ln2: NormCache<T>,
    h2: Vec<T>,
    cross_attn: AttnCache<T>,
    mask2: Option<Vec<T>>,
    ln3: NormCache<T>,
    h3: Vec<T>,
    ffn: FfnCache<T>,
    mask3: Option<Vec<T>>,
}

struct ForwardCache<T> {
    src_keep: Vec<bool>,
    tgt_keep: Vec<bool>,
    src_emb_mask: Option<Vec<T>>,
    tgt_emb_mask: Option<Vec<T>>,
    enc: Vec<EncLayerCache<T>>,
    enc_norm: NormCache<T>,
    enc_out: Vec<T>,
    dec: Vec<DecLayerCache<T>>,
    dec_norm: NormCache<T>,
    dec_out: Vec<T>,
    /// Log-probabilities, `tgt_rows x vocab`.
    log_probs: Vec<T>,
}

/// Per-example dropout generators, or `None` in eval mode.
struct Rngs(Option<Vec<ChaCha8Rng>>);

impl Rngs {
    fn mask<T: Float>(&mut self, offsets: &[usize], width: usize, p: f64) -> Option<Vec<T>> {
        let rngs = self.0.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 - p;
        let scale = T::of(1.0 / keep);
        let mut m = vec![T::zero(); offsets.last().unwrap() * width];
        for (i, rng) in rngs.iter_mut().enumerate() {
            for v in &mut m[offsets[i] * width..offsets[i + 1] * width] {
                if rng.gen_bool(keep) {
                    *v = scale;
                }
            }
        }
        Some(m)
    }
}

impl<T: Float> Transformer<T> {
    pub fn new(params: ModelParams<T>) -> Result<Self> {
        params.config.validate()?;
        params.check_layout()?;
        let d = params.config.d_model;
        Ok(Transformer {
            layout: Layout::new(&params.config),
            positions: positional_table(MAX_POSITIONS, d),
            embed_scale: T::of((d as f64).sqrt()),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let size = self.params.config.vocab_size;
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
            return Err(Error::IdOutOfRange { id, size });
        }
        if ids.len() > MAX_POSITIONS {
            return Err(Error::LengthMismatch(format!(
                "sequence of {} pieces exceeds {MAX_POSITIONS} positions",
                ids.len()
            )));
        }
        Ok(())
    }

    fn check_example(&self, e: &Example) -> Result<()> {
        self.check_ids(&e.src)?;
        self.check_ids(&e.tgt_in)?;
        self.check_ids(&e.labels)?;
        let m = e.tgt_in.len();
        if e.src.is_empty() || m == 0 {
            return Err(Error::LengthMismatch("empty source or target".into()));
        }
        if e.src_words.len() != e.src.len() || e.tgt_words.len() != m || e.labels.len() != m || e.weights.len() != m {
            return Err(Error::LengthMismatch(format!(
                "example framing: src {}/{} words, tgt_in {m}, tgt words {}, labels {}, weights {}",
                e.src.len(),
                e.src_words.len(),
                e.tgt_words.len(),
                e.labels.len(),
                e.weights.len()
            )));
        }
        if let Some(w) = e.weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::NonFinite(format!("loss weight {w}")));
        }
        Ok(())
    }

    /// Scaled token embedding (or zero when dropped) plus position, per row.
    pub(crate) fn embed_rows(&self, ids: &[u32], positions: &[usize], keep: &[bool]) -> Vec<T> {
        let d = self.params.config.d_model;
        let emb = &self.params.tensors[self.layout.embed].data;
        let mut x = vec![T::zero(); ids.len() * d];
        for (r, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
            let row = &mut x[r * d..(r + 1) * d];
            row.copy_from_slice(&self.positions[pos * d..(pos + 1) * d]);
            if keep[r] {
                let e = &emb[id as usize * d..(id as usize + 1) * d];
                for (v, &w) in row.iter_mut().zip(e) {
                    *v += w * self.embed_scale;
                }
            }
        }
        x
    }

    fn forward(&self, shard: &Shard<'_>, mode: Mode) -> ForwardCache<T> {
        let cfg = &self.params.config;
        let p = &self.params;
        let d = cfg.d_model;
        let mut rngs = Rngs(match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(
                (0..shard.examples.len())
                    .map(|i| derived_rng(seed, (shard.first_index + i) as u64))
                    .collect(),
            ),
        });

        let mut src_ids = Vec::with_capacity(shard.src_rows());
        let mut src_pos = Vec::with_capacity(shard.src_rows());
        let mut tgt_ids = Vec::with_capacity(shard.tgt_rows());
        let mut tgt_pos = Vec::with_capacity(shard.tgt_rows());
        let mut src_keep = Vec::with_capacity(shard.src_rows());
        let mut tgt_keep = Vec::with_capacity(shard.tgt_rows());
        for (i, e) in shard.examples.iter().enumerate() {
            src_ids.extend_from_slice(&e.src);
            src_pos.extend(0..e.src.len());
            tgt_ids.extend_from_slice(&e.tgt_in);
            tgt_pos.extend(0..e.tgt_in.len());
            match rngs.0.as_mut() {
                Some(r) => {
                    src_keep.extend(word_keep_flags(&e.src_words, cfg.source_word_dropout, &mut r[i]));
                    tgt_keep.extend(word_keep_flags(&e.tgt_words, cfg.target_word_dropout, &mut r[i]));
                }
                None => {
                    src_keep.extend(std::iter::repeat_n(true, e.src.len()));
                    tgt_keep.extend(std::iter::repeat_n(true, e.tgt_in.len()));
                }
            }
        }
        let pd = cfg.internal_dropout;

        // encoder
        let mut x = self.embed_rows(&src_ids, &src_pos, &src_keep);
        let src_emb_mask = rngs.mask(&shard.src_off, d, pd);
        apply_mask(&mut x, src_emb_mask.as_deref());
        let mut enc = Vec::with_capacity(cfg.layers);
        for li in &self.layout.encoder {
            let (h1, ln1) = layer_norm_forward(p, li.ln1, &x, d);
            let (mut a, attn) = attention_forward(p, &li.attn, &h1, &h1, &shard.enc_segs, cfg.heads, false, d);
            let mask1 = rngs.mask(&shard.src_off, d, pd);
            apply_mask(&mut a, mask1.as_deref());
            add_in_place(&mut x, &a);
            let (h2, ln2) = layer_norm_forward(p, li.ln2, &x, d);
            let (mut f, ffn) = ffn_forward(p, li.ff1, li.ff2, &h2, shard.src_rows());
            let mask2 = rngs.mask(&shard.src_off, d, pd);
            apply_mask(&mut f, mask2.as_deref());
            add_in_place(&mut x, &f);
            enc.push(EncLayerCache {
                ln1,
                h1,
                attn,
                mask1,
                ln2,
                h2,
                ffn,
                mask2,
            });
        }
        let (enc_out, enc_norm) = layer_norm_forward(p, self.layout.encoder_norm, &x, d);

        // decoder
        let mut y = self.embed_rows(&tgt_ids, &tgt_pos, &tgt_keep);
        let tgt_emb_mask = rngs.mask(&shard.tgt_off, d, pd);
        apply_mask(&mut y, tgt_emb_mask.as_deref());
        let mut dec = Vec::with_capacity(cfg.layers);
        for li in &self.layout.decoder {
            let (h1, ln1) = layer_norm_forward(p, li.ln1, &y, d);
            let (mut a, self_attn) = attention_forward(p, &li.self_attn, &h1, &h1, &shard.self_segs, cfg.heads, true, d);
            let mask1 = rngs.mask(&shard.tgt_off, d, pd);
            apply_mask(&mut a, mask1.as_deref());
            add_in_place(&mut y, &a);
            let (h2, ln2) = layer_norm_forward(p, li.ln2, &y, d);
            let (mut c, cross_attn) = attention_forward(p, &li.cross_attn, &h2, &enc_out, &shard.cross_segs, cfg.heads, false, d);
            let mask2 = rngs.mask(&shard.tgt_off, d, pd);
            apply_mask(&mut c, mask2.as_deref());
            add_in_place(&mut y, &c);
            let (h3, ln3) = layer_norm_forward(p, li.ln3, &y, d);
            let (mut f, ffn) = ffn_forward(p, li.ff1, li.ff2, &h3, shard.tgt_rows());
            let mask3 = rngs.mask(&shard.tgt_off, d, pd);
            apply_mask(&mut f, mask3.as_deref());
            add_in_place(&mut y, &f);
            dec.push(DecLayerCache {
                ln1,
                h1,
                self_attn,
                mask1,
                ln2,
                h2,
                cross_attn,
                mask2,
                ln3,
                h3,
                ffn,
                mask3,
            });
        }
        let (dec_out, dec_norm) = layer_norm_forward(p, self.layout.decoder_norm, &y, d);
        let mut log_probs = linear_forward(p, self.layout.output, &dec_out, shard.tgt_rows());
        for row in log_probs.chunks_exact_mut(cfg.vocab_size) {
            log_softmax_in_place(row);
        }
        ForwardCache {
            src_keep,
            tgt_keep,
            src_emb_mask,
            tgt_emb_mask,
            enc,
            enc_norm,
            enc_out,
            dec,
            dec_norm,
            dec_out,
            log_probs,
        }
    }

    fn shard_loss(&self, shard: &Shard<'_>, cache: &ForwardCache<T>) -> Result<LossSums> {
        let v = self.params.config.vocab_size;
        let mut sums = LossSums::default();
        for (i, e) in shard.examples.iter().enumerate() {
            for (t, (&label, &w)) in e.labels.iter().zip(&e.weights).enumerate() {
                let row = shard.tgt_off[i] + t;
                let lp = cache.log_probs[row * v + label as usize].f64();
                if !lp.is_finite() {
                    return Err(Error::NonFinite(format!("log-probability at example {}, position {t}", shard.first_index + i)));
                }
                sums.nll -= lp;
                sums.weighted_nll -= w * lp;
                sums.tokens += 1;
            }
        }
        Ok(sums)
    }

    fn backward(&self, shard: &Shard<'_>, c: &ForwardCache<T>, scale: f64, g: &mut ModelParams<T>) {
        let cfg = &self.params.config;
        let p = &self.params;
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let m = shard.tgt_rows();

        let mut dlogits = vec![T::zero(); m * v];
        for (i, e) in shard.examples.iter().enumerate() {
            for (t, (&label, &w)) in e.labels.iter().zip(&e.weights).enumerate() {
                let row = shard.tgt_off[i] + t;
                let k = T::of(scale * w);
                if k == T::zero() {
                    continue;
                }
                let lp = &c.log_probs[row * v..(row + 1) * v];
                let dl = &mut dlogits[row * v..(row + 1) * v];
                for (o, &l) in dl.iter_mut().zip(lp) {
                    *o = k * l.exp();
                }
                dl[label as usize] -= k;
            }
        }
        let d_dec_out = linear_backward(p, g, self.layout.output, &c.dec_out, &dlogits, m);
        drop(dlogits);
        let mut dy = layer_norm_backward(p, g, self.layout.decoder_norm, &c.dec_norm, &d_dec_out, d);
        let mut d_enc_out = vec![T::zero(); shard.src_rows() * d];
        for (li, lc) in self.layout.decoder.iter().zip(&c.dec).rev() {
            let mut df = dy.clone();
            apply_mask(&mut df, lc.mask3.as_deref());
            let dh3 = ffn_backward(p, g, li.ff1, li.ff2, &lc.h3, &lc.ffn, &df, m);
            add_in_place(&mut dy, &layer_norm_backward(p, g, li.ln3, &lc.ln3, &dh3, d));

            let mut dc = dy.clone();
            apply_mask(&mut dc, lc.mask2.as_deref());
            let (dh2, denc) = attention_backward(p, g, &li.cross_attn, &lc.h2, &c.enc_out, &lc.cross_attn, &dc, &shard.cross_segs, cfg.heads, d);
            add_in_place(&mut d_enc_out, &denc);
            add_in_place(&mut dy, &layer_norm_backward(p, g, li.ln2, &lc.ln2, &dh2, d));

            let mut da = dy.clone();
            apply_mask(&mut da, lc.mask1.as_deref());
            let (mut dh1, dkv) = attention_backward(p, g, &li.self_attn, &lc.h1, &lc.h1, &lc.self_attn, &da, &shard.self_segs, cfg.heads, d);
            add_in_place(&mut dh1, &dkv);
            add_in_place(&mut dy, &layer_norm_backward(p, g, li.ln1, &lc.ln1, &dh1, d));
        }
        apply_mask(&mut dy, c.tgt_emb_mask.as_deref());
        let tgt_ids = shard.examples.iter().flat_map(|e| e.tgt_in.iter().copied());
        self.accumulate_embedding_grad(g, tgt_ids, &c.tgt_keep, &dy);

        let n = shard.src_rows();
        let mut dx = layer_norm_backward(p, g, self.layout.encoder_norm, &c.enc_norm, &d_enc_out, d);
        for (li, lc) in self.layout.encoder.iter().zip(&c.enc).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, lc.mask2.as_deref());
            let dh2 = ffn_backward(p, g, li.ff1, li.ff2, &lc.h2, &lc.ffn, &df, n);
            add_in_place(&mut dx, &layer_norm_backward(p, g, li.ln2, &lc.ln2, &dh2, d));

            let mut da = dx.clone();
            apply_mask(&mut da, lc.mask1.as_deref());
            let (mut dh1, dkv) = attention_backward(p, g, &li.attn, &lc.h1, &lc.h1, &lc.attn, &da, &shard.enc_segs, cfg.heads, d);
            add_in_place(&mut dh1, &dkv);
            add_in_place(&mut dx, &layer_norm_backward(p, g, li.ln1, &lc.ln1, &dh1, d));
        }
        apply_mask(&mut dx, c.src_emb_mask.as_deref());
        let src_ids = shard.examples.iter().flat_map(|e| e.src.iter().copied());
        self.accumulate_embedding_grad(g, src_ids, &c.src_keep, &dx);
    }

    fn accumulate_embedding_grad(&self, g: &mut ModelParams<T>, ids: impl Iterator<Item = u32>, keep: &[bool], dx: &[T]) {
        let d = self.params.config.d_model;
        let de = &mut g.tensors[self.layout.embed].data;
        for (r, id) in ids.enumerate() {
            if !keep[r] {
                continue;
            }
            let row = &mut de[id as usize * d..(id as usize + 1) * d];
            for (a, &b) in row.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *a += b * self.embed_scale;
            }
        }
    }

    fn shards<'a>(examples: &'a [Example]) -> Vec<Shard<'a>> {
        let mut shards = Vec::new();
        let mut start = 0;
        let mut rows = 0;
        for (i, e) in examples.iter().enumerate() {
            if i > start && rows + e.tgt_in.len() > SHARD_TARGET_ROWS {
                shards.push(Shard::new(&examples[start..i], start));
                start = i;
                rows = 0;
            }
            rows += e.tgt_in.len();
        }
        if start < examples.len() {
            shards.push(Shard::new(&examples[start..], start));
        }
        shards
    }

    /// Per-position log-probabilities for one example, `labels.len()` rows of `vocab_size`.
    pub fn log_probs(&self, example: &Example, mode: Mode) -> Result<Vec<Vec<T>>> {
        self.check_example(example)?;
        let shard = Shard::new(std::slice::from_ref(example), 0);
        let cache = self.forward(&shard, mode);
        Ok(cache
            .log_probs
            .chunks_exact(self.params.config.vocab_size)
            .map(<[T]>::to_vec)
            .collect())
    }

    /// Weighted and unweighted loss over a batch, without gradients.
    pub fn loss(&self, examples: &[Example], mode: Mode) -> Result<LossSums> {
        for e in examples {
            self.check_example(e)?;
        }
        let parts: Vec<Result<LossSums>> = Self::shards(examples)
            .par_iter()
            .map(|s| self.shard_loss(s, &self.forward(s, mode)))
            .collect();
        let mut total = LossSums::default();
        for p in parts {
            total.add(&p?);
        }
        Ok(total)
    }

    /// Adds `scale * d(weighted_nll)/d(params)` into `grads` and returns the loss sums.
    pub fn loss_and_grad(&self, examples: &[Example], mode: Mode, scale: f64, grads: &mut ModelParams<T>) -> Result<LossSums> {
        for e in examples {
            self.check_example(e)?;
        }
        let shards = Self::shards(examples);
        let parts: Vec<Result<(LossSums, ModelParams<T>)>> = shards
            .par_iter()
            .map(|s| {
                let cache = self.forward(s, mode);
                let sums = self.shard_loss(s, &cache)?;
                let mut g = self.params.zeros_like();
                self.backward(s, &cache, scale, &mut g);
                Ok((sums, g))
            })
            .collect();
        let mut total = LossSums::default();
        // fixed reduction order keeps results independent of thread count
        for part in parts {
            let (sums, g) = part?;
            total.add(&sums);
            for (acc, t) in grads.tensors.iter_mut().zip(&g.tensors) {
                add_in_place(&mut acc.data, &t.data);
            }
        }
        grads.check_finite()?;
        Ok(total)
    }
}

pub(crate) fn log_softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row {
        *v -= lse;
    }
}
