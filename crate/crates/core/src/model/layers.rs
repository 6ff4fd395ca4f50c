//! Forward and backward kernels for the building blocks, operating on packed
//! row-major activations (`rows x width`).

use super::params::{AttnIdx, LinearIdx, ModelParams, NormIdx};
use super::tensor::{gemm, Float, View, ViewMut};

pub(crate) const LN_EPS: f64 = 1e-6;

/// One attention block: query rows `[q0, q0 + nq)` attend key rows `[k0, k0 + nk)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub q0: usize,
    pub nq: usize,
    pub k0: usize,
    pub nk: usize,
}

pub(crate) fn linear_forward<T: Float>(p: &ModelParams<T>, idx: LinearIdx, x: &[T], rows: usize) -> Vec<T> {
    let w = &p.tensors[idx.w];
    let b = &p.tensors[idx.b].data;
    let (din, dout) = (w.shape[0], w.shape[1]);
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(T::one(), View::new(x, rows, din), View::new(&w.data, din, dout), T::one(), ViewMut::new(&mut y, rows, dout));
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub(crate) fn linear_backward<T: Float>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    idx: LinearIdx,
    x: &[T],
    dy: &[T],
    rows: usize,
) -> Vec<T> {
    let w = &p.tensors[idx.w];
    let (din, dout) = (w.shape[0], w.shape[1]);
    gemm(
        T::one(),
        View::new(x, rows, din).t(),
        View::new(dy, rows, dout),
        T::one(),
        ViewMut::new(&mut g.tensors[idx.w].data, din, dout),
    );
    let db = &mut g.tensors[idx.b].data;
    for row in dy.chunks_exact(dout) {
        for (a, &b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    let mut dx = vec![T::zero(); rows * din];
    gemm(T::one(), View::new(dy, rows, dout), View::new(&w.data, din, dout).t(), T::zero(), ViewMut::new(&mut dx, rows, din));
    dx
}

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Float>(p: &ModelParams<T>, idx: NormIdx, x: &[T], d: usize) -> (Vec<T>, NormCache<T>) {
    let gamma = &p.tensors[idx.g].data;
    let beta = &p.tensors[idx.b].data;
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd.push(rs);
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<T: Float>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    idx: NormIdx,
    cache: &NormCache<T>,
    dy: &[T],
    d: usize,
) -> Vec<T> {
    let gamma = &p.tensors[idx.g].data;
    let rows = dy.len() / d;
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        {
            let dg = &mut g.tensors[idx.g].data;
            for c in 0..d {
                dg[c] += dyr[c] * xh[c];
            }
        }
        {
            let db = &mut g.tensors[idx.b].data;
            for c in 0..d {
                db[c] += dyr[c];
            }
        }
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            dxhat[c] = dyr[c] * gamma[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] = rs * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

pub(crate) fn relu_in_place<T: Float>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` wherever the activation output was not positive.
pub(crate) fn relu_backward_in_place<T: Float>(out: &[T], dy: &mut [T]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

pub(crate) fn apply_mask<T: Float>(x: &mut [T], mask: Option<&[T]>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

pub(crate) fn add_in_place<T: Float>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Numerically stable softmax over the first `n` entries of `row`; the rest are zeroed.
pub(crate) fn softmax_prefix<T: Float>(row: &mut [T], n: usize) {
    let max = row[..n].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in &mut row[..n] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in &mut row[..n] {
        *v *= inv;
    }
    for v in &mut row[n..] {
        *v = T::zero();
    }
}

pub(crate) struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    ctx: Vec<T>,
    /// Attention probabilities, `nq x nk` per segment and head, concatenated.
    probs: Vec<T>,
}

/// Scaled dot-product attention over segments, with input and output projections.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Float>(
    p: &ModelParams<T>,
    idx: &AttnIdx,
    hq: &[T],
    hkv: &[T],
    segs: &[Segment],
    heads: usize,
    causal: bool,
    d: usize,
) -> (Vec<T>, AttnCache<T>) {
    let rows_q = hq.len() / d;
    let rows_kv = hkv.len() / d;
    let q = linear_forward(p, idx.q, hq, rows_q);
    let k = linear_forward(p, idx.k, hkv, rows_kv);
    let v = linear_forward(p, idx.v, hkv, rows_kv);
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut ctx = vec![T::zero(); rows_q * d];
    let total: usize = segs.iter().map(|s| s.nq * s.nk).sum::<usize>() * heads;
    let mut probs = vec![T::zero(); total];
    let mut off = 0;
    for s in segs {
        for h in 0..heads {
            let pr = &mut probs[off..off + s.nq * s.nk];
            gemm(
                scale,
                View::block(&q, d, s.q0, s.nq, h * dh, dh),
                View::block(&k, d, s.k0, s.nk, h * dh, dh).t(),
                T::zero(),
                ViewMut::new(pr, s.nq, s.nk),
            );
            for i in 0..s.nq {
                let visible = if causal { i + 1 } else { s.nk };
                softmax_prefix(&mut pr[i * s.nk..(i + 1) * s.nk], visible);
            }
            gemm(
                T::one(),
                View::new(pr, s.nq, s.nk),
                View::block(&v, d, s.k0, s.nk, h * dh, dh),
                T::zero(),
                ViewMut::block(&mut ctx, d, s.q0, s.nq, h * dh, dh),
            );
            off += s.nq * s.nk;
        }
    }
    let out = linear_forward(p, idx.o, &ctx, rows_q);
    (out, AttnCache { q, k, v, ctx, probs })
}

/// Returns gradients with respect to the query-side and key/value-side inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Float>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    idx: &AttnIdx,
    hq: &[T],
    hkv: &[T],
    cache: &AttnCache<T>,
    dout: &[T],
    segs: &[Segment],
    heads: usize,
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let rows_q = hq.len() / d;
    let rows_kv = hkv.len() / d;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let dctx = linear_backward(p, g, idx.o, &cache.ctx, dout, rows_q);
    let mut dq = vec![T::zero(); rows_q * d];
    let mut dk = vec![T::zero(); rows_kv * d];
    let mut dv = vec![T::zero(); rows_kv * d];
    let mut off = 0;
    let mut ds = Vec::new();
    for s in segs {
        for h in 0..heads {
            let pr = &cache.probs[off..off + s.nq * s.nk];
            let pv = View::new(pr, s.nq, s.nk);
            let dctx_b = View::block(&dctx, d, s.q0, s.nq, h * dh, dh);
            gemm(T::one(), pv.t(), dctx_b, T::one(), ViewMut::block(&mut dv, d, s.k0, s.nk, h * dh, dh));
            ds.clear();
            ds.resize(s.nq * s.nk, T::zero());
            gemm(
                T::one(),
                dctx_b,
                View::block(&cache.v, d, s.k0, s.nk, h * dh, dh).t(),
                T::zero(),
                ViewMut::new(&mut ds, s.nq, s.nk),
            );
            for i in 0..s.nq {
                let prow = &pr[i * s.nk..(i + 1) * s.nk];
                let drow = &mut ds[i * s.nk..(i + 1) * s.nk];
                let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (dv_, &p_) in drow.iter_mut().zip(prow) {
                    *dv_ = p_ * (*dv_ - dot) * scale;
                }
            }
            gemm(
                T::one(),
                View::new(&ds, s.nq, s.nk),
                View::block(&cache.k, d, s.k0, s.nk, h * dh, dh),
                T::one(),
                ViewMut::block(&mut dq, d, s.q0, s.nq, h * dh, dh),
            );
            gemm(
                T::one(),
                View::new(&ds, s.nq, s.nk).t(),
                View::block(&cache.q, d, s.q0, s.nq, h * dh, dh),
                T::one(),
                ViewMut::block(&mut dk, d, s.k0, s.nk, h * dh, dh),
            );
            off += s.nq * s.nk;
        }
    }
    let dhq = linear_backward(p, g, idx.q, hq, &dq, rows_q);
    let mut dhkv = linear_backward(p, g, idx.k, hkv, &dk, rows_kv);
    add_in_place(&mut dhkv, &linear_backward(p, g, idx.v, hkv, &dv, rows_kv));
    (dhq, dhkv)
}

pub(crate) struct FfnCache<T> {
    hidden: Vec<T>,
}

pub(crate) fn ffn_forward<T: Float>(p: &ModelParams<T>, ff1: LinearIdx, ff2: LinearIdx, x: &[T], rows: usize) -> (Vec<T>, FfnCache<T>) {
    let mut hidden = linear_forward(p, ff1, x, rows);
    relu_in_place(&mut hidden);
    let out = linear_forward(p, ff2, &hidden, rows);
    (out, FfnCache { hidden })
}

pub(crate) fn ffn_backward<T: Float>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    ff1: LinearIdx,
    ff2: LinearIdx,
    x: &[T],
    cache: &FfnCache<T>,
    dout: &[T],
    rows: usize,
) -> Vec<T> {
    let mut dh = linear_backward(p, g, ff2, &cache.hidden, dout, rows);
    relu_backward_in_place(&cache.hidden, &mut dh);
    linear_backward(p, g, ff1, x, &dh, rows)
}

/// Sinusoidal position table, `rows x d`.
pub(crate) fn positional_table<T: Float>(rows: usize, d: usize) -> Vec<T> {
    let mut table = vec![T::zero(); rows * d];
    let half = d / 2;
    for pos in 0..rows {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let angle = pos as f64 * freq;
            table[pos * d + i] = T::of(angle.sin());
            table[pos * d + half + i] = T::of(angle.cos());
        }
    }
    table
}
