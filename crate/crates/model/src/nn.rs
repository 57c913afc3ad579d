//! Layer primitives and their hand-derived backward passes. Activations are
//! dense row-major `[rows x width]` buffers; a batch of sequences is packed
//! row-wise and [`Seg`]s mark the sequence boundaries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::real::{gemm, Real, View, ViewMut};

const LN_EPS: f64 = 1e-5;

/// Rows `[start, start + len)` of a packed activation buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seg {
    pub start: usize,
    pub len: usize,
}

pub fn segments(lens: impl IntoIterator<Item = usize>) -> (Vec<Seg>, usize) {
    let mut at = 0;
    let segs = lens
        .into_iter()
        .map(|len| {
            let s = Seg { start: at, len };
            at += len;
            s
        })
        .collect();
    (segs, at)
}

pub struct LnCache<R> {
    pub xhat: Vec<R>,
    pub rstd: Vec<R>,
}

pub fn layer_norm<R: Real>(x: &[R], d: usize, g: &[R], b: &[R]) -> (Vec<R>, LnCache<R>) {
    let n = x.len() / d;
    let inv_d = R::of(1.0 / d as f64);
    let eps = R::of(LN_EPS);
    let mut y = vec![R::zero(); x.len()];
    let mut xhat = vec![R::zero(); x.len()];
    let mut rstd = vec![R::zero(); n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<R>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[i] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_bwd<R: Real>(dy: &[R], c: &LnCache<R>, d: usize, g: &[R], dg: &mut [R], db: &mut [R]) -> Vec<R> {
    let n = dy.len() / d;
    let inv_d = R::of(1.0 / d as f64);
    let mut dx = vec![R::zero(); dy.len()];
    let mut dxhat = vec![R::zero(); d];
    for i in 0..n {
        let (dyr, xh) = (&dy[i * d..(i + 1) * d], &c.xhat[i * d..(i + 1) * d]);
        let (mut m1, mut m2) = (R::zero(), R::zero());
        for j in 0..d {
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 = m1 + dxhat[j];
            m2 = m2 + dxhat[j] * xh[j];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        let rs = c.rstd[i];
        for j in 0..d {
            dx[i * d + j] = rs * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// `y = x w + b` with `w: [din x dout]`.
pub fn linear<R: Real>(x: &[R], din: usize, w: &[R], b: &[R], dout: usize) -> Vec<R> {
    let n = x.len() / din;
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(View::new(x, n, din), View::new(w, din, dout), R::one(), ViewMut::new(&mut y, n, dout));
    y
}

/// Accumulates `dw`, `db` and returns `dx` when asked.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<R: Real>(
    x: &[R],
    dy: &[R],
    din: usize,
    dout: usize,
    w: &[R],
    dw: &mut [R],
    db: &mut [R],
    want_dx: bool,
) -> Vec<R> {
    let n = dy.len() / dout;
    gemm(View::new(x, n, din).t(), View::new(dy, n, dout), R::one(), ViewMut::new(dw, din, dout));
    for i in 0..n {
        for (acc, &v) in db.iter_mut().zip(&dy[i * dout..(i + 1) * dout]) {
            *acc = *acc + v;
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![R::zero(); n * din];
    gemm(View::new(dy, n, dout), View::new(w, din, dout).t(), R::zero(), ViewMut::new(&mut dx, n, din));
    dx
}

/// A column window of a packed buffer: head 0 starts at column `off`.
#[derive(Clone, Copy)]
pub struct Src<'a, R> {
    pub data: &'a [R],
    pub stride: usize,
    pub off: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub n: usize,
    pub dim: usize,
    pub causal: bool,
}

impl Heads {
    fn scale<R: Real>(&self) -> R {
        R::of(1.0 / (self.dim as f64).sqrt())
    }

    pub fn width(&self) -> usize {
        self.n * self.dim
    }
}

fn softmax_row<R: Real>(row: &mut [R], live: usize, scale: R) {
    let mut max = R::neg_infinity();
    for &v in &row[..live] {
        max = max.max(v);
    }
    let mut sum = R::zero();
    for v in &mut row[..live] {
        *v = ((*v - max) * scale).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in &mut row[..live] {
        *v = *v * inv;
    }
    for v in &mut row[live..] {
        *v = R::zero();
    }
}

/// Multi-head scaled dot-product attention; writes the concatenated head
/// outputs into `out` (`[nq x width]`) and returns the attention weights.
pub fn attention<R: Real>(
    q: Src<R>,
    k: Src<R>,
    v: Src<R>,
    qsegs: &[Seg],
    ksegs: &[Seg],
    hd: Heads,
    out: &mut [R],
) -> Vec<R> {
    let total: usize = qsegs.iter().zip(ksegs).map(|(a, b)| a.len * b.len * hd.n).sum();
    let mut probs = vec![R::zero(); total];
    let scale = hd.scale::<R>();
    let width = hd.width();
    let mut at = 0;
    for (qs, ks) in qsegs.iter().zip(ksegs) {
        let (lq, lk) = (qs.len, ks.len);
        for h in 0..hd.n {
            let p = &mut probs[at..at + lq * lk];
            at += lq * lk;
            let qv = View::window(q.data, q.stride, qs.start, lq, q.off + h * hd.dim, hd.dim);
            let kv = View::window(k.data, k.stride, ks.start, lk, k.off + h * hd.dim, hd.dim);
            gemm(qv, kv.t(), R::zero(), ViewMut::new(p, lq, lk));
            for i in 0..lq {
                let live = if hd.causal { (i + 1).min(lk) } else { lk };
                softmax_row(&mut p[i * lk..(i + 1) * lk], live, scale);
            }
            let vv = View::window(v.data, v.stride, ks.start, lk, v.off + h * hd.dim, hd.dim);
            gemm(
                View::new(p, lq, lk),
                vv,
                R::zero(),
                ViewMut::window(out, width, qs.start, lq, h * hd.dim, hd.dim),
            );
        }
    }
    probs
}

/// Gradients of [`attention`]; `dq: [nq x width]`, `dk`, `dv: [nk x width]`
/// are accumulated.
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd<R: Real>(
    q: Src<R>,
    k: Src<R>,
    v: Src<R>,
    qsegs: &[Seg],
    ksegs: &[Seg],
    hd: Heads,
    probs: &[R],
    dout: &[R],
    dq: &mut [R],
    dk: &mut [R],
    dv: &mut [R],
) {
    let scale = hd.scale::<R>();
    let width = hd.width();
    let mut at = 0;
    let mut dp = Vec::new();
    for (qs, ks) in qsegs.iter().zip(ksegs) {
        let (lq, lk) = (qs.len, ks.len);
        for h in 0..hd.n {
            let p = &probs[at..at + lq * lk];
            at += lq * lk;
            let c0 = h * hd.dim;
            let qv = View::window(q.data, q.stride, qs.start, lq, q.off + c0, hd.dim);
            let kv = View::window(k.data, k.stride, ks.start, lk, k.off + c0, hd.dim);
            let vv = View::window(v.data, v.stride, ks.start, lk, v.off + c0, hd.dim);
            let dov = View::window(dout, width, qs.start, lq, c0, hd.dim);
            dp.clear();
            dp.resize(lq * lk, R::zero());
            gemm(dov, vv.t(), R::zero(), ViewMut::new(&mut dp, lq, lk));
            gemm(
                View::new(p, lq, lk).t(),
                dov,
                R::one(),
                ViewMut::window(dv, width, ks.start, lk, c0, hd.dim),
            );
            for i in 0..lq {
                let (pr, dr) = (&p[i * lk..(i + 1) * lk], &mut dp[i * lk..(i + 1) * lk]);
                let dot: R = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..lk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            gemm(
                View::new(&dp, lq, lk),
                kv,
                R::one(),
                ViewMut::window(dq, width, qs.start, lq, c0, hd.dim),
            );
            gemm(
                View::new(&dp, lq, lk).t(),
                qv,
                R::one(),
                ViewMut::window(dk, width, ks.start, lk, c0, hd.dim),
            );
        }
    }
}

pub fn relu_in_place<R: Real>(x: &mut [R]) {
    for v in x {
        if *v < R::zero() {
            *v = R::zero();
        }
    }
}

/// Zeroes gradient entries where the forward activation was clamped.
pub fn relu_bwd_in_place<R: Real>(dh: &mut [R], h: &[R]) {
    for (g, &a) in dh.iter_mut().zip(h) {
        if a <= R::zero() {
            *g = R::zero();
        }
    }
}

/// Inverted dropout. A `None` mask means identity.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn mask<R: Real>(&mut self, n: usize) -> Option<Vec<R>> {
        let rng = self.rng.as_deref_mut()?;
        if self.rate <= 0.0 {
            return None;
        }
        let keep = R::of(1.0 / (1.0 - self.rate));
        Some(
            (0..n)
                .map(|_| if rng.gen::<f64>() < self.rate { R::zero() } else { keep })
                .collect(),
        )
    }
}

pub fn apply_mask<R: Real>(x: &mut [R], mask: &Option<Vec<R>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

pub fn add_in_place<R: Real>(acc: &mut [R], x: &[R]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}

/// Sinusoidal position table `[len x d]`.
pub fn positions<R: Real>(len: usize, d: usize) -> Vec<R> {
    let mut t = vec![R::zero(); len * d];
    for p in 0..len {
        for i in 0..d / 2 {
            let freq = (10000f64).powf(-((2 * i) as f64) / d as f64);
            t[p * d + 2 * i] = R::of((p as f64 * freq).sin());
            t[p * d + 2 * i + 1] = R::of((p as f64 * freq).cos());
        }
    }
    t
}

/// Log-softmax of one row, in place; returns the row's entropy.
pub fn log_softmax_row<R: Real>(row: &mut [R]) -> R {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<R>().ln() + max;
    let mut ent = R::zero();
    for v in row.iter_mut() {
        *v = *v - lse;
        ent = ent - v.exp() * *v;
    }
    ent
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x: Vec<f64> = (0..12).map(|i| (i * i) as f64).collect();
        let (y, _) = layer_norm(&x, 4, &[1.0; 4], &[0.0; 4]);
        for r in y.chunks(4) {
            let m: f64 = r.iter().sum::<f64>() / 4.0;
            let v: f64 = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let (segs, n) = segments([3]);
        let x: Vec<f64> = (0..n * 2).map(|i| (i as f64).sin()).collect();
        let src = Src { data: &x, stride: 2, off: 0 };
        let hd = Heads { n: 1, dim: 2, causal: true };
        let mut out = vec![0.0; n * 2];
        let p = attention(src, src, src, &segs, &segs, hd, &mut out);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 0.0);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert_eq!(&out[0..2], &x[0..2]);
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut r = vec![1.0f64, 2.0, 3.0, -1.0];
        let h = log_softmax_row(&mut r);
        let s: f64 = r.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(h > 0.0 && h < 4f64.ln());
    }
}
