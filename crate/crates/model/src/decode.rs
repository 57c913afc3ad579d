//! Incremental decoding with per-hypothesis key/value caches: temperature
//! sampling, greedy decoding and length-normalized beam search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use silo_core::isa::token::{BOS, EOS};

use crate::model::Model;
use crate::nn::{self, Seg};
use crate::real::Real;

/// Encoder output for a batch of sources.
pub struct Encoded<R> {
    segs: Vec<Seg>,
    ckv: Vec<Vec<R>>,
}

impl<R: Real> Encoded<R> {
    pub fn new(m: &Model<R>, srcs: &[&[u32]]) -> Self {
        let (_, segs, ckv) = m.encode_infer(srcs);
        Encoded { segs, ckv }
    }
}

/// Decoder self-attention cache for one hypothesis.
#[derive(Clone)]
pub struct DecState<R> {
    src: usize,
    k: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
    len: usize,
}

impl<R: Real> DecState<R> {
    pub fn new(m: &Model<R>, src: usize) -> Self {
        let n = m.cfg.layers;
        DecState { src, k: vec![Vec::new(); n], v: vec![Vec::new(); n], len: 0 }
    }
}

fn attend<R: Real>(q: &[R], keys: &[R], vals: &[R], stride: usize, rows: usize, dim: usize, out: &mut [R], scores: &mut Vec<R>) {
    let scale = R::of(1.0 / (dim as f64).sqrt());
    scores.clear();
    let mut max = R::neg_infinity();
    for r in 0..rows {
        let k = &keys[r * stride..r * stride + dim];
        let s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<R>();
        max = max.max(s);
        scores.push(s);
    }
    let mut sum = R::zero();
    for s in scores.iter_mut() {
        *s = ((*s - max) * scale).exp();
        sum = sum + *s;
    }
    out.fill(R::zero());
    for r in 0..rows {
        let w = scores[r] / sum;
        let v = &vals[r * stride..r * stride + dim];
        for j in 0..dim {
            out[j] = out[j] + w * v[j];
        }
    }
}

/// Feeds one token per state and returns log-softmax rows `[states x vocab]`.
pub fn step<R: Real>(m: &Model<R>, enc: &Encoded<R>, states: &mut [&mut DecState<R>], tokens: &[u32]) -> Vec<R> {
    let d = m.cfg.model_dim;
    let f = m.cfg.ff_dim;
    let hd = m.heads(true);
    let b = states.len();
    let lay = &m.layout;
    let mut x = vec![R::zero(); b * d];
    for (i, (s, &t)) in states.iter().zip(tokens).enumerate() {
        m.embed_into(t, s.len, &mut x[i * d..(i + 1) * d]);
    }
    let mut o = vec![R::zero(); b * d];
    let mut scores = Vec::new();
    for (li, l) in lay.dec.iter().enumerate() {
        let (a, _) = nn::layer_norm(&x, d, m.p(l.ln1.g), m.p(l.ln1.b));
        let qkv = nn::linear(&a, d, m.p(l.qkv.w), m.p(l.qkv.b), 3 * d);
        for (i, s) in states.iter_mut().enumerate() {
            let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
            s.k[li].extend_from_slice(&row[d..2 * d]);
            s.v[li].extend_from_slice(&row[2 * d..]);
            let rows = s.len + 1;
            for h in 0..hd.n {
                let c = h * hd.dim;
                attend(
                    &row[c..c + hd.dim],
                    &s.k[li][c..],
                    &s.v[li][c..],
                    d,
                    rows,
                    hd.dim,
                    &mut o[i * d + c..i * d + c + hd.dim],
                    &mut scores,
                );
            }
        }
        let y = nn::linear(&o, d, m.p(l.o.w), m.p(l.o.b), d);
        nn::add_in_place(&mut x, &y);

        let (a, _) = nn::layer_norm(&x, d, m.p(l.ln2.g), m.p(l.ln2.b));
        let q = nn::linear(&a, d, m.p(l.cq.w), m.p(l.cq.b), d);
        let kv = &enc.ckv[li];
        for (i, s) in states.iter().enumerate() {
            let seg = enc.segs[s.src];
            let base = seg.start * 2 * d;
            for h in 0..hd.n {
                let c = h * hd.dim;
                attend(
                    &q[i * d + c..i * d + c + hd.dim],
                    &kv[base + c..],
                    &kv[base + d + c..],
                    2 * d,
                    seg.len,
                    hd.dim,
                    &mut o[i * d + c..i * d + c + hd.dim],
                    &mut scores,
                );
            }
        }
        let y = nn::linear(&o, d, m.p(l.co.w), m.p(l.co.b), d);
        nn::add_in_place(&mut x, &y);

        let (a, _) = nn::layer_norm(&x, d, m.p(l.ln3.g), m.p(l.ln3.b));
        let mut h = nn::linear(&a, d, m.p(l.ff1.w), m.p(l.ff1.b), f);
        nn::relu_in_place(&mut h);
        let y = nn::linear(&h, f, m.p(l.ff2.w), m.p(l.ff2.b), d);
        nn::add_in_place(&mut x, &y);
    }
    for s in states.iter_mut() {
        s.len += 1;
    }
    let (hfin, _) = nn::layer_norm(&x, d, m.p(lay.dec_ln.g), m.p(lay.dec_ln.b));
    let v = m.cfg.vocab;
    let mut logp = nn::linear(&hfin, d, m.p(lay.out.w), m.p(lay.out.b), v);
    for row in logp.chunks_mut(v) {
        nn::log_softmax_row(row);
    }
    logp
}

fn argmax<R: Real>(row: &[R]) -> u32 {
    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b }) as u32
}

fn draw<R: Real>(row: &[R], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    if temperature < 1e-6 {
        return argmax(row);
    }
    let inv = 1.0 / temperature;
    let max = row.iter().map(|v| v.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|v| ((v.to_f64().unwrap() - max) * inv).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (j, &x) in w.iter().enumerate() {
        if u < x {
            return j as u32;
        }
        u -= x;
    }
    // rounding left a sliver past the last bucket
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0) as u32
}

/// Samples one sequence per source, `<bos>`-prefixed and ending in `<eos>`
/// unless `max_len` was hit first. Sources are decoded in lockstep.
pub fn sample_batch<R: Real>(
    m: &Model<R>,
    srcs: &[&[u32]],
    temperature: f64,
    rng: &mut ChaCha8Rng,
    max_len: usize,
) -> Vec<Vec<u32>> {
    if srcs.is_empty() {
        return Vec::new();
    }
    let max_len = max_len.min(m.cfg.max_len);
    let enc = Encoded::new(m, srcs);
    let mut states: Vec<DecState<R>> = (0..srcs.len()).map(|i| DecState::new(m, i)).collect();
    let mut out: Vec<Vec<u32>> = vec![vec![BOS]; srcs.len()];
    let v = m.cfg.vocab;
    loop {
        let active: Vec<usize> = (0..srcs.len())
            .filter(|&i| out[i].last() != Some(&EOS) && out[i].len() < max_len)
            .collect();
        if active.is_empty() {
            return out;
        }
        let toks: Vec<u32> = active.iter().map(|&i| *out[i].last().unwrap()).collect();
        let mut refs: Vec<&mut DecState<R>> = states
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| active.contains(i))
            .map(|(_, s)| s)
            .collect();
        let logp = step(m, &enc, &mut refs, &toks);
        for (r, &i) in active.iter().enumerate() {
            let t = draw(&logp[r * v..(r + 1) * v], temperature, rng);
            out[i].push(t);
        }
    }
}

/// One sample, reproducible from `seed`.
pub fn sample<R: Real>(m: &Model<R>, src: &[u32], temperature: f64, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_batch(m, &[src], temperature, &mut rng, m.cfg.max_len).remove(0)
}

pub fn greedy<R: Real>(m: &Model<R>, src: &[u32], max_len: usize) -> Hypothesis {
    let enc = Encoded::new(m, &[src]);
    let mut st = DecState::new(m, 0);
    let mut toks = vec![BOS];
    let mut lp = 0.0;
    let max_len = max_len.min(m.cfg.max_len);
    while toks.last() != Some(&EOS) && toks.len() < max_len {
        let row = step(m, &enc, &mut [&mut st], &[*toks.last().unwrap()]);
        let t = argmax(&row);
        lp += row[t as usize].to_f64().unwrap();
        toks.push(t);
    }
    Hypothesis::new(toks, lp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    /// Log-probability divided by the number of generated tokens.
    pub score: f64,
}

impl Hypothesis {
    fn new(tokens: Vec<u32>, logprob: f64) -> Self {
        let n = tokens.len().saturating_sub(1).max(1) as f64;
        Hypothesis { score: logprob / n, tokens, logprob }
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Length-normalized beam search returning up to `width` finished
/// hypotheses, best first. The greedy decode is always part of the pool.
pub fn beam_decode<R: Real>(m: &Model<R>, src: &[u32], width: usize, max_len: usize) -> Vec<Hypothesis> {
    let width = width.max(1);
    let max_len = max_len.min(m.cfg.max_len);
    let v = m.cfg.vocab;
    let enc = Encoded::new(m, &[src]);
    let mut live: Vec<(DecState<R>, Vec<u32>, f64)> = vec![(DecState::new(m, 0), vec![BOS], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && done.len() < width {
        let toks: Vec<u32> = live.iter().map(|(_, t, _)| *t.last().unwrap()).collect();
        let logp = {
            let mut refs: Vec<&mut DecState<R>> = live.iter_mut().map(|(s, _, _)| s).collect();
            step(m, &enc, &mut refs, &toks)
        };
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * width);
        for (i, (_, _, base)) in live.iter().enumerate() {
            let row = &logp[i * v..(i + 1) * v];
            let mut idx: Vec<u32> = (0..v as u32).collect();
            let k = width.min(v);
            idx.select_nth_unstable_by(k - 1, |&a, &b| row[b as usize].partial_cmp(&row[a as usize]).unwrap().then(a.cmp(&b)));
            for &t in &idx[..k] {
                cands.push((base + row[t as usize].to_f64().unwrap(), i, t));
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (lp, i, t) in cands {
            let mut seq = live[i].1.clone();
            seq.push(t);
            if t == EOS {
                if done.len() < width {
                    done.push(Hypothesis::new(seq, lp));
                }
            } else if seq.len() < max_len {
                next.push((live[i].0.clone(), seq, lp));
                if next.len() == width {
                    break;
                }
            }
        }
        live = next;
    }
    let g = greedy(m, src, max_len);
    if g.finished() && !done.iter().any(|h| h.tokens == g.tokens) {
        done.push(g);
    }
    done.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then_with(|| a.tokens.cmp(&b.tokens)));
    done.truncate(width);
    done
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::Dropout;

    fn toy() -> Model<f64> {
        Model::new(ModelConfig { vocab: 10, max_len: 12, ..ModelConfig::tiny() }, 9).unwrap()
    }

    #[test]
    fn incremental_matches_teacher_forced() {
        let m = toy();
        let src = [BOS, 4, 5, 6, EOS];
        let prefix = [BOS, 7, 3, 8];
        let full = m.forward(&[&src], &[&prefix], &mut Dropout::off()).unwrap();
        let enc = Encoded::new(&m, &[&src]);
        let mut st = DecState::new(&m, 0);
        for (t, &tok) in prefix.iter().enumerate() {
            let row = step(&m, &enc, &mut [&mut st], &[tok]);
            for j in 0..m.cfg.vocab {
                assert!((row[j] - full.logp[t * m.cfg.vocab + j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible_and_cold_sampling_is_greedy() {
        let m = toy();
        let src = [BOS, 4, 5, EOS];
        assert_eq!(sample(&m, &src, 1.0, 42), sample(&m, &src, 1.0, 42));
        assert_eq!(sample(&m, &src, 0.0, 1), greedy(&m, &src, 12).tokens);
    }

    #[test]
    fn beam_contract() {
        let m = toy();
        let src = [BOS, 6, 6, 4, EOS];
        let g = greedy(&m, &src, 12);
        let one = beam_decode(&m, &src, 1, 12);
        if g.finished() {
            assert_eq!(one[0].tokens, g.tokens);
        }
        let ten = beam_decode(&m, &src, 10, 12);
        assert!(ten.len() <= 10);
        for w in ten.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        if g.finished() {
            assert!(ten[0].score >= g.score);
        }
    }
}
