//! The encoder-decoder: pre-norm transformer blocks, sinusoidal positions,
//! teacher-forced forward pass with caches, and the matching backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::nn::{self, Dropout, Heads, LnCache, Seg, Src};
use crate::params::{Layout, Lin, Norm};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    BadToken(u32),
    #[error("target sequence needs at least two tokens")]
    ShortTarget,
    #[error("non-finite gradient in block {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What the loss for one sequence of a batch is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Token-level cross entropy, averaged over all such tokens in the batch.
    Xent,
    /// `sum_t log p(a_t) * advantage - beta * H_t`, averaged over such sequences.
    Reinforce { advantage: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub src: &'a [u32],
    /// Full target including `<bos>` and `<eos>`.
    pub tgt: &'a [u32],
    pub objective: Objective,
}

impl<'a> Example<'a> {
    pub fn xent(src: &'a [u32], tgt: &'a [u32]) -> Self {
        Example { src, tgt, objective: Objective::Xent }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    /// Batch loss as optimized.
    pub loss: f64,
    /// Summed token negative log-likelihood.
    pub nll: f64,
    pub tokens: usize,
    /// Teacher-forced argmax hits.
    pub correct: usize,
    /// Sequences whose every teacher-forced argmax is right.
    pub exact: usize,
    pub sequences: usize,
    pub entropy: f64,
}

impl StepStats {
    pub fn token_accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }

    pub fn merge(&mut self, o: &StepStats) {
        self.loss += o.loss;
        self.nll += o.nll;
        self.tokens += o.tokens;
        self.correct += o.correct;
        self.exact += o.exact;
        self.sequences += o.sequences;
        self.entropy += o.entropy;
    }
}

#[derive(Debug, Clone)]
pub struct Model<R: Real = f32> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Vec<R>,
    pub step: u64,
    pos: Vec<R>,
}

struct AttnCache<R> {
    ln: LnCache<R>,
    a: Vec<R>,
    qkv: Vec<R>,
    probs: Vec<R>,
    o: Vec<R>,
    mask: Option<Vec<R>>,
}

struct CrossCache<R> {
    ln: LnCache<R>,
    a: Vec<R>,
    q: Vec<R>,
    probs: Vec<R>,
    o: Vec<R>,
    mask: Option<Vec<R>>,
}

struct FfCache<R> {
    ln: LnCache<R>,
    a: Vec<R>,
    h: Vec<R>,
    mask: Option<Vec<R>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace<R> {
    src_tokens: Vec<u32>,
    dec_tokens: Vec<u32>,
    src_segs: Vec<Seg>,
    dec_segs: Vec<Seg>,
    src_mask: Option<Vec<R>>,
    dec_mask: Option<Vec<R>>,
    enc: Vec<(AttnCache<R>, FfCache<R>)>,
    enc_ln: LnCache<R>,
    mem: Vec<R>,
    ckv: Vec<Vec<R>>,
    dec: Vec<(AttnCache<R>, CrossCache<R>, FfCache<R>)>,
    dec_ln: LnCache<R>,
    hfin: Vec<R>,
    /// Log-softmax rows `[dec rows x vocab]`.
    pub logp: Vec<R>,
    /// Entropy of each row's distribution.
    pub entropy: Vec<R>,
}

impl<R: Real> Trace<R> {
    pub fn rows(&self) -> usize {
        self.dec_tokens.len()
    }

    pub fn dec_segs(&self) -> &[Seg] {
        &self.dec_segs
    }
}

fn init_uniform<R: Real>(rng: &mut ChaCha8Rng, s: &mut [R], a: f64) {
    for v in s {
        *v = R::of(rng.gen_range(-a..a));
    }
}

impl<R: Real> Model<R> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate().map_err(ModelError::Config)?;
        let layout = Layout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![R::zero(); layout.total];
        let d = cfg.model_dim as f64;
        for (i, b) in layout.blocks.iter().enumerate() {
            let s = &mut params[b.range()];
            if b.name.ends_with(".g") {
                s.fill(R::one());
            } else if b.name.ends_with(".b") {
                // zero bias
            } else if i == layout.emb {
                init_uniform(&mut rng, s, (3.0 / d).sqrt());
            } else if i == layout.out.w {
                // near-uniform initial predictions
                init_uniform(&mut rng, s, 0.02 * 3f64.sqrt());
            } else {
                init_uniform(&mut rng, s, (6.0 / (b.rows + b.cols) as f64).sqrt());
            }
        }
        Ok(Self::from_params(cfg, layout, params, 0))
    }

    pub fn from_params(cfg: ModelConfig, layout: Layout, params: Vec<R>, step: u64) -> Self {
        let pos = nn::positions(cfg.max_len, cfg.model_dim);
        Model { cfg, layout, params, step, pos }
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        let params = self.params.iter().map(|v| S::of(v.to_f64().unwrap())).collect();
        Model::from_params(self.cfg.clone(), self.layout.clone(), params, self.step)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn p(&self, id: usize) -> &[R] {
        self.layout.get(&self.params, id)
    }

    pub(crate) fn heads(&self, causal: bool) -> Heads {
        Heads { n: self.cfg.heads, dim: self.cfg.head_dim(), causal }
    }

    pub(crate) fn check_seq(&self, s: &[u32]) -> Result<(), ModelError> {
        if s.len() > self.cfg.max_len {
            return Err(ModelError::TooLong { len: s.len(), max: self.cfg.max_len });
        }
        if let Some(&t) = s.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(ModelError::BadToken(t));
        }
        Ok(())
    }

    /// Embedding row for `tok` at position `pos`, scaled by sqrt(d).
    pub(crate) fn embed_into(&self, tok: u32, pos: usize, out: &mut [R]) {
        let d = self.cfg.model_dim;
        let e = &self.p(self.layout.emb)[tok as usize * d..(tok as usize + 1) * d];
        let scale = R::of((d as f64).sqrt());
        let pe = &self.pos[pos * d..(pos + 1) * d];
        for j in 0..d {
            out[j] = e[j] * scale + pe[j];
        }
    }

    fn embed(&self, seqs: &[&[u32]], drop: &mut Dropout) -> (Vec<R>, Vec<u32>, Vec<Seg>, Option<Vec<R>>) {
        let d = self.cfg.model_dim;
        let (segs, n) = nn::segments(seqs.iter().map(|s| s.len()));
        let mut x = vec![R::zero(); n * d];
        let mut toks = Vec::with_capacity(n);
        let mut row = 0;
        for s in seqs {
            for (p, &t) in s.iter().enumerate() {
                self.embed_into(t, p, &mut x[row * d..(row + 1) * d]);
                toks.push(t);
                row += 1;
            }
        }
        let mask = drop.mask(x.len());
        nn::apply_mask(&mut x, &mask);
        (x, toks, segs, mask)
    }

    fn self_attn(&self, x: &mut [R], segs: &[Seg], ln: Norm, qkv: Lin, o: Lin, causal: bool, drop: &mut Dropout) -> AttnCache<R> {
        let d = self.cfg.model_dim;
        let (a, lnc) = nn::layer_norm(x, d, self.p(ln.g), self.p(ln.b));
        let qkv_v = nn::linear(&a, d, self.p(qkv.w), self.p(qkv.b), 3 * d);
        let mut ob = vec![R::zero(); x.len()];
        let src = |off| Src { data: &qkv_v, stride: 3 * d, off };
        let probs = nn::attention(src(0), src(d), src(2 * d), segs, segs, self.heads(causal), &mut ob);
        let mut y = nn::linear(&ob, d, self.p(o.w), self.p(o.b), d);
        let mask = drop.mask(y.len());
        nn::apply_mask(&mut y, &mask);
        nn::add_in_place(x, &y);
        AttnCache { ln: lnc, a, qkv: qkv_v, probs, o: ob, mask }
    }

    #[allow(clippy::too_many_arguments)]
    fn self_attn_bwd(&self, dx: &mut [R], c: &AttnCache<R>, segs: &[Seg], ln: Norm, qkv: Lin, o: Lin, causal: bool, g: &mut [R]) {
        let d = self.cfg.model_dim;
        let n = dx.len() / d;
        let mut dy = dx.to_vec();
        nn::apply_mask(&mut dy, &c.mask);
        let (dw, db) = self.layout.pair_mut(g, o.w, o.b);
        let dob = nn::linear_bwd(&c.o, &dy, d, d, self.p(o.w), dw, db, true);
        let (mut dq, mut dk, mut dv) = (vec![R::zero(); n * d], vec![R::zero(); n * d], vec![R::zero(); n * d]);
        let src = |off| Src { data: &c.qkv, stride: 3 * d, off };
        nn::attention_bwd(
            src(0),
            src(d),
            src(2 * d),
            segs,
            segs,
            self.heads(causal),
            &c.probs,
            &dob,
            &mut dq,
            &mut dk,
            &mut dv,
        );
        let mut dqkv = vec![R::zero(); n * 3 * d];
        for i in 0..n {
            let row = &mut dqkv[i * 3 * d..(i + 1) * 3 * d];
            row[..d].copy_from_slice(&dq[i * d..(i + 1) * d]);
            row[d..2 * d].copy_from_slice(&dk[i * d..(i + 1) * d]);
            row[2 * d..].copy_from_slice(&dv[i * d..(i + 1) * d]);
        }
        let (dw, db) = self.layout.pair_mut(g, qkv.w, qkv.b);
        let da = nn::linear_bwd(&c.a, &dqkv, d, 3 * d, self.p(qkv.w), dw, db, true);
        let (dg, dbb) = self.layout.pair_mut(g, ln.g, ln.b);
        let dxl = nn::layer_norm_bwd(&da, &c.ln, d, self.p(ln.g), dg, dbb);
        nn::add_in_place(dx, &dxl);
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_attn(
        &self,
        x: &mut [R],
        segs: &[Seg],
        kv: &[R],
        ksegs: &[Seg],
        ln: Norm,
        q: Lin,
        o: Lin,
        drop: &mut Dropout,
    ) -> CrossCache<R> {
        let d = self.cfg.model_dim;
        let (a, lnc) = nn::layer_norm(x, d, self.p(ln.g), self.p(ln.b));
        let qv = nn::linear(&a, d, self.p(q.w), self.p(q.b), d);
        let mut ob = vec![R::zero(); x.len()];
        let probs = nn::attention(
            Src { data: &qv, stride: d, off: 0 },
            Src { data: kv, stride: 2 * d, off: 0 },
            Src { data: kv, stride: 2 * d, off: d },
            segs,
            ksegs,
            self.heads(false),
            &mut ob,
        );
        let mut y = nn::linear(&ob, d, self.p(o.w), self.p(o.b), d);
        let mask = drop.mask(y.len());
        nn::apply_mask(&mut y, &mask);
        nn::add_in_place(x, &y);
        CrossCache { ln: lnc, a, q: qv, probs, o: ob, mask }
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_attn_bwd(
        &self,
        dx: &mut [R],
        c: &CrossCache<R>,
        segs: &[Seg],
        kv: &[R],
        ksegs: &[Seg],
        dkv: &mut [R],
        ln: Norm,
        q: Lin,
        o: Lin,
        g: &mut [R],
    ) {
        let d = self.cfg.model_dim;
        let n = dx.len() / d;
        let nk = kv.len() / (2 * d);
        let mut dy = dx.to_vec();
        nn::apply_mask(&mut dy, &c.mask);
        let (dw, db) = self.layout.pair_mut(g, o.w, o.b);
        let dob = nn::linear_bwd(&c.o, &dy, d, d, self.p(o.w), dw, db, true);
        let (mut dq, mut dk, mut dv) = (vec![R::zero(); n * d], vec![R::zero(); nk * d], vec![R::zero(); nk * d]);
        nn::attention_bwd(
            Src { data: &c.q, stride: d, off: 0 },
            Src { data: kv, stride: 2 * d, off: 0 },
            Src { data: kv, stride: 2 * d, off: d },
            segs,
            ksegs,
            self.heads(false),
            &c.probs,
            &dob,
            &mut dq,
            &mut dk,
            &mut dv,
        );
        for i in 0..nk {
            let row = &mut dkv[i * 2 * d..(i + 1) * 2 * d];
            nn::add_in_place(&mut row[..d], &dk[i * d..(i + 1) * d]);
            nn::add_in_place(&mut row[d..], &dv[i * d..(i + 1) * d]);
        }
        let (dw, db) = self.layout.pair_mut(g, q.w, q.b);
        let da = nn::linear_bwd(&c.a, &dq, d, d, self.p(q.w), dw, db, true);
        let (dg, dbb) = self.layout.pair_mut(g, ln.g, ln.b);
        let dxl = nn::layer_norm_bwd(&da, &c.ln, d, self.p(ln.g), dg, dbb);
        nn::add_in_place(dx, &dxl);
    }

    fn ffn(&self, x: &mut [R], ln: Norm, f1: Lin, f2: Lin, drop: &mut Dropout) -> FfCache<R> {
        let (d, f) = (self.cfg.model_dim, self.cfg.ff_dim);
        let (a, lnc) = nn::layer_norm(x, d, self.p(ln.g), self.p(ln.b));
        let mut h = nn::linear(&a, d, self.p(f1.w), self.p(f1.b), f);
        nn::relu_in_place(&mut h);
        let mut y = nn::linear(&h, f, self.p(f2.w), self.p(f2.b), d);
        let mask = drop.mask(y.len());
        nn::apply_mask(&mut y, &mask);
        nn::add_in_place(x, &y);
        FfCache { ln: lnc, a, h, mask }
    }

    fn ffn_bwd(&self, dx: &mut [R], c: &FfCache<R>, ln: Norm, f1: Lin, f2: Lin, g: &mut [R]) {
        let (d, f) = (self.cfg.model_dim, self.cfg.ff_dim);
        let mut dy = dx.to_vec();
        nn::apply_mask(&mut dy, &c.mask);
        let (dw, db) = self.layout.pair_mut(g, f2.w, f2.b);
        let mut dh = nn::linear_bwd(&c.h, &dy, f, d, self.p(f2.w), dw, db, true);
        nn::relu_bwd_in_place(&mut dh, &c.h);
        let (dw, db) = self.layout.pair_mut(g, f1.w, f1.b);
        let da = nn::linear_bwd(&c.a, &dh, d, f, self.p(f1.w), dw, db, true);
        let (dg, dbb) = self.layout.pair_mut(g, ln.g, ln.b);
        let dxl = nn::layer_norm_bwd(&da, &c.ln, d, self.p(ln.g), dg, dbb);
        nn::add_in_place(dx, &dxl);
    }

    /// Encoder memory and per-decoder-layer cross-attention keys/values.
    pub(crate) fn encode_infer(&self, srcs: &[&[u32]]) -> (Vec<R>, Vec<Seg>, Vec<Vec<R>>) {
        let mut drop = Dropout::off();
        let (mut x, _, segs, _) = self.embed(srcs, &mut drop);
        for l in &self.layout.enc {
            self.self_attn(&mut x, &segs, l.ln1, l.qkv, l.o, false, &mut drop);
            self.ffn(&mut x, l.ln2, l.ff1, l.ff2, &mut drop);
        }
        let d = self.cfg.model_dim;
        let (mem, _) = nn::layer_norm(&x, d, self.p(self.layout.enc_ln.g), self.p(self.layout.enc_ln.b));
        let ckv = self
            .layout
            .dec
            .iter()
            .map(|l| nn::linear(&mem, d, self.p(l.ckv.w), self.p(l.ckv.b), 2 * d))
            .collect();
        (mem, segs, ckv)
    }

    /// Teacher-forced forward pass over packed sequences: decoder row `t` of
    /// sequence `i` predicts the token after `dec_in[i][t]`.
    pub fn forward(&self, srcs: &[&[u32]], dec_in: &[&[u32]], drop: &mut Dropout) -> Result<Trace<R>, ModelError> {
        for s in srcs.iter().chain(dec_in) {
            self.check_seq(s)?;
        }
        let d = self.cfg.model_dim;
        let v = self.cfg.vocab;
        let lay = &self.layout;
        let (mut x, src_tokens, src_segs, src_mask) = self.embed(srcs, drop);
        let mut enc = Vec::with_capacity(lay.enc.len());
        for l in &lay.enc {
            let a = self.self_attn(&mut x, &src_segs, l.ln1, l.qkv, l.o, false, drop);
            let f = self.ffn(&mut x, l.ln2, l.ff1, l.ff2, drop);
            enc.push((a, f));
        }
        let (mem, enc_ln) = nn::layer_norm(&x, d, self.p(lay.enc_ln.g), self.p(lay.enc_ln.b));
        let (mut y, dec_tokens, dec_segs, dec_mask) = self.embed(dec_in, drop);
        let mut dec = Vec::with_capacity(lay.dec.len());
        let mut ckv = Vec::with_capacity(lay.dec.len());
        for l in &lay.dec {
            let kv = nn::linear(&mem, d, self.p(l.ckv.w), self.p(l.ckv.b), 2 * d);
            let a = self.self_attn(&mut y, &dec_segs, l.ln1, l.qkv, l.o, true, drop);
            let c = self.cross_attn(&mut y, &dec_segs, &kv, &src_segs, l.ln2, l.cq, l.co, drop);
            let f = self.ffn(&mut y, l.ln3, l.ff1, l.ff2, drop);
            dec.push((a, c, f));
            ckv.push(kv);
        }
        let (hfin, dec_ln) = nn::layer_norm(&y, d, self.p(lay.dec_ln.g), self.p(lay.dec_ln.b));
        let mut logp = nn::linear(&hfin, d, self.p(lay.out.w), self.p(lay.out.b), v);
        let entropy = logp.chunks_mut(v).map(nn::log_softmax_row).collect();
        Ok(Trace {
            src_tokens,
            dec_tokens,
            src_segs,
            dec_segs,
            src_mask,
            dec_mask,
            enc,
            enc_ln,
            mem,
            ckv,
            dec,
            dec_ln,
            hfin,
            logp,
            entropy,
        })
    }

    /// Parameter gradients given the gradient with respect to the logits.
    pub fn backward(&self, t: &Trace<R>, dlogits: &[R]) -> Vec<R> {
        let d = self.cfg.model_dim;
        let v = self.cfg.vocab;
        let lay = &self.layout;
        let mut g = vec![R::zero(); self.params.len()];
        let (dw, db) = lay.pair_mut(&mut g, lay.out.w, lay.out.b);
        let dh = nn::linear_bwd(&t.hfin, dlogits, d, v, self.p(lay.out.w), dw, db, true);
        let (dg, dbb) = lay.pair_mut(&mut g, lay.dec_ln.g, lay.dec_ln.b);
        let mut dy = nn::layer_norm_bwd(&dh, &t.dec_ln, d, self.p(lay.dec_ln.g), dg, dbb);
        let mut dckv: Vec<Vec<R>> = t.ckv.iter().map(|kv| vec![R::zero(); kv.len()]).collect();
        for (li, l) in lay.dec.iter().enumerate().rev() {
            let (a, c, f) = &t.dec[li];
            self.ffn_bwd(&mut dy, f, l.ln3, l.ff1, l.ff2, &mut g);
            self.cross_attn_bwd(
                &mut dy,
                c,
                &t.dec_segs,
                &t.ckv[li],
                &t.src_segs,
                &mut dckv[li],
                l.ln2,
                l.cq,
                l.co,
                &mut g,
            );
            self.self_attn_bwd(&mut dy, a, &t.dec_segs, l.ln1, l.qkv, l.o, true, &mut g);
        }
        self.embed_bwd(&mut g, &dy, &t.dec_tokens, &t.dec_segs, &t.dec_mask);
        let mut dmem = vec![R::zero(); t.mem.len()];
        for (li, l) in lay.dec.iter().enumerate() {
            let (dw, db) = lay.pair_mut(&mut g, l.ckv.w, l.ckv.b);
            let dm = nn::linear_bwd(&t.mem, &dckv[li], d, 2 * d, self.p(l.ckv.w), dw, db, true);
            nn::add_in_place(&mut dmem, &dm);
        }
        let (dg, dbb) = lay.pair_mut(&mut g, lay.enc_ln.g, lay.enc_ln.b);
        let mut dx = nn::layer_norm_bwd(&dmem, &t.enc_ln, d, self.p(lay.enc_ln.g), dg, dbb);
        for (li, l) in lay.enc.iter().enumerate().rev() {
            let (a, f) = &t.enc[li];
            self.ffn_bwd(&mut dx, f, l.ln2, l.ff1, l.ff2, &mut g);
            self.self_attn_bwd(&mut dx, a, &t.src_segs, l.ln1, l.qkv, l.o, false, &mut g);
        }
        self.embed_bwd(&mut g, &dx, &t.src_tokens, &t.src_segs, &t.src_mask);
        g
    }

    fn embed_bwd(&self, g: &mut [R], dx: &[R], toks: &[u32], _segs: &[Seg], mask: &Option<Vec<R>>) {
        let d = self.cfg.model_dim;
        let scale = R::of((d as f64).sqrt());
        let ge = self.layout.get_mut(g, self.layout.emb);
        for (row, &t) in toks.iter().enumerate() {
            let dst = &mut ge[t as usize * d..(t as usize + 1) * d];
            for j in 0..d {
                let mut v = dx[row * d + j];
                if let Some(m) = mask {
                    v = v * m[row * d + j];
                }
                dst[j] = dst[j] + v * scale;
            }
        }
    }

    /// Loss, statistics and gradients for a batch. Dropout is active only
    /// when an RNG is supplied.
    pub fn loss_and_grad(&self, batch: &[Example], rng: Option<&mut ChaCha8Rng>) -> Result<(StepStats, Vec<R>), ModelError> {
        let (stats, dlogits, trace) = self.loss_inner(batch, rng, true)?;
        let g = self.backward(&trace, &dlogits);
        Ok((stats, g))
    }

    /// Statistics only, without dropout or gradients.
    pub fn evaluate(&self, batch: &[Example]) -> Result<StepStats, ModelError> {
        Ok(self.loss_inner(batch, None, false)?.0)
    }

    fn loss_inner(
        &self,
        batch: &[Example],
        rng: Option<&mut ChaCha8Rng>,
        want_grad: bool,
    ) -> Result<(StepStats, Vec<R>, Trace<R>), ModelError> {
        if batch.iter().any(|e| e.tgt.len() < 2) {
            return Err(ModelError::ShortTarget);
        }
        let v = self.cfg.vocab;
        let srcs: Vec<&[u32]> = batch.iter().map(|e| e.src).collect();
        let dec_in: Vec<&[u32]> = batch.iter().map(|e| &e.tgt[..e.tgt.len() - 1]).collect();
        let mut drop = Dropout { rate: self.cfg.dropout, rng };
        let trace = self.forward(&srcs, &dec_in, &mut drop)?;
        let xent_tokens: usize = batch
            .iter()
            .filter(|e| e.objective == Objective::Xent)
            .map(|e| e.tgt.len() - 1)
            .sum();
        let rl_seqs = batch.iter().filter(|e| e.objective != Objective::Xent).count();
        let mut stats = StepStats { sequences: batch.len(), ..StepStats::default() };
        let mut dlogits = if want_grad { vec![R::zero(); trace.logp.len()] } else { Vec::new() };
        for (e, seg) in batch.iter().zip(&trace.dec_segs) {
            let mut all_right = true;
            for t in 0..seg.len {
                let row = seg.start + t;
                let lp = &trace.logp[row * v..(row + 1) * v];
                let label = e.tgt[t + 1] as usize;
                let nll = -lp[label].to_f64().unwrap();
                let h = trace.entropy[row].to_f64().unwrap();
                let argmax = (0..v).fold(0, |b, j| if lp[j] > lp[b] { j } else { b });
                stats.nll += nll;
                stats.entropy += h;
                stats.tokens += 1;
                if argmax == label {
                    stats.correct += 1;
                } else {
                    all_right = false;
                }
                let dz = if want_grad { &mut dlogits[row * v..(row + 1) * v] } else { &mut [][..] };
                match e.objective {
                    Objective::Xent => {
                        let w = 1.0 / xent_tokens as f64;
                        stats.loss += nll * w;
                        if want_grad {
                            let w = R::of(w);
                            for j in 0..v {
                                dz[j] = lp[j].exp() * w;
                            }
                            dz[label] = dz[label] - w;
                        }
                    }
                    Objective::Reinforce { advantage, beta } => {
                        let w = 1.0 / rl_seqs as f64;
                        stats.loss += (-nll * advantage - beta * h) * w;
                        if want_grad {
                            let (a, b, hr) = (R::of(advantage * w), R::of(beta * w), R::of(h));
                            for j in 0..v {
                                let p = lp[j].exp();
                                dz[j] = -a * p + b * p * (lp[j] + hr);
                            }
                            dz[label] = dz[label] + a;
                        }
                    }
                }
            }
            if all_right {
                stats.exact += 1;
            }
        }
        Ok((stats, dlogits, trace))
    }

    /// Per-position log-probability table for `tgt_prefix` given `src`:
    /// row `t` is the distribution of the token following `tgt_prefix[..=t]`.
    pub fn forward_logprobs(&self, src: &[u32], tgt_prefix: &[u32]) -> Result<Vec<Vec<R>>, ModelError> {
        let t = self.forward(&[src], &[tgt_prefix], &mut Dropout::off())?;
        Ok(t.logp.chunks(self.cfg.vocab).map(<[R]>::to_vec).collect())
    }

    /// Names of blocks whose gradient holds a non-finite value.
    pub fn non_finite_blocks(&self, grads: &[R]) -> Vec<String> {
        self.layout
            .blocks
            .iter()
            .filter(|b| grads[b.range()].iter().any(|x| !x.is_finite()))
            .map(|b| b.name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use silo_core::isa::token::{BOS, EOS};

    fn toy() -> Model<f64> {
        Model::new(ModelConfig { vocab: 12, max_len: 16, ..ModelConfig::tiny() }, 3).unwrap()
    }

    #[test]
    fn rows_are_normalized() {
        let m = toy();
        let rows = m.forward_logprobs(&[BOS, 5, 6, EOS], &[BOS, 7, 8]).unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            let s: f64 = r.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_order_does_not_matter() {
        let m = toy();
        let (a, b) = ([BOS, 4, 5, EOS], [BOS, 9, EOS]);
        let (ta, tb) = ([BOS, 6, 7, EOS], [BOS, 3, 3, 3, EOS]);
        let t1 = m.forward(&[&a, &b], &[&ta[..3], &tb[..4]], &mut Dropout::off()).unwrap();
        let t2 = m.forward(&[&b, &a], &[&tb[..4], &ta[..3]], &mut Dropout::off()).unwrap();
        let v = m.cfg.vocab;
        let rows_a1 = &t1.logp[..3 * v];
        let rows_a2 = &t2.logp[4 * v..7 * v];
        for (x, y) in rows_a1.iter().zip(rows_a2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let m: Model<f32> = Model::new(ModelConfig::desk(), 1).unwrap();
        let src = [BOS, 20, 30, 40, EOS];
        let tgt = [BOS, 50, 60, EOS];
        let s = m.evaluate(&[Example::xent(&src, &tgt)]).unwrap();
        let loss = s.nll / s.tokens as f64;
        let uniform = (m.cfg.vocab as f64).ln();
        assert!((loss - uniform).abs() / uniform < 0.05, "{loss} vs {uniform}");
    }

    #[test]
    fn overlong_input_is_rejected() {
        let m = toy();
        let long = vec![4u32; 17];
        assert!(matches!(
            m.forward_logprobs(&long, &[BOS]),
            Err(ModelError::TooLong { .. })
        ));
    }
}
