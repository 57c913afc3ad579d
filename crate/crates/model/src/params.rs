//! Flat parameter storage with a named block table.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Lin {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayer {
    pub ln1: Norm,
    pub qkv: Lin,
    pub o: Lin,
    pub ln2: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayer {
    pub ln1: Norm,
    pub qkv: Lin,
    pub o: Lin,
    pub ln2: Norm,
    pub cq: Lin,
    pub ckv: Lin,
    pub co: Lin,
    pub ln3: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

/// Block table plus typed handles into it.
#[derive(Debug, Clone)]
pub struct Layout {
    pub blocks: Vec<Block>,
    pub total: usize,
    pub emb: usize,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Norm,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Norm,
    pub out: Lin,
}

struct Builder {
    blocks: Vec<Block>,
    total: usize,
}

impl Builder {
    fn block(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.blocks.push(Block { name, rows, cols, offset: self.total });
        self.total += rows * cols;
        self.blocks.len() - 1
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize) -> Lin {
        Lin {
            w: self.block(format!("{name}.w"), din, dout),
            b: self.block(format!("{name}.b"), 1, dout),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.block(format!("{name}.g"), 1, d),
            b: self.block(format!("{name}.b"), 1, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.model_dim;
        let f = cfg.ff_dim;
        let mut b = Builder { blocks: Vec::new(), total: 0 };
        let emb = b.block("embed".into(), cfg.vocab, d);
        let enc = (0..cfg.layers)
            .map(|l| {
                let p = format!("enc{l}");
                EncLayer {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    qkv: b.lin(&format!("{p}.attn.qkv"), d, 3 * d),
                    o: b.lin(&format!("{p}.attn.o"), d, d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    ff1: b.lin(&format!("{p}.ff1"), d, f),
                    ff2: b.lin(&format!("{p}.ff2"), f, d),
                }
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);
        let dec = (0..cfg.layers)
            .map(|l| {
                let p = format!("dec{l}");
                DecLayer {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    qkv: b.lin(&format!("{p}.attn.qkv"), d, 3 * d),
                    o: b.lin(&format!("{p}.attn.o"), d, d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    cq: b.lin(&format!("{p}.cross.q"), d, d),
                    ckv: b.lin(&format!("{p}.cross.kv"), d, 2 * d),
                    co: b.lin(&format!("{p}.cross.o"), d, d),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                    ff1: b.lin(&format!("{p}.ff1"), d, f),
                    ff2: b.lin(&format!("{p}.ff2"), f, d),
                }
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);
        let out = b.lin("out", d, cfg.vocab);
        Layout {
            blocks: b.blocks,
            total: b.total,
            emb,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out,
        }
    }

    pub fn range(&self, id: usize) -> std::ops::Range<usize> {
        self.blocks[id].range()
    }

    pub fn get<'a, R>(&self, buf: &'a [R], id: usize) -> &'a [R] {
        &buf[self.range(id)]
    }

    pub fn get_mut<'a, R>(&self, buf: &'a mut [R], id: usize) -> &'a mut [R] {
        &mut buf[self.range(id)]
    }

    /// Two disjoint blocks borrowed mutably at once (`a` must precede `b`).
    pub fn pair_mut<'a, R>(&self, buf: &'a mut [R], a: usize, b: usize) -> (&'a mut [R], &'a mut [R]) {
        let (ra, rb) = (self.range(a), self.range(b));
        assert!(ra.end <= rb.start, "blocks out of order");
        let (lo, hi) = buf.split_at_mut(rb.start);
        (&mut lo[ra], &mut hi[..rb.end - rb.start])
    }

    pub fn find(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}
