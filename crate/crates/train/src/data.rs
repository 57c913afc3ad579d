//! Tokenized views of corpus entries and per-step random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use silo_core::datagen::DatasetEntry;
use silo_core::isa::tokenize;

/// Independent random streams drawn at every training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Batch choice and sampling for exploration, per actor.
    Explore(u32),
    /// Training batch choice and dropout.
    Learn,
}

/// A generator that depends only on `(seed, stream, step)`, so any step can
/// be replayed without replaying the ones before it.
pub fn step_rng(seed: u64, stream: Stream, step: u64) -> ChaCha8Rng {
    let tag = match stream {
        Stream::Explore(a) => 0x1000 + a as u64,
        Stream::Learn => 0x2000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(step);
    rng
}

/// Corpus entries with their token sequences.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn new(entries: Vec<DatasetEntry>) -> Self {
        let src = entries
            .iter()
            .map(|e| tokenize(&e.f_s).expect("admitted entries tokenize").0)
            .collect();
        let tgt = entries
            .iter()
            .map(|e| tokenize(&e.f_ref).expect("admitted entries tokenize").0)
            .collect();
        Dataset { entries, src, tgt }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
