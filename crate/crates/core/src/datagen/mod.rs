//! Synthetic corpus of (unoptimized, optimized) program pairs with test
//! suites and inferred live-out specs, split into train/dev/test.

pub mod codegen;
pub mod ir;
pub mod passes;
pub mod peephole;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codegen::{compile_naive, compile_opt, result_reg_for, CodegenError};
pub use ir::{gen_task, gen_task_of, Family, SourceTask};

use crate::cost::{cost, LatencyTable};
use crate::isa::{tokenize, Instruction, Opcode, Operand, Program, Reg};
use crate::machine::LiveOut;
use crate::testgen::{generate_suite, TestSuite, DEFAULT_K};
use crate::verify::{infer_live_out, verify, VerifyConfig, DEFAULT_LIVE_OUT_BUDGET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub seed: u64,
    /// Test cases per suite.
    pub k: usize,
    pub verify: VerifyConfig,
    pub max_tokens: usize,
    pub live_out_budget: usize,
    /// Probability that the optimizing compiler computes straight into `rax`.
    pub rax_result_prob: f64,
    pub max_discard_rate: f64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            seed: 7,
            k: DEFAULT_K,
            verify: VerifyConfig::default(),
            max_tokens: crate::isa::token::MAX_LEN,
            live_out_budget: DEFAULT_LIVE_OUT_BUDGET,
            rax_result_prob: 0.03,
            max_discard_rate: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub compiler: String,
    pub round: u32,
}

mod program_text {
    use super::Program;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Program, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&p.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Program, D::Error> {
        let text = String::deserialize(d)?;
        crate::isa::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// One corpus tuple. The suite is stored in a companion file keyed by `id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub split: Split,
    pub family: Family,
    pub task_seed: u64,
    #[serde(with = "program_text")]
    pub f_s: Program,
    #[serde(with = "program_text")]
    pub f_ref: Program,
    pub live_out: LiveOut,
    pub cost_s: f64,
    pub cost_ref: f64,
    /// A strictly cheaper verified rewrite exists by construction.
    pub headroom: bool,
    pub provenance: Provenance,
    #[serde(skip)]
    pub suite: TestSuite,
}

impl Default for TestSuite {
    fn default() -> Self {
        TestSuite {
            seed: 0,
            cases: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Codegen,
    OverLength,
    UnproductiveSuite,
    Spurious,
    BudgetExhausted,
    ReferenceFault,
    NotEquivalent,
    CostRegression,
    Duplicate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub attempted: usize,
    pub admitted: BTreeMap<String, usize>,
    pub discarded: BTreeMap<DiscardReason, usize>,
    pub headroom: usize,
    pub families: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn total_discarded(&self) -> usize {
        self.discarded.values().sum()
    }

    pub fn summary_line(&self) -> String {
        let admitted: usize = self.admitted.values().sum();
        let reasons: Vec<String> = self
            .discarded
            .iter()
            .map(|(k, v)| format!("{}={v}", serde_json::to_value(k).unwrap().as_str().unwrap_or("?")))
            .collect();
        format!(
            "attempted={} admitted={} headroom={} discarded={} [{}]",
            self.attempted,
            admitted,
            self.headroom,
            self.total_discarded(),
            reasons.join(" ")
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<DatasetEntry>,
    pub dev: Vec<DatasetEntry>,
    pub test: Vec<DatasetEntry>,
    pub stats: CorpusStats,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[DatasetEntry] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("generation exhausted: {discarded} of {attempted} candidate tasks discarded")]
    Exhausted { attempted: usize, discarded: usize },
    #[error("corpus i/o: {0}")]
    Io(String),
}

/// Renames the result register to `rax` and drops the trailing move, if the
/// program ends in `mov %R, %rax; retq` and `rax` is otherwise unused.
pub fn strip_trailing_move(p: &Program) -> Option<Program> {
    let n = p.instructions.len();
    if n < 2 || p.instructions[n - 1].op != Opcode::Ret {
        return None;
    }
    let mv = &p.instructions[n - 2];
    let (src, dst) = match (mv.op, mv.operands.as_slice()) {
        (Opcode::Mov, [Operand::Reg(s), Operand::Reg(d)]) => (s.reg, d.reg),
        _ => return None,
    };
    if dst != Reg::Rax || src == Reg::Rax {
        return None;
    }
    let mentions_rax = p.instructions[..n - 2].iter().any(|i| {
        i.operands.iter().any(|o| match o {
            Operand::Reg(r) => r.reg == Reg::Rax,
            Operand::Mem { base, .. } => *base == Reg::Rax,
            _ => false,
        })
    });
    if mentions_rax {
        return None;
    }
    let rename = |o: &Operand| match o {
        Operand::Reg(r) if r.reg == src => Operand::reg(Reg::Rax, r.width),
        Operand::Mem { base, disp } if *base == src => Operand::mem(Reg::Rax, *disp),
        other => other.clone(),
    };
    let mut instructions: Vec<Instruction> = p.instructions[..n - 2]
        .iter()
        .map(|i| Instruction {
            operands: i.operands.iter().map(rename).collect(),
            ..i.clone()
        })
        .collect();
    instructions.push(Instruction::ret());
    Program::new(p.name.clone(), instructions).ok()
}

/// The headroom oracle: the stripped rewrite, if it verifies and is strictly cheaper.
pub fn headroom_witness(
    f_ref: &Program,
    f_s: &Program,
    suite: &TestSuite,
    lo: &LiveOut,
    cfg: &VerifyConfig,
    lat: &LatencyTable,
) -> Option<Program> {
    let cand = strip_trailing_move(f_ref)?;
    let ok = verify(&cand, f_s, suite, lo, cfg).is_equivalent()
        && cost(&cand, suite, lat).c_total < cost(f_ref, suite, lat).c_total;
    ok.then_some(cand)
}

/// Everything about a candidate tuple before an id and split are assigned.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub task: SourceTask,
    pub f_s: Program,
    pub f_ref: Program,
    pub suite: TestSuite,
    pub live_out: LiveOut,
    pub cost_s: f64,
    pub cost_ref: f64,
    pub headroom: bool,
}

/// Generates, compiles, tests and filters one task.
pub fn make_candidate(task_seed: u64, cfg: &DatagenConfig) -> Result<Candidate, DiscardReason> {
    let task = gen_task(task_seed);
    let f_s = compile_naive(&task).map_err(|_| DiscardReason::Codegen)?;
    let f_ref = compile_opt(&task, result_reg_for(task_seed, cfg.rax_result_prob))
        .map_err(|_| DiscardReason::Codegen)?;
    admit_pair(task, f_s, f_ref, cfg)
}

/// Filtering for an arbitrary (spec, reference) pair.
pub fn admit_pair(
    task: SourceTask,
    f_s: Program,
    f_ref: Program,
    cfg: &DatagenConfig,
) -> Result<Candidate, DiscardReason> {
    let too_long = |p: &Program| tokenize(p).map(|t| t.0.len() > cfg.max_tokens).unwrap_or(true);
    if too_long(&f_s) || too_long(&f_ref) {
        return Err(DiscardReason::OverLength);
    }
    let suite = generate_suite(&f_s, cfg.k, task.seed ^ 0x7e57_5u64)
        .map_err(|_| DiscardReason::UnproductiveSuite)?;
    let live_out = infer_live_out(&f_s, &f_ref, &suite, &cfg.verify, cfg.live_out_budget).map_err(
        |d| match d {
            crate::verify::Discard::Spurious => DiscardReason::Spurious,
            crate::verify::Discard::BudgetExhausted => DiscardReason::BudgetExhausted,
            crate::verify::Discard::ReferenceFault => DiscardReason::ReferenceFault,
        },
    )?;
    if !verify(&f_ref, &f_s, &suite, &live_out, &cfg.verify).is_equivalent() {
        return Err(DiscardReason::NotEquivalent);
    }
    let lat = LatencyTable::default();
    let cost_s = cost(&f_s, &suite, &lat).c_total;
    let cost_ref = cost(&f_ref, &suite, &lat).c_total;
    if cost_ref > cost_s {
        return Err(DiscardReason::CostRegression);
    }
    let headroom = headroom_witness(&f_ref, &f_s, &suite, &live_out, &cfg.verify, &lat).is_some();
    Ok(Candidate {
        task,
        f_s,
        f_ref,
        suite,
        live_out,
        cost_s,
        cost_ref,
        headroom,
    })
}

/// Task seed for the `i`-th draw of a split. Seeds of different splits are
/// disjoint by construction.
pub fn task_seed(master: u64, split: Split, i: u64) -> u64 {
    let class = (split as u64 + 1) << 48;
    master.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ class ^ i
}

/// Builds all three splits. Deterministic in `cfg.seed`.
pub fn build_corpus(
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    cfg: &DatagenConfig,
) -> Result<Corpus, DatagenError> {
    build_corpus_with(n_train, n_dev, n_test, cfg, |_, _| {})
}

/// As [`build_corpus`], reporting `(split, admitted so far)` after each admission.
pub fn build_corpus_with(
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    cfg: &DatagenConfig,
    mut progress: impl FnMut(Split, usize),
) -> Result<Corpus, DatagenError> {
    let mut corpus = Corpus::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (split, want) in [(Split::Train, n_train), (Split::Dev, n_dev), (Split::Test, n_test)] {
        let mut out = Vec::with_capacity(want);
        let mut i = 0u64;
        while out.len() < want {
            let st = &mut corpus.stats;
            if st.attempted >= 100
                && st.total_discarded() as f64 > cfg.max_discard_rate * st.attempted as f64
            {
                return Err(DatagenError::Exhausted {
                    attempted: st.attempted,
                    discarded: st.total_discarded(),
                });
            }
            let seed = task_seed(cfg.seed, split, i);
            i += 1;
            st.attempted += 1;
            let cand = match make_candidate(seed, cfg) {
                Ok(c) => c,
                Err(r) => {
                    *st.discarded.entry(r).or_default() += 1;
                    continue;
                }
            };
            if !seen.insert(cand.f_s.body_text()) {
                *st.discarded.entry(DiscardReason::Duplicate).or_default() += 1;
                continue;
            }
            st.headroom += usize::from(cand.headroom);
            *st.families.entry(cand.task.family.name().to_string()).or_default() += 1;
            out.push(DatasetEntry {
                id: format!("{}-{:05}", split.name(), out.len()),
                split,
                family: cand.task.family,
                task_seed: seed,
                f_s: cand.f_s,
                f_ref: cand.f_ref,
                live_out: cand.live_out,
                cost_s: cand.cost_s,
                cost_ref: cand.cost_ref,
                headroom: cand.headroom,
                provenance: Provenance {
                    compiler: "rule-opt".into(),
                    round: 0,
                },
                suite: cand.suite,
            });
            progress(split, out.len());
        }
        corpus.stats.admitted.insert(split.name().to_string(), out.len());
        match split {
            Split::Train => corpus.train = out,
            Split::Dev => corpus.dev = out,
            Split::Test => corpus.test = out,
        }
    }
    Ok(corpus)
}

fn io<E: std::fmt::Display>(e: E) -> DatagenError {
    DatagenError::Io(e.to_string())
}

#[derive(Serialize, Deserialize)]
struct SuiteRecord {
    id: String,
    #[serde(flatten)]
    suite: TestSuite,
}

/// Writes `{split}.jsonl`, `{split}.suites.jsonl` and `stats.json` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<(), DatagenError> {
    fs::create_dir_all(dir).map_err(io)?;
    for split in Split::ALL {
        let entries = corpus.split(split);
        let mut w = BufWriter::new(fs::File::create(dir.join(format!("{}.jsonl", split.name()))).map_err(io)?);
        let mut ws =
            BufWriter::new(fs::File::create(dir.join(format!("{}.suites.jsonl", split.name()))).map_err(io)?);
        for e in entries {
            writeln!(w, "{}", serde_json::to_string(e).map_err(io)?).map_err(io)?;
            let rec = SuiteRecord {
                id: e.id.clone(),
                suite: e.suite.clone(),
            };
            writeln!(ws, "{}", serde_json::to_string(&rec).map_err(io)?).map_err(io)?;
        }
        w.flush().map_err(io)?;
        ws.flush().map_err(io)?;
    }
    let stats = serde_json::to_string_pretty(&corpus.stats).map_err(io)?;
    fs::write(dir.join("stats.json"), stats + "\n").map_err(io)?;
    Ok(())
}

/// Reads one split with its suites joined in.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<DatasetEntry>, DatagenError> {
    let open = |name: String| -> Result<BufReader<fs::File>, DatagenError> {
        Ok(BufReader::new(fs::File::open(dir.join(name)).map_err(io)?))
    };
    let mut suites = std::collections::HashMap::new();
    for line in open(format!("{}.suites.jsonl", split.name()))?.lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SuiteRecord = serde_json::from_str(&line).map_err(io)?;
        suites.insert(rec.id, rec.suite);
    }
    let mut out = Vec::new();
    for line in open(format!("{}.jsonl", split.name()))?.lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: DatasetEntry = serde_json::from_str(&line).map_err(io)?;
        e.suite = suites
            .remove(&e.id)
            .ok_or_else(|| DatagenError::Io(format!("no suite for entry {}", e.id)))?;
        out.push(e);
    }
    Ok(out)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, DatagenError> {
    let stats = fs::read_to_string(dir.join("stats.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    Ok(Corpus {
        train: read_split(dir, Split::Train)?,
        dev: read_split(dir, Split::Dev)?,
        test: read_split(dir, Split::Test)?,
        stats,
    })
}
