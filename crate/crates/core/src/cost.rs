//! Static latency cost model (all instructions plus executed instructions)
//! and the penalized objective used for policy-gradient fine-tuning.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Instruction, Opcode, Program};
use crate::machine::{bit_diff, Executable, LiveOut, MachineState, DEFAULT_FUEL};
use crate::testgen::TestSuite;
use crate::verify::{verify_exe, VerifyConfig};

#[derive(Debug, Error, PartialEq)]
pub enum LatencyError {
    #[error("line {0}: expected `<opcode> <latency>`")]
    Syntax(usize),
    #[error("line {0}: unknown opcode family `{1}`")]
    UnknownOpcode(usize, String),
    #[error("line {0}: latency must be a finite non-negative number")]
    BadValue(usize),
}

/// Expected latency per opcode family plus a memory-operand surcharge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub by_family: BTreeMap<String, f64>,
    pub memory_penalty: f64,
}

impl Default for LatencyTable {
    fn default() -> Self {
        let mut by_family = BTreeMap::new();
        for op in Opcode::ALL {
            let lat = match op {
                Opcode::LabelDef => 0.0,
                Opcode::Shl | Opcode::Sar | Opcode::Shr => 2.0,
                Opcode::Imul => 3.0,
                _ => 1.0,
            };
            by_family.insert(op.family().to_string(), lat);
        }
        LatencyTable {
            by_family,
            memory_penalty: 3.0,
        }
    }
}

impl LatencyTable {
    /// Latency of one instruction. `lea` only computes an address, so it
    /// carries no memory surcharge.
    pub fn latency(&self, ins: &Instruction) -> f64 {
        let base = self.by_family.get(ins.op.family()).copied().unwrap_or(1.0);
        if ins.touches_memory() {
            base + self.memory_penalty
        } else {
            base
        }
    }

    /// Parses `<family> <latency>` lines; `memory <n>` sets the surcharge.
    /// Families not listed keep their default.
    pub fn from_text(text: &str) -> Result<Self, LatencyError> {
        let mut t = LatencyTable::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(key), Some(val), None) = (it.next(), it.next(), it.next()) else {
                return Err(LatencyError::Syntax(i + 1));
            };
            let v: f64 = val.parse().map_err(|_| LatencyError::BadValue(i + 1))?;
            if !v.is_finite() || v < 0.0 {
                return Err(LatencyError::BadValue(i + 1));
            }
            if key == "memory" {
                t.memory_penalty = v;
            } else if Opcode::from_family(key).is_some() {
                t.by_family.insert(key.to_string(), v);
            } else {
                return Err(LatencyError::UnknownOpcode(i + 1, key.to_string()));
            }
        }
        Ok(t)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# opcode-family latency (cycles); `memory` is the memory-operand surcharge\n");
        for (k, v) in &self.by_family {
            let _ = writeln!(s, "{k} {v}");
        }
        let _ = writeln!(s, "memory {}", self.memory_penalty);
        s
    }

    fn per_index(&self, p: &Program) -> Vec<f64> {
        p.instructions.iter().map(|i| self.latency(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub c_all: f64,
    pub c_exe: f64,
    pub c_total: f64,
    pub per_case: Vec<f64>,
}

/// Sum of latencies over every instruction.
pub fn cost_all(p: &Program, lat: &LatencyTable) -> f64 {
    lat.per_index(p).iter().sum()
}

fn executed_costs(p: &Program, exe: &Executable, suite: &TestSuite, lat: &LatencyTable) -> Vec<f64> {
    let lats = lat.per_index(p);
    let mut buf = MachineState::new(0);
    suite
        .cases
        .iter()
        .map(|c| {
            buf.clone_from(&c.input);
            let mut total = 0.0;
            exe.run_with(&mut buf, DEFAULT_FUEL, None, |i| total += lats[i as usize]);
            total
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean over cases of the summed latency of executed instructions.
pub fn cost_exe(p: &Program, suite: &TestSuite, lat: &LatencyTable) -> f64 {
    mean(&executed_costs(p, &Executable::new(p), suite, lat))
}

pub fn cost(p: &Program, suite: &TestSuite, lat: &LatencyTable) -> CostReport {
    cost_with(p, &Executable::new(p), suite, lat)
}

pub fn cost_with(p: &Program, exe: &Executable, suite: &TestSuite, lat: &LatencyTable) -> CostReport {
    let c_all = cost_all(p, lat);
    let per_case = executed_costs(p, exe, suite, lat);
    let c_exe = mean(&per_case);
    CostReport {
        c_all,
        c_exe,
        c_total: c_all + c_exe,
        per_case,
    }
}

/// Penalty constants of the policy-gradient objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub lambda: f64,
    pub bit_rate: f64,
    pub clip: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            lambda: 50_000.0,
            bit_rate: 100.0,
            clip: 100_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub j: f64,
    pub c_total: f64,
    pub v_term: f64,
    pub bit_penalty: f64,
    pub clipped: bool,
}

/// Mean masked bit difference of the candidate's finals against the stored outputs.
pub fn mean_bit_diff(exe: &Executable, suite: &TestSuite, lo: &LiveOut) -> f64 {
    let mut buf = MachineState::new(0);
    let total: u64 = suite
        .cases
        .iter()
        .map(|c| {
            buf.clone_from(&c.input);
            exe.run(&mut buf, DEFAULT_FUEL, None);
            bit_diff(&buf, &c.output, lo)
        })
        .sum();
    total as f64 / suite.cases.len().max(1) as f64
}

/// `j = min(clip, c_total + λ·v + bit_rate·mean_bit_diff)`. A candidate of
/// `None` (unparseable) gets `j = clip`.
pub fn objective(
    candidate: Option<&Program>,
    spec: &Program,
    suite: &TestSuite,
    lo: &LiveOut,
    cfg: &VerifyConfig,
    lat: &LatencyTable,
    rl: &RlConfig,
) -> ObjectiveReport {
    let Some(cand) = candidate else {
        return ObjectiveReport {
            j: rl.clip,
            c_total: 0.0,
            v_term: rl.lambda,
            bit_penalty: 0.0,
            clipped: true,
        };
    };
    let exe = Executable::new(cand);
    let v = verify_exe(&exe, &Executable::new(spec), suite, lo, cfg).v_value();
    let c = cost_with(cand, &exe, suite, lat);
    objective_from_parts(c.c_total, v, mean_bit_diff(&exe, suite, lo), rl)
}

pub fn objective_from_parts(c_total: f64, v: u8, mean_bits: f64, rl: &RlConfig) -> ObjectiveReport {
    let v_term = rl.lambda * v as f64;
    let bit_penalty = rl.bit_rate * mean_bits;
    let raw = c_total + v_term + bit_penalty;
    ObjectiveReport {
        j: raw.min(rl.clip),
        c_total,
        v_term,
        bit_penalty,
        clipped: raw > rl.clip,
    }
}
