//! Randomized input/output test suites for a specification program.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Program, NUM_REGS};
use crate::machine::{Executable, Halt, MachineState, DEFAULT_FUEL, DEFAULT_MEM_SIZE};

/// Default number of cases per suite.
pub const DEFAULT_K: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub input: MachineState,
    pub output: MachineState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    pub seed: u64,
    pub cases: Vec<TestCase>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TestgenError {
    #[error("suite size must be at least 1")]
    EmptySuite,
    #[error("unproductive spec: {0} consecutive inputs failed to terminate with ret")]
    Unproductive(usize),
    #[error("suite i/o: {0}")]
    Io(String),
}

const BOUNDARY: [i64; 7] = [0, 1, -1, i32::MIN as i64, i32::MAX as i64, i64::MIN, i64::MAX];

fn sample_value(rng: &mut impl Rng) -> u64 {
    let u: f64 = rng.gen();
    if u < 0.25 {
        BOUNDARY[rng.gen_range(0..BOUNDARY.len())] as u64
    } else if u < 0.5 {
        rng.gen_range(-16i64..=16) as u64
    } else {
        rng.gen()
    }
}

/// Draws one input state: mixed-distribution registers, zero flags, random memory.
pub fn random_input(rng: &mut impl Rng, mem_size: usize) -> MachineState {
    let mut s = MachineState::new(mem_size);
    for i in 0..NUM_REGS {
        s.regs[i] = sample_value(rng);
    }
    rng.fill(&mut s.mem[..]);
    s
}

/// Generates `k` terminating cases for `spec`, reproducibly from `seed`.
pub fn generate_suite(spec: &Program, k: usize, seed: u64) -> Result<TestSuite, TestgenError> {
    if k == 0 {
        return Err(TestgenError::EmptySuite);
    }
    let exe = Executable::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(k);
    let mut misses = 0;
    while cases.len() < k {
        let input = random_input(&mut rng, DEFAULT_MEM_SIZE);
        let mut out = input.clone();
        if exe.run(&mut out, DEFAULT_FUEL, None).halted == Halt::Ret {
            cases.push(TestCase { input, output: out });
            misses = 0;
        } else {
            misses += 1;
            if misses >= 10 * k {
                return Err(TestgenError::Unproductive(misses));
            }
        }
    }
    Ok(TestSuite { seed, cases })
}

impl TestSuite {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Writes one case per line: `{"seed":..,"input":{..},"output":{..}}`.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), TestgenError> {
        #[derive(Serialize)]
        struct Line<'a> {
            seed: u64,
            input: &'a MachineState,
            output: &'a MachineState,
        }
        for c in &self.cases {
            let line = serde_json::to_string(&Line {
                seed: self.seed,
                input: &c.input,
                output: &c.output,
            })
            .map_err(|e| TestgenError::Io(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| TestgenError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<TestSuite, TestgenError> {
        #[derive(Deserialize)]
        struct Line {
            seed: u64,
            input: MachineState,
            output: MachineState,
        }
        let mut suite = TestSuite {
            seed: 0,
            cases: Vec::new(),
        };
        for line in r.lines() {
            let line = line.map_err(|e| TestgenError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line).map_err(|e| TestgenError::Io(e.to_string()))?;
            suite.seed = l.seed;
            suite.cases.push(TestCase {
                input: l.input,
                output: l.output,
            });
        }
        if suite.cases.is_empty() {
            return Err(TestgenError::EmptySuite);
        }
        Ok(suite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{parse, Reg};
    use crate::machine::execute;

    const ABS: &str = ".abs:\n  movl %edi, %eax\n  sarl $0x1f, %edi\n  xorl %edi, %eax\n  subl %edi, %eax\n  retq\n";

    #[test]
    fn identity_suite() {
        let s = generate_suite(&parse(".f:\n  retq").unwrap(), 4, 1).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.cases.iter().all(|c| c.input == c.output));
    }

    #[test]
    fn abs_suite_matches_scalar_oracle() {
        let s = generate_suite(&parse(ABS).unwrap(), 32, 9).unwrap();
        for c in &s.cases {
            let x = c.input.reg(Reg::Rdi) as u32 as i32;
            assert_eq!(c.output.reg(Reg::Rax), x.wrapping_abs() as u32 as u64);
        }
    }

    #[test]
    fn zero_k_is_rejected() {
        assert_eq!(
            generate_suite(&parse(".f:\n  retq").unwrap(), 0, 1),
            Err(TestgenError::EmptySuite)
        );
    }

    #[test]
    fn nonterminating_spec_is_unproductive() {
        let p = parse(".f:\n.L1:\n  jmp .L1").unwrap();
        assert!(matches!(generate_suite(&p, 2, 0), Err(TestgenError::Unproductive(20))));
    }

    #[test]
    fn reproducible_and_sound() {
        let p = parse(ABS).unwrap();
        let a = generate_suite(&p, 16, 5).unwrap();
        let b = generate_suite(&p, 16, 5).unwrap();
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        a.write_jsonl(&mut ta).unwrap();
        b.write_jsonl(&mut tb).unwrap();
        assert_eq!(ta, tb);
        for c in &a.cases {
            assert_eq!(execute(&p, &c.input, DEFAULT_FUEL, None).final_state, c.output);
        }
        assert_eq!(TestSuite::read_jsonl(&ta[..]).unwrap(), a);
    }
}
