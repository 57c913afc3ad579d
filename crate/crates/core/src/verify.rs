//! The verification function V: test-suite checking followed by a
//! loop-bounded exhaustive equivalence check over a reduced input domain,
//! plus live-out inference and spurious-reference filtering.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::isa::{detokenize, parse, Program, Reg, NUM_REGS};
use crate::machine::{
    masked_equal, Executable, Flag, Halt, LiveOut, MachineState, DEFAULT_FUEL, DEFAULT_MEM_SIZE,
};
use crate::testgen::TestSuite;

/// Probe values for enumerated memory bytes.
pub const MEM_PROBES: [u8; 5] = [0x00, 0x01, 0x7f, 0x80, 0xff];
/// Largest admissible enumerated input space.
pub const MAX_SPACE: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub loop_bound: u32,
    pub timeout_ms: u64,
    pub domain_bits: u32,
    pub input_regs: Vec<Reg>,
    pub mem_bytes_enumerated: usize,
    pub fuel: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            loop_bound: 4,
            timeout_ms: 5_000,
            domain_bits: 8,
            input_regs: vec![Reg::Rdi, Reg::Rsi],
            mem_bytes_enumerated: 0,
            fuel: DEFAULT_FUEL,
        }
    }
}

impl VerifyConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Number of enumerated inputs, or `None` if it exceeds [`MAX_SPACE`].
    pub fn space(&self) -> Option<u64> {
        let mut n: u64 = 1;
        for _ in &self.input_regs {
            n = n.checked_mul(1u64.checked_shl(self.domain_bits)?)?;
        }
        for _ in 0..self.mem_bytes_enumerated {
            n = n.checked_mul(MEM_PROBES.len() as u64)?;
        }
        (n <= MAX_SPACE).then_some(n)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.loop_bound < 1 {
            return Err("loop bound must be at least 1".into());
        }
        if !(1..=16).contains(&self.domain_bits) {
            return Err("domain bits must be in 1..=16".into());
        }
        if self.space().is_none() {
            return Err("enumerated space exceeds 2^24 inputs".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Equivalent,
    Counterexample(Box<MachineState>),
    BoundExceeded,
    Timeout,
    Unparseable,
    Fault,
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Equivalent => "equivalent",
            Verdict::Counterexample(_) => "counterexample",
            Verdict::BoundExceeded => "bound_exceeded",
            Verdict::Timeout => "timeout",
            Verdict::Unparseable => "unparseable",
            Verdict::Fault => "fault",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub verdict: Verdict,
}

impl VerifyOutcome {
    fn of(verdict: Verdict) -> Self {
        VerifyOutcome { verdict }
    }

    /// 0 iff verified equivalent.
    pub fn v_value(&self) -> u8 {
        u8::from(self.verdict != Verdict::Equivalent)
    }

    pub fn is_equivalent(&self) -> bool {
        self.verdict == Verdict::Equivalent
    }

    pub fn record(&self, wall_ms: Option<u64>) -> VerdictRecord {
        VerdictRecord {
            verdict: self.verdict.name().to_string(),
            witness: match &self.verdict {
                Verdict::Counterexample(w) => Some((**w).clone()),
                _ => None,
            },
            v: self.v_value(),
            wall_ms,
        }
    }
}

/// Structured verdict record emitted by the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub verdict: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub witness: Option<MachineState>,
    pub v: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

struct Deadline {
    #[cfg(not(target_arch = "wasm32"))]
    at: std::time::Instant,
}

impl Deadline {
    #[allow(unused_variables)]
    fn new(d: Duration) -> Self {
        Deadline {
            #[cfg(not(target_arch = "wasm32"))]
            at: std::time::Instant::now() + d,
        }
    }

    fn expired(&self) -> bool {
        #[cfg(not(target_arch = "wasm32"))]
        return std::time::Instant::now() >= self.at;
        #[cfg(target_arch = "wasm32")]
        return false;
    }
}

/// The enumerated input domain: input registers over sign-extended w-bit
/// values, optionally the first memory bytes over [`MEM_PROBES`], everything
/// else fixed.
pub struct InputDomain {
    base: MachineState,
    regs: Vec<usize>,
    bits: u32,
    mem_bytes: usize,
    size: u64,
}

impl InputDomain {
    pub fn new(cfg: &VerifyConfig) -> Self {
        let mut base = MachineState::new(DEFAULT_MEM_SIZE);
        for (i, r) in base.regs.iter_mut().enumerate() {
            *r = 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1);
        }
        for (j, b) in base.mem.iter_mut().enumerate() {
            *b = (j * 151 + 7) as u8;
        }
        InputDomain {
            base,
            regs: cfg.input_regs.iter().map(|r| r.index()).collect(),
            bits: cfg.domain_bits,
            mem_bytes: cfg.mem_bytes_enumerated.min(DEFAULT_MEM_SIZE),
            size: cfg.space().unwrap_or(MAX_SPACE),
        }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn fill(&self, idx: u64, st: &mut MachineState) {
        st.regs = self.base.regs;
        st.flags = self.base.flags;
        st.mem.clear();
        st.mem.extend_from_slice(&self.base.mem);
        let mut i = idx;
        let shift = 64 - self.bits;
        for &r in &self.regs {
            let v = i & ((1u64 << self.bits) - 1);
            i >>= self.bits;
            st.regs[r] = (((v << shift) as i64) >> shift) as u64;
        }
        for j in 0..self.mem_bytes {
            st.mem[j] = MEM_PROBES[(i % MEM_PROBES.len() as u64) as usize];
            i /= MEM_PROBES.len() as u64;
        }
    }

    pub fn input(&self, idx: u64) -> MachineState {
        let mut s = self.base.clone();
        self.fill(idx, &mut s);
        s
    }
}

enum Probe {
    /// The spec faults here; the input violates its precondition.
    Skip,
    Agree,
    Differ,
    CandidateFault,
    Bound,
}

fn probe(
    cand: &Executable,
    spec: &Executable,
    input: &MachineState,
    lo: &LiveOut,
    cfg: &VerifyConfig,
    sbuf: &mut MachineState,
    cbuf: &mut MachineState,
) -> Probe {
    sbuf.clone_from(input);
    let s = spec.run(sbuf, cfg.fuel, Some(cfg.loop_bound));
    match s.halted {
        Halt::Fault(_) => return Probe::Skip,
        Halt::FuelExhausted => return Probe::Bound,
        Halt::Ret => {}
    }
    cbuf.clone_from(input);
    let c = cand.run(cbuf, cfg.fuel, Some(cfg.loop_bound));
    match c.halted {
        Halt::Fault(_) => Probe::CandidateFault,
        Halt::FuelExhausted => Probe::Bound,
        Halt::Ret if masked_equal(sbuf, cbuf, lo) => Probe::Agree,
        Halt::Ret => Probe::Differ,
    }
}

/// Runs the candidate on every stored case and compares masked finals.
pub fn check_testsuite(candidate: &Program, suite: &TestSuite, lo: &LiveOut) -> VerifyOutcome {
    check_testsuite_exe(&Executable::new(candidate), suite, lo)
}

pub fn check_testsuite_exe(cand: &Executable, suite: &TestSuite, lo: &LiveOut) -> VerifyOutcome {
    let mut buf = MachineState::new(0);
    for case in &suite.cases {
        buf.clone_from(&case.input);
        if cand.run(&mut buf, DEFAULT_FUEL, None).halted != Halt::Ret {
            return VerifyOutcome::of(Verdict::Fault);
        }
        if !masked_equal(&buf, &case.output, lo) {
            return VerifyOutcome::of(Verdict::Counterexample(Box::new(case.input.clone())));
        }
    }
    VerifyOutcome::of(Verdict::Equivalent)
}

/// Exhaustive bounded equivalence over the configured input domain. The
/// first non-agreeing input in enumeration order decides the verdict.
pub fn check_exhaustive(
    candidate: &Program,
    spec: &Program,
    lo: &LiveOut,
    cfg: &VerifyConfig,
) -> VerifyOutcome {
    check_exhaustive_exe(&Executable::new(candidate), &Executable::new(spec), lo, cfg)
}

pub fn check_exhaustive_exe(
    cand: &Executable,
    spec: &Executable,
    lo: &LiveOut,
    cfg: &VerifyConfig,
) -> VerifyOutcome {
    let domain = InputDomain::new(cfg);
    let deadline = Deadline::new(cfg.timeout());
    let mut input = domain.input(0);
    let mut sbuf = input.clone();
    let mut cbuf = input.clone();
    for idx in 0..domain.size() {
        if idx % 1024 == 1023 && deadline.expired() {
            return VerifyOutcome::of(Verdict::Timeout);
        }
        domain.fill(idx, &mut input);
        match probe(cand, spec, &input, lo, cfg, &mut sbuf, &mut cbuf) {
            Probe::Skip | Probe::Agree => {}
            Probe::Differ => return VerifyOutcome::of(Verdict::Counterexample(Box::new(input))),
            Probe::CandidateFault => return VerifyOutcome::of(Verdict::Fault),
            Probe::Bound => return VerifyOutcome::of(Verdict::BoundExceeded),
        }
    }
    VerifyOutcome::of(Verdict::Equivalent)
}

/// Full pipeline: test suite, then exhaustive enumeration.
pub fn verify(
    candidate: &Program,
    spec: &Program,
    suite: &TestSuite,
    lo: &LiveOut,
    cfg: &VerifyConfig,
) -> VerifyOutcome {
    verify_exe(&Executable::new(candidate), &Executable::new(spec), suite, lo, cfg)
}

pub fn verify_exe(
    cand: &Executable,
    spec: &Executable,
    suite: &TestSuite,
    lo: &LiveOut,
    cfg: &VerifyConfig,
) -> VerifyOutcome {
    let t = check_testsuite_exe(cand, suite, lo);
    if !t.is_equivalent() {
        return t;
    }
    check_exhaustive_exe(cand, spec, lo, cfg)
}

/// Parses source text first; parse failures are `Unparseable`.
pub fn verify_text(
    candidate: &str,
    spec: &Program,
    suite: &TestSuite,
    lo: &LiveOut,
    cfg: &VerifyConfig,
) -> VerifyOutcome {
    match parse(candidate) {
        Ok(p) => verify(&p, spec, suite, lo, cfg),
        Err(_) => VerifyOutcome::of(Verdict::Unparseable),
    }
}

/// Detokenizes first; invalid sequences are `Unparseable`.
pub fn verify_tokens(
    candidate: &[u32],
    spec: &Program,
    suite: &TestSuite,
    lo: &LiveOut,
    cfg: &VerifyConfig,
) -> VerifyOutcome {
    match detokenize(candidate) {
        Ok(p) => verify(&p, spec, suite, lo, cfg),
        Err(_) => VerifyOutcome::of(Verdict::Unparseable),
    }
}

/// Why a pair was dropped by live-out inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discard {
    /// The reference is equivalent to a trivial program under the inferred live-out.
    Spurious,
    /// Pruning did not reach a fixed point within the iteration budget.
    BudgetExhausted,
    /// The reference faults or fails to terminate where the spec returns.
    ReferenceFault,
}

impl Discard {
    pub fn name(self) -> &'static str {
        match self {
            Discard::Spurious => "spurious",
            Discard::BudgetExhausted => "budget_exhausted",
            Discard::ReferenceFault => "reference_fault",
        }
    }
}

/// The trivial programs a reference must not be equivalent to.
pub fn spurious_programs() -> Vec<Program> {
    [
        ".f:\n  retq",
        ".f:\n  xorl %eax, %eax\n  retq",
        ".f:\n  movl $0x1, %eax\n  retq",
    ]
    .iter()
    .map(|s| parse(s).expect("spurious program parses"))
    .collect()
}

/// Default iteration budget for live-out inference.
pub const DEFAULT_LIVE_OUT_BUDGET: usize = 8;

/// Statistics from live-out inference, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferStats {
    pub iterations: usize,
}

/// Narrows `lo` so that `a` and `b` agree on every remaining live component.
/// Returns whether anything changed.
pub fn prune(lo: &mut LiveOut, a: &MachineState, b: &MachineState) -> bool {
    let mut changed = false;
    for i in 0..NUM_REGS {
        let diff = a.regs[i] ^ b.regs[i];
        let w = lo.reg_widths[i];
        if w == 0 || diff & lo.reg_mask(i) == 0 {
            continue;
        }
        let narrowed = [32u8, 16, 8]
            .into_iter()
            .filter(|n| *n < w)
            .find(|n| diff & ((1u64 << n) - 1) == 0)
            .unwrap_or(0);
        lo.reg_widths[i] = narrowed;
        changed = true;
    }
    for f in Flag::ALL {
        if lo.flags.get(f) && a.flags.get(f) != b.flags.get(f) {
            lo.flags.set(f, false);
            changed = true;
        }
    }
    changed
}

/// Live-out inference and filtering for a (spec, reference) pair.
pub fn infer_live_out(
    spec: &Program,
    reference: &Program,
    suite: &TestSuite,
    cfg: &VerifyConfig,
    budget: usize,
) -> Result<LiveOut, Discard> {
    infer_live_out_from(LiveOut::ALL_REGS_FLAGS, spec, reference, suite, cfg, budget)
        .map(|(lo, _)| lo)
}

/// As [`infer_live_out`], starting from `init` instead of everything live.
pub fn infer_live_out_from(
    init: LiveOut,
    spec: &Program,
    reference: &Program,
    suite: &TestSuite,
    cfg: &VerifyConfig,
    budget: usize,
) -> Result<(LiveOut, InferStats), Discard> {
    let s = Executable::new(spec);
    let r = Executable::new(reference);
    let domain = InputDomain::new(cfg);
    let mut lo = LiveOut {
        heap_out: false,
        ..init
    };
    let mut sbuf = domain.input(0);
    let mut rbuf = sbuf.clone();
    let mut input = sbuf.clone();
    let mut stats = InferStats::default();

    // Visits every probe input on which the spec returns, with both finals.
    let mut each_probe = |f: &mut dyn FnMut(&MachineState, &MachineState)| -> Result<(), Discard> {
        let n_suite = suite.cases.len() as u64;
        for idx in 0..n_suite + domain.size() {
            if idx < n_suite {
                input.clone_from(&suite.cases[idx as usize].input);
            } else {
                domain.fill(idx - n_suite, &mut input);
            }
            sbuf.clone_from(&input);
            if s.run(&mut sbuf, cfg.fuel, Some(cfg.loop_bound)).halted != Halt::Ret {
                continue;
            }
            rbuf.clone_from(&input);
            if r.run(&mut rbuf, cfg.fuel, Some(cfg.loop_bound)).halted != Halt::Ret {
                return Err(Discard::ReferenceFault);
            }
            f(&sbuf, &rbuf);
        }
        Ok(())
    };

    let mut fixed = false;
    while stats.iterations < budget {
        stats.iterations += 1;
        let mut changed = false;
        each_probe(&mut |a, b| changed |= prune(&mut lo, a, b))?;
        if !changed {
            fixed = true;
            break;
        }
    }
    if !fixed {
        return Err(Discard::BudgetExhausted);
    }
    let mut heap = true;
    each_probe(&mut |a, b| heap &= a.mem == b.mem)?;
    lo.heap_out = heap;

    for trivial in spurious_programs() {
        if verify(&trivial, reference, suite, &lo, cfg).is_equivalent() {
            return Err(Discard::Spurious);
        }
    }
    Ok((lo, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Width;
    use crate::testgen::generate_suite;

    const ABS: &str = ".abs:\n  movl %edi, %eax\n  sarl $0x1f, %edi\n  xorl %edi, %eax\n  subl %edi, %eax\n  retq\n";
    const ABS_MOV: &str = ".abs:\n  movl %edi, %edx\n  sarl $0x1f, %edx\n  movl %edi, %ecx\n  xorl %edx, %ecx\n  subl %edx, %ecx\n  movl %ecx, %eax\n  retq\n";

    fn p(s: &str) -> Program {
        parse(s).unwrap()
    }

    fn eax() -> LiveOut {
        LiveOut::only(Reg::Rax, Width::B32, false)
    }

    #[test]
    fn reflexive() {
        let spec = p(ABS);
        let suite = generate_suite(&spec, 32, 1).unwrap();
        let out = verify(&spec, &spec, &suite, &LiveOut::all(), &VerifyConfig::default());
        assert_eq!(out.verdict, Verdict::Equivalent);
        assert_eq!(out.v_value(), 0);
    }

    #[test]
    fn identity_is_not_abs() {
        let spec = p(ABS);
        let suite = generate_suite(&spec, 32, 1).unwrap();
        let cand = p(".f:\n  movl %edi, %eax\n  retq");
        let out = check_testsuite(&cand, &suite, &eax());
        match out.verdict {
            Verdict::Counterexample(w) => assert!((w.reg(Reg::Rdi) as u32 as i32) < 0),
            other => panic!("expected counterexample, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_store_faults() {
        let spec = p(ABS);
        let suite = generate_suite(&spec, 8, 1).unwrap();
        let cand = p(".f:\n  movl %edi, %eax\n  movl %eax, 0x1000(%rdi)\n  retq");
        assert_eq!(check_testsuite(&cand, &suite, &eax()).verdict, Verdict::Fault);
    }

    #[test]
    fn trailing_move_pair_is_equivalent() {
        let cfg = VerifyConfig {
            input_regs: vec![Reg::Rdi],
            ..VerifyConfig::default()
        };
        assert!(check_exhaustive(&p(ABS), &p(ABS_MOV), &eax(), &cfg).is_equivalent());
        assert!(check_exhaustive(&p(ABS_MOV), &p(ABS), &eax(), &cfg).is_equivalent());
    }

    #[test]
    fn data_dependent_loop_exceeds_bound() {
        // counts rdi down to zero
        let lp = p(".f:\n  movl %edi, %eax\n.L1:\n  subl $0x1, %eax\n  jne .L1\n  retq");
        let out = check_exhaustive(&lp, &lp, &eax(), &VerifyConfig::default());
        assert_eq!(out.verdict, Verdict::BoundExceeded);
        assert_eq!(out.v_value(), 1);
    }

    #[test]
    fn independent_swap_and_branch_flip() {
        let spec = p(".f:\n  movl %edi, %eax\n  movl %esi, %ecx\n  cmpl %ecx, %eax\n  je .L1\n  addl %ecx, %eax\n.L1:\n  retq");
        let swapped = p(".f:\n  movl %esi, %ecx\n  movl %edi, %eax\n  cmpl %ecx, %eax\n  je .L1\n  addl %ecx, %eax\n.L1:\n  retq");
        let flipped = p(".f:\n  movl %edi, %eax\n  movl %esi, %ecx\n  cmpl %ecx, %eax\n  jne .L1\n  addl %ecx, %eax\n.L1:\n  retq");
        let suite = generate_suite(&spec, 32, 3).unwrap();
        let cfg = VerifyConfig::default();
        assert!(verify(&swapped, &spec, &suite, &eax(), &cfg).is_equivalent());
        assert!(matches!(
            verify(&flipped, &spec, &suite, &eax(), &cfg).verdict,
            Verdict::Counterexample(_)
        ));
    }

    #[test]
    fn unparseable_text() {
        let spec = p(ABS);
        let suite = generate_suite(&spec, 4, 1).unwrap();
        let out = verify_text("garbage", &spec, &suite, &eax(), &VerifyConfig::default());
        assert_eq!(out.verdict, Verdict::Unparseable);
        assert_eq!(out.v_value(), 1);
        let out = verify_tokens(&[1, 2, 3], &spec, &suite, &eax(), &VerifyConfig::default());
        assert_eq!(out.verdict, Verdict::Unparseable);
    }

    #[test]
    fn live_out_prunes_clobbered_scratch() {
        let spec = p(".f:\n  movq %rdi, %rcx\n  addq %rsi, %rcx\n  movq %rcx, %rax\n  retq");
        let reference = p(".f:\n  leaq (%rdi), %rax\n  addq %rsi, %rax\n  retq");
        let suite = generate_suite(&spec, 32, 4).unwrap();
        let lo = infer_live_out(&spec, &reference, &suite, &VerifyConfig::default(), 8).unwrap();
        assert_eq!(lo.reg_widths[Reg::Rax.index()], 64);
        assert_eq!(lo.reg_widths[Reg::Rcx.index()], 0);
        assert!(lo.heap_out);
        // fixed point
        let (again, _) =
            infer_live_out_from(lo, &spec, &reference, &suite, &VerifyConfig::default(), 8).unwrap();
        assert_eq!(again, lo);
    }

    #[test]
    fn narrowing_keeps_agreeing_low_bits() {
        let mut lo = LiveOut::ALL_REGS_FLAGS;
        let a = MachineState::default().with_reg(Reg::Rax, 0x1_0000_00ff);
        let b = MachineState::default().with_reg(Reg::Rax, 0x2_0000_00ff);
        assert!(prune(&mut lo, &a, &b));
        assert_eq!(lo.reg_widths[Reg::Rax.index()], 32);
        let c = MachineState::default().with_reg(Reg::Rax, 0x2_0000_01ff);
        assert!(prune(&mut lo, &a, &c));
        assert_eq!(lo.reg_widths[Reg::Rax.index()], 8);
        assert!(!prune(&mut lo, &a, &c));
    }

    #[test]
    fn return_zero_reference_is_discarded() {
        let spec = p(".f:\n  movl %edi, %ecx\n  xorl %ecx, %ecx\n  movl %ecx, %eax\n  retq");
        let reference = p(".f:\n  xorl %eax, %eax\n  retq");
        let suite = generate_suite(&spec, 32, 4).unwrap();
        assert_eq!(
            infer_live_out(&spec, &reference, &suite, &VerifyConfig::default(), 8),
            Err(Discard::Spurious)
        );
    }

    #[test]
    fn identical_programs_keep_everything() {
        let spec = p(ABS);
        let suite = generate_suite(&spec, 32, 4).unwrap();
        let lo = infer_live_out(&spec, &spec, &suite, &VerifyConfig::default(), 8).unwrap();
        assert_eq!(lo, LiveOut::all());
    }

    #[test]
    fn record_serialization() {
        let out = VerifyOutcome::of(Verdict::Equivalent);
        let j = serde_json::to_string(&out.record(None)).unwrap();
        assert_eq!(j, r#"{"verdict":"equivalent","v":0}"#);
    }
}
