//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! `SILO_ACCEPTANCE_SCALE=quick` shrinks the corpus and the training runs so
//! the whole pipeline can be smoke-tested in minutes. At that scale the
//! training criteria (6, 7, 9) are reported as SMOKE: their thresholds are
//! printed but not judged, since they only mean something at full scale.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use silo_core::cost::{cost, objective, objective_from_parts, LatencyTable, RlConfig};
use silo_core::datagen::codegen::{compile_naive, compile_opt, result_reg_for};
use silo_core::datagen::ir::gen_task;
use silo_core::datagen::{read_split, DatagenConfig, DatasetEntry, Split};
use silo_core::isa::token::{BOS, EOS};
use silo_core::isa::{parse, Opcode, Program, Reg, NUM_REGS};
use silo_core::machine::{execute, Flag, Halt, LiveOut, MachineState, DEFAULT_FUEL};
use silo_core::mutate::{preserving_transforms, rare_input_mutant, semantic_mutants, MutantKind, TransformKind};
use silo_core::testgen::{generate_suite, TestSuite};
use silo_core::verify::{check_exhaustive, check_testsuite, infer_live_out_from, verify, Discard, VerifyConfig};
use silo_model::gradcheck::check_gradients;
use silo_model::{checkpoint, greedy, Example, Model, ModelConfig, Objective};
use silo_train::runtime::eval::parse_rewrite;
use silo_train::{run_learner, silo_step, Algo, Dataset, LocalEvaluator, RuntimeConfig, SiloConfig, TrainState};

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    /// Ran at reduced scale; the threshold was not judged.
    Smoke,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn judged(ok: bool, detail: String) -> Outcome {
    Outcome { status: if ok { Status::Pass } else { Status::Fail }, detail }
}

fn failed(detail: impl Into<String>) -> Outcome {
    Outcome { status: Status::Fail, detail: detail.into() }
}

struct Scale {
    full: bool,
    train: usize,
    dev: usize,
    test: usize,
    pretrain_steps: u64,
    eval_every: u64,
    finetune_steps: u64,
    silo_dev_every: u64,
    rl_dev_every: u64,
    checkpoint_every: u64,
    dev_size: usize,
    lockstep_steps: usize,
}

impl Scale {
    fn from_env() -> Scale {
        match std::env::var("SILO_ACCEPTANCE_SCALE").as_deref() {
            Ok("quick") => Scale {
                full: false,
                train: 300,
                dev: 60,
                test: 60,
                pretrain_steps: 1500,
                eval_every: 500,
                finetune_steps: 200,
                silo_dev_every: 50,
                rl_dev_every: 100,
                checkpoint_every: 100,
                dev_size: 30,
                lockstep_steps: 10,
            },
            _ => Scale {
                full: true,
                train: 2000,
                dev: 200,
                test: 300,
                pretrain_steps: 8000,
                eval_every: 500,
                finetune_steps: 2000,
                silo_dev_every: 100,
                rl_dev_every: 500,
                checkpoint_every: 500,
                dev_size: 100,
                lockstep_steps: 60,
            },
        }
    }

    fn training(&self, ok: bool, detail: String) -> Outcome {
        if self.full {
            judged(ok, detail)
        } else {
            Outcome { status: Status::Smoke, detail: format!("{detail} [quick scale, threshold not judged]") }
        }
    }
}

// ---------------------------------------------------------------------------
// Oracles. These re-derive behaviour straight from the interpreter rather
// than going through the verifier or the cost model under test.

const LOOP_BOUND: u32 = 4;

/// The enumerated input for `rdi = a, rsi = b`, built from its definition.
fn domain_input(a: i64, b: i64) -> MachineState {
    let mut st = MachineState::default();
    for i in 0..NUM_REGS {
        st.regs[i] = 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1);
    }
    for (j, byte) in st.mem.iter_mut().enumerate() {
        *byte = (j * 151 + 7) as u8;
    }
    st.set_reg(Reg::Rdi, a as u64);
    st.set_reg(Reg::Rsi, b as u64);
    st
}

fn live_equal(a: &MachineState, b: &MachineState, lo: &LiveOut) -> bool {
    for i in 0..NUM_REGS {
        let mask = match lo.reg_widths[i] {
            0 => continue,
            64 => u64::MAX,
            w => (1u64 << w) - 1,
        };
        if (a.regs[i] ^ b.regs[i]) & mask != 0 {
            return false;
        }
    }
    if Flag::ALL.iter().any(|&f| lo.flags.get(f) && a.flags.get(f) != b.flags.get(f)) {
        return false;
    }
    !lo.heap_out || a.mem == b.mem
}

/// An input of the 8-bit domain on which `cand` fails to match `spec`.
fn oracle_difference(spec: &Program, cand: &Program, lo: &LiveOut) -> Option<(i64, i64)> {
    for a in -128i64..128 {
        for b in -128i64..128 {
            let input = domain_input(a, b);
            let s = execute(spec, &input, DEFAULT_FUEL, Some(LOOP_BOUND));
            if s.halted != Halt::Ret {
                continue;
            }
            let c = execute(cand, &input, DEFAULT_FUEL, Some(LOOP_BOUND));
            if c.halted != Halt::Ret || !live_equal(&s.final_state, &c.final_state, lo) {
                return Some((a, b));
            }
        }
    }
    None
}

/// Static and dynamic cost recomputed from traces.
fn oracle_costs(p: &Program, suite: &TestSuite, lat: &LatencyTable) -> (f64, f64) {
    let lats: Vec<f64> = p.instructions.iter().map(|i| lat.latency(i)).collect();
    let c_all: f64 = lats.iter().sum();
    let per_case: Vec<f64> = suite
        .cases
        .iter()
        .map(|c| execute(p, &c.input, DEFAULT_FUEL, None).executed.iter().map(|&i| lats[i as usize]).sum())
        .collect();
    (c_all, per_case.iter().sum::<f64>() / per_case.len() as f64)
}

fn oracle_mean_bits(p: &Program, suite: &TestSuite, lo: &LiveOut) -> f64 {
    let mut total = 0u64;
    for c in &suite.cases {
        let out = execute(p, &c.input, DEFAULT_FUEL, None).final_state;
        for i in 0..NUM_REGS {
            let mask = match lo.reg_widths[i] {
                0 => 0,
                64 => u64::MAX,
                w => (1u64 << w) - 1,
            };
            total += ((out.regs[i] ^ c.output.regs[i]) & mask).count_ones() as u64;
        }
        total += Flag::ALL.iter().filter(|&&f| lo.flags.get(f) && out.flags.get(f) != c.output.flags.get(f)).count() as u64;
        if lo.heap_out {
            total += out.mem.iter().zip(&c.output.mem).map(|(x, y)| (x ^ y).count_ones() as u64).sum::<u64>();
        }
    }
    total as f64 / suite.cases.len() as f64
}

/// A claimed improvement, checked from scratch: it parses, the verifier and
/// the exhaustive oracle both accept it, and it is strictly cheaper.
fn recheck_claim(entry: &DatasetEntry, rewrite: &str, against: f64) -> Result<f64, String> {
    let p = parse_rewrite(rewrite)
        .or_else(|| parse(rewrite).ok())
        .ok_or_else(|| format!("{}: rewrite does not parse", entry.id))?;
    if !verify(&p, &entry.f_s, &entry.suite, &entry.live_out, &VerifyConfig::default()).is_equivalent() {
        return Err(format!("{}: verifier rejects the rewrite", entry.id));
    }
    if let Some(w) = oracle_difference(&entry.f_s, &p, &entry.live_out) {
        return Err(format!("{}: oracle finds a difference at {w:?}", entry.id));
    }
    let (c_all, c_exe) = oracle_costs(&p, &entry.suite, &LatencyTable::default());
    let c = c_all + c_exe;
    if c >= against {
        return Err(format!("{}: cost {c} is not below {against}", entry.id));
    }
    Ok(c)
}

// ---------------------------------------------------------------------------
// Core criteria.

fn corpus_entries(corpus: &Path) -> Result<Vec<DatasetEntry>, String> {
    let mut all = Vec::new();
    for s in [Split::Test, Split::Dev, Split::Train] {
        all.extend(read_split(corpus, s).map_err(|e| e.to_string())?);
    }
    Ok(all)
}

struct MutantPool {
    mutants: Vec<(MutantKind, usize, Program)>,
    rejected_by_oracle: usize,
}

/// 100 mutants of reference programs that the oracle proves different from
/// their spec: 24 of each single-site kind plus 4 rare-input mutants.
fn mutant_pool(entries: &[DatasetEntry]) -> MutantPool {
    let kinds = [MutantKind::OperatorFlip, MutantKind::ConstantPerturbation, MutantKind::ConditionFlip, MutantKind::BranchDeletion];
    let mut quota: HashMap<MutantKind, usize> = kinds.iter().map(|&k| (k, 24)).collect();
    quota.insert(MutantKind::RareInput, 4);
    let mut pool = MutantPool { mutants: Vec::new(), rejected_by_oracle: 0 };
    for fill in [false, true] {
        for (ei, e) in entries.iter().enumerate() {
            if pool.mutants.len() == 100 {
                return pool;
            }
            let open = |q: &HashMap<MutantKind, usize>, k| fill || q[&k] > 0;
            if open(&quota, MutantKind::RareInput) && !fill {
                let result = (0..NUM_REGS).map(Reg::from_index).find(|r| e.live_out.reg_widths[r.index()] >= 8);
                if let Some(m) = result.and_then(|r| rare_input_mutant(&e.f_ref, Reg::Rdi, 0x5b, r)) {
                    if oracle_difference(&e.f_s, &m, &e.live_out).is_some() {
                        pool.mutants.push((MutantKind::RareInput, ei, m));
                        *quota.get_mut(&MutantKind::RareInput).unwrap() -= 1;
                        continue;
                    }
                }
            }
            let all = semantic_mutants(&e.f_ref);
            for k in kinds {
                if !open(&quota, k) || pool.mutants.len() == 100 {
                    continue;
                }
                let of_kind: Vec<_> = all.iter().filter(|m| m.kind == k).collect();
                if of_kind.is_empty() {
                    continue;
                }
                let m = of_kind[ei % of_kind.len()];
                if pool.mutants.iter().any(|(_, j, p)| *j == ei && *p == m.program) {
                    continue;
                }
                if oracle_difference(&e.f_s, &m.program, &e.live_out).is_none() {
                    pool.rejected_by_oracle += 1;
                    continue;
                }
                pool.mutants.push((k, ei, m.program.clone()));
                let q = quota.get_mut(&k).unwrap();
                *q = q.saturating_sub(1);
            }
        }
    }
    pool
}

fn preserving_pool(entries: &[DatasetEntry]) -> (Vec<(TransformKind, usize, Program)>, usize) {
    let mut quota: HashMap<TransformKind, usize> =
        [(TransformKind::LabelRename, 34), (TransformKind::Swap, 33), (TransformKind::DeadCode, 33)].into_iter().collect();
    let mut out = Vec::new();
    let mut oracle_rejects = 0;
    for fill in [false, true] {
        for (ei, e) in entries.iter().enumerate() {
            let ts = preserving_transforms(&e.f_ref, &e.live_out);
            let mut taken: HashSet<TransformKind> = HashSet::new();
            for (k, p) in ts {
                if out.len() == 100 {
                    return (out, oracle_rejects);
                }
                if taken.contains(&k) || !(fill || quota[&k] > 0) {
                    continue;
                }
                if oracle_difference(&e.f_s, &p, &e.live_out).is_some() {
                    oracle_rejects += 1;
                    continue;
                }
                taken.insert(k);
                *quota.get_mut(&k).unwrap() = quota[&k].saturating_sub(1);
                out.push((k, ei, p));
            }
        }
    }
    (out, oracle_rejects)
}

fn criteria_1_2(entries: &[DatasetEntry]) -> (Outcome, Outcome) {
    let t = Instant::now();
    let cfg = VerifyConfig::default();
    let pool = mutant_pool(entries);
    let (transforms, transform_oracle_rejects) = preserving_pool(entries);
    let mut accepted_mutants = Vec::new();
    let mut suite_only = 0;
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    let t2 = Instant::now();
    for (k, ei, m) in &pool.mutants {
        let e = &entries[*ei];
        *kinds.entry(format!("{k:?}")).or_default() += 1;
        if verify(m, &e.f_s, &e.suite, &e.live_out, &cfg).is_equivalent() {
            accepted_mutants.push(format!("{} {k:?}", e.id));
        }
        if check_testsuite(m, &e.suite, &e.live_out).is_equivalent()
            && !check_exhaustive(m, &e.f_s, &e.live_out, &cfg).is_equivalent()
        {
            suite_only += 1;
        }
    }
    let c2_secs = t2.elapsed().as_secs_f64();
    let mut rejected_transforms = Vec::new();
    let mut tkinds: BTreeMap<String, usize> = BTreeMap::new();
    for (k, ei, p) in &transforms {
        let e = &entries[*ei];
        *tkinds.entry(format!("{k:?}")).or_default() += 1;
        if !verify(p, &e.f_s, &e.suite, &e.live_out, &cfg).is_equivalent() {
            rejected_transforms.push(format!("{} {k:?}", e.id));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok1 = pool.mutants.len() == 100
        && transforms.len() == 100
        && accepted_mutants.is_empty()
        && rejected_transforms.is_empty()
        && transform_oracle_rejects == 0;
    let c1 = judged(
        ok1,
        format!(
            "{} mutants {:?}, {} rejected; {} transforms {:?}, {} accepted; oracle-equivalent mutants skipped {}; \
             transforms the oracle disputes {}; accepted mutants {:?}; rejected transforms {:?}; {secs:.1}s on 1 core",
            pool.mutants.len(),
            kinds,
            pool.mutants.len() - accepted_mutants.len(),
            transforms.len(),
            tkinds,
            transforms.len() - rejected_transforms.len(),
            pool.rejected_by_oracle,
            transform_oracle_rejects,
            accepted_mutants,
            rejected_transforms,
        ),
    );
    let c2 = judged(
        suite_only >= 1,
        format!("{suite_only} mutants pass the K=32 suite but fail the exhaustive stage; {c2_secs:.1}s"),
    );
    (c1, c2)
}

fn relabel(p: &Program) -> Program {
    let names: HashMap<String, String> =
        p.instructions.iter().filter_map(|i| i.label_name()).map(|l| (l.to_string(), format!("{l}_renamed"))).collect();
    p.rename_labels(&names)
}

fn dead_prefixed(p: &Program) -> Program {
    let mut text = String::from(".f:\n  jmp .Lskip\n  addq %rdi, %rax\n  imulq %rsi, %rax\n.Lskip:\n");
    text.push_str(&p.body_text());
    parse(&text).expect("prefixed program parses")
}

fn criterion_3() -> Outcome {
    let lat = LatencyTable::default();
    let mut programs = 0;
    let mut bad = Vec::new();
    let mut seed = 0u64;
    while programs < 200 && seed < 10_000 {
        seed += 1;
        let task = gen_task(seed);
        let (Ok(naive), Ok(opt)) = (compile_naive(&task), compile_opt(&task, result_reg_for(seed, DatagenConfig::default().rax_result_prob))) else {
            continue;
        };
        let Ok(suite) = generate_suite(&naive, 32, seed) else { continue };
        for p in [naive.clone(), opt] {
            if programs == 200 {
                break;
            }
            programs += 1;
            let r = cost(&p, &suite, &lat);
            let (c_all, c_exe) = oracle_costs(&p, &suite, &lat);
            if r.c_total != r.c_all + r.c_exe || r.c_all != c_all || r.c_exe != c_exe {
                bad.push(format!("seed {seed}: sum {r:?} vs oracle ({c_all}, {c_exe})"));
            }
            // delete an instruction no test case reaches
            let q = dead_prefixed(&p);
            let reached: HashSet<u32> =
                suite.cases.iter().flat_map(|c| execute(&q, &c.input, DEFAULT_FUEL, None).executed).collect();
            let victim = (0..q.instructions.len())
                .find(|&i| !reached.contains(&(i as u32)) && !q.instructions[i].is_label() && q.instructions[i].op != Opcode::Ret);
            match victim {
                None => bad.push(format!("seed {seed}: no unreached instruction")),
                Some(i) => {
                    let mut code = q.instructions.clone();
                    code.remove(i);
                    let d = Program::new(q.name.clone(), code).expect("deletion keeps labels");
                    let (before, after) = (cost(&q, &suite, &lat), cost(&d, &suite, &lat));
                    if !(after.c_all < before.c_all && after.c_exe == before.c_exe) {
                        bad.push(format!("seed {seed}: deletion {before:?} -> {after:?}"));
                    }
                }
            }
            let rl = relabel(&p);
            if cost(&rl, &suite, &lat) != r {
                bad.push(format!("seed {seed}: relabeling changed cost"));
            }
        }
    }
    judged(programs == 200 && bad.is_empty(), format!("{programs} programs, {} violations {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>()))
}

fn criterion_4(entries: &[DatasetEntry]) -> Outcome {
    let rl = RlConfig::default();
    let mut notes = Vec::new();
    let mut ok = rl.lambda == 50_000.0 && rl.bit_rate == 100.0 && rl.clip == 100_000.0;
    // j = c for a correct candidate
    let a = objective_from_parts(37.5, 0, 0.0, &rl);
    ok &= a.j == 37.5 && !a.clipped;
    // j = c + 50,000 + 100 * bits for an incorrect one
    let b = objective_from_parts(40.0, 1, 3.25, &rl);
    ok &= b.j == 40.0 + 50_000.0 + 100.0 * 3.25 && !b.clipped;
    // clipped at 100,000
    let c = objective_from_parts(40.0, 1, 600.0, &rl);
    ok &= c.j == 100_000.0 && c.clipped;
    notes.push(format!("examples j = {}, {}, {}", a.j, b.j, c.j));

    // the same three cases on real programs
    let lat = LatencyTable::default();
    let vcfg = VerifyConfig::default();
    let e = &entries[0];
    let (c_all, c_exe) = oracle_costs(&e.f_ref, &e.suite, &lat);
    let good = objective(Some(&e.f_ref), &e.f_s, &e.suite, &e.live_out, &vcfg, &lat, &rl);
    ok &= good.j == c_all + c_exe;
    let wrong = entries.iter().find_map(|e| {
        let m = semantic_mutants(&e.f_ref).into_iter().find(|m| {
            !check_testsuite(&m.program, &e.suite, &e.live_out).is_equivalent()
                && matches!(execute(&m.program, &e.suite.cases[0].input, DEFAULT_FUEL, None).halted, Halt::Ret)
        })?;
        Some((e, m.program))
    });
    if let Some((e, m)) = wrong {
        let (ca, ce) = oracle_costs(&m, &e.suite, &lat);
        let bits = oracle_mean_bits(&m, &e.suite, &e.live_out);
        let expect = (ca + ce + 50_000.0 + 100.0 * bits).min(100_000.0);
        let got = objective(Some(&m), &e.f_s, &e.suite, &e.live_out, &vcfg, &lat, &rl);
        ok &= (got.j - expect).abs() <= 1e-9 * expect;
        notes.push(format!("wrong candidate j = {} (oracle {expect})", got.j));
    } else {
        ok = false;
        notes.push("no wrong candidate found".into());
    }
    let none = objective(None, &e.f_s, &e.suite, &e.live_out, &vcfg, &lat, &rl);
    ok &= none.j == 100_000.0;
    judged(ok, notes.join("; "))
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::tiny();
    let (dim, layers) = (cfg.model_dim, cfg.layers);
    let mut m: Model<f64> = match Model::new(cfg, 11) {
        Ok(m) => m,
        Err(e) => return failed(e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in m.params.iter_mut() {
        *p += rng.gen_range(-0.1..0.1);
    }
    let (s1, t1) = (vec![BOS, 40, 41, 42, 80, EOS], vec![BOS, 40, 90, 100, EOS]);
    let (s2, t2) = (vec![BOS, 55, 56, EOS], vec![BOS, 70, 71, 72, 73, EOS]);
    let batch = [
        Example::xent(&s1, &t1),
        Example { src: &s2, tgt: &t2, objective: Objective::Reinforce { advantage: -0.7, beta: 0.01 } },
    ];
    match check_gradients(&m, &batch, 1e-5) {
        Err(e) => failed(e.to_string()),
        Ok(report) => {
            let worst = report.iter().map(|b| b.rel_error).fold(0.0, f64::max);
            let covered = report.len() == m.layout.blocks.len();
            judged(
                covered && worst <= 1e-3,
                format!("dim {dim}, {layers} layer, {} blocks, worst relative error {worst:.2e}, {:.1}s", report.len(), t.elapsed().as_secs_f64()),
            )
        }
    }
}

const TRIVIAL_REFERENCES: [&str; 10] = [
    ".f:\n  retq",
    ".f:\n  xorl %eax, %eax\n  retq",
    ".f:\n  movl $0x1, %eax\n  retq",
    ".f:\n  movq $0x0, %rax\n  retq",
    ".f:\n  subq %rax, %rax\n  retq",
    ".f:\n  andl $0x0, %eax\n  retq",
    ".f:\n  movq $0x1, %rax\n  retq",
    ".f:\n  xorq %rax, %rax\n  addq $0x1, %rax\n  retq",
    ".f:\n  movq %rax, %rax\n  retq",
    ".f:\n  movq %rdi, %rdi\n  retq",
];

fn criterion_11() -> Outcome {
    let cfg = VerifyConfig::default();
    let mut pairs = Vec::new();
    let mut seed = 0u64;
    while pairs.len() < 100 && seed < 10_000 {
        seed += 1;
        let task = gen_task(seed);
        let (Ok(f_s), Ok(f_ref)) = (compile_naive(&task), compile_opt(&task, result_reg_for(seed, DatagenConfig::default().rax_result_prob))) else {
            continue;
        };
        let Ok(suite) = generate_suite(&f_s, 32, seed) else { continue };
        pairs.push((f_s, f_ref, suite));
    }
    let mut reached = 0;
    let mut outcomes: BTreeMap<String, usize> = BTreeMap::new();
    let mut iters: BTreeMap<usize, usize> = BTreeMap::new();
    for (f_s, f_ref, suite) in &pairs {
        let r = infer_live_out_from(LiveOut::ALL_REGS_FLAGS, f_s, f_ref, suite, &cfg, 8);
        let key = match &r {
            Ok((_, st)) => {
                *iters.entry(st.iterations).or_default() += 1;
                "kept".to_string()
            }
            Err(d) => d.name().to_string(),
        };
        if !matches!(r, Err(Discard::BudgetExhausted) | Err(Discard::ReferenceFault)) {
            reached += 1;
        }
        *outcomes.entry(key).or_default() += 1;
    }
    let mut caught = 0;
    let mut missed = Vec::new();
    for (i, text) in TRIVIAL_REFERENCES.iter().enumerate() {
        let (f_s, _, suite) = &pairs[i];
        let trivial = parse(text).expect("trivial reference parses");
        match infer_live_out_from(LiveOut::ALL_REGS_FLAGS, f_s, &trivial, suite, &cfg, 8) {
            Err(Discard::Spurious) => caught += 1,
            other => missed.push(format!("{text:?}: {:?}", other.map(|(lo, _)| lo.to_string()))),
        }
    }
    judged(
        pairs.len() == 100 && reached >= 95 && caught == 10,
        format!(
            "fixed point in {reached}/{} pairs (outcomes {outcomes:?}, iterations of kept pairs {iters:?}); \
             {caught}/10 trivial references discarded as spurious {missed:?}",
            pairs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Pipeline criteria, driven through the command-line binary.

fn silo(args: &[&str], log: &Path) -> Result<(), String> {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_silo")).args(args).output().map_err(|e| e.to_string())?;
    let mut text = String::from_utf8_lossy(&out.stdout).into_owned();
    text.push_str(&String::from_utf8_lossy(&out.stderr));
    let _ = writeln!(text, "[{:.1}s]", t.elapsed().as_secs_f64());
    fs::write(log, &text).map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`silo {}` failed ({}); see {}", args.join(" "), out.status, log.display()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn latest_checkpoint(run: &Path) -> Result<PathBuf, String> {
    let mut v: Vec<PathBuf> = fs::read_dir(run.join("checkpoints"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    v.sort();
    v.pop().ok_or_else(|| format!("no checkpoints in {}", run.display()))
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_6(scale: &Scale, pre: &Path, corpus: &Path, secs: f64, actuals: &mut Value) -> Outcome {
    let report = match read_json(&pre.join("report.json")) {
        Ok(r) => r,
        Err(e) => return failed(e),
    };
    let Some(last) = report["points"].as_array().and_then(|a| a.last()).cloned() else {
        return failed("report has no evaluation points");
    };
    let acc = last["token_accuracy"].as_f64().unwrap_or(0.0);
    let exact = last["exact_match"].as_f64().unwrap_or(0.0);
    // greedy decoding of the held-out split, independently of the report
    let greedy_exact = match (latest_checkpoint(pre), read_split(corpus, Split::Dev)) {
        (Ok(ck), Ok(dev)) => match checkpoint::load(&ck) {
            Ok((m, _)) => {
                let data = Dataset::new(dev);
                let hits = (0..data.len()).filter(|&i| greedy(&m, &data.src[i], m.cfg.max_len).tokens == data.tgt[i]).count();
                hits as f64 / data.len() as f64
            }
            Err(e) => return failed(e.to_string()),
        },
        (Err(e), _) => return failed(e),
        (_, Err(e)) => return failed(e.to_string()),
    };
    actuals["pretrain"] = json!({
        "steps": last["step"], "token_accuracy": acc, "exact_match": exact,
        "greedy_exact_match": greedy_exact, "seconds": secs,
    });
    scale.training(
        acc >= 0.9 && exact >= 0.25 && (greedy_exact - exact).abs() < 1e-9,
        format!(
            "step {}: held-out token accuracy {:.2}%, exact match {:.2}% (greedy re-decode {:.2}%), {:.0}s on 1 core",
            last["step"],
            100.0 * acc,
            100.0 * exact,
            100.0 * greedy_exact,
            secs
        ),
    )
}

fn criterion_10(scale: &Scale, pre: &Path, corpus: &Path) -> Outcome {
    let t = Instant::now();
    let (ck, entries) = match (latest_checkpoint(pre), read_split(corpus, Split::Train)) {
        (Ok(c), Ok(e)) => (c, e),
        (Err(e), _) => return failed(e),
        (_, Err(e)) => return failed(e.to_string()),
    };
    let model = match checkpoint::load(&ck) {
        Ok((m, _)) => m,
        Err(e) => return failed(e.to_string()),
    };
    let ev = LocalEvaluator::new(&entries, VerifyConfig::default());
    let data = Dataset::new(entries);
    let cfg = SiloConfig::default();
    let sched = cfg.schedule(model.cfg.model_dim);
    let n = scale.lockstep_steps;
    let mut seq = TrainState::new(model.clone(), &data, sched.clone());
    let mut seq_losses = Vec::new();
    for _ in 0..n {
        match silo_step(&mut seq, &data, &ev, &cfg) {
            Ok(r) => seq_losses.push(r.loss),
            Err(e) => return failed(e.to_string()),
        }
    }
    let mut rt = TrainState::new(model, &data, sched);
    let mut rt_losses = Vec::new();
    if let Err(e) = run_learner(&mut rt, &data, &ev, &Algo::Silo(cfg), &RuntimeConfig::lockstep(), n as u64, &mut |_, r| {
        rt_losses.push(r.loss());
        Ok(())
    }) {
        return failed(e.to_string());
    }
    let same = seq.replacements == rt.replacements && seq.model.params == rt.model.params && seq_losses == rt_losses;
    judged(
        same,
        format!(
            "{n} steps: sequential loop logged {} replacements, lockstep runtime {}; logs, losses and parameters {}; {:.0}s",
            seq.replacements.len(),
            rt.replacements.len(),
            if same { "identical" } else { "differ" },
            t.elapsed().as_secs_f64()
        ),
    )
}

/// The dev series from a run's metrics, including the step-0 point.
fn dev_series(run: &Path) -> Result<Vec<(u64, f64)>, String> {
    let mut r = csv::Reader::from_path(run.join("metrics.csv")).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row.map_err(|e| e.to_string())?;
        let step: u64 = row[0].parse().map_err(|_| "bad step".to_string())?;
        if let Ok(pv) = row[3].parse::<f64>() {
            out.insert(step, pv);
        }
    }
    Ok(out.into_iter().collect())
}

fn losses_finite(run: &Path) -> Result<(usize, bool), String> {
    let mut r = csv::Reader::from_path(run.join("metrics.csv")).map_err(|e| e.to_string())?;
    let (mut n, mut finite) = (0, true);
    for row in r.records() {
        let row = row.map_err(|e| e.to_string())?;
        if !row[1].is_empty() {
            n += 1;
            finite &= row[1].parse::<f64>().map(f64::is_finite).unwrap_or(false);
        }
    }
    Ok((n, finite))
}

struct EvalRow {
    superoptimized: usize,
    proportion: f64,
    entries: usize,
}

/// Reads the summary table and re-checks every claimed superoptimization.
fn eval_rows(out: &Path, test: &[DatasetEntry]) -> Result<(BTreeMap<String, EvalRow>, BTreeMap<String, Vec<String>>), String> {
    let by_id: HashMap<&str, &DatasetEntry> = test.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut r = csv::Reader::from_path(out.join("summary.csv")).map_err(|e| e.to_string())?;
    let mut rows = BTreeMap::new();
    let mut problems = BTreeMap::new();
    for row in r.records() {
        let row = row.map_err(|e| e.to_string())?;
        let label = row[0].to_string();
        let entries: usize = row[2].parse().unwrap_or(0);
        let superoptimized: usize = row[3].parse().unwrap_or(0);
        let proportion: f64 = row[4].parse().unwrap_or(0.0);
        let text = fs::read_to_string(out.join(format!("{label}.entries.jsonl"))).map_err(|e| e.to_string())?;
        let mut bad = Vec::new();
        let mut claims = 0;
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if v["superoptimized"] != Value::Bool(true) {
                continue;
            }
            claims += 1;
            let id = v["id"].as_str().unwrap_or_default();
            let Some(entry) = by_id.get(id) else {
                bad.push(format!("{id}: unknown entry"));
                continue;
            };
            let best = v["best"].as_u64().unwrap_or(u64::MAX) as usize;
            let rewrite = v["candidates"][best]["rewrite"].as_str().unwrap_or_default();
            if let Err(e) = recheck_claim(entry, rewrite, entry.cost_ref) {
                bad.push(e);
            }
        }
        if claims != superoptimized {
            bad.push(format!("{claims} claims in the entry log, {superoptimized} in the summary"));
        }
        problems.insert(label.clone(), bad);
        rows.insert(label, EvalRow { superoptimized, proportion, entries });
    }
    Ok((rows, problems))
}

fn quarters(series: &[(u64, f64)]) -> Option<(f64, f64)> {
    let last = series.last()?.0;
    let mean = |keep: &dyn Fn(u64) -> bool| {
        let v: Vec<f64> = series.iter().filter(|(s, _)| keep(*s)).map(|(_, x)| *x).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some((mean(&|s| 4 * s <= last)?, mean(&|s| 4 * s >= 3 * last)?))
}

fn criterion_8(run: &Path, train: &[DatasetEntry]) -> Outcome {
    let by_id: HashMap<&str, &DatasetEntry> = train.iter().map(|e| (e.id.as_str(), e)).collect();
    let text = match fs::read_to_string(run.join("replacements.jsonl")) {
        Ok(t) => t,
        Err(e) => return failed(e.to_string()),
    };
    let mut current: HashMap<String, f64> = HashMap::new();
    let mut bad = Vec::new();
    let mut n = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        n += 1;
        let v: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return failed(e.to_string()),
        };
        let id = v["entry_id"].as_str().unwrap_or_default().to_string();
        let (old, new) = (v["old_cost"].as_f64().unwrap_or(f64::NAN), v["new_cost"].as_f64().unwrap_or(f64::NAN));
        let Some(entry) = by_id.get(id.as_str()) else {
            bad.push(format!("{id}: unknown entry"));
            continue;
        };
        let expected_old = *current.get(&id).unwrap_or(&entry.cost_ref);
        if old != expected_old || !(new < old) {
            bad.push(format!("{id}: chain {expected_old} -> logged {old} -> {new}"));
        }
        match recheck_claim(entry, v["rewrite"].as_str().unwrap_or_default(), old) {
            Ok(c) if c == new => {}
            Ok(c) => bad.push(format!("{id}: logged cost {new}, recomputed {c}")),
            Err(e) => bad.push(e),
        }
        current.insert(id, new);
    }
    judged(
        bad.is_empty(),
        format!("{n} replacements over {} entries, {} re-verify with strictly decreasing chains {:?}", current.len(), n - bad.len().min(n), bad.iter().take(3).collect::<Vec<_>>()),
    )
}

struct Pipeline {
    outcomes: BTreeMap<u8, Outcome>,
    actuals: Value,
}

fn run_pipeline(scale: &Scale, work: &Path, core: &mut dyn FnMut(&Path) -> Result<(), String>) -> Pipeline {
    let mut out = Pipeline { outcomes: BTreeMap::new(), actuals: json!({ "full_scale": scale.full }) };
    let pipeline_ids = [6u8, 7, 8, 9, 10];
    let corpus = work.join("corpus");
    let fail_all = |out: &mut Pipeline, ids: &[u8], msg: &str| {
        for id in ids {
            out.outcomes.entry(*id).or_insert_with(|| failed(msg));
        }
    };
    let t = Instant::now();
    let (tr, dv, te) = (scale.train.to_string(), scale.dev.to_string(), scale.test.to_string());
    if let Err(e) = silo(&["datagen", "--out", p(&corpus), "--train", &tr, "--dev", &dv, "--test", &te], &work.join("datagen.log")) {
        fail_all(&mut out, &[1, 2, 4, 6, 7, 8, 9, 10], &e);
        return out;
    }
    out.actuals["datagen_seconds"] = json!(t.elapsed().as_secs_f64());
    if let Err(e) = core(&corpus) {
        fail_all(&mut out, &[1, 2, 4], &e);
    }

    let pre = work.join("pre");
    let t = Instant::now();
    let steps = scale.pretrain_steps.to_string();
    let every = scale.eval_every.to_string();
    if let Err(e) = silo(
        &["pretrain", "--corpus", p(&corpus), "--run", p(&pre), "--steps", &steps, "--eval-every", &every, "--checkpoint-every", &every],
        &work.join("pretrain.log"),
    ) {
        fail_all(&mut out, &pipeline_ids, &e);
        return out;
    }
    let secs = t.elapsed().as_secs_f64();
    out.outcomes.insert(6, criterion_6(scale, &pre, &corpus, secs, &mut out.actuals));
    out.outcomes.insert(10, criterion_10(scale, &pre, &corpus));

    let ft = |algo: &str, dev_every: u64| -> (PathBuf, Result<f64, String>) {
        let run = work.join(algo);
        let t = Instant::now();
        let (steps, de, ce, ds) =
            (scale.finetune_steps.to_string(), dev_every.to_string(), scale.checkpoint_every.to_string(), scale.dev_size.to_string());
        let r = silo(
            &[
                "finetune", "--algo", algo, "--corpus", p(&corpus), "--init", p(&pre), "--run", p(&run), "--steps", &steps,
                "--dev-every", &de, "--checkpoint-every", &ce, "--dev-size", &ds,
            ],
            &work.join(format!("{algo}.log")),
        );
        (run, r.map(|_| t.elapsed().as_secs_f64()))
    };
    let (silo_run, silo_secs) = ft("silo", scale.silo_dev_every);
    let (rl_run, rl_secs) = ft("reinforce", scale.rl_dev_every);
    let eval_dir = work.join("eval");
    let models = [
        format!("pretrain={}", p(&latest_checkpoint(&pre).unwrap_or_default())),
        format!("silo={}", p(&silo_run)),
        format!("reinforce={}", p(&rl_run)),
    ];
    let mut args = vec!["eval", "--corpus", p(&corpus), "--out", p(&eval_dir)];
    let ok_models: Vec<&String> = models
        .iter()
        .filter(|m| (m.starts_with("silo=") && silo_secs.is_ok()) || (m.starts_with("reinforce=") && rl_secs.is_ok()) || m.starts_with("pretrain="))
        .collect();
    for m in &ok_models {
        args.push("--model");
        args.push(m);
    }
    let t = Instant::now();
    let evaluated = silo(&args, &work.join("eval.log"));
    out.actuals["eval_seconds"] = json!(t.elapsed().as_secs_f64());
    let test = read_split(&corpus, Split::Test).unwrap_or_default();
    let train = read_split(&corpus, Split::Train).unwrap_or_default();
    let table = evaluated.and_then(|_| eval_rows(&eval_dir, &test));
    let (rows, problems) = match table {
        Ok(t) => t,
        Err(e) => {
            fail_all(&mut out, &[7, 8, 9], &e);
            return out;
        }
    };
    for (label, r) in &rows {
        out.actuals["eval"][label] = json!({
            "entries": r.entries, "superoptimized": r.superoptimized, "proportion": r.proportion,
            "recheck_failures": problems[label],
        });
    }

    // SILO
    match &silo_secs {
        Err(e) => fail_all(&mut out, &[7, 8], e),
        Ok(secs) => {
            let series = dev_series(&silo_run).unwrap_or_default();
            let selection = read_json(&silo_run.join("selection.json")).ok();
            out.actuals["silo"] = json!({ "seconds": secs, "dev_series": series, "selection": selection });
            let (pre_row, silo_row) = (&rows["pretrain"], &rows["silo"]);
            let q = quarters(&series);
            let (first, last) = q.unwrap_or((f64::NAN, f64::NAN));
            let rechecked = problems["silo"].is_empty();
            out.outcomes.insert(
                7,
                scale.training(
                    silo_row.superoptimized > pre_row.superoptimized && rechecked && last > first,
                    format!(
                        "test superoptimized: silo {}/{} ({:.2}%) vs pretrain {}/{} ({:.2}%); silo claims re-checked: {} {:?}; \
                         dev series first-quarter mean {:.4}, final-quarter mean {:.4} over {} points; selected step {}; {:.0}s",
                        silo_row.superoptimized,
                        silo_row.entries,
                        100.0 * silo_row.proportion,
                        pre_row.superoptimized,
                        pre_row.entries,
                        100.0 * pre_row.proportion,
                        if rechecked { "all" } else { "NOT all" },
                        problems["silo"].iter().take(3).collect::<Vec<_>>(),
                        first,
                        last,
                        series.len(),
                        selection.as_ref().map(|s| s["step"].clone()).unwrap_or(Value::Null),
                        secs
                    ),
                ),
            );
            out.outcomes.insert(8, criterion_8(&silo_run, &train));
        }
    }

    // REINFORCE
    match &rl_secs {
        Err(e) => fail_all(&mut out, &[9], e),
        Ok(secs) => {
            let (n, finite) = losses_finite(&rl_run).unwrap_or((0, false));
            let rl = &rows["reinforce"];
            let rechecked = problems["reinforce"].is_empty() && problems["pretrain"].is_empty();
            let three = ["pretrain", "silo", "reinforce"].iter().all(|l| rows.contains_key(*l)) && rows.len() == 3;
            out.actuals["reinforce"] = json!({ "seconds": secs, "steps_logged": n, "finite": finite });
            out.outcomes.insert(
                9,
                scale.training(
                    n as u64 == scale.finetune_steps && finite && three && rechecked,
                    format!(
                        "{n} steps, losses {}; summary rows {:?}; reinforce {}/{} ({:.2}%) superoptimized, claims re-checked: {}; {:.0}s",
                        if finite { "all finite" } else { "NOT all finite" },
                        rows.keys().collect::<Vec<_>>(),
                        rl.superoptimized,
                        rl.entries,
                        100.0 * rl.proportion,
                        if rechecked { "all" } else { "NOT all" },
                        secs
                    ),
                ),
            );
        }
    }
    out
}

fn main() {
    let scale = Scale::from_env();
    let work = Path::new(env!("CARGO_TARGET_TMPDIR")).join(if scale.full { "acceptance-full" } else { "acceptance-quick" });
    let _ = fs::remove_dir_all(&work);
    fs::create_dir_all(&work).expect("work directory");
    println!("acceptance: {} scale, artifacts in {}", if scale.full { "full" } else { "quick" }, work.display());

    let mut lines: BTreeMap<u8, Outcome> = BTreeMap::new();
    let show = |id: u8, o: &Outcome| {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Smoke => "SMOKE",
        };
        println!("criterion {id:>2}: {tag}  {}", o.detail);
    };

    let c3 = criterion_3();
    show(3, &c3);
    lines.insert(3, c3);
    let c5 = criterion_5();
    show(5, &c5);
    lines.insert(5, c5);
    let c11 = criterion_11();
    show(11, &c11);
    lines.insert(11, c11);

    let mut core_lines: Vec<(u8, Outcome)> = Vec::new();
    let mut core = |corpus: &Path| -> Result<(), String> {
        let entries = corpus_entries(corpus)?;
        let (c1, c2) = criteria_1_2(&entries);
        show(1, &c1);
        show(2, &c2);
        core_lines.push((1, c1));
        core_lines.push((2, c2));
        let c4 = criterion_4(&entries);
        show(4, &c4);
        core_lines.push((4, c4));
        Ok(())
    };
    let pipeline = run_pipeline(&scale, &work, &mut core);
    lines.extend(core_lines);
    for (id, o) in pipeline.outcomes {
        if !lines.contains_key(&id) {
            show(id, &o);
        }
        lines.entry(id).or_insert(o);
    }

    println!("acceptance summary:");
    for (id, o) in &lines {
        show(*id, o);
    }
    let report = json!({
        "criteria": lines.iter().map(|(id, o)| json!({
            "id": id,
            "status": match o.status { Status::Pass => "pass", Status::Fail => "fail", Status::Smoke => "smoke" },
            "detail": o.detail,
        })).collect::<Vec<_>>(),
        "actuals": pipeline.actuals,
    });
    let _ = fs::write(work.join("report.json"), serde_json::to_string_pretty(&report).unwrap_or_default());
    let failures = lines.values().filter(|o| o.status == Status::Fail).count();
    if failures > 0 || lines.len() != 11 {
        println!("acceptance: {failures} criteria failed");
        std::process::exit(1);
    }
}
