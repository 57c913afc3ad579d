//! The three operations behind `www/index.html`. Each takes program text and
//! returns a JSON string; errors come back as `{"error": ...}`.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use silo_core::cost::{cost, LatencyTable};
use silo_core::isa::{parse, tokenize, Program, Reg, Width};
use silo_core::machine::{execute, Flag, Halt, LiveOut, MachineState, DEFAULT_FUEL};
use silo_core::testgen::generate_suite;
use silo_core::verify::{verify, Verdict, VerifyConfig};

const SUITE_SIZE: usize = 32;
const SUITE_SEED: u64 = 1;

fn program(text: &str) -> Result<Program, String> {
    parse(text).map_err(|e| e.to_string())
}

fn render(r: Result<Value, String>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

fn live_out(name: &str) -> Result<LiveOut, String> {
    let w = match name {
        "al" => Width::B8,
        "ax" => Width::B16,
        "eax" => Width::B32,
        "rax" => Width::B64,
        _ => return Err(format!("unknown result register `{name}`")),
    };
    Ok(LiveOut::only(Reg::Rax, w, false))
}

/// Token count and cost, with the program's own test suite as workload.
pub fn analyze_json(text: &str) -> Result<Value, String> {
    let p = program(text)?;
    let suite = generate_suite(&p, SUITE_SIZE, SUITE_SEED).map_err(|e| e.to_string())?;
    let c = cost(&p, &suite, &LatencyTable::default());
    let tokens = tokenize(&p).map(|t| t.0.len()).ok();
    Ok(json!({
        "instructions": p.instructions.iter().filter(|i| !i.is_label()).count(),
        "tokens": tokens,
        "c_all": c.c_all,
        "c_exe": c.c_exe,
        "c_total": c.c_total,
    }))
}

/// Runs on `rdi`/`rsi` with every other register zero.
pub fn run_json(text: &str, rdi: i64, rsi: i64) -> Result<Value, String> {
    let p = program(text)?;
    let input = MachineState::default().with_reg(Reg::Rdi, rdi as u64).with_reg(Reg::Rsi, rsi as u64);
    let t = execute(&p, &input, DEFAULT_FUEL, None);
    let halted = match t.halted {
        Halt::Ret => "ret".to_string(),
        Halt::FuelExhausted => "out of fuel".to_string(),
        Halt::Fault(f) => format!("fault: {f:?}"),
    };
    let flags: Vec<&str> = Flag::ALL.iter().filter(|f| t.final_state.flags.get(**f)).map(|f| f.name()).collect();
    Ok(json!({
        "halted": halted,
        "rax": t.final_state.reg(Reg::Rax) as i64,
        "eax": t.final_state.reg(Reg::Rax) as u32 as i32,
        "steps": t.executed.len(),
        "flags": flags,
    }))
}

/// Checks `candidate` against `spec` with `result` (al/ax/eax/rax) live.
pub fn check_json(spec: &str, candidate: &str, result: &str) -> Result<Value, String> {
    let s = program(spec)?;
    let c = program(candidate).map_err(|e| format!("candidate: {e}"))?;
    let lo = live_out(result)?;
    let suite = generate_suite(&s, SUITE_SIZE, SUITE_SEED).map_err(|e| e.to_string())?;
    let out = verify(&c, &s, &suite, &lo, &VerifyConfig::default());
    let lat = LatencyTable::default();
    let (cs, cc) = (cost(&s, &suite, &lat).c_total, cost(&c, &suite, &lat).c_total);
    let witness = match &out.verdict {
        Verdict::Counterexample(w) => Some(json!({ "rdi": w.reg(Reg::Rdi) as i64, "rsi": w.reg(Reg::Rsi) as i64 })),
        _ => None,
    };
    Ok(json!({
        "verdict": out.verdict.name(),
        "equivalent": out.is_equivalent(),
        "counterexample": witness,
        "spec_cost": cs,
        "candidate_cost": cc,
        "improvement": out.is_equivalent() && cc < cs,
    }))
}

#[wasm_bindgen]
pub fn analyze(text: &str) -> String {
    render(analyze_json(text))
}

#[wasm_bindgen]
pub fn run(text: &str, rdi: i64, rsi: i64) -> String {
    render(run_json(text, rdi, rsi))
}

#[wasm_bindgen]
pub fn check(spec: &str, candidate: &str, result: &str) -> String {
    render(check_json(spec, candidate, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ABS: &str = ".abs:\n  movl %edi, %eax\n  sarl $0x1f, %edi\n  xorl %edi, %eax\n  subl %edi, %eax\n  retq\n";

    #[test]
    fn analyze_reports_costs() {
        let v = analyze_json(ABS).unwrap();
        assert_eq!(v["instructions"], 5);
        assert_eq!(v["c_total"].as_f64(), Some(12.0));
    }

    #[test]
    fn run_computes_abs() {
        let v = run_json(ABS, -7, 0).unwrap();
        assert_eq!(v["halted"], "ret");
        assert_eq!(v["eax"], 7);
    }

    #[test]
    fn check_finds_counterexamples() {
        let v = check_json(ABS, ".f:\n  movl %edi, %eax\n  retq", "eax").unwrap();
        assert_eq!(v["equivalent"], false);
        assert!(v["counterexample"]["rdi"].as_i64().unwrap() < 0);
        let same = check_json(ABS, ABS, "eax").unwrap();
        assert_eq!(same["improvement"], false);
        assert_eq!(same["equivalent"], true);
        assert!(render(check_json(ABS, "nonsense", "eax")).contains("error"));
    }
}
