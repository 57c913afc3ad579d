//! Program mutations for exercising the verifier: single-site semantic
//! mutants (which usually change behaviour) and transforms that never do.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::isa::{Instruction, Opcode, Operand, Program, Reg, Width};
use crate::machine::LiveOut;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutantKind {
    OperatorFlip,
    ConstantPerturbation,
    ConditionFlip,
    BranchDeletion,
    /// Corrupts the result only when an input register holds one value.
    RareInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    LabelRename,
    Swap,
    DeadCode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mutant {
    pub kind: MutantKind,
    /// Index of the mutated instruction.
    pub site: usize,
    pub program: Program,
}

fn flipped_op(op: Opcode) -> Option<Opcode> {
    use Opcode::*;
    Some(match op {
        Add => Sub,
        Sub => Add,
        And => Or,
        Or => Xor,
        Xor => And,
        Shl => Shr,
        Shr => Sar,
        Sar => Shl,
        Imul => Add,
        Neg => Not,
        Not => Neg,
        Movz => Movs,
        Movs => Movz,
        _ => return None,
    })
}

fn flipped_cond(op: Opcode) -> Option<Opcode> {
    use Opcode::*;
    Some(match op {
        Je => Jne,
        Jne => Je,
        Jl => Jg,
        Jg => Jl,
        Sete => Setne,
        Setne => Sete,
        Setl => Setg,
        Setg => Setl,
        _ => return None,
    })
}

fn rebuild(p: &Program, code: Vec<Instruction>) -> Option<Program> {
    Program::new(p.name.clone(), code).ok()
}

/// Every single-site mutant of `p`, in instruction order.
pub fn semantic_mutants(p: &Program) -> Vec<Mutant> {
    let mut out = Vec::new();
    for (i, ins) in p.instructions.iter().enumerate() {
        let mut push = |kind, code: Vec<Instruction>| {
            if let Some(program) = rebuild(p, code) {
                out.push(Mutant { kind, site: i, program });
            }
        };
        if let Some(op) = flipped_op(ins.op) {
            let mut code = p.instructions.clone();
            code[i].op = op;
            if !matches!(op, Opcode::Movz | Opcode::Movs) {
                code[i].src_width = code[i].width;
            }
            push(MutantKind::OperatorFlip, code);
        }
        if let Some(k) = ins.operands.iter().position(|o| matches!(o, Operand::Imm(_))) {
            let mut code = p.instructions.clone();
            if let Operand::Imm(v) = &mut code[i].operands[k] {
                *v = v.wrapping_add(1);
            }
            push(MutantKind::ConstantPerturbation, code);
        }
        if let Some(op) = flipped_cond(ins.op) {
            let mut code = p.instructions.clone();
            code[i].op = op;
            push(MutantKind::ConditionFlip, code);
        }
        if ins.op.is_conditional_jump() {
            let mut code = p.instructions.clone();
            code.remove(i);
            push(MutantKind::BranchDeletion, code.clone());
            let mut taken = p.instructions.clone();
            taken[i].op = Opcode::Jmp;
            push(MutantKind::BranchDeletion, taken);
        }
    }
    out
}

/// Flips the low bit of `result` just before the final return when
/// `input == value` (64-bit compare), and leaves every other input alone.
pub fn rare_input_mutant(p: &Program, input: Reg, value: i8, result: Reg) -> Option<Program> {
    let ret = p.instructions.iter().rposition(|i| i.op == Opcode::Ret)?;
    let skip = ".Lrare".to_string();
    let guard = [
        Instruction::new(Opcode::Cmp, Width::B64, vec![Operand::Imm(value as i64), Operand::reg(input, Width::B64)]),
        Instruction::jump(Opcode::Jne, skip.clone()),
        Instruction::new(Opcode::Xor, Width::B64, vec![Operand::Imm(1), Operand::reg(result, Width::B64)]),
        Instruction::label(skip),
    ];
    let mut code = p.instructions.clone();
    code.splice(ret..ret, guard);
    rebuild(p, code)
}

/// Renames every label to a fresh name.
pub fn rename_labels(p: &Program) -> Option<Program> {
    let names: HashMap<String, String> = p
        .instructions
        .iter()
        .filter_map(|i| i.label_name())
        .map(|l| (l.to_string(), format!(".Lr_{}", l.trim_start_matches('.'))))
        .collect();
    (!names.is_empty()).then(|| p.rename_labels(&names))
}

#[derive(Default)]
struct Effects {
    reads: Vec<Reg>,
    writes: Vec<Reg>,
    reads_flags: bool,
    writes_flags: bool,
    memory: bool,
}

fn effects(ins: &Instruction) -> Effects {
    let mut e = Effects {
        reads_flags: ins.op.reads_flags(),
        writes_flags: ins.op.writes_flags(),
        memory: ins.touches_memory(),
        ..Effects::default()
    };
    for o in &ins.operands {
        match o {
            Operand::Reg(r) => e.reads.push(r.reg),
            Operand::Mem { base, .. } => e.reads.push(*base),
            _ => {}
        }
    }
    // the last operand is the destination, except for compares
    if !matches!(ins.op, Opcode::Cmp | Opcode::Test) {
        if let Some(Operand::Reg(r)) = ins.operands.last() {
            e.writes.push(r.reg);
        }
    }
    e
}

fn independent(a: &Instruction, b: &Instruction) -> bool {
    let movable = |i: &Instruction| !(i.op.is_jump() || i.is_label() || i.op == Opcode::Ret);
    if !movable(a) || !movable(b) {
        return false;
    }
    let (x, y) = (effects(a), effects(b));
    let hits = |w: &[Reg], r: &[Reg]| w.iter().any(|reg| r.contains(reg));
    !(hits(&x.writes, &y.reads)
        || hits(&x.writes, &y.writes)
        || hits(&y.writes, &x.reads)
        || (x.writes_flags && (y.reads_flags || y.writes_flags))
        || (y.writes_flags && x.reads_flags)
        || (x.memory && y.memory))
}

/// Swaps of adjacent instructions that share no register, flag or memory
/// dependence.
pub fn independent_swaps(p: &Program) -> Vec<Program> {
    (0..p.instructions.len().saturating_sub(1))
        .filter(|&i| independent(&p.instructions[i], &p.instructions[i + 1]))
        .filter_map(|i| {
            let mut code = p.instructions.clone();
            code.swap(i, i + 1);
            rebuild(p, code)
        })
        .collect()
}

/// Dead code: an unreachable block jumped over at entry, and a write to a
/// register that is not live just before the final return.
pub fn dead_code(p: &Program, lo: &LiveOut) -> Vec<Program> {
    let mut out = Vec::new();
    let skip = ".Ldead".to_string();
    let mut code = vec![
        Instruction::jump(Opcode::Jmp, skip.clone()),
        Instruction::new(Opcode::Add, Width::B64, vec![Operand::reg(Reg::Rdi, Width::B64), Operand::reg(Reg::Rax, Width::B64)]),
        Instruction::new(Opcode::Mov, Width::B64, vec![Operand::Imm(0), Operand::reg(Reg::Rdi, Width::B64)]),
        Instruction::label(skip),
    ];
    code.extend(p.instructions.iter().cloned());
    out.extend(rebuild(p, code));
    if let Some(ret) = p.instructions.iter().rposition(|i| i.op == Opcode::Ret) {
        let dead = (0..crate::isa::NUM_REGS).map(Reg::from_index).find(|r| lo.reg_widths[r.index()] == 0);
        if let Some(r) = dead {
            let mut code = p.instructions.clone();
            code.insert(ret, Instruction::new(Opcode::Mov, Width::B64, vec![Operand::Imm(0x2a), Operand::reg(r, Width::B64)]));
            out.extend(rebuild(p, code));
        }
    }
    out
}

/// Every transform of each kind.
pub fn preserving_transforms(p: &Program, lo: &LiveOut) -> Vec<(TransformKind, Program)> {
    let mut out: Vec<(TransformKind, Program)> = Vec::new();
    out.extend(rename_labels(p).map(|q| (TransformKind::LabelRename, q)));
    out.extend(independent_swaps(p).into_iter().map(|q| (TransformKind::Swap, q)));
    out.extend(dead_code(p, lo).into_iter().map(|q| (TransformKind::DeadCode, q)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse;

    fn prog(s: &str) -> Program {
        parse(s).unwrap()
    }

    #[test]
    fn mutants_touch_one_site() {
        let p = prog(".f:\n  movq %rdi, %rax\n  addq $0x3, %rax\n  cmpq %rsi, %rax\n  jl .L1\n  negq %rax\n.L1:\n  retq\n");
        let ms = semantic_mutants(&p);
        let kinds: Vec<MutantKind> = ms.iter().map(|m| m.kind).collect();
        assert!(kinds.contains(&MutantKind::OperatorFlip));
        assert!(kinds.contains(&MutantKind::ConstantPerturbation));
        assert!(kinds.contains(&MutantKind::ConditionFlip));
        assert!(kinds.contains(&MutantKind::BranchDeletion));
        for m in ms.iter().filter(|m| m.kind != MutantKind::BranchDeletion) {
            let diff = p.instructions.iter().zip(&m.program.instructions).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 1);
        }
    }

    #[test]
    fn swaps_respect_dependences() {
        let p = prog(".f:\n  movq %rdi, %rax\n  movq %rsi, %rcx\n  addq %rcx, %rax\n  retq\n");
        let s = independent_swaps(&p);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].instructions[0], p.instructions[1]);
        let flags = prog(".f:\n  cmpq %rsi, %rdi\n  sete %al\n  retq\n");
        assert!(independent_swaps(&flags).is_empty());
    }

    #[test]
    fn rare_mutant_and_dead_code_stay_valid() {
        let p = prog(".f:\n  movq %rdi, %rax\n  retq\n");
        let r = rare_input_mutant(&p, Reg::Rdi, 0x5b, Reg::Rax).unwrap();
        assert_eq!(r.instructions.len(), p.instructions.len() + 4);
        let lo = LiveOut::only(Reg::Rax, Width::B64, false);
        assert_eq!(dead_code(&p, &lo).len(), 2);
        assert!(rename_labels(&p).is_none());
    }
}
