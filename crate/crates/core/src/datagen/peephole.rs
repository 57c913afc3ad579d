//! Assembly-level cleanup for the optimizing compiler.

use std::collections::{HashMap, HashSet};

use crate::isa::{Instruction, Opcode, Operand, Reg, Width};

/// Runs all rewrites to a fixed point.
pub fn peephole(mut code: Vec<Instruction>) -> Vec<Instruction> {
    loop {
        let changed = drop_redundant_compare(&mut code)
            | thread_jumps(&mut code)
            | drop_unreachable(&mut code)
            | drop_unused_labels(&mut code)
            | drop_dead_moves(&mut code);
        if !changed {
            return code;
        }
    }
}

fn dst_reg(ins: &Instruction) -> Option<Reg> {
    match ins.operands.last() {
        Some(Operand::Reg(r)) => Some(r.reg),
        _ => None,
    }
}

/// `sub $k, %r; cmp $0, %r; je/jne` — the ALU op already set ZF.
fn drop_redundant_compare(code: &mut Vec<Instruction>) -> bool {
    for i in 0..code.len().saturating_sub(2) {
        let (a, c, j) = (&code[i], &code[i + 1], &code[i + 2]);
        let alu = matches!(a.op, Opcode::Add | Opcode::Sub | Opcode::And | Opcode::Or | Opcode::Xor);
        if alu
            && c.op == Opcode::Cmp
            && c.width == a.width
            && c.operands.first() == Some(&Operand::Imm(0))
            && dst_reg(a).is_some()
            && dst_reg(a) == dst_reg(c)
            && matches!(j.op, Opcode::Je | Opcode::Jne)
        {
            code.remove(i + 1);
            return true;
        }
    }
    false
}

fn label_positions(code: &[Instruction]) -> HashMap<String, usize> {
    code.iter()
        .enumerate()
        .filter(|(_, i)| i.is_label())
        .filter_map(|(n, i)| i.label_name().map(|l| (l.to_string(), n)))
        .collect()
}

fn thread_jumps(code: &mut Vec<Instruction>) -> bool {
    let pos = label_positions(code);
    for i in 0..code.len() {
        if !code[i].op.is_jump() {
            continue;
        }
        let target = code[i].label_name().unwrap_or_default().to_string();
        let Some(&t) = pos.get(&target) else { continue };
        // jump to the next real instruction
        if t > i && code[i + 1..t].iter().all(Instruction::is_label) {
            code.remove(i);
            return true;
        }
        // jump to an unconditional jump
        if let Some(next) = code[t..].iter().find(|x| !x.is_label()) {
            if next.op == Opcode::Jmp {
                let m = next.label_name().unwrap_or_default().to_string();
                if m != target {
                    code[i].operands[0] = Operand::Label(m);
                    return true;
                }
            }
        }
    }
    false
}

fn drop_unreachable(code: &mut Vec<Instruction>) -> bool {
    for i in 0..code.len() {
        if matches!(code[i].op, Opcode::Jmp | Opcode::Ret)
            && code.get(i + 1).is_some_and(|n| !n.is_label())
        {
            code.remove(i + 1);
            return true;
        }
    }
    false
}

fn drop_unused_labels(code: &mut Vec<Instruction>) -> bool {
    let used: HashSet<String> = code
        .iter()
        .filter(|i| i.op.is_jump())
        .filter_map(|i| i.label_name().map(str::to_string))
        .collect();
    let before = code.len();
    code.retain(|i| !i.is_label() || i.label_name().is_some_and(|l| used.contains(l)));
    code.len() != before
}

fn mentions(ins: &Instruction, r: Reg) -> bool {
    ins.operands.iter().any(|o| match o {
        Operand::Reg(x) => x.reg == r,
        Operand::Mem { base, .. } => *base == r,
        _ => false,
    })
}

/// The register fully overwritten (32 or 64 bits) without being read.
fn full_write(ins: &Instruction) -> Option<Reg> {
    if !matches!(ins.op, Opcode::Mov | Opcode::Movz | Opcode::Movs | Opcode::Lea) {
        return None;
    }
    match ins.operands.as_slice() {
        [src, Operand::Reg(d)] if matches!(d.width, Width::B32 | Width::B64) => {
            let reads_self = match src {
                Operand::Reg(s) => s.reg == d.reg,
                Operand::Mem { base, .. } => *base == d.reg,
                _ => false,
            };
            (!reads_self).then_some(d.reg)
        }
        _ => None,
    }
}

/// Within a basic block, a move whose destination is overwritten before any read.
fn drop_dead_moves(code: &mut Vec<Instruction>) -> bool {
    for i in 0..code.len() {
        let Some(r) = full_write(&code[i]) else { continue };
        for j in i + 1..code.len() {
            let n = &code[j];
            if n.is_label() || n.op.is_jump() || n.op == Opcode::Ret {
                break;
            }
            if mentions(n, r) {
                if full_write(n) == Some(r) {
                    code.remove(i);
                    return true;
                }
                break;
            }
        }
    }
    false
}
