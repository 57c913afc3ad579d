//! The two compilers: a verbose unoptimized one producing `f_s` and a
//! rule-based optimizing one producing `f_ref` with fixed, documented
//! headroom (no memory operands in arithmetic; a trailing move into `rax`
//! whenever the result register is not `rax`).

use super::ir::{BinOp, CmpOp, Expr, ShiftOp, SourceTask, Stmt, Var};
use super::passes::optimize;
use super::peephole::peephole;
use crate::isa::{Instruction, Opcode, Operand, Program, Reg, Width};

/// Scratch pool of the unoptimized compiler, used as an evaluation stack.
pub const NAIVE_POOL: [Reg; 3] = [Reg::Rbx, Reg::Rcx, Reg::Rdx];
/// Default result register of the optimizing compiler.
pub const OPT_RESULT: Reg = Reg::Rcx;
/// Extra temporaries of the optimizing compiler.
pub const OPT_TEMPS: [Reg; 2] = [Reg::Rdx, Reg::Rbx];
/// Loop counter register.
pub const COUNTER: Reg = Reg::R9;
/// Pointer register of memory tasks.
pub const POINTER: Reg = Reg::Rdi;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodegenError(pub String);

struct Emitter {
    out: Vec<Instruction>,
    labels: u32,
    w: Width,
    memory: bool,
}

impl Emitter {
    fn new(t: &SourceTask) -> Self {
        Emitter {
            out: Vec::new(),
            labels: 0,
            w: t.width,
            memory: t.memory,
        }
    }

    fn label(&mut self) -> String {
        self.labels += 1;
        format!(".L{}", self.labels)
    }

    fn r(&self, r: Reg) -> Operand {
        Operand::reg(r, self.w)
    }

    fn var(&self, v: Var) -> Reg {
        v.reg(self.memory)
    }

    fn op2(&mut self, op: Opcode, src: Operand, dst: Operand) {
        self.out.push(Instruction::new(op, self.w, vec![src, dst]));
    }

    fn op1(&mut self, op: Opcode, dst: Operand) {
        self.out.push(Instruction::new(op, self.w, vec![dst]));
    }

    fn mov(&mut self, src: Operand, dst: Reg) {
        self.op2(Opcode::Mov, src, self.r(dst));
    }

    fn mem(&self, d: i16) -> Operand {
        Operand::mem(POINTER, d)
    }

    fn jump(&mut self, op: Opcode, l: &str) {
        self.out.push(Instruction::jump(op, l));
    }

    fn place(&mut self, l: &str) {
        self.out.push(Instruction::label(l));
    }

    /// `setcc` into the low byte of `dst`, then zero-extend to the task width.
    fn set_flag_value(&mut self, op: CmpOp, dst: Reg) {
        let set = match op {
            CmpOp::Eq => Opcode::Sete,
            CmpOp::Ne => Opcode::Setne,
            CmpOp::Lt => Opcode::Setl,
            CmpOp::Gt => Opcode::Setg,
        };
        self.out
            .push(Instruction::new(set, Width::B8, vec![Operand::reg(dst, Width::B8)]));
        self.out.push(Instruction::extend(
            Opcode::Movz,
            Width::B8,
            self.w,
            Operand::reg(dst, Width::B8),
            self.r(dst),
        ));
    }

    fn unary(&mut self, e: &Expr, dst: Operand) {
        match e {
            Expr::MulC(_, c) => self.op2(Opcode::Imul, Operand::Imm(*c), dst),
            Expr::Shift(op, _, k) => {
                let op = match op {
                    ShiftOp::Shl => Opcode::Shl,
                    ShiftOp::Sar => Opcode::Sar,
                    ShiftOp::Shr => Opcode::Shr,
                };
                self.op2(op, Operand::Imm(*k as i64), dst)
            }
            Expr::Neg(_) => self.op1(Opcode::Neg, dst),
            Expr::Not(_) => self.op1(Opcode::Not, dst),
            _ => unreachable!("not a unary node"),
        }
    }

    /// Emits `sar/xor/sub` absolute value of `dst` using `tmp`.
    fn abs_tail(&mut self, dst: Reg, tmp: Reg) {
        self.op2(Opcode::Sar, Operand::Imm(self.w.bits() as i64 - 1), self.r(tmp));
        self.op2(Opcode::Xor, self.r(tmp), self.r(dst));
        self.op2(Opcode::Sub, self.r(tmp), self.r(dst));
    }
}

fn jcc(op: CmpOp) -> Opcode {
    match op {
        CmpOp::Eq => Opcode::Je,
        CmpOp::Ne => Opcode::Jne,
        CmpOp::Lt => Opcode::Jl,
        CmpOp::Gt => Opcode::Jg,
    }
}

fn alu(op: BinOp) -> Opcode {
    match op {
        BinOp::Add => Opcode::Add,
        BinOp::Sub => Opcode::Sub,
        BinOp::And => Opcode::And,
        BinOp::Or => Opcode::Or,
        BinOp::Xor => Opcode::Xor,
    }
}

fn err(msg: &str) -> CodegenError {
    CodegenError(msg.to_string())
}

// ---- unoptimized compiler ----

struct Naive(Emitter);

impl Naive {
    /// Evaluates `e` into `NAIVE_POOL[d]`, materializing every operand.
    fn expr(&mut self, e: &Expr, d: usize) -> Result<(), CodegenError> {
        let dst = *NAIVE_POOL.get(d).ok_or_else(|| err("expression too deep"))?;
        let m = &mut self.0;
        match e {
            Expr::Var(v) => {
                let src = m.r(m.var(*v));
                m.mov(src, dst)
            }
            Expr::Const(c) => m.mov(Operand::Imm(*c), dst),
            Expr::Load(disp) => {
                let src = m.mem(*disp);
                m.mov(src, dst)
            }
            Expr::Bin(op, l, r) => {
                self.expr(l, d)?;
                self.expr(r, d + 1)?;
                let rhs = *NAIVE_POOL.get(d + 1).ok_or_else(|| err("expression too deep"))?;
                let m = &mut self.0;
                m.op2(alu(*op), m.r(rhs), m.r(dst));
            }
            Expr::Cmp(op, l, r) => {
                self.expr(l, d)?;
                self.expr(r, d + 1)?;
                let rhs = *NAIVE_POOL.get(d + 1).ok_or_else(|| err("expression too deep"))?;
                let m = &mut self.0;
                m.op2(Opcode::Cmp, m.r(rhs), m.r(dst));
                m.set_flag_value(*op, dst);
            }
            Expr::MulC(x, _) | Expr::Shift(_, x, _) | Expr::Neg(x) | Expr::Not(x) => {
                self.expr(x, d)?;
                let m = &mut self.0;
                m.unary(e, m.r(dst));
            }
            Expr::Abs(x) => {
                self.expr(x, d)?;
                let tmp = *NAIVE_POOL.get(d + 1).ok_or_else(|| err("expression too deep"))?;
                let m = &mut self.0;
                m.mov(m.r(dst), tmp);
                m.abs_tail(dst, tmp);
            }
        }
        Ok(())
    }

    fn stmts(&mut self, ss: &[Stmt]) -> Result<(), CodegenError> {
        for s in ss {
            match s {
                Stmt::Assign(v, e) => {
                    self.expr(e, 0)?;
                    let m = &mut self.0;
                    let home = m.var(*v);
                    m.mov(m.r(NAIVE_POOL[0]), home);
                }
                Stmt::Store(disp, e) => {
                    self.expr(e, 0)?;
                    let m = &mut self.0;
                    m.op2(Opcode::Mov, m.r(NAIVE_POOL[0]), m.mem(*disp));
                }
                Stmt::If {
                    op,
                    lhs,
                    rhs,
                    then,
                    els,
                } => {
                    self.expr(lhs, 0)?;
                    self.expr(rhs, 1)?;
                    let m = &mut self.0;
                    let (lt, le, lend) = (m.label(), m.label(), m.label());
                    m.op2(Opcode::Cmp, m.r(NAIVE_POOL[1]), m.r(NAIVE_POOL[0]));
                    m.jump(jcc(*op), &lt);
                    m.jump(Opcode::Jmp, &le);
                    m.place(&lt);
                    self.stmts(then)?;
                    self.0.jump(Opcode::Jmp, &lend);
                    self.0.place(&le);
                    self.stmts(els)?;
                    self.0.place(&lend);
                }
                Stmt::Repeat(n, body) => {
                    let m = &mut self.0;
                    let head = m.label();
                    m.mov(Operand::Imm(*n as i64), COUNTER);
                    m.place(&head);
                    self.stmts(body)?;
                    let m = &mut self.0;
                    let s = NAIVE_POOL[0];
                    m.mov(m.r(COUNTER), s);
                    m.op2(Opcode::Sub, Operand::Imm(1), m.r(s));
                    m.mov(m.r(s), COUNTER);
                    m.op2(Opcode::Cmp, Operand::Imm(0), m.r(s));
                    m.jump(Opcode::Jne, &head);
                }
            }
        }
        Ok(())
    }
}

/// Unoptimized compilation: operands are always materialized into scratch
/// registers, results are written back to variable homes, no value is
/// assumed to survive across statements, and branches are emitted verbosely.
pub fn compile_naive(t: &SourceTask) -> Result<Program, CodegenError> {
    let mut n = Naive(Emitter::new(t));
    n.stmts(&t.body)?;
    n.expr(&t.ret, 0)?;
    let m = &mut n.0;
    m.mov(m.r(NAIVE_POOL[0]), Reg::Rax);
    m.out.push(Instruction::ret());
    Program::new("f", n.0.out)
        .map(|p| p.canonicalize_labels())
        .map_err(|e| CodegenError(e.to_string()))
}

// ---- optimizing compiler ----

struct Opt {
    m: Emitter,
    result: Reg,
}

/// Whether `e` can be evaluated directly into the home of `x` without
/// clobbering `x` before its last read.
fn in_place_safe(e: &Expr, x: Var) -> bool {
    match e {
        Expr::Var(_) | Expr::Const(_) | Expr::Load(_) => true,
        Expr::Bin(_, l, r) | Expr::Cmp(_, l, r) => in_place_safe(l, x) && !r.reads(x),
        Expr::MulC(i, _) | Expr::Shift(_, i, _) | Expr::Neg(i) | Expr::Not(i) | Expr::Abs(i) => {
            in_place_safe(i, x)
        }
    }
}

impl Opt {
    /// A register or immediate operand for leaves; loads never fold into
    /// arithmetic.
    fn leaf(&self, e: &Expr) -> Option<Operand> {
        match e {
            Expr::Var(v) => Some(self.m.r(self.m.var(*v))),
            Expr::Const(c) => Some(Operand::Imm(*c)),
            _ => None,
        }
    }

    fn expr(&mut self, e: &Expr, dst: Reg, temps: &[Reg]) -> Result<(), CodegenError> {
        match e {
            Expr::Var(v) => {
                let src = self.m.var(*v);
                if src != dst {
                    self.m.mov(self.m.r(src), dst);
                }
            }
            Expr::Const(c) => self.m.mov(Operand::Imm(*c), dst),
            Expr::Load(d) => {
                let src = self.m.mem(*d);
                self.m.mov(src, dst)
            }
            Expr::Bin(_, l, r) | Expr::Cmp(_, l, r) => {
                self.expr(l, dst, temps)?;
                let rhs = match self.leaf(r) {
                    Some(o) => o,
                    None => {
                        let (t, rest) = temps.split_first().ok_or_else(|| err("out of temporaries"))?;
                        self.expr(r, *t, rest)?;
                        self.m.r(*t)
                    }
                };
                match e {
                    Expr::Bin(op, ..) => self.m.op2(alu(*op), rhs, self.m.r(dst)),
                    Expr::Cmp(op, ..) => {
                        self.m.op2(Opcode::Cmp, rhs, self.m.r(dst));
                        self.m.set_flag_value(*op, dst);
                    }
                    _ => unreachable!(),
                }
            }
            Expr::MulC(x, _) | Expr::Shift(_, x, _) | Expr::Neg(x) | Expr::Not(x) => {
                self.expr(x, dst, temps)?;
                self.m.unary(e, self.m.r(dst));
            }
            Expr::Abs(x) => {
                let t = *temps.first().ok_or_else(|| err("out of temporaries"))?;
                if let Expr::Var(v) = **x {
                    // sign mask from the source, value copied alongside
                    let src = self.m.r(self.m.var(v));
                    self.m.mov(src.clone(), t);
                    self.m
                        .op2(Opcode::Sar, Operand::Imm(self.m.w.bits() as i64 - 1), self.m.r(t));
                    if self.m.var(v) != dst {
                        self.m.mov(src, dst);
                    }
                    self.m.op2(Opcode::Xor, self.m.r(t), self.m.r(dst));
                    self.m.op2(Opcode::Sub, self.m.r(t), self.m.r(dst));
                } else {
                    self.expr(x, dst, temps)?;
                    self.m.mov(self.m.r(dst), t);
                    self.m.abs_tail(dst, t);
                }
            }
        }
        Ok(())
    }

    fn pool(&self) -> Vec<Reg> {
        let mut p = vec![self.result];
        p.extend(OPT_TEMPS);
        p
    }

    fn assign(&mut self, v: Var, e: &Expr) -> Result<(), CodegenError> {
        let home = self.m.var(v);
        let pool = self.pool();
        if in_place_safe(e, v) {
            self.expr(e, home, &pool)
        } else {
            self.expr(e, pool[0], &pool[1..])?;
            self.m.mov(self.m.r(pool[0]), home);
            Ok(())
        }
    }

    /// Compares `lhs` against `rhs`, leaving only the flags.
    fn compare(&mut self, lhs: &Expr, rhs: &Expr) -> Result<(), CodegenError> {
        let pool = self.pool();
        let l = match lhs {
            Expr::Var(v) => self.m.var(*v),
            _ => {
                self.expr(lhs, pool[0], &pool[1..])?;
                pool[0]
            }
        };
        let r = match self.leaf(rhs) {
            Some(o) => o,
            None => {
                let rest: Vec<Reg> = pool.iter().copied().filter(|p| *p != l).collect();
                self.expr(rhs, rest[0], &rest[1..])?;
                self.m.r(rest[0])
            }
        };
        self.m.op2(Opcode::Cmp, r, self.m.r(l));
        Ok(())
    }

    fn stmts(&mut self, ss: &[Stmt]) -> Result<(), CodegenError> {
        for s in ss {
            match s {
                Stmt::Assign(v, e) => self.assign(*v, e)?,
                Stmt::Store(d, e) => {
                    let src = match self.leaf(e) {
                        Some(o) => o,
                        None => {
                            let pool = self.pool();
                            self.expr(e, pool[0], &pool[1..])?;
                            self.m.r(pool[0])
                        }
                    };
                    let dst = self.m.mem(*d);
                    self.m.op2(Opcode::Mov, src, dst);
                }
                Stmt::If {
                    op,
                    lhs,
                    rhs,
                    then,
                    els,
                } => {
                    self.compare(lhs, rhs)?;
                    let end = self.m.label();
                    if then.is_empty() {
                        self.m.jump(jcc(*op), &end);
                        self.stmts(els)?;
                    } else if let (true, Some(neg)) = (els.is_empty(), op.negate()) {
                        self.m.jump(jcc(neg), &end);
                        self.stmts(then)?;
                    } else {
                        let lt = self.m.label();
                        self.m.jump(jcc(*op), &lt);
                        self.stmts(els)?;
                        self.m.jump(Opcode::Jmp, &end);
                        self.m.place(&lt);
                        self.stmts(then)?;
                    }
                    self.m.place(&end);
                }
                Stmt::Repeat(n, body) => {
                    let head = self.m.label();
                    self.m.mov(Operand::Imm(*n as i64), COUNTER);
                    self.m.place(&head);
                    self.stmts(body)?;
                    self.m.op2(Opcode::Sub, Operand::Imm(1), self.m.r(COUNTER));
                    self.m.op2(Opcode::Cmp, Operand::Imm(0), self.m.r(COUNTER));
                    self.m.jump(Opcode::Jne, &head);
                }
            }
        }
        Ok(())
    }
}

/// Rule-based optimizing compilation with result register `result`
/// (`rax` or [`OPT_RESULT`]).
pub fn compile_opt(t: &SourceTask, result: Reg) -> Result<Program, CodegenError> {
    let t = optimize(t);
    let mut o = Opt {
        m: Emitter::new(&t),
        result,
    };
    o.stmts(&t.body)?;
    o.expr(&t.ret, result, &OPT_TEMPS)?;
    if result != Reg::Rax {
        o.m.mov(o.m.r(result), Reg::Rax);
    }
    o.m.out.push(Instruction::ret());
    let p = Program::new("f", peephole(o.m.out)).map_err(|e| CodegenError(e.to_string()))?;
    Ok(p.canonicalize_labels())
}

/// Result register drawn from the task seed: `rax` with probability `q`.
pub fn result_reg_for(seed: u64, q: f64) -> Reg {
    let h = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29) ^ 0xd6e8_feb8_6659_fd93;
    let u = (h.wrapping_mul(0x94d0_49bb_1331_11eb) >> 11) as f64 / (1u64 << 53) as f64;
    if u < q {
        Reg::Rax
    } else {
        OPT_RESULT
    }
}

#[cfg(test)]
mod tests {
    use super::super::ir::{b, bin, gen_task, Env, Family};
    use super::*;
    use crate::machine::{execute, MachineState, DEFAULT_FUEL};

    fn abs_task() -> SourceTask {
        SourceTask {
            seed: 0,
            family: Family::Abs,
            width: Width::B32,
            memory: false,
            body: vec![],
            ret: Expr::Abs(b(Expr::Var(Var::A))),
        }
    }

    #[test]
    fn abs_has_the_trailing_move_shape() {
        let p = compile_opt(&abs_task(), Reg::Rcx).unwrap();
        assert_eq!(
            p.body_text(),
            "  movl %edi, %edx\n  sarl $0x1f, %edx\n  movl %edi, %ecx\n  xorl %edx, %ecx\n  subl %edx, %ecx\n  movl %ecx, %eax\n  retq\n"
        );
        let direct = compile_opt(&abs_task(), Reg::Rax).unwrap();
        assert_eq!(direct.instructions.len(), 6);
    }

    #[test]
    fn return_a_is_verbose_when_naive() {
        let t = SourceTask {
            ret: Expr::Var(Var::A),
            ..abs_task()
        };
        let p = compile_naive(&t).unwrap();
        assert_eq!(p.body_text(), "  movl %edi, %ebx\n  movl %ebx, %eax\n  retq\n");
    }

    #[test]
    fn folded_constant() {
        let t = SourceTask {
            ret: Expr::MulC(b(Expr::Const(3)), 1),
            ..abs_task()
        };
        let p = compile_opt(&t, Reg::Rax).unwrap();
        assert_eq!(p.body_text(), "  movl $0x3, %eax\n  retq\n");
    }

    #[test]
    fn doubled_argument_has_redundant_moves_when_naive() {
        let t = SourceTask {
            body: vec![Stmt::Assign(Var::X, bin(BinOp::Add, Expr::Var(Var::A), Expr::Var(Var::A)))],
            ret: Expr::Var(Var::X),
            ..abs_task()
        };
        let naive = compile_naive(&t).unwrap();
        let opt = compile_opt(&t, Reg::Rax).unwrap();
        let movs = |p: &Program| p.instructions.iter().filter(|i| i.op == Opcode::Mov).count();
        assert!(movs(&naive) >= movs(&opt) + 2, "{naive}\n{opt}");
    }

    fn run_task(p: &Program, t: &SourceTask, a: u64, bv: u64, mem: &[u8], ptr: u64) -> Option<(u64, Vec<u8>)> {
        let mut st = MachineState::default();
        st.mem.copy_from_slice(mem);
        if t.memory {
            st.set_reg(Reg::Rdi, ptr);
            st.set_reg(Reg::Rsi, a);
        } else {
            st.set_reg(Reg::Rdi, a);
            st.set_reg(Reg::Rsi, bv);
        }
        let tr = execute(p, &st, DEFAULT_FUEL, None);
        (tr.halted == crate::machine::Halt::Ret)
            .then(|| (tr.final_state.reg(Reg::Rax) & t.width.mask(), tr.final_state.mem))
    }

    #[test]
    fn both_compilers_agree_with_the_evaluator() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for seed in 0..300 {
            let t = gen_task(seed);
            let naive = compile_naive(&t).unwrap_or_else(|e| panic!("{t}\n{e:?}"));
            let opt = compile_opt(&t, result_reg_for(seed, 0.5)).unwrap();
            for _ in 0..20 {
                let (a, bv): (u64, u64) = (rng.gen(), rng.gen());
                let a = if rng.gen_bool(0.5) { a % 7 } else { a };
                let mut mem = vec![0u8; 256];
                rng.fill(&mut mem[..]);
                let ptr = rng.gen_range(0..40);
                let mut env = Env {
                    vars: [a, bv, 0, 0],
                    ptr,
                    mem: mem.clone(),
                };
                let want = t.eval(&mut env).ok().map(|v| (v, env.mem));
                assert_eq!(run_task(&naive, &t, a, bv, &mem, ptr), want, "naive\n{t}\n{naive}");
                assert_eq!(run_task(&opt, &t, a, bv, &mem, ptr), want, "opt\n{t}\n{opt}");
            }
        }
    }
}
