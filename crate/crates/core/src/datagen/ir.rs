//! Source-task IR: a tiny structured language over at most three signed
//! variables, with a reference evaluator and a seeded task generator.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::isa::{Reg, Width};

/// Arguments `a`, `b` and locals `x`, `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Var {
    A,
    B,
    X,
    Y,
}

impl Var {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_arg(self) -> bool {
        matches!(self, Var::A | Var::B)
    }

    /// Home register. In memory tasks `rdi` holds the pointer, so `a` moves to `rsi`.
    pub fn reg(self, memory: bool) -> Reg {
        match self {
            Var::A if memory => Reg::Rsi,
            Var::A => Reg::Rdi,
            Var::B => Reg::Rsi,
            Var::X => Reg::R8,
            Var::Y => Reg::R9,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Var::A => "a",
            Var::B => "b",
            Var::X => "x",
            Var::Y => "y",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShiftOp {
    Shl,
    Sar,
    Shr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
}

impl CmpOp {
    pub fn negate(self) -> Option<CmpOp> {
        match self {
            CmpOp::Eq => Some(CmpOp::Ne),
            CmpOp::Ne => Some(CmpOp::Eq),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expr {
    Var(Var),
    Const(i64),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    MulC(Box<Expr>, i64),
    Shift(ShiftOp, Box<Expr>, u32),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    /// 1 if the signed comparison holds, else 0.
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    Abs(Box<Expr>),
    /// Load from `pointer + disp`.
    Load(i16),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stmt {
    Assign(Var, Expr),
    If {
        op: CmpOp,
        lhs: Expr,
        rhs: Expr,
        then: Vec<Stmt>,
        els: Vec<Stmt>,
    },
    /// Count-down loop running the body `n` times, `1 <= n <= 4`.
    Repeat(u32, Vec<Stmt>),
    Store(i16, Expr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Abs,
    Select,
    MinMax,
    Arith,
    BitTrick,
    Compare,
    Loop,
    Memory,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Abs,
        Family::Select,
        Family::MinMax,
        Family::Arith,
        Family::BitTrick,
        Family::Compare,
        Family::Loop,
        Family::Memory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Abs => "abs",
            Family::Select => "select",
            Family::MinMax => "minmax",
            Family::Arith => "arith",
            Family::BitTrick => "bittrick",
            Family::Compare => "compare",
            Family::Loop => "loop",
            Family::Memory => "memory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceTask {
    pub seed: u64,
    pub family: Family,
    pub width: Width,
    pub memory: bool,
    pub body: Vec<Stmt>,
    pub ret: Expr,
}

pub(crate) fn b(e: Expr) -> Box<Expr> {
    Box::new(e)
}

pub(crate) fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
    Expr::Bin(op, b(l), b(r))
}

impl Expr {
    pub fn reads(&self, v: Var) -> bool {
        match self {
            Expr::Var(w) => *w == v,
            Expr::Const(_) | Expr::Load(_) => false,
            Expr::Bin(_, l, r) | Expr::Cmp(_, l, r) => l.reads(v) || r.reads(v),
            Expr::MulC(e, _) | Expr::Shift(_, e, _) | Expr::Neg(e) | Expr::Not(e) | Expr::Abs(e) => {
                e.reads(v)
            }
        }
    }

    pub fn loads(&self) -> bool {
        match self {
            Expr::Load(_) => true,
            Expr::Var(_) | Expr::Const(_) => false,
            Expr::Bin(_, l, r) | Expr::Cmp(_, l, r) => l.loads() || r.loads(),
            Expr::MulC(e, _) | Expr::Shift(_, e, _) | Expr::Neg(e) | Expr::Not(e) | Expr::Abs(e) => {
                e.loads()
            }
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Expr::Var(_) | Expr::Const(_))
    }
}

impl Stmt {
    /// Whether `v` is assigned anywhere in this statement.
    pub fn assigns(&self, v: Var) -> bool {
        match self {
            Stmt::Assign(w, _) => *w == v,
            Stmt::If { then, els, .. } => then.iter().chain(els).any(|s| s.assigns(v)),
            Stmt::Repeat(_, body) => body.iter().any(|s| s.assigns(v)),
            Stmt::Store(..) => false,
        }
    }
}

impl SourceTask {
    pub fn has_loop(&self) -> bool {
        fn any(ss: &[Stmt]) -> bool {
            ss.iter().any(|s| match s {
                Stmt::Repeat(..) => true,
                Stmt::If { then, els, .. } => any(then) || any(els),
                _ => false,
            })
        }
        any(&self.body)
    }
}

// ---- evaluation ----

/// Evaluation fault: a memory access escaped the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalFault;

/// Inputs and memory for the reference evaluator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Env {
    pub vars: [u64; 4],
    pub ptr: u64,
    pub mem: Vec<u8>,
}

fn sext(v: u64, w: Width) -> i64 {
    crate::machine::sext(v, w)
}

struct Eval<'a> {
    w: Width,
    env: &'a mut Env,
}

impl Eval<'_> {
    fn addr(&self, disp: i16) -> Result<usize, EvalFault> {
        let a = (self.env.ptr as i64).wrapping_add(disp as i64);
        if a < 0 || a as u64 + self.w.bytes() as u64 > self.env.mem.len() as u64 {
            return Err(EvalFault);
        }
        Ok(a as usize)
    }

    fn expr(&mut self, e: &Expr) -> Result<u64, EvalFault> {
        let w = self.w;
        let m = w.mask();
        Ok(match e {
            Expr::Var(v) => self.env.vars[v.index()] & m,
            Expr::Const(c) => *c as u64 & m,
            Expr::Bin(op, l, r) => {
                let (l, r) = (self.expr(l)?, self.expr(r)?);
                (match op {
                    BinOp::Add => l.wrapping_add(r),
                    BinOp::Sub => l.wrapping_sub(r),
                    BinOp::And => l & r,
                    BinOp::Or => l | r,
                    BinOp::Xor => l ^ r,
                }) & m
            }
            Expr::MulC(e, c) => (sext(self.expr(e)?, w).wrapping_mul(*c) as u64) & m,
            Expr::Shift(op, e, k) => {
                let v = self.expr(e)?;
                (match op {
                    ShiftOp::Shl => v << k,
                    ShiftOp::Shr => v >> k,
                    ShiftOp::Sar => (sext(v, w) >> k) as u64,
                }) & m
            }
            Expr::Neg(e) => self.expr(e)?.wrapping_neg() & m,
            Expr::Not(e) => !self.expr(e)? & m,
            Expr::Cmp(op, l, r) => {
                let (l, r) = (sext(self.expr(l)?, w), sext(self.expr(r)?, w));
                u64::from(cmp(*op, l, r))
            }
            Expr::Abs(e) => (sext(self.expr(e)?, w).wrapping_abs() as u64) & m,
            Expr::Load(d) => {
                let a = self.addr(*d)?;
                let mut v = 0u64;
                for (i, byte) in self.env.mem[a..a + w.bytes()].iter().enumerate() {
                    v |= (*byte as u64) << (8 * i);
                }
                v
            }
        })
    }

    fn stmts(&mut self, ss: &[Stmt]) -> Result<(), EvalFault> {
        for s in ss {
            match s {
                Stmt::Assign(v, e) => self.env.vars[v.index()] = self.expr(e)?,
                Stmt::If {
                    op,
                    lhs,
                    rhs,
                    then,
                    els,
                } => {
                    let (l, r) = (sext(self.expr(lhs)?, self.w), sext(self.expr(rhs)?, self.w));
                    if cmp(*op, l, r) {
                        self.stmts(then)?
                    } else {
                        self.stmts(els)?
                    }
                }
                Stmt::Repeat(n, body) => {
                    for _ in 0..*n {
                        self.stmts(body)?;
                    }
                }
                Stmt::Store(d, e) => {
                    let v = self.expr(e)?;
                    let a = self.addr(*d)?;
                    let n = self.w.bytes();
                    for (i, byte) in self.env.mem[a..a + n].iter_mut().enumerate() {
                        *byte = (v >> (8 * i)) as u8;
                    }
                }
            }
        }
        Ok(())
    }
}

fn cmp(op: CmpOp, l: i64, r: i64) -> bool {
    match op {
        CmpOp::Eq => l == r,
        CmpOp::Ne => l != r,
        CmpOp::Lt => l < r,
        CmpOp::Gt => l > r,
    }
}

impl SourceTask {
    /// Reference semantics: returns the result (masked to the task width)
    /// and updates `env` in place.
    pub fn eval(&self, env: &mut Env) -> Result<u64, EvalFault> {
        let mut ev = Eval { w: self.width, env };
        ev.stmts(&self.body)?;
        ev.expr(&self.ret)
    }
}

// ---- display ----

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Var(v) => write!(f, "{}", v.name()),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Bin(op, l, r) => {
                let s = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::And => "&",
                    BinOp::Or => "|",
                    BinOp::Xor => "^",
                };
                write!(f, "({l} {s} {r})")
            }
            Expr::MulC(e, c) => write!(f, "({e} * {c})"),
            Expr::Shift(op, e, k) => {
                let s = match op {
                    ShiftOp::Shl => "<<",
                    ShiftOp::Sar => ">>",
                    ShiftOp::Shr => ">>>",
                };
                write!(f, "({e} {s} {k})")
            }
            Expr::Neg(e) => write!(f, "-{e}"),
            Expr::Not(e) => write!(f, "~{e}"),
            Expr::Cmp(op, l, r) => write!(f, "({l} {} {r})", cmp_sym(*op)),
            Expr::Abs(e) => write!(f, "abs({e})"),
            Expr::Load(d) => write!(f, "p[{d}]"),
        }
    }
}

fn cmp_sym(op: CmpOp) -> &'static str {
    match op {
        CmpOp::Eq => "==",
        CmpOp::Ne => "!=",
        CmpOp::Lt => "<",
        CmpOp::Gt => ">",
    }
}

fn fmt_block(f: &mut fmt::Formatter<'_>, ss: &[Stmt], indent: usize) -> fmt::Result {
    let pad = "  ".repeat(indent);
    for s in ss {
        match s {
            Stmt::Assign(v, e) => writeln!(f, "{pad}{} = {e};", v.name())?,
            Stmt::Store(d, e) => writeln!(f, "{pad}p[{d}] = {e};")?,
            Stmt::If {
                op,
                lhs,
                rhs,
                then,
                els,
            } => {
                writeln!(f, "{pad}if ({lhs} {} {rhs}) {{", cmp_sym(*op))?;
                fmt_block(f, then, indent + 1)?;
                if !els.is_empty() {
                    writeln!(f, "{pad}}} else {{")?;
                    fmt_block(f, els, indent + 1)?;
                }
                writeln!(f, "{pad}}}")?;
            }
            Stmt::Repeat(n, body) => {
                writeln!(f, "{pad}repeat {n} {{")?;
                fmt_block(f, body, indent + 1)?;
                writeln!(f, "{pad}}}")?;
            }
        }
    }
    Ok(())
}

impl fmt::Display for SourceTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ty = if self.width == Width::B64 { "i64" } else { "i32" };
        let params = if self.memory {
            format!("{ty} *p, {ty} a")
        } else {
            format!("{ty} a, {ty} b")
        };
        writeln!(f, "{ty} f({params}) {{  // {}", self.family.name())?;
        fmt_block(f, &self.body, 1)?;
        writeln!(f, "  return {};", self.ret)?;
        write!(f, "}}")
    }
}

// ---- generation ----

struct Gen {
    rng: ChaCha8Rng,
    w: Width,
}

const SMALL: [i64; 14] = [1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 31, 100, -1, -8];
const MULS: [i64; 8] = [2, 3, 4, 5, 8, 10, 16, -3];

impl Gen {
    fn konst(&mut self) -> Expr {
        Expr::Const(*SMALL.choose(&mut self.rng).unwrap())
    }

    fn leaf(&mut self, vars: &[Var]) -> Expr {
        if !vars.is_empty() && self.rng.gen_bool(0.7) {
            Expr::Var(*vars.choose(&mut self.rng).unwrap())
        } else {
            self.konst()
        }
    }

    fn var(&mut self, vars: &[Var]) -> Expr {
        Expr::Var(*vars.choose(&mut self.rng).unwrap())
    }

    fn binop(&mut self) -> BinOp {
        *[BinOp::Add, BinOp::Add, BinOp::Sub, BinOp::Sub, BinOp::And, BinOp::Or, BinOp::Xor]
            .choose(&mut self.rng)
            .unwrap()
    }

    fn shift_amount(&mut self) -> u32 {
        self.rng.gen_range(1..self.w.bits().min(32))
    }

    /// A random expression of at most `depth` operator levels whose first
    /// leaf is always a variable.
    fn expr(&mut self, vars: &[Var], depth: u32) -> Expr {
        if depth == 0 || self.rng.gen_bool(0.25) {
            return self.var(vars);
        }
        let inner = self.expr(vars, depth - 1);
        match self.rng.gen_range(0..100) {
            0..=44 => {
                let r = if depth >= 2 && self.rng.gen_bool(0.3) {
                    self.expr(vars, 1)
                } else {
                    self.leaf(vars)
                };
                bin(self.binop(), inner, r)
            }
            45..=59 => Expr::MulC(b(inner), *MULS.choose(&mut self.rng).unwrap()),
            60..=74 => {
                let op = *[ShiftOp::Shl, ShiftOp::Sar, ShiftOp::Shr].choose(&mut self.rng).unwrap();
                Expr::Shift(op, b(inner), self.shift_amount())
            }
            75..=82 => Expr::Neg(b(inner)),
            83..=89 => Expr::Not(b(inner)),
            90..=94 => Expr::Abs(b(inner)),
            _ => Expr::Cmp(self.cmpop(), b(inner), b(self.leaf(vars))),
        }
    }

    fn cmpop(&mut self) -> CmpOp {
        *[CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Gt].choose(&mut self.rng).unwrap()
    }

    /// Occasionally wraps `e` in a removable identity or constant subexpression.
    fn decorate(&mut self, e: Expr) -> Expr {
        match self.rng.gen_range(0..10) {
            0 => bin(BinOp::Add, e, Expr::Const(0)),
            1 => Expr::MulC(b(e), 1),
            2 => {
                let k = self.rng.gen_range(1..4);
                bin(BinOp::Add, e, Expr::MulC(b(Expr::Const(k)), 2))
            }
            3 => Expr::MulC(b(e), 1 << self.rng.gen_range(1..4)),
            _ => e,
        }
    }

    fn abs(&mut self) -> (Vec<Stmt>, Expr) {
        let a = Expr::Var(Var::A);
        match self.rng.gen_range(0..4) {
            0 | 1 => (vec![], Expr::Abs(b(a))),
            2 => {
                let r = self.leaf(&[Var::B]);
                (
                    vec![Stmt::Assign(Var::X, bin(self.binop(), a, r))],
                    Expr::Abs(b(Expr::Var(Var::X))),
                )
            }
            _ => (vec![], bin(BinOp::Add, Expr::Abs(b(a)), Expr::Var(Var::B))),
        }
    }

    fn minmax(&mut self) -> (Vec<Stmt>, Expr) {
        let op = if self.rng.gen_bool(0.5) { CmpOp::Lt } else { CmpOp::Gt };
        let rhs = if self.rng.gen_bool(0.8) {
            Expr::Var(Var::B)
        } else {
            self.konst()
        };
        let body = vec![Stmt::If {
            op,
            lhs: Expr::Var(Var::A),
            rhs: rhs.clone(),
            then: vec![Stmt::Assign(Var::X, Expr::Var(Var::A))],
            els: vec![Stmt::Assign(Var::X, rhs)],
        }];
        let ret = if self.rng.gen_bool(0.7) {
            Expr::Var(Var::X)
        } else {
            let k = self.konst();
            bin(BinOp::Add, Expr::Var(Var::X), k)
        };
        (body, ret)
    }

    fn select(&mut self) -> (Vec<Stmt>, Expr) {
        let args = [Var::A, Var::B];
        let rhs = if self.rng.gen_bool(0.5) {
            Expr::Var(Var::B)
        } else {
            Expr::Const(self.rng.gen_range(-20..120))
        };
        let then = self.expr(&args, 1);
        let els_e = self.expr(&args, 1);
        let one_armed = self.rng.gen_bool(0.3);
        let mut body = Vec::new();
        if one_armed {
            body.push(Stmt::Assign(Var::X, els_e.clone()));
        }
        body.push(Stmt::If {
            op: self.cmpop(),
            lhs: Expr::Var(Var::A),
            rhs,
            then: vec![Stmt::Assign(Var::X, then)],
            els: if one_armed {
                vec![]
            } else {
                vec![Stmt::Assign(Var::X, els_e)]
            },
        });
        let ret = if self.rng.gen_bool(0.6) {
            Expr::Var(Var::X)
        } else {
            bin(self.binop(), Expr::Var(Var::X), Expr::Var(Var::B))
        };
        (body, ret)
    }

    fn arith(&mut self) -> (Vec<Stmt>, Expr) {
        let mut vars = vec![Var::A, Var::B];
        let mut body = Vec::new();
        for local in [Var::X, Var::Y].into_iter().take(self.rng.gen_range(0..=2)) {
            let e = if self.rng.gen_bool(0.2) {
                self.var(&vars)
            } else {
                let e = self.expr(&vars, 2);
                self.decorate(e)
            };
            body.push(Stmt::Assign(local, e));
            vars.push(local);
        }
        if body.len() == 1 && self.rng.gen_bool(0.3) {
            // reassignment of an existing local
            let e = self.expr(&vars, 1);
            body.push(Stmt::Assign(Var::X, e));
        }
        let e = self.expr(&vars, 2);
        (body, self.decorate(e))
    }

    fn bittrick(&mut self) -> (Vec<Stmt>, Expr) {
        let a = || Expr::Var(Var::A);
        let bv = || Expr::Var(Var::B);
        let top = self.w.bits() - 1;
        match self.rng.gen_range(0..9) {
            0 => (vec![], bin(BinOp::And, a(), bin(BinOp::Sub, a(), Expr::Const(1)))),
            1 => (vec![], bin(BinOp::And, a(), Expr::Neg(b(a())))),
            2 => (vec![], bin(BinOp::Or, a(), bin(BinOp::Sub, a(), Expr::Const(1)))),
            3 => (
                vec![],
                bin(
                    BinOp::Or,
                    Expr::Shift(ShiftOp::Sar, b(a()), top),
                    Expr::Shift(ShiftOp::Shr, b(Expr::Neg(b(a()))), top),
                ),
            ),
            4 => (
                vec![Stmt::Assign(Var::X, Expr::Shift(ShiftOp::Sar, b(a()), top))],
                bin(BinOp::Sub, bin(BinOp::Xor, a(), Expr::Var(Var::X)), Expr::Var(Var::X)),
            ),
            5 => (
                vec![],
                bin(
                    BinOp::Add,
                    bin(BinOp::And, a(), bv()),
                    Expr::Shift(ShiftOp::Sar, b(bin(BinOp::Xor, a(), bv())), 1),
                ),
            ),
            6 => {
                let k = self.shift_amount();
                (vec![], bin(BinOp::Xor, a(), Expr::Shift(ShiftOp::Shr, b(a()), k)))
            }
            7 => (
                // branch-free min
                vec![
                    Stmt::Assign(Var::X, bin(BinOp::Xor, a(), bv())),
                    Stmt::Assign(Var::Y, Expr::Neg(b(Expr::Cmp(CmpOp::Lt, b(a()), b(bv()))))),
                ],
                bin(BinOp::Xor, bv(), bin(BinOp::And, Expr::Var(Var::X), Expr::Var(Var::Y))),
            ),
            _ => (
                vec![],
                bin(
                    BinOp::Sub,
                    a(),
                    bin(BinOp::And, Expr::Shift(ShiftOp::Shr, b(a()), 1), Expr::Const(0x5555_5555)),
                ),
            ),
        }
    }

    fn compare(&mut self) -> (Vec<Stmt>, Expr) {
        let args = [Var::A, Var::B];
        let l = self.expr(&args, 1);
        let r = self.leaf(&args);
        let c = Expr::Cmp(self.cmpop(), b(l), b(r));
        match self.rng.gen_range(0..3) {
            0 => (vec![], c),
            1 => {
                let c2 = Expr::Cmp(self.cmpop(), b(Expr::Var(Var::B)), b(self.konst()));
                (vec![], bin(BinOp::Add, c, c2))
            }
            _ => {
                let k = self.konst();
                (vec![Stmt::Assign(Var::X, c)], bin(self.binop(), Expr::Var(Var::X), k))
            }
        }
    }

    fn looped(&mut self) -> (Vec<Stmt>, Expr) {
        let init = if self.rng.gen_bool(0.6) {
            Expr::Var(Var::A)
        } else {
            self.konst()
        };
        let x = || Expr::Var(Var::X);
        let mut body = Vec::new();
        for _ in 0..self.rng.gen_range(1..=2) {
            let e = match self.rng.gen_range(0..4) {
                0 => Expr::MulC(b(x()), *MULS.choose(&mut self.rng).unwrap()),
                1 => Expr::Shift(ShiftOp::Sar, b(x()), self.rng.gen_range(1..3)),
                _ => {
                    let r = self.leaf(&[Var::A, Var::B]);
                    bin(self.binop(), x(), r)
                }
            };
            body.push(Stmt::Assign(Var::X, e));
        }
        let n = self.rng.gen_range(1..=4);
        let ret = if self.rng.gen_bool(0.6) {
            x()
        } else {
            bin(self.binop(), x(), Expr::Var(Var::B))
        };
        (vec![Stmt::Assign(Var::X, init), Stmt::Repeat(n, body)], ret)
    }

    fn memory(&mut self) -> (Vec<Stmt>, Expr) {
        let step = self.w.bytes() as i16;
        let mut disp = || step * self.rng.gen_range(0..4);
        let (d1, d2) = (disp(), disp());
        let a = || Expr::Var(Var::A);
        let x = || Expr::Var(Var::X);
        match self.rng.gen_range(0..5) {
            0 | 1 => {
                let k = *[1, 1, 2, 4].choose(&mut self.rng).unwrap();
                let op = if self.rng.gen_bool(0.7) { BinOp::Sub } else { BinOp::Add };
                let ret = if self.rng.gen_bool(0.5) { x() } else { Expr::Load(d2) };
                (
                    vec![
                        Stmt::Assign(Var::X, Expr::Load(d1)),
                        Stmt::Assign(Var::X, bin(op, x(), Expr::Const(k))),
                        Stmt::Store(d1, x()),
                    ],
                    ret,
                )
            }
            2 => (
                vec![Stmt::Store(d1, bin(self.binop(), Expr::Load(d1), a()))],
                Expr::Load(d1),
            ),
            3 => (
                vec![],
                bin(self.binop(), Expr::Load(d1), Expr::Load(d2)),
            ),
            _ => (
                vec![Stmt::Assign(Var::X, Expr::Load(d1)), Stmt::Store(d2, a())],
                bin(BinOp::Add, x(), a()),
            ),
        }
    }
}

/// Draws a task reproducibly from `seed`. Loop tasks make up 20%.
pub fn gen_task(seed: u64) -> SourceTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = if rng.gen_bool(0.2) {
        Family::Loop
    } else {
        *[
            Family::Abs,
            Family::Select,
            Family::MinMax,
            Family::Arith,
            Family::BitTrick,
            Family::Compare,
            Family::Memory,
        ]
        .choose(&mut rng)
        .unwrap()
    };
    gen_task_in(family, seed, rng)
}

/// Draws a task of a fixed family.
pub fn gen_task_of(family: Family, seed: u64) -> SourceTask {
    gen_task_in(family, seed, ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))
}

fn gen_task_in(family: Family, seed: u64, mut rng: ChaCha8Rng) -> SourceTask {
    let width = if rng.gen_bool(0.75) { Width::B32 } else { Width::B64 };
    let mut g = Gen { rng, w: width };
    let (body, ret) = match family {
        Family::Abs => g.abs(),
        Family::Select => g.select(),
        Family::MinMax => g.minmax(),
        Family::Arith => g.arith(),
        Family::BitTrick => g.bittrick(),
        Family::Compare => g.compare(),
        Family::Loop => g.looped(),
        Family::Memory => g.memory(),
    };
    SourceTask {
        seed,
        family,
        width,
        memory: family == Family::Memory,
        body,
        ret,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(a: i64, b: i64) -> Env {
        Env {
            vars: [a as u64, b as u64, 0, 0],
            ptr: 0,
            mem: vec![0; 64],
        }
    }

    #[test]
    fn reproducible() {
        for s in 0..50 {
            assert_eq!(gen_task(s), gen_task(s));
        }
    }

    #[test]
    fn every_family_appears() {
        let fams: std::collections::HashSet<_> = (0..400).map(|s| gen_task(s).family).collect();
        assert_eq!(fams.len(), Family::ALL.len());
    }

    #[test]
    fn abs_evaluates() {
        let t = SourceTask {
            seed: 0,
            family: Family::Abs,
            width: Width::B32,
            memory: false,
            body: vec![],
            ret: Expr::Abs(b(Expr::Var(Var::A))),
        };
        assert_eq!(t.eval(&mut env(-5, 0)), Ok(5));
        assert_eq!(t.eval(&mut env(i32::MIN as i64, 0)), Ok(0x8000_0000));
    }

    #[test]
    fn loops_and_memory_evaluate() {
        let t = SourceTask {
            seed: 0,
            family: Family::Loop,
            width: Width::B32,
            memory: false,
            body: vec![
                Stmt::Assign(Var::X, Expr::Var(Var::A)),
                Stmt::Repeat(3, vec![Stmt::Assign(Var::X, Expr::MulC(b(Expr::Var(Var::X)), 2))]),
            ],
            ret: Expr::Var(Var::X),
        };
        assert_eq!(t.eval(&mut env(5, 0)), Ok(40));

        let m = SourceTask {
            seed: 0,
            family: Family::Memory,
            width: Width::B32,
            memory: true,
            body: vec![Stmt::Store(4, bin(BinOp::Sub, Expr::Load(4), Expr::Const(1)))],
            ret: Expr::Load(4),
        };
        let mut e = env(0, 0);
        e.ptr = 8;
        e.mem[12] = 10;
        assert_eq!(m.eval(&mut e), Ok(9));
        e.ptr = 62;
        assert_eq!(m.eval(&mut e), Err(EvalFault));
    }
}
