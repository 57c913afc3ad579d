//! MiniASM: a small x86-64-flavoured assembly language in AT&T syntax.
//!
//! Eight general purpose registers (`rax rbx rcx rdx rsi rdi r8 r9`) with
//! 64/32/16/8-bit views, two's-complement integer arithmetic, four flags and
//! a flat byte-addressed memory reached through `disp(%base)` operands. There
//! is no stack pointer, no calls and no SIMD.
//!
//! | opcode          | operands (src, dst)          | widths        | flags written      | latency |
//! |-----------------|------------------------------|---------------|--------------------|---------|
//! | `mov`           | reg/imm/mem, reg/mem         | b w l q       | none               | 1       |
//! | `movz`, `movs`  | reg/mem (narrow), reg (wide) | bl bq wl wq (sl q) | none          | 1       |
//! | `lea`           | mem, reg                     | l q           | none               | 1       |
//! | `add` `sub`     | reg/imm/mem, reg/mem         | b w l q       | ZF SF CF OF        | 1       |
//! | `and` `or` `xor`| reg/imm/mem, reg/mem         | b w l q       | ZF SF, CF=OF=0     | 1       |
//! | `imul`          | reg/imm/mem, reg             | b w l q       | ZF SF, CF=OF=ovf   | 3       |
//! | `neg`           | reg/mem                      | b w l q       | ZF SF CF OF        | 1       |
//! | `not`           | reg/mem                      | b w l q       | none               | 1       |
//! | `shl` `sar` `shr`| imm or `%cl`, reg/mem       | b w l q       | ZF SF CF OF (count≠0) | 2    |
//! | `cmp` `test`    | reg/imm/mem, reg/mem         | b w l q       | as `sub` / `and`   | 1       |
//! | `sete` `setne` `setl` `setg` | 8-bit reg       | b             | none               | 1       |
//! | `jmp` `je` `jne` `jl` `jg` | label             |               | none               | 1       |
//! | `retq`          |                              |               | none               | 1       |
//!
//! Any operand that touches memory adds 3 to the latency (`lea` does not
//! touch memory). Writes to a 32-bit register view zero the upper half, 8
//! and 16-bit writes merge. Memory accesses outside `[0, M)` fault.

mod parse;
pub mod token;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::parse;
pub use token::{detokenize, tokenize, TokenSequence, Vocab};

/// Number of architectural registers.
pub const NUM_REGS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reg {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    R8,
    R9,
}

impl Reg {
    pub const ALL: [Reg; NUM_REGS] = [
        Reg::Rax,
        Reg::Rbx,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rsi,
        Reg::Rdi,
        Reg::R8,
        Reg::R9,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Reg {
        Reg::ALL[i]
    }

    /// x86 spelling of this register at the given width, without `%`.
    pub fn name(self, width: Width) -> &'static str {
        const NAMES: [[&str; 4]; NUM_REGS] = [
            ["al", "ax", "eax", "rax"],
            ["bl", "bx", "ebx", "rbx"],
            ["cl", "cx", "ecx", "rcx"],
            ["dl", "dx", "edx", "rdx"],
            ["sil", "si", "esi", "rsi"],
            ["dil", "di", "edi", "rdi"],
            ["r8b", "r8w", "r8d", "r8"],
            ["r9b", "r9w", "r9d", "r9"],
        ];
        NAMES[self.index()][width.index()]
    }

    /// Looks up a register view by its name (without `%`).
    pub fn lookup(name: &str) -> Option<RegRef> {
        for reg in Reg::ALL {
            for width in Width::ALL {
                if reg.name(width) == name {
                    return Some(RegRef { reg, width });
                }
            }
        }
        None
    }
}

/// Operand / operation width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Width {
    B8,
    B16,
    B32,
    B64,
}

impl Width {
    pub const ALL: [Width; 4] = [Width::B8, Width::B16, Width::B32, Width::B64];

    pub fn bits(self) -> u32 {
        match self {
            Width::B8 => 8,
            Width::B16 => 16,
            Width::B32 => 32,
            Width::B64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    pub fn from_bits(bits: u32) -> Option<Width> {
        match bits {
            8 => Some(Width::B8),
            16 => Some(Width::B16),
            32 => Some(Width::B32),
            64 => Some(Width::B64),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn suffix(self) -> char {
        match self {
            Width::B8 => 'b',
            Width::B16 => 'w',
            Width::B32 => 'l',
            Width::B64 => 'q',
        }
    }

    pub fn from_suffix(c: char) -> Option<Width> {
        match c {
            'b' => Some(Width::B8),
            'w' => Some(Width::B16),
            'l' => Some(Width::B32),
            'q' => Some(Width::B64),
            _ => None,
        }
    }

    /// All-ones mask covering this width.
    pub fn mask(self) -> u64 {
        match self {
            Width::B64 => u64::MAX,
            w => (1u64 << w.bits()) - 1,
        }
    }
}

/// A register viewed at a particular width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegRef {
    pub reg: Reg,
    pub width: Width,
}

impl RegRef {
    pub fn new(reg: Reg, width: Width) -> Self {
        RegRef { reg, width }
    }
}

impl fmt::Display for RegRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.reg.name(self.width))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(RegRef),
    /// Two's-complement immediate; truncated to the operation width when used.
    Imm(i64),
    /// `disp(%base)`; the base is always read as a 64-bit register.
    Mem { base: Reg, disp: i16 },
    Label(String),
}

impl Operand {
    pub fn reg(reg: Reg, width: Width) -> Operand {
        Operand::Reg(RegRef { reg, width })
    }

    pub fn mem(base: Reg, disp: i16) -> Operand {
        Operand::Mem { base, disp }
    }

    pub fn is_mem(&self) -> bool {
        matches!(self, Operand::Mem { .. })
    }
}

pub(crate) fn fmt_hex(f: &mut fmt::Formatter<'_>, v: i64) -> fmt::Result {
    if v < 0 {
        write!(f, "-0x{:x}", v.unsigned_abs())
    } else {
        write!(f, "0x{v:x}")
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => {
                f.write_str("$")?;
                fmt_hex(f, *v)
            }
            Operand::Mem { base, disp } => {
                if *disp != 0 {
                    fmt_hex(f, *disp as i64)?;
                }
                write!(f, "(%{})", base.name(Width::B64))
            }
            Operand::Label(l) => f.write_str(l),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Opcode {
    Mov,
    Movz,
    Movs,
    Lea,
    Add,
    Sub,
    Imul,
    Neg,
    Not,
    And,
    Or,
    Xor,
    Shl,
    Sar,
    Shr,
    Cmp,
    Test,
    Sete,
    Setne,
    Setl,
    Setg,
    Jmp,
    Je,
    Jne,
    Jl,
    Jg,
    LabelDef,
    Ret,
}

impl Opcode {
    pub const ALL: [Opcode; 28] = [
        Opcode::Mov,
        Opcode::Movz,
        Opcode::Movs,
        Opcode::Lea,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Imul,
        Opcode::Neg,
        Opcode::Not,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Shl,
        Opcode::Sar,
        Opcode::Shr,
        Opcode::Cmp,
        Opcode::Test,
        Opcode::Sete,
        Opcode::Setne,
        Opcode::Setl,
        Opcode::Setg,
        Opcode::Jmp,
        Opcode::Je,
        Opcode::Jne,
        Opcode::Jl,
        Opcode::Jg,
        Opcode::LabelDef,
        Opcode::Ret,
    ];

    /// Family name used by the latency table file format.
    pub fn family(self) -> &'static str {
        match self {
            Opcode::Mov => "mov",
            Opcode::Movz => "movz",
            Opcode::Movs => "movs",
            Opcode::Lea => "lea",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Imul => "imul",
            Opcode::Neg => "neg",
            Opcode::Not => "not",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Shl => "shl",
            Opcode::Sar => "sar",
            Opcode::Shr => "shr",
            Opcode::Cmp => "cmp",
            Opcode::Test => "test",
            Opcode::Sete => "sete",
            Opcode::Setne => "setne",
            Opcode::Setl => "setl",
            Opcode::Setg => "setg",
            Opcode::Jmp => "jmp",
            Opcode::Je => "je",
            Opcode::Jne => "jne",
            Opcode::Jl => "jl",
            Opcode::Jg => "jg",
            Opcode::LabelDef => "label",
            Opcode::Ret => "ret",
        }
    }

    pub fn from_family(name: &str) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|op| op.family() == name)
    }

    pub fn is_jump(self) -> bool {
        matches!(
            self,
            Opcode::Jmp | Opcode::Je | Opcode::Jne | Opcode::Jl | Opcode::Jg
        )
    }

    pub fn is_conditional_jump(self) -> bool {
        matches!(self, Opcode::Je | Opcode::Jne | Opcode::Jl | Opcode::Jg)
    }

    pub fn is_setcc(self) -> bool {
        matches!(
            self,
            Opcode::Sete | Opcode::Setne | Opcode::Setl | Opcode::Setg
        )
    }

    /// Whether the opcode carries a width suffix in its mnemonic.
    fn suffixed(self) -> bool {
        !(self.is_jump() || self.is_setcc() || matches!(self, Opcode::Ret | Opcode::LabelDef))
    }

    pub fn arity(self) -> usize {
        match self {
            Opcode::Ret => 0,
            Opcode::Neg | Opcode::Not | Opcode::LabelDef => 1,
            op if op.is_jump() || op.is_setcc() => 1,
            _ => 2,
        }
    }

    /// Whether the instruction updates the flags register.
    pub fn writes_flags(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::Imul
                | Opcode::Neg
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Shl
                | Opcode::Sar
                | Opcode::Shr
                | Opcode::Cmp
                | Opcode::Test
        )
    }

    pub fn reads_flags(self) -> bool {
        self.is_setcc() || self.is_conditional_jump()
    }
}

/// One line of a MiniASM function body: an operation or a label definition.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub op: Opcode,
    /// Operation (destination) width; `B8` for `set*`, `B64` for control flow.
    pub width: Width,
    /// Source width for `movz`/`movs`; equal to `width` otherwise.
    pub src_width: Width,
    pub operands: Vec<Operand>,
}

impl Instruction {
    pub fn new(op: Opcode, width: Width, operands: Vec<Operand>) -> Self {
        Instruction {
            op,
            width,
            src_width: width,
            operands,
        }
    }

    /// `movz`/`movs` with distinct source and destination widths.
    pub fn extend(op: Opcode, src_width: Width, width: Width, src: Operand, dst: Operand) -> Self {
        Instruction {
            op,
            width,
            src_width,
            operands: vec![src, dst],
        }
    }

    pub fn label(name: impl Into<String>) -> Self {
        Instruction::new(Opcode::LabelDef, Width::B64, vec![Operand::Label(name.into())])
    }

    pub fn jump(op: Opcode, target: impl Into<String>) -> Self {
        Instruction::new(op, Width::B64, vec![Operand::Label(target.into())])
    }

    pub fn ret() -> Self {
        Instruction::new(Opcode::Ret, Width::B64, vec![])
    }

    pub fn is_label(&self) -> bool {
        self.op == Opcode::LabelDef
    }

    /// The label named by a jump or label definition.
    pub fn label_name(&self) -> Option<&str> {
        match self.operands.first() {
            Some(Operand::Label(l)) => Some(l),
            _ => None,
        }
    }

    pub fn touches_memory(&self) -> bool {
        self.op != Opcode::Lea && self.operands.iter().any(Operand::is_mem)
    }

    pub fn mnemonic(&self) -> String {
        match self.op {
            Opcode::Ret => "retq".to_string(),
            Opcode::LabelDef => String::new(),
            Opcode::Movz | Opcode::Movs => format!(
                "{}{}{}",
                self.op.family(),
                self.src_width.suffix(),
                self.width.suffix()
            ),
            op if op.suffixed() => format!("{}{}", op.family(), self.width.suffix()),
            op => op.family().to_string(),
        }
    }
}

/// Decodes a mnemonic into (opcode, width, source width).
pub fn decode_mnemonic(m: &str) -> Option<(Opcode, Width, Width)> {
    match m {
        "ret" | "retq" => return Some((Opcode::Ret, Width::B64, Width::B64)),
        "jmp" => return Some((Opcode::Jmp, Width::B64, Width::B64)),
        "je" => return Some((Opcode::Je, Width::B64, Width::B64)),
        "jne" => return Some((Opcode::Jne, Width::B64, Width::B64)),
        "jl" => return Some((Opcode::Jl, Width::B64, Width::B64)),
        "jg" => return Some((Opcode::Jg, Width::B64, Width::B64)),
        "sete" => return Some((Opcode::Sete, Width::B8, Width::B8)),
        "setne" => return Some((Opcode::Setne, Width::B8, Width::B8)),
        "setl" => return Some((Opcode::Setl, Width::B8, Width::B8)),
        "setg" => return Some((Opcode::Setg, Width::B8, Width::B8)),
        _ => {}
    }
    if m.len() == 6 && (m.starts_with("movz") || m.starts_with("movs")) {
        let op = if m.starts_with("movz") {
            Opcode::Movz
        } else {
            Opcode::Movs
        };
        let mut cs = m[4..].chars();
        let src = Width::from_suffix(cs.next()?)?;
        let dst = Width::from_suffix(cs.next()?)?;
        return Some((op, dst, src));
    }
    let (base, suffix) = m.split_at(m.len().checked_sub(1)?);
    let width = Width::from_suffix(suffix.chars().next()?)?;
    let op = match base {
        "mov" => Opcode::Mov,
        "lea" => Opcode::Lea,
        "add" => Opcode::Add,
        "sub" => Opcode::Sub,
        "imul" => Opcode::Imul,
        "neg" => Opcode::Neg,
        "not" => Opcode::Not,
        "and" => Opcode::And,
        "or" => Opcode::Or,
        "xor" => Opcode::Xor,
        "shl" => Opcode::Shl,
        "sar" => Opcode::Sar,
        "shr" => Opcode::Shr,
        "cmp" => Opcode::Cmp,
        "test" => Opcode::Test,
        _ => return None,
    };
    Some((op, width, width))
}

/// Every mnemonic spelling the printer can produce, in a fixed order.
pub fn all_mnemonics() -> Vec<String> {
    let mut out = Vec::new();
    for op in Opcode::ALL {
        match op {
            Opcode::LabelDef => {}
            Opcode::Movz | Opcode::Movs => {
                for (s, d) in extension_pairs(op) {
                    out.push(Instruction::extend(op, s, d, Operand::Imm(0), Operand::Imm(0)).mnemonic());
                }
            }
            Opcode::Lea => {
                for w in [Width::B32, Width::B64] {
                    out.push(Instruction::new(op, w, vec![]).mnemonic());
                }
            }
            op if op.suffixed() => {
                for w in Width::ALL {
                    out.push(Instruction::new(op, w, vec![]).mnemonic());
                }
            }
            op => out.push(Instruction::new(op, Width::B64, vec![]).mnemonic()),
        }
    }
    out
}

/// Legal (source, destination) width pairs for `movz` / `movs`.
pub fn extension_pairs(op: Opcode) -> Vec<(Width, Width)> {
    let mut pairs = vec![
        (Width::B8, Width::B16),
        (Width::B8, Width::B32),
        (Width::B8, Width::B64),
        (Width::B16, Width::B32),
        (Width::B16, Width::B64),
    ];
    if op == Opcode::Movs {
        pairs.push((Width::B32, Width::B64));
    }
    pairs
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.op == Opcode::LabelDef {
            return write!(f, "{}:", self.label_name().unwrap_or("?"));
        }
        write!(f, "  {}", self.mnemonic())?;
        for (i, o) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{o}")?;
        }
        Ok(())
    }
}

/// A MiniASM function.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    pub name: String,
    pub instructions: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown opcode `{mnemonic}`")]
    UnknownOpcode { line: usize, mnemonic: String },
    #[error("line {line}: unknown register `%{name}`")]
    UnknownRegister { line: usize, name: String },
    #[error("line {line}: unresolved label `{label}`")]
    UnresolvedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: bad operands for `{mnemonic}`: {msg}")]
    OperandMismatch {
        line: usize,
        mnemonic: String,
        msg: String,
    },
    #[error("function body must end with `retq` or `jmp`")]
    NoTerminator,
    #[error("missing `.name:` function header")]
    MissingHeader,
}

impl Program {
    /// Builds a program, checking every structural invariant.
    pub fn new(name: impl Into<String>, instructions: Vec<Instruction>) -> Result<Self, IsaError> {
        let p = Program {
            name: name.into(),
            instructions,
        };
        p.validate()?;
        Ok(p)
    }

    /// Number of non-label instructions.
    pub fn len_ops(&self) -> usize {
        self.instructions.iter().filter(|i| !i.is_label()).count()
    }

    /// Checks operand kinds/widths per opcode, label uniqueness, jump
    /// resolution and the terminator rule. Line numbers refer to the
    /// printed form (header is line 1).
    pub fn validate(&self) -> Result<(), IsaError> {
        let mut defs: HashMap<&str, usize> = HashMap::new();
        for (i, ins) in self.instructions.iter().enumerate() {
            let line = i + 2;
            check_operands(ins, line)?;
            if ins.is_label() {
                let name = ins.label_name().unwrap_or_default();
                if defs.insert(name, i).is_some() {
                    return Err(IsaError::DuplicateLabel {
                        line,
                        label: name.to_string(),
                    });
                }
            }
        }
        for (i, ins) in self.instructions.iter().enumerate() {
            if ins.op.is_jump() {
                let target = ins.label_name().unwrap_or_default();
                if !defs.contains_key(target) {
                    return Err(IsaError::UnresolvedLabel {
                        line: i + 2,
                        label: target.to_string(),
                    });
                }
            }
        }
        match self.instructions.last() {
            Some(last) if matches!(last.op, Opcode::Ret | Opcode::Jmp) => Ok(()),
            _ => Err(IsaError::NoTerminator),
        }
    }

    /// Renames labels to `.L1, .L2, ...` in order of first textual appearance.
    pub fn canonicalize_labels(&self) -> Program {
        let mut names: HashMap<String, String> = HashMap::new();
        for ins in &self.instructions {
            if let Some(l) = ins.label_name() {
                if !names.contains_key(l) {
                    let fresh = format!(".L{}", names.len() + 1);
                    names.insert(l.to_string(), fresh);
                }
            }
        }
        self.rename_labels(&names)
    }

    /// Applies a label renaming; labels missing from the map are kept.
    pub fn rename_labels(&self, names: &HashMap<String, String>) -> Program {
        let instructions = self
            .instructions
            .iter()
            .map(|ins| {
                let mut ins = ins.clone();
                for o in &mut ins.operands {
                    if let Operand::Label(l) = o {
                        if let Some(n) = names.get(l.as_str()) {
                            *l = n.clone();
                        }
                    }
                }
                ins
            })
            .collect();
        Program {
            name: self.name.clone(),
            instructions,
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.canonicalize_labels() == *self
    }

    /// Printed form without the header line, used for name-insensitive dedup.
    pub fn body_text(&self) -> String {
        let mut s = String::new();
        for ins in &self.instructions {
            s.push_str(&ins.to_string());
            s.push('\n');
        }
        s
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Program {
        self.name = name.into();
        self
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, ".{}:", self.name)?;
        for ins in &self.instructions {
            writeln!(f, "{ins}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Reg,
    Imm,
    Mem,
    Label,
}

fn kind(o: &Operand) -> Kind {
    match o {
        Operand::Reg(_) => Kind::Reg,
        Operand::Imm(_) => Kind::Imm,
        Operand::Mem { .. } => Kind::Mem,
        Operand::Label(_) => Kind::Label,
    }
}

fn check_operands(ins: &Instruction, line: usize) -> Result<(), IsaError> {
    let bad = |msg: &str| IsaError::OperandMismatch {
        line,
        mnemonic: if ins.is_label() {
            "label".to_string()
        } else {
            ins.mnemonic()
        },
        msg: msg.to_string(),
    };
    let ops = &ins.operands;
    if ops.len() != ins.op.arity() {
        return Err(bad(&format!(
            "expected {} operand(s), got {}",
            ins.op.arity(),
            ops.len()
        )));
    }
    let reg_width_ok = |o: &Operand, w: Width| match o {
        Operand::Reg(r) => r.width == w,
        _ => true,
    };
    use Kind::*;
    match ins.op {
        Opcode::Ret => {}
        Opcode::LabelDef => {
            if kind(&ops[0]) != Label {
                return Err(bad("label definition needs a label"));
            }
        }
        op if op.is_jump() => {
            if kind(&ops[0]) != Label {
                return Err(bad("jump target must be a label"));
            }
        }
        op if op.is_setcc() => match &ops[0] {
            Operand::Reg(r) if r.width == Width::B8 => {}
            _ => return Err(bad("destination must be an 8-bit register")),
        },
        Opcode::Movz | Opcode::Movs => {
            if !extension_pairs(ins.op).contains(&(ins.src_width, ins.width)) {
                return Err(bad("illegal extension widths"));
            }
            if !matches!(kind(&ops[0]), Reg | Mem) || kind(&ops[1]) != Reg {
                return Err(bad("expected reg/mem, reg"));
            }
            if !reg_width_ok(&ops[0], ins.src_width) || !reg_width_ok(&ops[1], ins.width) {
                return Err(bad("register width does not match suffix"));
            }
        }
        Opcode::Lea => {
            if kind(&ops[0]) != Mem || kind(&ops[1]) != Reg {
                return Err(bad("expected mem, reg"));
            }
            if !matches!(ins.width, Width::B32 | Width::B64) || !reg_width_ok(&ops[1], ins.width) {
                return Err(bad("lea needs a 32 or 64-bit destination"));
            }
        }
        Opcode::Neg | Opcode::Not => {
            if !matches!(kind(&ops[0]), Reg | Mem) || !reg_width_ok(&ops[0], ins.width) {
                return Err(bad("expected reg/mem of operation width"));
            }
        }
        Opcode::Shl | Opcode::Sar | Opcode::Shr => {
            match &ops[0] {
                Operand::Imm(_) => {}
                Operand::Reg(r) if r.reg == crate::isa::Reg::Rcx && r.width == Width::B8 => {}
                _ => return Err(bad("shift count must be an immediate or %cl")),
            }
            if !matches!(kind(&ops[1]), Reg | Mem) || !reg_width_ok(&ops[1], ins.width) {
                return Err(bad("expected reg/mem destination of operation width"));
            }
        }
        Opcode::Imul => {
            if !matches!(kind(&ops[0]), Reg | Imm | Mem) || kind(&ops[1]) != Reg {
                return Err(bad("expected reg/imm/mem, reg"));
            }
            if !reg_width_ok(&ops[0], ins.width) || !reg_width_ok(&ops[1], ins.width) {
                return Err(bad("register width does not match suffix"));
            }
        }
        _ => {
            // mov and the two-operand ALU ops
            if !matches!(kind(&ops[0]), Reg | Imm | Mem) || !matches!(kind(&ops[1]), Reg | Mem) {
                return Err(bad("expected reg/imm/mem, reg/mem"));
            }
            if ops[0].is_mem() && ops[1].is_mem() {
                return Err(bad("at most one memory operand"));
            }
            if !reg_width_ok(&ops[0], ins.width) || !reg_width_ok(&ops[1], ins.width) {
                return Err(bad("register width does not match suffix"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_names_follow_x86_convention() {
        assert_eq!(Reg::Rax.name(Width::B32), "eax");
        assert_eq!(Reg::R8.name(Width::B32), "r8d");
        assert_eq!(Reg::R9.name(Width::B8), "r9b");
        assert_eq!(Reg::Rsi.name(Width::B8), "sil");
        assert_eq!(Reg::lookup("r8w"), Some(RegRef::new(Reg::R8, Width::B16)));
        assert_eq!(Reg::lookup("xmm0"), None);
    }

    #[test]
    fn mnemonics_round_trip() {
        for m in all_mnemonics() {
            let (op, w, sw) = decode_mnemonic(&m).unwrap_or_else(|| panic!("{m}"));
            let ins = Instruction {
                op,
                width: w,
                src_width: sw,
                operands: vec![],
            };
            assert_eq!(ins.mnemonic(), m);
        }
        assert_eq!(decode_mnemonic("movslq"), Some((Opcode::Movs, Width::B64, Width::B32)));
    }

    #[test]
    fn canonicalization_orders_by_first_appearance() {
        let p = parse(".g:\n  jmp .Lb\n.La:\n  retq\n.Lb:\n  jmp .La\n").unwrap();
        let c = p.canonicalize_labels();
        assert_eq!(
            c.body_text(),
            "  jmp .L1\n.L2:\n  retq\n.L1:\n  jmp .L2\n"
        );
        assert_eq!(c.canonicalize_labels(), c);
        let single = parse(".g:\n  je .Lfoo\n.Lfoo:\n  retq\n").unwrap().canonicalize_labels();
        assert_eq!(single.instructions[1], Instruction::label(".L1"));
    }

    #[test]
    fn validation_rejects_bad_forms() {
        let p = Program {
            name: "f".into(),
            instructions: vec![
                Instruction::new(
                    Opcode::Add,
                    Width::B32,
                    vec![Operand::mem(Reg::Rdi, 0), Operand::mem(Reg::Rsi, 4)],
                ),
                Instruction::ret(),
            ],
        };
        assert!(matches!(p.validate(), Err(IsaError::OperandMismatch { .. })));
        let q = Program {
            name: "f".into(),
            instructions: vec![Instruction::new(
                Opcode::Mov,
                Width::B32,
                vec![Operand::Imm(1), Operand::reg(Reg::Rax, Width::B32)],
            )],
        };
        assert_eq!(q.validate(), Err(IsaError::NoTerminator));
    }
}
