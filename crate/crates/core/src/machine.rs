//! Deterministic MiniASM interpreter with fuel, a backward-jump loop bound,
//! and live-out masked state comparison.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::isa::{Opcode, Operand, Program, Reg, Width, NUM_REGS};

/// Default memory image size in bytes.
pub const DEFAULT_MEM_SIZE: usize = 256;
/// Default number of executed instructions allowed per test-case run.
pub const DEFAULT_FUEL: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    Zf,
    Sf,
    Cf,
    Of,
}

impl Flag {
    pub const ALL: [Flag; 4] = [Flag::Zf, Flag::Sf, Flag::Cf, Flag::Of];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            Flag::Zf => "ZF",
            Flag::Sf => "SF",
            Flag::Cf => "CF",
            Flag::Of => "OF",
        }
    }

    pub fn from_name(s: &str) -> Option<Flag> {
        Flag::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// A set of flags, used both for flag values and for live-flag masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Flags(pub u8);

impl Flags {
    pub const ALL: Flags = Flags(0b1111);
    pub const NONE: Flags = Flags(0);

    pub fn get(self, f: Flag) -> bool {
        self.0 & f.bit() != 0
    }

    pub fn set(&mut self, f: Flag, v: bool) {
        if v {
            self.0 |= f.bit();
        } else {
            self.0 &= !f.bit();
        }
    }

    pub fn names(self) -> Vec<String> {
        Flag::ALL
            .into_iter()
            .filter(|f| self.get(*f))
            .map(|f| f.name().to_string())
            .collect()
    }
}

/// Register file, flags and memory image. The `I` and `O` of a test case.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "StateRepr", try_from = "StateRepr")]
pub struct MachineState {
    pub regs: [u64; NUM_REGS],
    pub flags: Flags,
    pub mem: Vec<u8>,
}

impl MachineState {
    /// All-zero state with `mem_size` bytes of memory.
    pub fn new(mem_size: usize) -> Self {
        MachineState {
            regs: [0; NUM_REGS],
            flags: Flags::NONE,
            mem: vec![0; mem_size],
        }
    }

    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: u64) {
        self.regs[r.index()] = v;
    }

    pub fn with_reg(mut self, r: Reg, v: u64) -> Self {
        self.set_reg(r, v);
        self
    }
}

impl Default for MachineState {
    fn default() -> Self {
        MachineState::new(DEFAULT_MEM_SIZE)
    }
}

#[derive(Serialize, Deserialize)]
struct StateRepr {
    regs: BTreeMap<String, String>,
    flags: Vec<String>,
    mem: String,
}

impl From<MachineState> for StateRepr {
    fn from(s: MachineState) -> Self {
        StateRepr {
            regs: Reg::ALL
                .iter()
                .map(|r| (r.name(Width::B64).to_string(), format!("0x{:016x}", s.reg(*r))))
                .collect(),
            flags: s.flags.names(),
            mem: hex::encode(&s.mem),
        }
    }
}

impl TryFrom<StateRepr> for MachineState {
    type Error = String;

    fn try_from(r: StateRepr) -> Result<Self, String> {
        let mut s = MachineState::new(0);
        for (name, val) in &r.regs {
            let reg = Reg::lookup(name)
                .filter(|rr| rr.width == Width::B64)
                .ok_or_else(|| format!("unknown register `{name}`"))?;
            let digits = val.strip_prefix("0x").unwrap_or(val);
            let v = u64::from_str_radix(digits, 16).map_err(|e| format!("{name}: {e}"))?;
            s.set_reg(reg.reg, v);
        }
        for f in &r.flags {
            s.flags.set(Flag::from_name(f).ok_or_else(|| format!("unknown flag `{f}`"))?, true);
        }
        s.mem = hex::decode(&r.mem).map_err(|e| e.to_string())?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fault {
    /// A load or store touched bytes outside `[0, M)`.
    MemoryOutOfRange { addr: i64 },
    /// Control reached the end of the body without `retq`.
    FellOffEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Halt {
    Ret,
    /// Out of fuel, or the backward-jump loop bound was exceeded.
    FuelExhausted,
    Fault(Fault),
}

/// Result of a traced execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecTrace {
    pub executed: Vec<u32>,
    pub halted: Halt,
    pub final_state: MachineState,
    pub backward_jumps: u32,
}

impl ExecTrace {
    /// Whether the run stopped because the loop bound was exceeded.
    pub fn bound_exceeded(&self, loop_bound: Option<u32>) -> bool {
        matches!(loop_bound, Some(b) if self.backward_jumps > b)
    }

    /// Debug dump: one executed instruction index per line.
    pub fn dump(&self) -> String {
        let mut s = String::with_capacity(self.executed.len() * 4);
        for i in &self.executed {
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }
}

/// Summary of an untraced run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub halted: Halt,
    pub steps: u64,
    pub backward_jumps: u32,
}

impl RunSummary {
    pub fn bound_exceeded(&self, loop_bound: Option<u32>) -> bool {
        matches!(loop_bound, Some(b) if self.backward_jumps > b)
    }
}

#[derive(Debug, Clone, Copy)]
enum Loc {
    Reg(u8),
    Imm(u64),
    Mem(u8, i64),
    None,
}

#[derive(Debug, Clone, Copy)]
struct Decoded {
    op: Opcode,
    width: Width,
    src_width: Width,
    a: Loc,
    b: Loc,
    target: u32,
}

/// A program pre-decoded for fast repeated execution.
#[derive(Debug, Clone)]
pub struct Executable {
    code: Vec<Decoded>,
}

fn loc(o: &Operand) -> Loc {
    match o {
        Operand::Reg(r) => Loc::Reg(r.reg.index() as u8),
        Operand::Imm(v) => Loc::Imm(*v as u64),
        Operand::Mem { base, disp } => Loc::Mem(base.index() as u8, *disp as i64),
        Operand::Label(_) => Loc::None,
    }
}

#[inline]
fn sign_bit(v: u64, w: Width) -> bool {
    (v >> (w.bits() - 1)) & 1 == 1
}

/// Sign-extends the low `w` bits of `v`.
#[inline]
pub fn sext(v: u64, w: Width) -> i64 {
    let shift = 64 - w.bits();
    ((v << shift) as i64) >> shift
}

impl Executable {
    /// Decodes a program. Jump targets must resolve (true for any validated
    /// [`Program`]); unresolved targets behave as a fall-off-the-end fault.
    pub fn new(p: &Program) -> Self {
        let labels: HashMap<&str, u32> = p
            .instructions
            .iter()
            .enumerate()
            .filter(|(_, i)| i.is_label())
            .filter_map(|(idx, i)| i.label_name().map(|n| (n, idx as u32)))
            .collect();
        let code = p
            .instructions
            .iter()
            .map(|ins| {
                let target = if ins.op.is_jump() {
                    ins.label_name()
                        .and_then(|n| labels.get(n).copied())
                        .unwrap_or(u32::MAX)
                } else {
                    0
                };
                let (a, b) = match ins.operands.as_slice() {
                    [] => (Loc::None, Loc::None),
                    [x] => (loc(x), Loc::None),
                    [x, y, ..] => (loc(x), loc(y)),
                };
                Decoded {
                    op: ins.op,
                    width: ins.width,
                    src_width: ins.src_width,
                    a,
                    b,
                    target,
                }
            })
            .collect();
        Executable { code }
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    /// Runs in place on `st`. `on_step` sees the index of every executed
    /// instruction. With `loop_bound = Some(b)` the run stops with
    /// [`Halt::FuelExhausted`] as soon as more than `b` backward jumps were taken.
    #[inline]
    pub fn run_with(
        &self,
        st: &mut MachineState,
        fuel: u64,
        loop_bound: Option<u32>,
        mut on_step: impl FnMut(u32),
    ) -> RunSummary {
        let mut pc: usize = 0;
        let mut steps: u64 = 0;
        let mut back: u32 = 0;
        let bound = loop_bound.unwrap_or(u32::MAX);
        let halted = loop {
            if steps >= fuel {
                break Halt::FuelExhausted;
            }
            let Some(ins) = self.code.get(pc) else {
                break Halt::Fault(Fault::FellOffEnd);
            };
            steps += 1;
            on_step(pc as u32);
            match step(ins, st) {
                Ok(Next::Fall) => pc += 1,
                Ok(Next::Ret) => break Halt::Ret,
                Ok(Next::Jump) => {
                    let t = ins.target as usize;
                    if t == u32::MAX as usize {
                        break Halt::Fault(Fault::FellOffEnd);
                    }
                    if t <= pc {
                        back += 1;
                        if back > bound {
                            break Halt::FuelExhausted;
                        }
                    }
                    pc = t;
                }
                Err(f) => break Halt::Fault(f),
            }
        };
        RunSummary {
            halted,
            steps,
            backward_jumps: back,
        }
    }

    pub fn run(&self, st: &mut MachineState, fuel: u64, loop_bound: Option<u32>) -> RunSummary {
        self.run_with(st, fuel, loop_bound, |_| {})
    }

    pub fn trace(&self, input: &MachineState, fuel: u64, loop_bound: Option<u32>) -> ExecTrace {
        let mut st = input.clone();
        let mut executed = Vec::new();
        let s = self.run_with(&mut st, fuel, loop_bound, |i| executed.push(i));
        ExecTrace {
            executed,
            halted: s.halted,
            final_state: st,
            backward_jumps: s.backward_jumps,
        }
    }
}

/// Executes `p` on a copy of `input`.
pub fn execute(p: &Program, input: &MachineState, fuel: u64, loop_bound: Option<u32>) -> ExecTrace {
    assert!(fuel >= 1, "fuel must be positive");
    Executable::new(p).trace(input, fuel, loop_bound)
}

enum Next {
    Fall,
    Jump,
    Ret,
}

#[inline]
fn addr_of(st: &MachineState, base: u8, disp: i64, bytes: usize) -> Result<usize, Fault> {
    let addr = (st.regs[base as usize] as i64).wrapping_add(disp);
    if addr < 0 || (addr as u64).saturating_add(bytes as u64) > st.mem.len() as u64 {
        return Err(Fault::MemoryOutOfRange { addr });
    }
    Ok(addr as usize)
}

#[inline]
fn read(st: &MachineState, l: Loc, w: Width) -> Result<u64, Fault> {
    Ok(match l {
        Loc::Reg(r) => st.regs[r as usize] & w.mask(),
        Loc::Imm(v) => v & w.mask(),
        Loc::Mem(base, disp) => {
            let n = w.bytes();
            let a = addr_of(st, base, disp, n)?;
            let mut v = 0u64;
            for (i, b) in st.mem[a..a + n].iter().enumerate() {
                v |= (*b as u64) << (8 * i);
            }
            v
        }
        Loc::None => 0,
    })
}

#[inline]
fn write(st: &mut MachineState, l: Loc, w: Width, v: u64) -> Result<(), Fault> {
    match l {
        Loc::Reg(r) => {
            let cell = &mut st.regs[r as usize];
            *cell = match w {
                Width::B64 => v,
                Width::B32 => v & 0xffff_ffff,
                _ => (*cell & !w.mask()) | (v & w.mask()),
            };
        }
        Loc::Mem(base, disp) => {
            let n = w.bytes();
            let a = addr_of(st, base, disp, n)?;
            for (i, b) in st.mem[a..a + n].iter_mut().enumerate() {
                *b = (v >> (8 * i)) as u8;
            }
        }
        Loc::Imm(_) | Loc::None => {}
    }
    Ok(())
}

#[inline]
fn set_zs(f: &mut Flags, r: u64, w: Width) {
    f.set(Flag::Zf, r == 0);
    f.set(Flag::Sf, sign_bit(r, w));
}

fn condition(f: Flags, op: Opcode) -> bool {
    let zf = f.get(Flag::Zf);
    let lt = f.get(Flag::Sf) != f.get(Flag::Of);
    match op {
        Opcode::Je | Opcode::Sete => zf,
        Opcode::Jne | Opcode::Setne => !zf,
        Opcode::Jl | Opcode::Setl => lt,
        Opcode::Jg | Opcode::Setg => !zf && !lt,
        _ => true,
    }
}

fn step(ins: &Decoded, st: &mut MachineState) -> Result<Next, Fault> {
    let w = ins.width;
    let m = w.mask();
    match ins.op {
        Opcode::LabelDef => {}
        Opcode::Ret => return Ok(Next::Ret),
        Opcode::Jmp => return Ok(Next::Jump),
        Opcode::Je | Opcode::Jne | Opcode::Jl | Opcode::Jg => {
            return Ok(if condition(st.flags, ins.op) {
                Next::Jump
            } else {
                Next::Fall
            });
        }
        Opcode::Sete | Opcode::Setne | Opcode::Setl | Opcode::Setg => {
            let v = condition(st.flags, ins.op) as u64;
            write(st, ins.a, Width::B8, v)?;
        }
        Opcode::Mov => {
            let v = read(st, ins.a, w)?;
            write(st, ins.b, w, v)?;
        }
        Opcode::Movz => {
            let v = read(st, ins.a, ins.src_width)?;
            write(st, ins.b, w, v)?;
        }
        Opcode::Movs => {
            let v = sext(read(st, ins.a, ins.src_width)?, ins.src_width) as u64 & m;
            write(st, ins.b, w, v)?;
        }
        Opcode::Lea => {
            if let Loc::Mem(base, disp) = ins.a {
                let v = st.regs[base as usize].wrapping_add(disp as u64) & m;
                write(st, ins.b, w, v)?;
            }
        }
        Opcode::Add | Opcode::Sub | Opcode::Cmp => {
            let b = read(st, ins.a, w)?;
            let a = read(st, ins.b, w)?;
            let (r, cf, of) = if ins.op == Opcode::Add {
                let r = a.wrapping_add(b) & m;
                let cf = (a as u128 + b as u128) > m as u128;
                let of = sign_bit(a, w) == sign_bit(b, w) && sign_bit(r, w) != sign_bit(a, w);
                (r, cf, of)
            } else {
                let r = a.wrapping_sub(b) & m;
                let of = sign_bit(a, w) != sign_bit(b, w) && sign_bit(r, w) != sign_bit(a, w);
                (r, a < b, of)
            };
            set_zs(&mut st.flags, r, w);
            st.flags.set(Flag::Cf, cf);
            st.flags.set(Flag::Of, of);
            if ins.op != Opcode::Cmp {
                write(st, ins.b, w, r)?;
            }
        }
        Opcode::And | Opcode::Or | Opcode::Xor | Opcode::Test => {
            let b = read(st, ins.a, w)?;
            let a = read(st, ins.b, w)?;
            let r = match ins.op {
                Opcode::Or => a | b,
                Opcode::Xor => a ^ b,
                _ => a & b,
            };
            set_zs(&mut st.flags, r, w);
            st.flags.set(Flag::Cf, false);
            st.flags.set(Flag::Of, false);
            if ins.op != Opcode::Test {
                write(st, ins.b, w, r)?;
            }
        }
        Opcode::Imul => {
            let b = sext(read(st, ins.a, w)?, w) as i128;
            let a = sext(read(st, ins.b, w)?, w) as i128;
            let full = a * b;
            let r = (full as u64) & m;
            let ovf = sext(r, w) as i128 != full;
            set_zs(&mut st.flags, r, w);
            st.flags.set(Flag::Cf, ovf);
            st.flags.set(Flag::Of, ovf);
            write(st, ins.b, w, r)?;
        }
        Opcode::Neg => {
            let a = read(st, ins.a, w)?;
            let r = 0u64.wrapping_sub(a) & m;
            set_zs(&mut st.flags, r, w);
            st.flags.set(Flag::Cf, a != 0);
            st.flags.set(Flag::Of, a == 1u64 << (w.bits() - 1));
            write(st, ins.a, w, r)?;
        }
        Opcode::Not => {
            let a = read(st, ins.a, w)?;
            write(st, ins.a, w, !a & m)?;
        }
        Opcode::Shl | Opcode::Shr | Opcode::Sar => {
            let cmask = if w == Width::B64 { 63 } else { 31 };
            let count = (read(st, ins.a, Width::B8)? & cmask) as u32;
            let a = read(st, ins.b, w)?;
            let bits = w.bits();
            let r = if count == 0 {
                a
            } else {
                let (r, cf, of) = match ins.op {
                    Opcode::Shl => {
                        let r = (a << count) & m;
                        let cf = count <= bits && (a >> (bits - count)) & 1 == 1;
                        (r, cf, sign_bit(r, w) != cf)
                    }
                    Opcode::Shr => {
                        let r = a >> count;
                        (r, (a >> (count - 1)) & 1 == 1, sign_bit(a, w))
                    }
                    _ => {
                        let sa = sext(a, w);
                        let r = (sa >> count.min(63)) as u64 & m;
                        (r, (sa >> (count - 1).min(63)) & 1 == 1, false)
                    }
                };
                set_zs(&mut st.flags, r, w);
                st.flags.set(Flag::Cf, cf);
                st.flags.set(Flag::Of, of);
                r
            };
            write(st, ins.b, w, r)?;
        }
    }
    Ok(Next::Fall)
}

/// Which parts of the final state define observational equivalence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "LiveOutRepr", try_from = "LiveOutRepr")]
pub struct LiveOut {
    /// Live width in bits per register: 0 (dead), 8, 16, 32 or 64.
    pub reg_widths: [u8; NUM_REGS],
    pub flags: Flags,
    pub heap_out: bool,
}

impl LiveOut {
    /// Every register at 64 bits and every flag; heap excluded.
    pub const ALL_REGS_FLAGS: LiveOut = LiveOut {
        reg_widths: [64; NUM_REGS],
        flags: Flags::ALL,
        heap_out: false,
    };

    pub fn nothing() -> LiveOut {
        LiveOut {
            reg_widths: [0; NUM_REGS],
            flags: Flags::NONE,
            heap_out: false,
        }
    }

    pub fn all() -> LiveOut {
        LiveOut {
            heap_out: true,
            ..LiveOut::ALL_REGS_FLAGS
        }
    }

    /// Only `reg` at `width` (plus optionally the heap) is live.
    pub fn only(reg: Reg, width: Width, heap_out: bool) -> LiveOut {
        let mut lo = LiveOut::nothing();
        lo.reg_widths[reg.index()] = width.bits() as u8;
        lo.heap_out = heap_out;
        lo
    }

    pub fn reg_mask(&self, i: usize) -> u64 {
        match self.reg_widths[i] {
            0 => 0,
            64 => u64::MAX,
            w => (1u64 << w) - 1,
        }
    }

    pub fn any_live(&self) -> bool {
        self.reg_widths.iter().any(|w| *w > 0) || self.flags != Flags::NONE || self.heap_out
    }

    /// Component-wise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &LiveOut) -> bool {
        self.reg_widths
            .iter()
            .zip(&other.reg_widths)
            .all(|(a, b)| a <= b)
            && self.flags.0 & !other.flags.0 == 0
            && (!self.heap_out || other.heap_out)
    }
}

impl fmt::Display for LiveOut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for r in Reg::ALL {
            let w = self.reg_widths[r.index()];
            if w > 0 {
                parts.push(format!("{}:{w}", r.name(Width::B64)));
            }
        }
        parts.extend(self.flags.names());
        if self.heap_out {
            parts.push("heap".into());
        }
        write!(f, "{{{}}}", parts.join(" "))
    }
}

#[derive(Serialize, Deserialize)]
struct LiveOutRepr {
    regs: BTreeMap<String, u8>,
    flags: Vec<String>,
    heap_out: bool,
}

impl From<LiveOut> for LiveOutRepr {
    fn from(lo: LiveOut) -> Self {
        LiveOutRepr {
            regs: Reg::ALL
                .iter()
                .filter(|r| lo.reg_widths[r.index()] > 0)
                .map(|r| (r.name(Width::B64).to_string(), lo.reg_widths[r.index()]))
                .collect(),
            flags: lo.flags.names(),
            heap_out: lo.heap_out,
        }
    }
}

impl TryFrom<LiveOutRepr> for LiveOut {
    type Error = String;

    fn try_from(r: LiveOutRepr) -> Result<Self, String> {
        let mut lo = LiveOut::nothing();
        for (name, w) in &r.regs {
            let reg = Reg::lookup(name)
                .filter(|rr| rr.width == Width::B64)
                .ok_or_else(|| format!("unknown register `{name}`"))?;
            if ![0, 8, 16, 32, 64].contains(w) {
                return Err(format!("bad live width {w} for {name}"));
            }
            lo.reg_widths[reg.reg.index()] = *w;
        }
        for f in &r.flags {
            lo.flags.set(Flag::from_name(f).ok_or_else(|| format!("unknown flag `{f}`"))?, true);
        }
        lo.heap_out = r.heap_out;
        Ok(lo)
    }
}

/// Whether `a` and `b` agree on every live component.
pub fn masked_equal(a: &MachineState, b: &MachineState, lo: &LiveOut) -> bool {
    for i in 0..NUM_REGS {
        if (a.regs[i] ^ b.regs[i]) & lo.reg_mask(i) != 0 {
            return false;
        }
    }
    if (a.flags.0 ^ b.flags.0) & lo.flags.0 != 0 {
        return false;
    }
    !lo.heap_out || a.mem == b.mem
}

/// Number of differing bits restricted to live components. Live flags count
/// one bit each; memory counts bitwise when `heap_out` is set.
pub fn bit_diff(a: &MachineState, b: &MachineState, lo: &LiveOut) -> u64 {
    let mut n = 0u64;
    for i in 0..NUM_REGS {
        n += ((a.regs[i] ^ b.regs[i]) & lo.reg_mask(i)).count_ones() as u64;
    }
    n += ((a.flags.0 ^ b.flags.0) & lo.flags.0).count_ones() as u64;
    if lo.heap_out {
        let common = a.mem.len().min(b.mem.len());
        n += a.mem[..common]
            .iter()
            .zip(&b.mem[..common])
            .map(|(x, y)| (x ^ y).count_ones() as u64)
            .sum::<u64>();
        n += 8 * (a.mem.len().max(b.mem.len()) - common) as u64;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse;

    const ABS: &str = ".abs:\n  movl %edi, %eax\n  sarl $0x1f, %edi\n  xorl %edi, %eax\n  subl %edi, %eax\n  retq\n";

    fn run(src: &str, input: MachineState) -> ExecTrace {
        execute(&parse(src).unwrap(), &input, DEFAULT_FUEL, None)
    }

    #[test]
    fn abs_value_of_negative_five() {
        let input = MachineState::default().with_reg(Reg::Rdi, (-5i64) as u64);
        let t = run(ABS, input);
        assert_eq!(t.halted, Halt::Ret);
        assert_eq!(t.final_state.reg(Reg::Rax), 5);
        assert_eq!(t.executed, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ret_is_identity() {
        let mut input = MachineState::default().with_reg(Reg::Rbx, 77);
        input.mem[9] = 3;
        input.flags.set(Flag::Cf, true);
        let t = run(".f:\n  retq", input.clone());
        assert_eq!(t.final_state, input);
        assert_eq!(t.executed, vec![0]);
    }

    #[test]
    fn infinite_loop_stops_at_bound() {
        let p = parse(".f:\n.L1:\n  jmp .L1").unwrap();
        let t = execute(&p, &MachineState::default(), DEFAULT_FUEL, Some(4));
        assert_eq!(t.halted, Halt::FuelExhausted);
        assert_eq!(t.backward_jumps, 5);
        assert!(t.bound_exceeded(Some(4)));
        let unbounded = execute(&p, &MachineState::default(), 100, None);
        assert_eq!(unbounded.halted, Halt::FuelExhausted);
        assert_eq!(unbounded.executed.len(), 100);
    }

    #[test]
    fn register_views_alias() {
        let t = run(
            ".f:\n  movq $-0x1, %rax\n  movb $0x0, %al\n  movq $-0x1, %rcx\n  movl $0x1, %ecx\n  movq $-0x1, %rdx\n  movw $0x2, %dx\n  retq",
            MachineState::default(),
        );
        let s = t.final_state;
        assert_eq!(s.reg(Reg::Rax), 0xffff_ffff_ffff_ff00);
        assert_eq!(s.reg(Reg::Rcx), 1);
        assert_eq!(s.reg(Reg::Rdx), 0xffff_ffff_ffff_0002);
    }

    #[test]
    fn flag_spot_checks() {
        let cmp0 = ".f:\n  cmpq $0x0, %rax\n  retq";
        for v in [0u64, 1, u64::MAX] {
            let t = run(cmp0, MachineState::default().with_reg(Reg::Rax, v));
            assert_eq!(t.final_state.flags.get(Flag::Zf), v == 0);
        }
        let t = run(
            ".f:\n  sarq $0x3f, %rax\n  retq",
            MachineState::default().with_reg(Reg::Rax, (-12345i64) as u64),
        );
        assert_eq!(t.final_state.reg(Reg::Rax), u64::MAX);
        // signed compare: -1 < 1
        let t = run(
            ".f:\n  cmpl %esi, %edi\n  setl %al\n  setg %bl\n  retq",
            MachineState::default()
                .with_reg(Reg::Rdi, 0xffff_ffff)
                .with_reg(Reg::Rsi, 1),
        );
        assert_eq!(t.final_state.reg(Reg::Rax) & 0xff, 1);
        assert_eq!(t.final_state.reg(Reg::Rbx) & 0xff, 0);
        // signed overflow on add
        let t = run(
            ".f:\n  addl $0x1, %eax\n  retq",
            MachineState::default().with_reg(Reg::Rax, 0x7fff_ffff),
        );
        assert!(t.final_state.flags.get(Flag::Of));
        assert!(t.final_state.flags.get(Flag::Sf));
        assert!(!t.final_state.flags.get(Flag::Cf));
    }

    #[test]
    fn memory_access_and_faults() {
        let p = ".f:\n  subl $0x1, 0x4(%rdi)\n  movl 0x4(%rdi), %eax\n  retq";
        let mut input = MachineState::default().with_reg(Reg::Rdi, 8);
        input.mem[12] = 10;
        let t = run(p, input);
        assert_eq!(t.halted, Halt::Ret);
        assert_eq!(t.final_state.reg(Reg::Rax), 9);
        assert_eq!(t.final_state.mem[12], 9);
        let t = run(p, MachineState::default().with_reg(Reg::Rdi, 253));
        assert_eq!(
            t.halted,
            Halt::Fault(Fault::MemoryOutOfRange { addr: 257 })
        );
        let t = run(p, MachineState::default().with_reg(Reg::Rdi, (-8i64) as u64));
        assert!(matches!(t.halted, Halt::Fault(_)));
    }

    #[test]
    fn masked_comparison() {
        let a = MachineState::default();
        let mut b = a.clone();
        assert!(masked_equal(&a, &b, &LiveOut::all()));
        b.set_reg(Reg::Rax, 1 << 40);
        let lo32 = LiveOut::only(Reg::Rax, Width::B32, false);
        assert!(masked_equal(&a, &b, &lo32));
        assert!(!masked_equal(&a, &b, &LiveOut::all()));
        let mut c = a.clone();
        c.mem[3] = 1;
        assert!(!masked_equal(&a, &c, &LiveOut::only(Reg::Rax, Width::B64, true)));
        assert!(masked_equal(&a, &c, &LiveOut::only(Reg::Rax, Width::B64, false)));
    }

    #[test]
    fn bit_differences() {
        let a = MachineState::default();
        assert_eq!(bit_diff(&a, &a, &LiveOut::all()), 0);
        let b = a.clone().with_reg(Reg::Rax, 1);
        assert_eq!(bit_diff(&a, &b, &LiveOut::only(Reg::Rax, Width::B64, false)), 1);
        let c = a.clone().with_reg(Reg::Rax, 0xff);
        // popcount oracle
        let expected = (0u64 ^ 0xff).count_ones() as u64;
        assert_eq!(bit_diff(&a, &c, &LiveOut::only(Reg::Rax, Width::B8, false)), expected);
        assert_eq!(expected, 8);
    }

    #[test]
    fn state_serialization_round_trip() {
        let mut s = MachineState::default().with_reg(Reg::R9, 0xdead_beef);
        s.flags.set(Flag::Of, true);
        s.mem[0] = 0xab;
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"r9\":\"0x00000000deadbeef\""));
        let back: MachineState = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        let lo = LiveOut::only(Reg::Rax, Width::B32, true);
        let back: LiveOut = serde_json::from_str(&serde_json::to_string(&lo).unwrap()).unwrap();
        assert_eq!(back, lo);
    }
}
