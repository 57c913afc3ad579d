//! Field-level tokenization of MiniASM for the sequence model.
//!
//! One token per mnemonic, register view, canonical label and punctuation
//! role. Immediates and displacements are a sign token followed by the
//! hexadecimal nibbles of their magnitude. Function names are not modelled:
//! every program starts with the `FUNC` token and detokenizes with the name
//! [`CANONICAL_NAME`].

use std::collections::HashMap;
use std::sync::OnceLock;

use thiserror::Error;

use super::{all_mnemonics, decode_mnemonic, Instruction, Operand, Program, Reg, Width};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const FUNC: u32 = 3;
pub const COMMA: u32 = 4;
pub const LPAREN: u32 = 5;
pub const RPAREN: u32 = 6;
pub const COLON: u32 = 7;
pub const IMM_POS: u32 = 8;
pub const IMM_NEG: u32 = 9;
pub const DISP_POS: u32 = 10;
pub const DISP_NEG: u32 = 11;
const NIBBLE_BASE: u32 = 12;

/// Highest canonical label index representable in the vocabulary.
pub const MAX_LABELS: usize = 32;
/// Default admission bound on sequence length.
pub const MAX_LEN: usize = 512;
/// Name given to detokenized programs.
pub const CANONICAL_NAME: &str = "f";

const SPECIALS: [&str; 12] = [
    "<pad>", "<bos>", "<eos>", "FUNC", ",", "(", ")", ":", "$+", "$-", "+", "-",
];

/// The closed token vocabulary.
#[derive(Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn get() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    fn build() -> Vocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..16).map(|n| format!("{n:x}")));
        for reg in Reg::ALL {
            for w in Width::ALL {
                tokens.push(format!("%{}", reg.name(w)));
            }
        }
        tokens.extend(all_mnemonics());
        tokens.extend((1..=MAX_LABELS).map(|i| format!(".L{i}")));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-separated rendering, for logs.
    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A token id sequence including the `<bos>` / `<eos>` sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("program uses more than {MAX_LABELS} labels")]
    TooManyLabels,
    #[error("unparseable token sequence at position {pos}: {msg}")]
    Unparseable { pos: usize, msg: String },
}

fn push_magnitude(out: &mut Vec<u32>, mag: u64) {
    let digits = format!("{mag:x}");
    out.extend(digits.bytes().map(|b| {
        NIBBLE_BASE
            + match b {
                b'0'..=b'9' => (b - b'0') as u32,
                _ => (b - b'a' + 10) as u32,
            }
    }));
}

/// Tokenizes a program after canonicalizing its labels.
pub fn tokenize(p: &Program) -> Result<TokenSequence, TokenError> {
    let vocab = Vocab::get();
    let p = p.canonicalize_labels();
    let mut out = vec![BOS, FUNC];
    for ins in &p.instructions {
        if ins.is_label() {
            let id = vocab
                .id(ins.label_name().unwrap_or_default())
                .ok_or(TokenError::TooManyLabels)?;
            out.push(id);
            out.push(COLON);
            continue;
        }
        out.push(vocab.id(&ins.mnemonic()).expect("mnemonic in vocabulary"));
        for (i, o) in ins.operands.iter().enumerate() {
            if i > 0 {
                out.push(COMMA);
            }
            match o {
                Operand::Reg(r) => out.push(vocab.id(&r.to_string()).expect("register in vocabulary")),
                Operand::Imm(v) => {
                    out.push(if *v < 0 { IMM_NEG } else { IMM_POS });
                    push_magnitude(&mut out, v.unsigned_abs());
                }
                Operand::Mem { base, disp } => {
                    if *disp != 0 {
                        out.push(if *disp < 0 { DISP_NEG } else { DISP_POS });
                        push_magnitude(&mut out, disp.unsigned_abs() as u64);
                    }
                    out.push(LPAREN);
                    out.push(vocab.id(&format!("%{}", base.name(Width::B64))).unwrap());
                    out.push(RPAREN);
                }
                Operand::Label(l) => out.push(vocab.id(l).ok_or(TokenError::TooManyLabels)?),
            }
        }
    }
    out.push(EOS);
    Ok(TokenSequence(out))
}

struct Reader<'a> {
    toks: &'a [u32],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, msg: impl Into<String>) -> TokenError {
        TokenError::Unparseable {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<u32> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<u32, TokenError> {
        let t = self.peek().ok_or_else(|| self.err("unexpected end"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, t: u32, what: &str) -> Result<(), TokenError> {
        if self.next()? != t {
            self.pos -= 1;
            return Err(self.err(format!("expected {what}")));
        }
        Ok(())
    }

    fn magnitude(&mut self) -> Result<u64, TokenError> {
        let mut v: u64 = 0;
        let mut n = 0;
        while let Some(t) = self.peek() {
            if !(NIBBLE_BASE..NIBBLE_BASE + 16).contains(&t) {
                break;
            }
            n += 1;
            if n > 16 {
                return Err(self.err("number too long"));
            }
            v = (v << 4) | (t - NIBBLE_BASE) as u64;
            self.pos += 1;
        }
        if n == 0 {
            return Err(self.err("expected hexadecimal digits"));
        }
        Ok(v)
    }

    fn register(&mut self, vocab: &Vocab) -> Result<super::RegRef, TokenError> {
        let t = self.next()?;
        vocab
            .token(t)
            .and_then(|s| s.strip_prefix('%'))
            .and_then(Reg::lookup)
            .ok_or_else(|| {
                self.err("expected register")
            })
    }

    fn operand(&mut self, vocab: &Vocab) -> Result<Operand, TokenError> {
        let t = self.peek().ok_or_else(|| self.err("expected operand"))?;
        match t {
            IMM_POS | IMM_NEG => {
                self.pos += 1;
                let mag = self.magnitude()? as i64;
                Ok(Operand::Imm(if t == IMM_NEG { mag.wrapping_neg() } else { mag }))
            }
            DISP_POS | DISP_NEG | LPAREN => {
                let disp = if t == LPAREN {
                    0
                } else {
                    self.pos += 1;
                    let mag = self.magnitude()?;
                    let d = if t == DISP_NEG { -(mag as i128) } else { mag as i128 };
                    i16::try_from(d).map_err(|_| self.err("displacement out of range"))?
                };
                self.expect(LPAREN, "`(`")?;
                let base = self.register(vocab)?;
                if base.width != Width::B64 {
                    return Err(self.err("memory base must be 64-bit"));
                }
                self.expect(RPAREN, "`)`")?;
                Ok(Operand::Mem {
                    base: base.reg,
                    disp,
                })
            }
            _ => match vocab.token(t) {
                Some(s) if s.starts_with('%') => Ok(Operand::Reg(self.register(vocab)?)),
                Some(s) if s.starts_with(".L") => {
                    self.pos += 1;
                    Ok(Operand::Label(s.to_string()))
                }
                _ => Err(self.err("expected operand")),
            },
        }
    }
}

/// Rebuilds a program from tokens; any structural problem is an
/// [`TokenError::Unparseable`] error rather than a panic.
pub fn detokenize(tokens: &[u32]) -> Result<Program, TokenError> {
    let vocab = Vocab::get();
    let mut r = Reader { toks: tokens, pos: 0 };
    r.expect(BOS, "<bos>")?;
    r.expect(FUNC, "FUNC")?;
    let mut instructions = Vec::new();
    loop {
        let t = r.next()?;
        if t == EOS {
            break;
        }
        let text = vocab.token(t).ok_or_else(|| r.err("unknown token id"))?;
        if text.starts_with(".L") {
            r.expect(COLON, "`:`")?;
            instructions.push(Instruction::label(text));
            continue;
        }
        let (op, width, src_width) = decode_mnemonic(text).ok_or_else(|| {
            r.pos -= 1;
            r.err(format!("expected mnemonic, got `{text}`"))
        })?;
        let mut operands = Vec::with_capacity(op.arity());
        for i in 0..op.arity() {
            if i > 0 {
                r.expect(COMMA, "`,`")?;
            }
            operands.push(r.operand(vocab)?);
        }
        instructions.push(Instruction {
            op,
            width,
            src_width,
            operands,
        });
    }
    if r.pos != tokens.len() {
        return Err(r.err("trailing tokens after <eos>"));
    }
    let p = Program {
        name: CANONICAL_NAME.to_string(),
        instructions,
    };
    p.validate().map_err(|e| TokenError::Unparseable {
        pos: tokens.len(),
        msg: e.to_string(),
    })?;
    Ok(p)
}
