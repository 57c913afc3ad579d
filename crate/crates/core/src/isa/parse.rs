use super::{decode_mnemonic, Instruction, IsaError, Operand, Program, Reg, Width};

/// Parses MiniASM source text.
///
/// The first non-blank line must be the `.name:` header. Each further line
/// holds one instruction or one `.label:` definition; `#` starts a comment.
pub fn parse(text: &str) -> Result<Program, IsaError> {
    let mut name = None;
    let mut instructions = Vec::new();
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if name.is_none() {
            let header = line
                .strip_prefix('.')
                .and_then(|l| l.strip_suffix(':'))
                .filter(|l| !l.is_empty() && !l.contains(char::is_whitespace));
            match header {
                Some(h) => name = Some(h.to_string()),
                None => return Err(IsaError::MissingHeader),
            }
            continue;
        }
        instructions.push(parse_line(line, line_no)?);
        lines.push(line_no);
    }
    let name = name.ok_or(IsaError::MissingHeader)?;
    let p = Program { name, instructions };
    // Report validation failures against source line numbers.
    p.validate().map_err(|e| relocate(e, &lines))?;
    Ok(p)
}

fn relocate(e: IsaError, lines: &[usize]) -> IsaError {
    let fix = |line: usize| lines.get(line.wrapping_sub(2)).copied().unwrap_or(line);
    match e {
        IsaError::UnresolvedLabel { line, label } => IsaError::UnresolvedLabel {
            line: fix(line),
            label,
        },
        IsaError::DuplicateLabel { line, label } => IsaError::DuplicateLabel {
            line: fix(line),
            label,
        },
        IsaError::OperandMismatch {
            line,
            mnemonic,
            msg,
        } => IsaError::OperandMismatch {
            line: fix(line),
            mnemonic,
            msg,
        },
        other => other,
    }
}

fn parse_line(line: &str, line_no: usize) -> Result<Instruction, IsaError> {
    if let Some(label) = line.strip_suffix(':') {
        if label.starts_with('.') && label.len() > 1 && !label.contains(char::is_whitespace) {
            return Ok(Instruction::label(label));
        }
        return Err(IsaError::Syntax {
            line: line_no,
            msg: format!("bad label definition `{line}`"),
        });
    }
    let (mnemonic, rest) = match line.find(char::is_whitespace) {
        Some(i) => (&line[..i], line[i..].trim()),
        None => (line, ""),
    };
    let (op, width, src_width) =
        decode_mnemonic(mnemonic).ok_or_else(|| IsaError::UnknownOpcode {
            line: line_no,
            mnemonic: mnemonic.to_string(),
        })?;
    let operands = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',')
            .map(|s| parse_operand(s.trim(), line_no))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(Instruction {
        op,
        width,
        src_width,
        operands,
    })
}

fn syntax(line: usize, msg: impl Into<String>) -> IsaError {
    IsaError::Syntax {
        line,
        msg: msg.into(),
    }
}

/// Parses `0x1f`, `-0x1f`, `31` or `-31`.
pub(crate) fn parse_number(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let mag = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()?
    } else {
        body.parse::<u64>().ok()?
    };
    let v = mag as i64;
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_register(s: &str, line: usize) -> Result<super::RegRef, IsaError> {
    let name = s
        .strip_prefix('%')
        .ok_or_else(|| syntax(line, format!("expected register, got `{s}`")))?;
    Reg::lookup(name).ok_or_else(|| IsaError::UnknownRegister {
        line,
        name: name.to_string(),
    })
}

fn parse_operand(s: &str, line: usize) -> Result<Operand, IsaError> {
    if s.is_empty() {
        return Err(syntax(line, "empty operand"));
    }
    if s.starts_with('%') {
        return Ok(Operand::Reg(parse_register(s, line)?));
    }
    if let Some(imm) = s.strip_prefix('$') {
        return parse_number(imm)
            .map(Operand::Imm)
            .ok_or_else(|| syntax(line, format!("bad immediate `{s}`")));
    }
    if s.starts_with('.') {
        return Ok(Operand::Label(s.to_string()));
    }
    if let Some(open) = s.find('(') {
        let close = s
            .strip_suffix(')')
            .ok_or_else(|| syntax(line, format!("unterminated memory operand `{s}`")))?;
        let disp_text = &s[..open];
        let disp = if disp_text.is_empty() {
            0
        } else {
            let d = parse_number(disp_text)
                .ok_or_else(|| syntax(line, format!("bad displacement `{disp_text}`")))?;
            i16::try_from(d).map_err(|_| syntax(line, "displacement does not fit in 16 bits"))?
        };
        let base = parse_register(&close[open + 1..], line)?;
        if base.width != Width::B64 {
            return Err(syntax(line, "memory base must be a 64-bit register"));
        }
        return Ok(Operand::Mem {
            base: base.reg,
            disp,
        });
    }
    Err(syntax(line, format!("unrecognised operand `{s}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::RegRef;

    const ABS: &str = ".abs:\n  movl %edi, %eax\n  sarl $0x1f, %edi\n  xorl %edi, %eax\n  subl %edi, %eax\n  retq\n";

    #[test]
    fn minimal_function() {
        let p = parse(".f:\n  retq").unwrap();
        assert_eq!(p.name, "f");
        assert_eq!(p.instructions, vec![Instruction::ret()]);
    }

    #[test]
    fn abs_value_listing() {
        let p = parse(ABS).unwrap();
        assert_eq!(p.name, "abs");
        assert_eq!(p.instructions.len(), 5);
        assert_eq!(
            p.instructions[1].operands,
            vec![
                Operand::Imm(0x1f),
                Operand::Reg(RegRef::new(Reg::Rdi, Width::B32))
            ]
        );
        assert_eq!(p.to_string(), ABS);
    }

    #[test]
    fn label_round_trip() {
        let p = parse(".g:\n  jmp .L9\n.L9:\n  retq").unwrap();
        assert_eq!(p.instructions[1], Instruction::label(".L9"));
        assert_eq!(parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn memory_and_negative_operands() {
        let src = ".m:\n  subl $-0x1, -0x4(%rdi)\n  movzbl (%rsi), %eax\n  movslq 0x4(%rdi), %rcx  # sign extend\n  retq\n";
        let p = parse(src).unwrap();
        assert_eq!(p.instructions[0].operands[0], Operand::Imm(-1));
        assert_eq!(p.instructions[0].operands[1], Operand::mem(Reg::Rdi, -4));
        assert_eq!(parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            parse(".f:\n  movl %edi, %eax\n  frob %eax\n  retq"),
            Err(IsaError::UnknownOpcode {
                line: 3,
                mnemonic: "frob".into()
            })
        );
        assert!(matches!(
            parse(".f:\n  movl %xmm0, %eax\n  retq"),
            Err(IsaError::UnknownRegister { line: 2, .. })
        ));
        assert!(matches!(
            parse(".f:\n\n  jne .L3\n  retq"),
            Err(IsaError::UnresolvedLabel { line: 3, .. })
        ));
        assert!(matches!(
            parse(".f:\n  movl %rax, %eax\n  retq"),
            Err(IsaError::OperandMismatch { line: 2, .. })
        ));
        assert!(matches!(
            parse(".f:\n  movl 0x10000(%rdi), %eax\n  retq"),
            Err(IsaError::Syntax { line: 2, .. })
        ));
        assert_eq!(parse("  retq"), Err(IsaError::MissingHeader));
    }
}
