//! Two-pass assembler producing relocatable [`ObjectUnit`]s.
//!
//! Grammar, one statement per line, `;` or `#` start a comment:
//!
//! ```text
//! label:  mnemonic op, op, ...
//! .section NAME [, code|data|rodata|bss]      (.text/.data/.rodata/.bss are shorthands)
//! .global NAME[, NAME]   .weak NAME   .extern NAME   .type NAME, @function|@object
//! .word EXPR[, ...]   .byte N[, ...]   .ascii "s"   .asciz "s"   .space N   .align N
//! .literal [NAME,] EXPR                       (explicit pool entry)
//! ```
//!
//! Expressions are a number, `sym`, `sym+N`, `sym-N`, or `.+N` relative to
//! the current instruction. `l32r ar, =EXPR` takes its operand from the
//! section's literal pool, placed after the last statement at a 4-byte
//! boundary and shared between identical expressions.
//!
//! Labels starting with `.L` stay private to the assembler. References to
//! global symbols always become relocations, so the linker (and the
//! rewriter before it) decides where they land; references to local
//! labels are resolved in place when possible.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::isa::{EncodeError, Insn, Reg};
use crate::object::{
    Binding, ObjectUnit, RelocKind, RelocationRecord, Section, SectionKind, SymbolRecord, SymbolType,
};

/// Mapping symbol at the start of data inside a code section.
pub const MAP_DATA: &str = "$d";
/// Mapping symbol where instructions resume after data.
pub const MAP_CODE: &str = "$c";
/// Mapping symbol at the start of a literal pool.
pub const MAP_POOL: &str = "$p";

pub fn is_mapping_symbol(name: &str) -> bool {
    matches!(name, MAP_DATA | MAP_CODE | MAP_POOL)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("unknown directive `{0}`")]
    UnknownDirective(String),
    #[error("bad operand `{0}`")]
    BadOperand(String),
    #[error("expected {expected} operands, found {found}")]
    OperandCount { expected: usize, found: usize },
    #[error("{0}")]
    Range(EncodeError),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("branch target `{0}` must be a label in the same section")]
    BranchTarget(String),
    #[error("statement outside any section")]
    NoSection,
    #[error("section `{0}` redeclared with a different kind")]
    SectionKind(String),
    #[error("{0}")]
    Syntax(String),
}

/// Operand expression.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Num(i64),
    Sym { name: String, addend: i64 },
    /// `.` plus an offset, relative to the current instruction.
    Here(i64),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) if *n < 0 => write!(f, "{n}"),
            Expr::Num(n) => write!(f, "{n:#x}"),
            Expr::Sym { name, addend: 0 } => f.write_str(name),
            Expr::Sym { name, addend } => write!(f, "{name}{addend:+}"),
            Expr::Here(n) => write!(f, ".{n:+}"),
        }
    }
}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, kind }
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$')
}

fn parse_number(text: &str) -> Option<i64> {
    let t = text.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest.trim_start()),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) {
        body.parse().ok()?
    } else {
        return None;
    };
    Some(if neg { -value } else { value })
}

pub fn parse_expr(text: &str) -> Option<Expr> {
    let t = text.trim();
    if let Some(n) = parse_number(t) {
        return Some(Expr::Num(n));
    }
    let split = t.char_indices().skip(1).find(|&(_, c)| c == '+' || c == '-').map(|(i, _)| i);
    let (head, addend) = match split {
        Some(i) => (t[..i].trim(), parse_number(&t[i..].replace(' ', ""))?),
        None => (t, 0),
    };
    if head == "." {
        return Some(Expr::Here(addend));
    }
    if head.is_empty() || head.starts_with(|c: char| c.is_ascii_digit()) || !head.chars().all(is_ident_char) {
        return None;
    }
    Some(Expr::Sym { name: head.to_string(), addend })
}

fn parse_reg(text: &str) -> Option<Reg> {
    let n: u8 = text.trim().strip_prefix('a')?.parse().ok()?;
    Reg::new(n)
}

/// Splits on commas outside string literals.
fn split_operands(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_str = false;
    let mut escaped = false;
    for c in text.chars() {
        if in_str {
            cur.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
        } else if c == ',' {
            out.push(cur.trim().to_string());
            cur.clear();
        } else {
            if c == '"' {
                in_str = true;
            }
            cur.push(c);
        }
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
        } else if c == '"' {
            in_str = true;
        } else if c == ';' || c == '#' {
            return &line[..i];
        }
    }
    line
}

fn parse_string(text: &str) -> Option<Vec<u8>> {
    let inner = text.trim().strip_prefix('"')?.strip_suffix('"')?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next()? {
            'n' => out.push(b'\n'),
            't' => out.push(b'\t'),
            'r' => out.push(b'\r'),
            '0' => out.push(0),
            '\\' => out.push(b'\\'),
            '"' => out.push(b'"'),
            'x' => {
                let hex: String = chars.by_ref().take(2).collect();
                out.push(u8::from_str_radix(&hex, 16).ok()?);
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Byte width of `mnemonic`, or `None` if it is not an instruction.
pub fn mnemonic_width(mnemonic: &str) -> Option<u32> {
    Some(match mnemonic {
        "mov.n" | "addi.n" | "l32i.n" | "s32i.n" | "ret" | "nop" | "hlt" | "rfe" | "jx" | "callx0" | "out"
        | "in" | "instat" | "beqz.n" | "bnez.n" => 2,
        "movi" | "l32r" | "call0" | "j" | "addi" | "l32i" | "s32i" | "l8ui" | "s8i" | "beq" | "bne" | "bltu"
        | "bgeu" | "beqz" | "bnez" | "slli" | "srli" | "andi" | "add" | "sub" | "and" | "or" | "xor"
        | "rsr.epc1" | "wsr.epc1" => 4,
        _ => return None,
    })
}

#[derive(Debug, Clone)]
enum Atom {
    Insn { line: usize, offset: u32, mnemonic: String, ops: Vec<String> },
    Bytes { offset: u32, bytes: Vec<u8> },
    Word { line: usize, offset: u32, expr: Expr },
}

#[derive(Debug, Clone)]
struct PoolEntry {
    expr: Expr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Code,
    Data,
}

#[derive(Debug)]
struct SectionState {
    name: String,
    kind: SectionKind,
    alignment: u32,
    atoms: Vec<Atom>,
    offset: u32,
    pool: Vec<PoolEntry>,
    /// Pool-entry labels: name -> entry index.
    pool_labels: Vec<(String, usize)>,
    mode: Mode,
    mapping: Vec<(&'static str, u32)>,
}

impl SectionState {
    fn new(name: String, kind: SectionKind) -> Self {
        SectionState {
            name,
            kind,
            alignment: 4,
            atoms: Vec::new(),
            offset: 0,
            pool: Vec::new(),
            pool_labels: Vec::new(),
            mode: Mode::Code,
            mapping: Vec::new(),
        }
    }

    fn enter(&mut self, mode: Mode) {
        if self.kind != SectionKind::Code || self.mode == mode {
            return;
        }
        // A code section starts in code mode; only record real switches.
        let marker = if mode == Mode::Data { MAP_DATA } else { MAP_CODE };
        if !(mode == Mode::Code && self.mapping.is_empty() && self.offset == 0) {
            self.mapping.push((marker, self.offset));
        }
        self.mode = mode;
    }

    fn push_bytes(&mut self, bytes: Vec<u8>) {
        if bytes.is_empty() {
            return;
        }
        let offset = self.offset;
        self.offset += bytes.len() as u32;
        self.atoms.push(Atom::Bytes { offset, bytes });
    }

    fn pad_to(&mut self, align: u32) {
        let target = self.offset.next_multiple_of(align);
        let gap = (target - self.offset) as usize;
        if gap == 0 {
            return;
        }
        let bytes = if self.kind == SectionKind::Code && self.mode == Mode::Code && self.offset.is_multiple_of(2) {
            Insn::Nop.encode().unwrap().repeat(gap / 2)
        } else {
            // Zero fill is not code; keep the printer from decoding it.
            self.enter(Mode::Data);
            vec![0; gap]
        };
        self.push_bytes(bytes);
    }

    fn intern_literal(&mut self, expr: Expr) -> usize {
        if let Some(i) = self.pool.iter().position(|e| e.expr == expr) {
            return i;
        }
        self.pool.push(PoolEntry { expr });
        self.pool.len() - 1
    }
}

#[derive(Debug, Clone)]
struct LabelDef {
    section: usize,
    offset: u32,
}

struct Assembler {
    sections: Vec<SectionState>,
    current: Option<usize>,
    labels: HashMap<String, LabelDef>,
    label_order: Vec<String>,
    globals: HashSet<String>,
    weaks: HashSet<String>,
    externs: Vec<String>,
    types: HashMap<String, SymbolType>,
}

/// Final placement of a label once pools are laid out.
#[derive(Debug, Clone, Copy)]
struct Resolved {
    section: usize,
    offset: u32,
}

impl Assembler {
    fn section_mut(&mut self, line: usize) -> Result<&mut SectionState, AsmError> {
        let idx = self.current.ok_or_else(|| err(line, AsmErrorKind::NoSection))?;
        Ok(&mut self.sections[idx])
    }

    fn switch_section(&mut self, line: usize, name: &str, kind: Option<SectionKind>) -> Result<(), AsmError> {
        let kind = match kind.or_else(|| SectionKind::from_name(name)) {
            Some(k) => k,
            None => return Err(err(line, AsmErrorKind::Syntax(format!("section `{name}` needs a kind")))),
        };
        if let Some(i) = self.sections.iter().position(|s| s.name == name) {
            if self.sections[i].kind != kind {
                return Err(err(line, AsmErrorKind::SectionKind(name.into())));
            }
            self.current = Some(i);
        } else {
            self.sections.push(SectionState::new(name.to_string(), kind));
            self.current = Some(self.sections.len() - 1);
        }
        Ok(())
    }

    fn define_label(&mut self, line: usize, name: &str) -> Result<(), AsmError> {
        let section = self.current.ok_or_else(|| err(line, AsmErrorKind::NoSection))?;
        if self.labels.contains_key(name) || self.sections.iter().any(|s| s.name == name) {
            return Err(err(line, AsmErrorKind::DuplicateLabel(name.into())));
        }
        let offset = self.sections[section].offset;
        self.labels.insert(name.into(), LabelDef { section, offset });
        self.label_order.push(name.into());
        Ok(())
    }

    fn statement(&mut self, line: usize, text: &str) -> Result<(), AsmError> {
        let (word, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        if word.starts_with('.') {
            return self.directive(line, word, rest);
        }
        let width =
            mnemonic_width(word).ok_or_else(|| err(line, AsmErrorKind::UnknownMnemonic(word.to_string())))?;
        let sec = self.section_mut(line)?;
        sec.enter(Mode::Code);
        let ops = split_operands(rest);
        if word == "l32r" {
            if let Some(lit) = ops.get(1).and_then(|o| o.strip_prefix('=')) {
                let expr =
                    parse_expr(lit).ok_or_else(|| err(line, AsmErrorKind::BadOperand(lit.to_string())))?;
                sec.intern_literal(expr);
            }
        }
        let offset = sec.offset;
        sec.atoms.push(Atom::Insn { line, offset, mnemonic: word.to_string(), ops });
        sec.offset += width;
        Ok(())
    }

    fn names(rest: &str, line: usize) -> Result<Vec<String>, AsmError> {
        let names = split_operands(rest);
        if names.is_empty() || names.iter().any(|n| n.is_empty() || !n.chars().all(is_ident_char)) {
            return Err(err(line, AsmErrorKind::Syntax(format!("expected symbol names, found `{rest}`"))));
        }
        Ok(names)
    }

    fn directive(&mut self, line: usize, word: &str, rest: &str) -> Result<(), AsmError> {
        let bad = |s: &str| err(line, AsmErrorKind::BadOperand(s.to_string()));
        match word {
            ".text" | ".data" | ".rodata" | ".bss" => self.switch_section(line, word, None),
            ".section" => {
                let ops = split_operands(rest);
                let name = ops.first().filter(|n| !n.is_empty()).ok_or_else(|| bad(rest))?;
                let kind = match ops.get(1).map(|s| s.trim_matches('"')) {
                    None => None,
                    Some("code") => Some(SectionKind::Code),
                    Some("data") => Some(SectionKind::Data),
                    Some("rodata") => Some(SectionKind::Readonly),
                    Some("bss") => Some(SectionKind::Bss),
                    Some(other) => return Err(bad(other)),
                };
                self.switch_section(line, name, kind)
            }
            ".global" | ".globl" => {
                self.globals.extend(Self::names(rest, line)?);
                Ok(())
            }
            ".weak" => {
                self.weaks.extend(Self::names(rest, line)?);
                Ok(())
            }
            ".extern" => {
                self.externs.extend(Self::names(rest, line)?);
                Ok(())
            }
            ".type" => {
                let ops = split_operands(rest);
                let [name, ty] = ops.as_slice() else { return Err(bad(rest)) };
                let ty = match ty.as_str() {
                    "@function" => SymbolType::Func,
                    "@object" => SymbolType::Object,
                    "@notype" => SymbolType::Notype,
                    other => return Err(bad(other)),
                };
                self.types.insert(name.clone(), ty);
                Ok(())
            }
            ".literal" => {
                let ops = split_operands(rest);
                let (name, expr_text) = match ops.as_slice() {
                    [e] => (None, e),
                    [n, e] => (Some(n.clone()), e),
                    _ => return Err(bad(rest)),
                };
                let expr = parse_expr(expr_text).ok_or_else(|| bad(expr_text))?;
                if matches!(expr, Expr::Here(_)) {
                    return Err(bad(expr_text));
                }
                if let Some(name) = &name {
                    if self.labels.contains_key(name) {
                        return Err(err(line, AsmErrorKind::DuplicateLabel(name.clone())));
                    }
                }
                let sec = self.section_mut(line)?;
                sec.pool.push(PoolEntry { expr });
                let index = sec.pool.len() - 1;
                if let Some(name) = name {
                    sec.pool_labels.push((name.clone(), index));
                    // Placeholder; the real offset is fixed once the pool is laid out.
                    let section = self.current.unwrap();
                    self.labels.insert(name.clone(), LabelDef { section, offset: u32::MAX });
                    self.label_order.push(name);
                }
                Ok(())
            }
            ".word" => {
                let sec = self.section_mut(line)?;
                sec.enter(Mode::Data);
                for op in split_operands(rest) {
                    let expr = parse_expr(&op).ok_or_else(|| bad(&op))?;
                    if matches!(expr, Expr::Here(_)) {
                        return Err(bad(&op));
                    }
                    let offset = sec.offset;
                    sec.atoms.push(Atom::Word { line, offset, expr });
                    sec.offset += 4;
                }
                Ok(())
            }
            ".byte" => {
                let sec = self.section_mut(line)?;
                sec.enter(Mode::Data);
                let mut bytes = Vec::new();
                for op in split_operands(rest) {
                    let n = parse_number(&op).filter(|n| (-128..=255).contains(n)).ok_or_else(|| bad(&op))?;
                    bytes.push(n as u8);
                }
                sec.push_bytes(bytes);
                Ok(())
            }
            ".ascii" | ".asciz" => {
                let mut bytes = parse_string(rest).ok_or_else(|| bad(rest))?;
                if word == ".asciz" {
                    bytes.push(0);
                }
                let sec = self.section_mut(line)?;
                sec.enter(Mode::Data);
                sec.push_bytes(bytes);
                Ok(())
            }
            ".space" => {
                let n = parse_number(rest).filter(|n| (0..=1 << 24).contains(n)).ok_or_else(|| bad(rest))?;
                let sec = self.section_mut(line)?;
                if sec.kind == SectionKind::Bss {
                    sec.offset += n as u32;
                } else {
                    sec.enter(Mode::Data);
                    sec.push_bytes(vec![0; n as usize]);
                }
                Ok(())
            }
            ".align" => {
                let n = parse_number(rest)
                    .filter(|&n| n > 0 && n <= 4096 && (n as u64).is_power_of_two())
                    .ok_or_else(|| bad(rest))? as u32;
                let sec = self.section_mut(line)?;
                sec.alignment = sec.alignment.max(n);
                if sec.kind == SectionKind::Bss {
                    sec.offset = sec.offset.next_multiple_of(n);
                } else {
                    sec.pad_to(n);
                }
                Ok(())
            }
            other => Err(err(line, AsmErrorKind::UnknownDirective(other.to_string()))),
        }
    }
}

fn range(line: usize) -> impl Fn(EncodeError) -> AsmError {
    move |e| err(line, AsmErrorKind::Range(e))
}

/// Symbol a relocation should reference, before final symbol indices exist.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum SymRef {
    Section(usize),
    Named(String),
}

struct PendingReloc {
    section: usize,
    offset: u32,
    target: SymRef,
    kind: RelocKind,
    addend: i64,
}

struct Encoder<'a> {
    asm: &'a Assembler,
    resolved: &'a HashMap<String, Resolved>,
    pool_starts: &'a [u32],
    relocs: Vec<PendingReloc>,
    imports: BTreeMap<String, ()>,
}

impl Encoder<'_> {
    fn is_global(&self, name: &str) -> bool {
        self.asm.globals.contains(name) || self.asm.weaks.contains(name)
    }

    /// Symbol and addend for a reference to `name + addend`.
    fn reference(&mut self, name: &str, addend: i64) -> (SymRef, i64) {
        if let Some(r) = self.resolved.get(name) {
            if self.is_global(name) {
                return (SymRef::Named(name.to_string()), addend);
            }
            return (SymRef::Section(r.section), r.offset as i64 + addend);
        }
        if let Some(i) = self.asm.sections.iter().position(|s| s.name == name) {
            return (SymRef::Section(i), addend);
        }
        self.imports.insert(name.to_string(), ());
        (SymRef::Named(name.to_string()), addend)
    }

    fn reloc(&mut self, section: usize, offset: u32, kind: RelocKind, name: &str, addend: i64) {
        let (target, addend) = self.reference(name, addend);
        self.relocs.push(PendingReloc { section, offset, target, kind, addend });
    }

    /// Pc-relative offset to a label in the same section.
    fn local_offset(&self, line: usize, section: usize, at: u32, expr: &Expr) -> Result<i32, AsmError> {
        match expr {
            Expr::Here(n) => Ok(*n as i32),
            Expr::Sym { name, addend } => match self.resolved.get(name) {
                Some(r) if r.section == section => Ok((r.offset as i64 + addend - at as i64) as i32),
                _ => Err(err(line, AsmErrorKind::BranchTarget(name.clone()))),
            },
            Expr::Num(_) => Err(err(line, AsmErrorKind::BranchTarget(expr.to_string()))),
        }
    }

    fn encode_insn(
        &mut self,
        section: usize,
        line: usize,
        at: u32,
        mnemonic: &str,
        ops: &[String],
    ) -> Result<Vec<u8>, AsmError> {
        let bad = |s: &str| err(line, AsmErrorKind::BadOperand(s.to_string()));
        let count = |n: usize| {
            if ops.len() == n {
                Ok(())
            } else {
                Err(err(line, AsmErrorKind::OperandCount { expected: n, found: ops.len() }))
            }
        };
        let reg = |i: usize| parse_reg(&ops[i]).ok_or_else(|| bad(&ops[i]));
        let num = |i: usize| parse_number(&ops[i]).ok_or_else(|| bad(&ops[i]));
        let expr = |i: usize| parse_expr(&ops[i]).ok_or_else(|| bad(&ops[i]));
        let imm32 = |i: usize| -> Result<i32, AsmError> {
            let n = num(i)?;
            i32::try_from(n).map_err(|_| err(line, AsmErrorKind::Range(EncodeError::OutOfRange { what: "immediate", value: n })))
        };
        let uimm = |i: usize| -> Result<u32, AsmError> {
            let n = num(i)?;
            u32::try_from(n).map_err(|_| err(line, AsmErrorKind::Range(EncodeError::OutOfRange { what: "immediate", value: n })))
        };

        let insn = match mnemonic {
            "ret" | "nop" | "hlt" | "rfe" => {
                count(0)?;
                match mnemonic {
                    "ret" => Insn::Ret,
                    "nop" => Insn::Nop,
                    "hlt" => Insn::Hlt,
                    _ => Insn::Rfe,
                }
            }
            "jx" | "callx0" | "out" | "in" | "instat" | "rsr.epc1" | "wsr.epc1" => {
                count(1)?;
                let r = reg(0)?;
                match mnemonic {
                    "jx" => Insn::Jx { rs: r },
                    "callx0" => Insn::Callx0 { rs: r },
                    "out" => Insn::Out { rs: r },
                    "in" => Insn::In { rd: r },
                    "instat" => Insn::Instat { rd: r },
                    "rsr.epc1" => Insn::RsrEpc1 { rd: r },
                    _ => Insn::WsrEpc1 { rs: r },
                }
            }
            "mov.n" => {
                count(2)?;
                Insn::MovN { rd: reg(0)?, rs: reg(1)? }
            }
            "add" | "sub" | "and" | "or" | "xor" => {
                count(3)?;
                let (rd, rs, rt) = (reg(0)?, reg(1)?, reg(2)?);
                match mnemonic {
                    "add" => Insn::Add { rd, rs, rt },
                    "sub" => Insn::Sub { rd, rs, rt },
                    "and" => Insn::And { rd, rs, rt },
                    "or" => Insn::Or { rd, rs, rt },
                    _ => Insn::Xor { rd, rs, rt },
                }
            }
            "addi.n" | "addi" | "l32i" | "s32i" | "l8ui" | "s8i" => {
                count(3)?;
                let (a, b, imm) = (reg(0)?, reg(1)?, imm32(2)?);
                match mnemonic {
                    "addi.n" => Insn::AddiN { rd: a, rs: b, imm },
                    "addi" => Insn::Addi { rd: a, rs: b, imm },
                    "l32i" => Insn::L32i { rt: a, rs: b, off: imm },
                    "s32i" => Insn::S32i { rt: a, rs: b, off: imm },
                    "l8ui" => Insn::L8ui { rt: a, rs: b, off: imm },
                    _ => Insn::S8i { rt: a, rs: b, off: imm },
                }
            }
            "l32i.n" | "s32i.n" | "slli" | "srli" | "andi" => {
                count(3)?;
                let (a, b, imm) = (reg(0)?, reg(1)?, uimm(2)?);
                match mnemonic {
                    "l32i.n" => Insn::L32iN { rt: a, rs: b, off: imm },
                    "s32i.n" => Insn::S32iN { rt: a, rs: b, off: imm },
                    "slli" => Insn::Slli { rd: a, rs: b, sh: imm },
                    "srli" => Insn::Srli { rd: a, rs: b, sh: imm },
                    _ => Insn::Andi { rd: a, rs: b, imm },
                }
            }
            "movi" => {
                count(2)?;
                Insn::Movi { rd: reg(0)?, imm: imm32(1)? }
            }
            "beqz.n" | "bnez.n" | "beqz" | "bnez" => {
                count(2)?;
                let rs = reg(0)?;
                let off = self.local_offset(line, section, at, &expr(1)?)?;
                match mnemonic {
                    "beqz.n" => Insn::BeqzN { rs, off },
                    "bnez.n" => Insn::BnezN { rs, off },
                    "beqz" => Insn::Beqz { rs, off },
                    _ => Insn::Bnez { rs, off },
                }
            }
            "beq" | "bne" | "bltu" | "bgeu" => {
                count(3)?;
                let (rs, rt) = (reg(0)?, reg(1)?);
                let off = self.local_offset(line, section, at, &expr(2)?)?;
                match mnemonic {
                    "beq" => Insn::Beq { rs, rt, off },
                    "bne" => Insn::Bne { rs, rt, off },
                    "bltu" => Insn::Bltu { rs, rt, off },
                    _ => Insn::Bgeu { rs, rt, off },
                }
            }
            "call0" | "j" => {
                count(1)?;
                let target = expr(0)?;
                let kind = if mnemonic == "call0" { RelocKind::CallRel } else { RelocKind::BranchRel };
                let off = match &target {
                    Expr::Here(n) => *n as i32,
                    Expr::Sym { name, addend } => {
                        let local_here =
                            self.resolved.get(name).is_some_and(|r| r.section == section) && !self.is_global(name);
                        if local_here {
                            self.local_offset(line, section, at, &target)?
                        } else {
                            self.reloc(section, at, kind, name, *addend);
                            0
                        }
                    }
                    Expr::Num(_) => return Err(bad(&ops[0])),
                };
                if mnemonic == "call0" {
                    Insn::Call0 { off }
                } else {
                    Insn::J { off }
                }
            }
            "l32r" => {
                count(2)?;
                let rd = reg(0)?;
                match ops[1].strip_prefix('=') {
                    Some(lit) => {
                        let lit = parse_expr(lit).ok_or_else(|| bad(lit))?;
                        let sec = &self.asm.sections[section];
                        let index = sec.pool.iter().position(|e| e.expr == lit).expect("interned in pass one");
                        let addend = self.pool_starts[section] as i64 + 4 * index as i64;
                        self.relocs.push(PendingReloc {
                            section,
                            offset: at,
                            target: SymRef::Section(section),
                            kind: RelocKind::Literal,
                            addend,
                        });
                    }
                    None => match expr(1)? {
                        Expr::Sym { name, addend } => self.reloc(section, at, RelocKind::Literal, &name, addend),
                        Expr::Here(n) => self.relocs.push(PendingReloc {
                            section,
                            offset: at,
                            target: SymRef::Section(section),
                            kind: RelocKind::Literal,
                            addend: at as i64 + n,
                        }),
                        Expr::Num(_) => return Err(bad(&ops[1])),
                    },
                }
                Insn::L32r { rd, off: 0 }
            }
            other => return Err(err(line, AsmErrorKind::UnknownMnemonic(other.to_string()))),
        };
        insn.encode().map_err(range(line))
    }

    fn word(&mut self, section: usize, line: usize, at: u32, expr: &Expr) -> Result<[u8; 4], AsmError> {
        match expr {
            Expr::Num(n) => {
                if *n < i32::MIN as i64 || *n > u32::MAX as i64 {
                    return Err(err(line, AsmErrorKind::Range(EncodeError::OutOfRange { what: "word", value: *n })));
                }
                Ok((*n as u32).to_le_bytes())
            }
            Expr::Sym { name, addend } => {
                self.reloc(section, at, RelocKind::Abs32, name, *addend);
                Ok([0; 4])
            }
            Expr::Here(_) => Err(err(line, AsmErrorKind::BadOperand(expr.to_string()))),
        }
    }
}

pub fn assemble(source: &str) -> Result<ObjectUnit, AsmError> {
    let mut asm = Assembler {
        sections: Vec::new(),
        current: None,
        labels: HashMap::new(),
        label_order: Vec::new(),
        globals: HashSet::new(),
        weaks: HashSet::new(),
        externs: Vec::new(),
        types: HashMap::new(),
    };

    // Pass one: sizes, label offsets, pool contents.
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        let mut text = strip_comment(raw).trim();
        while let Some(colon) = text.find(':') {
            let head = &text[..colon];
            if head.is_empty() || !head.chars().all(is_ident_char) || head.contains('"') {
                break;
            }
            asm.define_label(line, head)?;
            text = text[colon + 1..].trim();
        }
        if !text.is_empty() {
            asm.statement(line, text)?;
        }
    }

    // Lay out pools and pad sections to their alignment.
    let mut pool_starts = Vec::with_capacity(asm.sections.len());
    for sec in &mut asm.sections {
        if sec.kind == SectionKind::Bss {
            sec.offset = sec.offset.next_multiple_of(sec.alignment);
            pool_starts.push(sec.offset);
            continue;
        }
        if sec.pool.is_empty() {
            pool_starts.push(sec.offset);
            let align = sec.alignment;
            sec.pad_to(align);
            continue;
        }
        sec.pad_to(4);
        sec.mapping.push((MAP_POOL, sec.offset));
        sec.mode = Mode::Data;
        pool_starts.push(sec.offset);
        sec.offset += 4 * sec.pool.len() as u32;
        let align = sec.alignment;
        sec.pad_to(align);
    }

    let mut resolved = HashMap::new();
    for (name, def) in &asm.labels {
        let offset = if def.offset == u32::MAX {
            let sec = &asm.sections[def.section];
            let (_, index) = sec.pool_labels.iter().find(|(n, _)| n == name).unwrap();
            pool_starts[def.section] + 4 * *index as u32
        } else {
            def.offset
        };
        resolved.insert(name.clone(), Resolved { section: def.section, offset });
    }

    // Pass two: encode.
    let mut enc = Encoder { asm: &asm, resolved: &resolved, pool_starts: &pool_starts, relocs: Vec::new(), imports: BTreeMap::new() };
    let mut contents: Vec<Vec<u8>> = Vec::with_capacity(asm.sections.len());
    for (si, sec) in asm.sections.iter().enumerate() {
        if sec.kind == SectionKind::Bss {
            if sec.atoms.iter().any(|a| !matches!(a, Atom::Bytes { bytes, .. } if bytes.iter().all(|&b| b == 0))) {
                let line = sec.atoms.iter().find_map(|a| match a {
                    Atom::Insn { line, .. } | Atom::Word { line, .. } => Some(*line),
                    _ => None,
                });
                return Err(err(line.unwrap_or(0), AsmErrorKind::Syntax(format!("bss section `{}` holds contents", sec.name))));
            }
            contents.push(Vec::new());
            continue;
        }
        let mut bytes = vec![0u8; sec.offset as usize];
        for atom in &sec.atoms {
            match atom {
                Atom::Insn { line, offset, mnemonic, ops } => {
                    let code = enc.encode_insn(si, *line, *offset, mnemonic, ops)?;
                    bytes[*offset as usize..*offset as usize + code.len()].copy_from_slice(&code);
                }
                Atom::Bytes { offset, bytes: b } => {
                    bytes[*offset as usize..*offset as usize + b.len()].copy_from_slice(b);
                }
                Atom::Word { line, offset, expr } => {
                    let w = enc.word(si, *line, *offset, expr)?;
                    bytes[*offset as usize..*offset as usize + 4].copy_from_slice(&w);
                }
            }
        }
        let start = pool_starts[si];
        for (i, entry) in sec.pool.iter().enumerate() {
            let at = start + 4 * i as u32;
            let line = 0;
            let w = enc.word(si, line, at, &entry.expr)?;
            bytes[at as usize..at as usize + 4].copy_from_slice(&w);
        }
        contents.push(bytes);
    }
    let Encoder { relocs, mut imports, .. } = enc;
    for name in &asm.externs {
        if !resolved.contains_key(name) {
            imports.insert(name.clone(), ());
        }
    }
    for name in asm.globals.iter().chain(asm.weaks.iter()) {
        if !resolved.contains_key(name) {
            imports.insert(name.clone(), ());
        }
    }

    // Canonical section order: code, data, readonly, bss (stable).
    let mut order: Vec<usize> = (0..asm.sections.len()).collect();
    order.sort_by_key(|&i| match asm.sections[i].kind {
        SectionKind::Code => 0,
        SectionKind::Data => 1,
        SectionKind::Readonly => 2,
        SectionKind::Bss => 3,
        _ => 4,
    });
    let mut new_index = vec![0; order.len()];
    for (n, &o) in order.iter().enumerate() {
        new_index[o] = n;
    }

    let mut unit = ObjectUnit::empty();
    let mut pool_limit = vec![0u32; order.len()];
    for &o in &order {
        let sec = &asm.sections[o];
        let mut section = if sec.kind == SectionKind::Bss {
            Section::bss(sec.name.clone(), sec.offset)
        } else {
            Section::new(sec.name.clone(), sec.kind, std::mem::take(&mut contents[o]))
        };
        section.alignment = sec.alignment;
        pool_limit[new_index[o]] = if sec.pool.is_empty() { section.size() } else { pool_starts[o] };
        unit.sections.push(section);
    }

    // Symbols: section symbols, locals, globals, imports.
    for (i, s) in unit.sections.iter().enumerate() {
        unit.symbols.push(SymbolRecord {
            name: s.name.clone(),
            binding: Binding::Local,
            defined: true,
            section_index: Some(i),
            value: 0,
            size: 0,
            sym_type: SymbolType::Section,
        });
    }
    let mut locals: Vec<(usize, u32, String)> = Vec::new();
    let mut globals: Vec<(usize, u32, String)> = Vec::new();
    for name in &asm.label_order {
        if name.starts_with(".L") {
            continue;
        }
        let r = resolved[name];
        let entry = (new_index[r.section], r.offset, name.clone());
        if asm.globals.contains(name) || asm.weaks.contains(name) {
            globals.push(entry);
        } else {
            locals.push(entry);
        }
    }
    for (o, sec) in asm.sections.iter().enumerate() {
        for (marker, offset) in &sec.mapping {
            locals.push((new_index[o], *offset, marker.to_string()));
        }
    }
    locals.sort();
    globals.sort();

    // Sizes run to the next named symbol in the same section, or to the pool.
    let mut boundaries: Vec<(usize, u32)> = locals
        .iter()
        .chain(globals.iter())
        .filter(|(_, _, n)| !is_mapping_symbol(n))
        .map(|(s, o, _)| (*s, *o))
        .collect();
    boundaries.sort();
    boundaries.dedup();
    let size_of = |section: usize, offset: u32| -> u32 {
        let limit = if offset >= pool_limit[section] { unit.sections[section].size() } else { pool_limit[section] };
        let next = boundaries
            .iter()
            .find(|&&(s, o)| s == section && o > offset)
            .map_or(limit, |&(_, o)| o.min(limit));
        next.saturating_sub(offset)
    };
    let mut sym_sizes = Vec::new();
    for (section, offset, name) in locals.iter().chain(globals.iter()) {
        let size = if is_mapping_symbol(name) { 0 } else { size_of(*section, *offset) };
        sym_sizes.push(size);
        let binding = if asm.weaks.contains(name) {
            Binding::Weak
        } else if asm.globals.contains(name) {
            Binding::Global
        } else {
            Binding::Local
        };
        unit.symbols.push(SymbolRecord {
            name: name.clone(),
            binding,
            defined: true,
            section_index: Some(*section),
            value: *offset,
            size,
            sym_type: asm.types.get(name).copied().unwrap_or(SymbolType::Notype),
        });
    }
    for name in imports.keys() {
        let mut sym = SymbolRecord::import(name.clone());
        if asm.weaks.contains(name) {
            sym.binding = Binding::Weak;
        }
        unit.symbols.push(sym);
    }

    let index_of: HashMap<&str, usize> = unit
        .symbols
        .iter()
        .enumerate()
        .filter(|(_, s)| s.binding != Binding::Local)
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();
    let mut relocations: Vec<RelocationRecord> = relocs
        .into_iter()
        .map(|r| {
            let symbol_index = match &r.target {
                SymRef::Section(s) => new_index[*s],
                SymRef::Named(n) => index_of[n.as_str()],
            };
            RelocationRecord {
                target_section: new_index[r.section],
                offset: r.offset,
                symbol_index,
                kind: r.kind,
                addend: r.addend as i32,
            }
        })
        .collect();
    relocations.sort_by_key(|r| (r.target_section, r.offset));
    unit.relocations = relocations;
    unit.validate().map_err(|e| err(0, AsmErrorKind::Syntax(e.to_string())))?;
    Ok(unit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn external_call_is_one_call_relocation() {
        let unit = assemble(".text\n.global main\nmain:\n  call0 fct\n  ret\n").unwrap();
        assert_eq!(unit.relocations.len(), 1);
        let r = unit.relocations[0];
        assert_eq!(r.kind, RelocKind::CallRel);
        let sym = &unit.symbols[r.symbol_index];
        assert_eq!(sym.name, "fct");
        assert!(!sym.defined);
    }

    #[test]
    fn literal_pool_entry_and_relocation() {
        let unit = assemble(".text\nf:\n  l32r a2, =0xdeaddead\n  l32r a3, =0xdeaddead\n  ret\n").unwrap();
        let text = &unit.sections[0];
        // 4 + 4 + 2 bytes of code, padded to 12, then one shared pool word.
        assert_eq!(text.bytes.len(), 16);
        assert_eq!(&text.bytes[12..16], &0xdeaddeadu32.to_le_bytes());
        assert_eq!(unit.relocations.len(), 2);
        assert!(unit.relocations.iter().all(|r| r.kind == RelocKind::Literal && r.addend == 12));
        assert!(unit.symbols.iter().any(|s| s.name == MAP_POOL && s.value == 12));
    }

    #[test]
    fn narrow_branch_boundary() {
        let at_limit = format!(".text\nf:\n  beqz.n a2, .Lfar\n  .space {}\n.Lfar:\n  ret\n", 254 - 2);
        assert!(assemble(&at_limit).is_ok());
        let beyond = format!(".text\nf:\n  beqz.n a2, .Lfar\n  .space {}\n.Lfar:\n  ret\n", 256 - 2);
        let e = assemble(&beyond).unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::Range(_)), "{e}");
        let back = ".text\n.Lb:\n  .space 256\n  beqz.n a2, .Lb\n";
        assert!(assemble(back).is_ok());
        let too_far_back = ".text\n.Lb:\n  .space 258\n  beqz.n a2, .Lb\n";
        assert!(assemble(too_far_back).is_err());
    }

    #[test]
    fn errors_carry_lines() {
        assert_eq!(assemble(".text\n  frob a1\n").unwrap_err().line, 2);
        assert_eq!(
            assemble(".text\nx:\nx:\n").unwrap_err().kind,
            AsmErrorKind::DuplicateLabel("x".into())
        );
        assert!(matches!(
            assemble(".text\n  addi.n a1, a1, 64\n").unwrap_err().kind,
            AsmErrorKind::Range(_)
        ));
        assert_eq!(assemble("  ret\n").unwrap_err().kind, AsmErrorKind::NoSection);
    }

    #[test]
    fn two_functions_two_sections() {
        let src = "\
.section .text.a
.global a
.type a, @function
a:
  call0 b
  ret
.section .text.b
.global b
.type b, @function
b:
  ret
";
        let unit = assemble(src).unwrap();
        assert_eq!(unit.sections.len(), 2);
        let funcs: Vec<_> = unit
            .symbols
            .iter()
            .filter(|s| s.sym_type == SymbolType::Func && s.binding == Binding::Global)
            .map(|s| (s.name.as_str(), s.size))
            .collect();
        assert_eq!(funcs, [("a", 8), ("b", 4)]);
    }

    #[test]
    fn local_references_across_sections_use_section_symbols() {
        let src = ".text\nf:\n  l32r a2, =.Lmsg\n  ret\n.rodata\n.Lmsg: .asciz \"hi\"\n";
        let unit = assemble(src).unwrap();
        let abs = unit.relocations.iter().find(|r| r.kind == RelocKind::Abs32).unwrap();
        assert_eq!(unit.symbols[abs.symbol_index].name, ".rodata");
        assert_eq!(abs.addend, 0);
        assert!(unit.symbols.iter().all(|s| s.name != ".Lmsg"));
    }

    #[test]
    fn data_in_code_gets_mapping_symbols() {
        let src = ".text\nf:\n  ret\n  .align 4\n  .word g\n  nop\n";
        let unit = assemble(src).unwrap();
        let maps: Vec<_> = unit
            .symbols
            .iter()
            .filter(|s| is_mapping_symbol(&s.name))
            .map(|s| (s.name.as_str(), s.value))
            .collect();
        assert_eq!(maps, [(MAP_DATA, 4), (MAP_CODE, 8)]);
    }

    #[test]
    fn expressions() {
        assert_eq!(parse_expr("fct+8"), Some(Expr::Sym { name: "fct".into(), addend: 8 }));
        assert_eq!(parse_expr(".-4"), Some(Expr::Here(-4)));
        assert_eq!(parse_expr("-0x10"), Some(Expr::Num(-16)));
        assert_eq!(parse_expr(".rodata.x + 12"), Some(Expr::Sym { name: ".rodata.x".into(), addend: 12 }));
        assert_eq!(parse_expr("1abc"), None);
    }
}
