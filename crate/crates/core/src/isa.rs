//! Instruction set of the toy target.
//!
//! Sixteen 32-bit registers `a0`..`a15`. `a0` is the link register, `a1`
//! the stack pointer, `a2`..`a4` carry arguments and results and `a15` is a
//! caller-saved scratch register. There are no callee-saved registers.
//!
//! Every instruction starts with a byte `r << 4 | op`. Opcodes 0..=7 are
//! narrow (2 bytes), 8..=15 are wide (4 bytes). Opcode 0 and every reserved
//! sub-encoding decode as illegal, so zero-filled memory traps.
//!
//! ```text
//! narrow   [r|op] [s|x]            op: 1 mov.n  2 addi.n  3 l32i.n  4 s32i.n
//!                                      5 misc (x selects ret/nop/...)  6 beqz.n  7 bnez.n
//! wide     [r|op] b1 b2 b3         op: 8 movi  9 l32r  10 call0  11 j
//!                                      12 reg-reg-imm16  13 reg-reg-reg  14 special
//! ```
//!
//! Pc-relative offsets are measured from the address of the instruction
//! itself. `call0`, `j` and `l32r` carry a signed 24-bit byte offset in
//! bytes 1..=3; those are the fields patched by relocations.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Register number 0..=15.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub const LINK: Reg = Reg(0);
    pub const SP: Reg = Reg(1);
    pub const SCRATCH: Reg = Reg(15);

    pub fn new(n: u8) -> Option<Reg> {
        (n < 16).then_some(Reg(n))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    fn nibble(n: u8) -> Reg {
        Reg(n & 0xf)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// Signed range of the 24-bit relocatable offset fields.
pub const REL24_MIN: i64 = -(1 << 23);
pub const REL24_MAX: i64 = (1 << 23) - 1;

/// Narrow branch offsets count 2-byte units.
pub const NARROW_BRANCH_MIN: i32 = -128;
pub const NARROW_BRANCH_MAX: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Insn {
    // narrow
    MovN { rd: Reg, rs: Reg },
    /// Immediate is a multiple of 4 in -32..=28.
    AddiN { rd: Reg, rs: Reg, imm: i32 },
    /// Offset is a multiple of 4 in 0..=60.
    L32iN { rt: Reg, rs: Reg, off: u32 },
    S32iN { rt: Reg, rs: Reg, off: u32 },
    Ret,
    Nop,
    Hlt,
    Rfe,
    Jx { rs: Reg },
    Callx0 { rs: Reg },
    Out { rs: Reg },
    In { rd: Reg },
    Instat { rd: Reg },
    /// Byte offset, even, in -256..=254.
    BeqzN { rs: Reg, off: i32 },
    BnezN { rs: Reg, off: i32 },
    // wide
    Movi { rd: Reg, imm: i32 },
    L32r { rd: Reg, off: i32 },
    Call0 { off: i32 },
    J { off: i32 },
    Addi { rd: Reg, rs: Reg, imm: i32 },
    L32i { rt: Reg, rs: Reg, off: i32 },
    S32i { rt: Reg, rs: Reg, off: i32 },
    L8ui { rt: Reg, rs: Reg, off: i32 },
    S8i { rt: Reg, rs: Reg, off: i32 },
    Beq { rs: Reg, rt: Reg, off: i32 },
    Bne { rs: Reg, rt: Reg, off: i32 },
    Bltu { rs: Reg, rt: Reg, off: i32 },
    Bgeu { rs: Reg, rt: Reg, off: i32 },
    Beqz { rs: Reg, off: i32 },
    Bnez { rs: Reg, off: i32 },
    Slli { rd: Reg, rs: Reg, sh: u32 },
    Srli { rd: Reg, rs: Reg, sh: u32 },
    Andi { rd: Reg, rs: Reg, imm: u32 },
    Add { rd: Reg, rs: Reg, rt: Reg },
    Sub { rd: Reg, rs: Reg, rt: Reg },
    And { rd: Reg, rs: Reg, rt: Reg },
    Or { rd: Reg, rs: Reg, rt: Reg },
    Xor { rd: Reg, rs: Reg, rt: Reg },
    RsrEpc1 { rd: Reg },
    WsrEpc1 { rs: Reg },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodeError {
    OutOfRange { what: &'static str, value: i64 },
    Misaligned { what: &'static str, value: i64 },
}

impl fmt::Display for EncodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncodeError::OutOfRange { what, value } => write!(f, "{what} {value} out of range"),
            EncodeError::Misaligned { what, value } => write!(f, "{what} {value} is not suitably aligned"),
        }
    }
}

const MISC_RET: u8 = 0;
const MISC_NOP: u8 = 1;
const MISC_HLT: u8 = 2;
const MISC_RFE: u8 = 3;
const MISC_JX: u8 = 4;
const MISC_CALLX0: u8 = 5;
const MISC_OUT: u8 = 6;
const MISC_IN: u8 = 7;
const MISC_INSTAT: u8 = 8;

const RRI_ADDI: u8 = 0;
const RRI_L32I: u8 = 1;
const RRI_S32I: u8 = 2;
const RRI_L8UI: u8 = 3;
const RRI_S8I: u8 = 4;
const RRI_BEQ: u8 = 5;
const RRI_BNE: u8 = 6;
const RRI_BLTU: u8 = 7;
const RRI_BGEU: u8 = 8;
const RRI_BEQZ: u8 = 9;
const RRI_BNEZ: u8 = 10;
const RRI_SLLI: u8 = 11;
const RRI_SRLI: u8 = 12;
const RRI_ANDI: u8 = 13;

const RRR_ADD: u8 = 0;
const RRR_SUB: u8 = 1;
const RRR_AND: u8 = 2;
const RRR_OR: u8 = 3;
const RRR_XOR: u8 = 4;

const SPECIAL_RSR_EPC1: u8 = 0;
const SPECIAL_WSR_EPC1: u8 = 1;

/// Width in bytes of the instruction whose first byte is `b0`.
pub fn width_of(b0: u8) -> usize {
    if b0 & 0x8 == 0 {
        2
    } else {
        4
    }
}

fn check(what: &'static str, value: i64, min: i64, max: i64) -> Result<(), EncodeError> {
    if value < min || value > max {
        Err(EncodeError::OutOfRange { what, value })
    } else {
        Ok(())
    }
}

fn check_aligned(what: &'static str, value: i64, align: i64) -> Result<(), EncodeError> {
    if value % align != 0 {
        Err(EncodeError::Misaligned { what, value })
    } else {
        Ok(())
    }
}

fn narrow(r: Reg, op: u8, b1: u8) -> Vec<u8> {
    vec![(r.0 << 4) | op, b1]
}

fn misc(r: Reg, sub: u8) -> Vec<u8> {
    narrow(r, 5, sub << 4)
}

fn wide24(r: Reg, op: u8, value: i32) -> Vec<u8> {
    let v = (value as u32) & 0x00ff_ffff;
    vec![(r.0 << 4) | op, v as u8, (v >> 8) as u8, (v >> 16) as u8]
}

fn rri(r: Reg, s: Reg, sub: u8, imm: u16) -> Vec<u8> {
    let [lo, hi] = imm.to_le_bytes();
    vec![(r.0 << 4) | 12, (s.0 << 4) | sub, lo, hi]
}

fn rrr(r: Reg, s: Reg, t: Reg, sub: u8) -> Vec<u8> {
    vec![(r.0 << 4) | 13, (s.0 << 4) | t.0, sub, 0]
}

fn special(r: Reg, sub: u8) -> Vec<u8> {
    vec![(r.0 << 4) | 14, sub, 0, 0]
}

fn imm16(what: &'static str, value: i32) -> Result<u16, EncodeError> {
    check(what, value as i64, i16::MIN as i64, i16::MAX as i64)?;
    Ok(value as i16 as u16)
}

fn branch16(off: i32) -> Result<u16, EncodeError> {
    imm16("branch offset", off)
}

impl Insn {
    /// Encoded size in bytes.
    pub fn width(&self) -> usize {
        match self {
            Insn::MovN { .. }
            | Insn::AddiN { .. }
            | Insn::L32iN { .. }
            | Insn::S32iN { .. }
            | Insn::Ret
            | Insn::Nop
            | Insn::Hlt
            | Insn::Rfe
            | Insn::Jx { .. }
            | Insn::Callx0 { .. }
            | Insn::Out { .. }
            | Insn::In { .. }
            | Insn::Instat { .. }
            | Insn::BeqzN { .. }
            | Insn::BnezN { .. } => 2,
            _ => 4,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        let zero = Reg(0);
        Ok(match *self {
            Insn::MovN { rd, rs } => narrow(rd, 1, rs.0 << 4),
            Insn::AddiN { rd, rs, imm } => {
                check_aligned("addi.n immediate", imm as i64, 4)?;
                check("addi.n immediate", imm as i64, -32, 28)?;
                narrow(rd, 2, (rs.0 << 4) | ((imm / 4) as u8 & 0xf))
            }
            Insn::L32iN { rt, rs, off } => {
                check_aligned("l32i.n offset", off as i64, 4)?;
                check("l32i.n offset", off as i64, 0, 60)?;
                narrow(rt, 3, (rs.0 << 4) | (off / 4) as u8)
            }
            Insn::S32iN { rt, rs, off } => {
                check_aligned("s32i.n offset", off as i64, 4)?;
                check("s32i.n offset", off as i64, 0, 60)?;
                narrow(rt, 4, (rs.0 << 4) | (off / 4) as u8)
            }
            Insn::Ret => misc(zero, MISC_RET),
            Insn::Nop => misc(zero, MISC_NOP),
            Insn::Hlt => misc(zero, MISC_HLT),
            Insn::Rfe => misc(zero, MISC_RFE),
            Insn::Jx { rs } => misc(rs, MISC_JX),
            Insn::Callx0 { rs } => misc(rs, MISC_CALLX0),
            Insn::Out { rs } => misc(rs, MISC_OUT),
            Insn::In { rd } => misc(rd, MISC_IN),
            Insn::Instat { rd } => misc(rd, MISC_INSTAT),
            Insn::BeqzN { rs, off } | Insn::BnezN { rs, off } => {
                check_aligned("narrow branch offset", off as i64, 2)?;
                let units = off / 2;
                check(
                    "narrow branch offset",
                    units as i64,
                    NARROW_BRANCH_MIN as i64,
                    NARROW_BRANCH_MAX as i64,
                )?;
                let op = if matches!(self, Insn::BeqzN { .. }) { 6 } else { 7 };
                narrow(rs, op, units as i8 as u8)
            }
            Insn::Movi { rd, imm } => {
                check("movi immediate", imm as i64, REL24_MIN, REL24_MAX)?;
                wide24(rd, 8, imm)
            }
            Insn::L32r { rd, off } => {
                check("l32r offset", off as i64, REL24_MIN, REL24_MAX)?;
                wide24(rd, 9, off)
            }
            Insn::Call0 { off } => {
                check("call0 offset", off as i64, REL24_MIN, REL24_MAX)?;
                wide24(zero, 10, off)
            }
            Insn::J { off } => {
                check("j offset", off as i64, REL24_MIN, REL24_MAX)?;
                wide24(zero, 11, off)
            }
            Insn::Addi { rd, rs, imm } => rri(rd, rs, RRI_ADDI, imm16("addi immediate", imm)?),
            Insn::L32i { rt, rs, off } => rri(rt, rs, RRI_L32I, imm16("l32i offset", off)?),
            Insn::S32i { rt, rs, off } => rri(rt, rs, RRI_S32I, imm16("s32i offset", off)?),
            Insn::L8ui { rt, rs, off } => rri(rt, rs, RRI_L8UI, imm16("l8ui offset", off)?),
            Insn::S8i { rt, rs, off } => rri(rt, rs, RRI_S8I, imm16("s8i offset", off)?),
            Insn::Beq { rs, rt, off } => rri(rs, rt, RRI_BEQ, branch16(off)?),
            Insn::Bne { rs, rt, off } => rri(rs, rt, RRI_BNE, branch16(off)?),
            Insn::Bltu { rs, rt, off } => rri(rs, rt, RRI_BLTU, branch16(off)?),
            Insn::Bgeu { rs, rt, off } => rri(rs, rt, RRI_BGEU, branch16(off)?),
            Insn::Beqz { rs, off } => rri(rs, zero, RRI_BEQZ, branch16(off)?),
            Insn::Bnez { rs, off } => rri(rs, zero, RRI_BNEZ, branch16(off)?),
            Insn::Slli { rd, rs, sh } => {
                check("shift amount", sh as i64, 0, 31)?;
                rri(rd, rs, RRI_SLLI, sh as u16)
            }
            Insn::Srli { rd, rs, sh } => {
                check("shift amount", sh as i64, 0, 31)?;
                rri(rd, rs, RRI_SRLI, sh as u16)
            }
            Insn::Andi { rd, rs, imm } => {
                check("andi immediate", imm as i64, 0, u16::MAX as i64)?;
                rri(rd, rs, RRI_ANDI, imm as u16)
            }
            Insn::Add { rd, rs, rt } => rrr(rd, rs, rt, RRR_ADD),
            Insn::Sub { rd, rs, rt } => rrr(rd, rs, rt, RRR_SUB),
            Insn::And { rd, rs, rt } => rrr(rd, rs, rt, RRR_AND),
            Insn::Or { rd, rs, rt } => rrr(rd, rs, rt, RRR_OR),
            Insn::Xor { rd, rs, rt } => rrr(rd, rs, rt, RRR_XOR),
            Insn::RsrEpc1 { rd } => special(rd, SPECIAL_RSR_EPC1),
            Insn::WsrEpc1 { rs } => special(rs, SPECIAL_WSR_EPC1),
        })
    }

    /// Decodes one instruction from the start of `bytes`. Returns `None` for
    /// illegal encodings or when `bytes` is shorter than the instruction.
    pub fn decode(bytes: &[u8]) -> Option<Insn> {
        let b0 = *bytes.first()?;
        let op = b0 & 0xf;
        let r = Reg::nibble(b0 >> 4);
        if width_of(b0) == 2 {
            let b1 = *bytes.get(1)?;
            let s = Reg::nibble(b1 >> 4);
            let low = b1 & 0xf;
            return match op {
                1 if low == 0 => Some(Insn::MovN { rd: r, rs: s }),
                2 => Some(Insn::AddiN { rd: r, rs: s, imm: (((low << 4) as i8) >> 4) as i32 * 4 }),
                3 => Some(Insn::L32iN { rt: r, rs: s, off: low as u32 * 4 }),
                4 => Some(Insn::S32iN { rt: r, rs: s, off: low as u32 * 4 }),
                5 if low == 0 => {
                    let no_reg = r.0 == 0;
                    match b1 >> 4 {
                        MISC_RET if no_reg => Some(Insn::Ret),
                        MISC_NOP if no_reg => Some(Insn::Nop),
                        MISC_HLT if no_reg => Some(Insn::Hlt),
                        MISC_RFE if no_reg => Some(Insn::Rfe),
                        MISC_JX => Some(Insn::Jx { rs: r }),
                        MISC_CALLX0 => Some(Insn::Callx0 { rs: r }),
                        MISC_OUT => Some(Insn::Out { rs: r }),
                        MISC_IN => Some(Insn::In { rd: r }),
                        MISC_INSTAT => Some(Insn::Instat { rd: r }),
                        _ => None,
                    }
                }
                6 => Some(Insn::BeqzN { rs: r, off: b1 as i8 as i32 * 2 }),
                7 => Some(Insn::BnezN { rs: r, off: b1 as i8 as i32 * 2 }),
                _ => None,
            };
        }
        let w = bytes.get(..4)?;
        let rel24 = || read_rel24(w);
        match op {
            8 => Some(Insn::Movi { rd: r, imm: rel24() }),
            9 => Some(Insn::L32r { rd: r, off: rel24() }),
            10 if r.0 == 0 => Some(Insn::Call0 { off: rel24() }),
            11 if r.0 == 0 => Some(Insn::J { off: rel24() }),
            12 => {
                let s = Reg::nibble(w[1] >> 4);
                let imm_u = u16::from_le_bytes([w[2], w[3]]);
                let imm = imm_u as i16 as i32;
                match w[1] & 0xf {
                    RRI_ADDI => Some(Insn::Addi { rd: r, rs: s, imm }),
                    RRI_L32I => Some(Insn::L32i { rt: r, rs: s, off: imm }),
                    RRI_S32I => Some(Insn::S32i { rt: r, rs: s, off: imm }),
                    RRI_L8UI => Some(Insn::L8ui { rt: r, rs: s, off: imm }),
                    RRI_S8I => Some(Insn::S8i { rt: r, rs: s, off: imm }),
                    RRI_BEQ => Some(Insn::Beq { rs: r, rt: s, off: imm }),
                    RRI_BNE => Some(Insn::Bne { rs: r, rt: s, off: imm }),
                    RRI_BLTU => Some(Insn::Bltu { rs: r, rt: s, off: imm }),
                    RRI_BGEU => Some(Insn::Bgeu { rs: r, rt: s, off: imm }),
                    RRI_BEQZ if s.0 == 0 => Some(Insn::Beqz { rs: r, off: imm }),
                    RRI_BNEZ if s.0 == 0 => Some(Insn::Bnez { rs: r, off: imm }),
                    RRI_SLLI if imm_u < 32 => Some(Insn::Slli { rd: r, rs: s, sh: imm_u as u32 }),
                    RRI_SRLI if imm_u < 32 => Some(Insn::Srli { rd: r, rs: s, sh: imm_u as u32 }),
                    RRI_ANDI => Some(Insn::Andi { rd: r, rs: s, imm: imm_u as u32 }),
                    _ => None,
                }
            }
            13 if w[3] == 0 => {
                let s = Reg::nibble(w[1] >> 4);
                let t = Reg::nibble(w[1]);
                match w[2] {
                    RRR_ADD => Some(Insn::Add { rd: r, rs: s, rt: t }),
                    RRR_SUB => Some(Insn::Sub { rd: r, rs: s, rt: t }),
                    RRR_AND => Some(Insn::And { rd: r, rs: s, rt: t }),
                    RRR_OR => Some(Insn::Or { rd: r, rs: s, rt: t }),
                    RRR_XOR => Some(Insn::Xor { rd: r, rs: s, rt: t }),
                    _ => None,
                }
            }
            14 if w[2] == 0 && w[3] == 0 => match w[1] {
                SPECIAL_RSR_EPC1 => Some(Insn::RsrEpc1 { rd: r }),
                SPECIAL_WSR_EPC1 => Some(Insn::WsrEpc1 { rs: r }),
                _ => None,
            },
            _ => None,
        }
    }

    /// Pc-relative target offset of branches, jumps, calls and `l32r`.
    pub fn relative_offset(&self) -> Option<i32> {
        match *self {
            Insn::BeqzN { off, .. }
            | Insn::BnezN { off, .. }
            | Insn::L32r { off, .. }
            | Insn::Call0 { off }
            | Insn::J { off }
            | Insn::Beq { off, .. }
            | Insn::Bne { off, .. }
            | Insn::Bltu { off, .. }
            | Insn::Bgeu { off, .. }
            | Insn::Beqz { off, .. }
            | Insn::Bnez { off, .. } => Some(off),
            _ => None,
        }
    }

    /// Same instruction with its pc-relative offset replaced.
    pub fn with_offset(self, new: i32) -> Insn {
        match self {
            Insn::BeqzN { rs, .. } => Insn::BeqzN { rs, off: new },
            Insn::BnezN { rs, .. } => Insn::BnezN { rs, off: new },
            Insn::L32r { rd, .. } => Insn::L32r { rd, off: new },
            Insn::Call0 { .. } => Insn::Call0 { off: new },
            Insn::J { .. } => Insn::J { off: new },
            Insn::Beq { rs, rt, .. } => Insn::Beq { rs, rt, off: new },
            Insn::Bne { rs, rt, .. } => Insn::Bne { rs, rt, off: new },
            Insn::Bltu { rs, rt, .. } => Insn::Bltu { rs, rt, off: new },
            Insn::Bgeu { rs, rt, .. } => Insn::Bgeu { rs, rt, off: new },
            Insn::Beqz { rs, .. } => Insn::Beqz { rs, off: new },
            Insn::Bnez { rs, .. } => Insn::Bnez { rs, off: new },
            other => other,
        }
    }

    /// True for instructions after which control never falls through.
    pub fn ends_block(&self) -> bool {
        matches!(self, Insn::Ret | Insn::Hlt | Insn::Rfe | Insn::Jx { .. } | Insn::J { .. })
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Insn::MovN { .. } => "mov.n",
            Insn::AddiN { .. } => "addi.n",
            Insn::L32iN { .. } => "l32i.n",
            Insn::S32iN { .. } => "s32i.n",
            Insn::Ret => "ret",
            Insn::Nop => "nop",
            Insn::Hlt => "hlt",
            Insn::Rfe => "rfe",
            Insn::Jx { .. } => "jx",
            Insn::Callx0 { .. } => "callx0",
            Insn::Out { .. } => "out",
            Insn::In { .. } => "in",
            Insn::Instat { .. } => "instat",
            Insn::BeqzN { .. } => "beqz.n",
            Insn::BnezN { .. } => "bnez.n",
            Insn::Movi { .. } => "movi",
            Insn::L32r { .. } => "l32r",
            Insn::Call0 { .. } => "call0",
            Insn::J { .. } => "j",
            Insn::Addi { .. } => "addi",
            Insn::L32i { .. } => "l32i",
            Insn::S32i { .. } => "s32i",
            Insn::L8ui { .. } => "l8ui",
            Insn::S8i { .. } => "s8i",
            Insn::Beq { .. } => "beq",
            Insn::Bne { .. } => "bne",
            Insn::Bltu { .. } => "bltu",
            Insn::Bgeu { .. } => "bgeu",
            Insn::Beqz { .. } => "beqz",
            Insn::Bnez { .. } => "bnez",
            Insn::Slli { .. } => "slli",
            Insn::Srli { .. } => "srli",
            Insn::Andi { .. } => "andi",
            Insn::Add { .. } => "add",
            Insn::Sub { .. } => "sub",
            Insn::And { .. } => "and",
            Insn::Or { .. } => "or",
            Insn::Xor { .. } => "xor",
            Insn::RsrEpc1 { .. } => "rsr.epc1",
            Insn::WsrEpc1 { .. } => "wsr.epc1",
        }
    }

    /// Operands in assembler syntax, with `target` substituted for the
    /// pc-relative operand if the instruction has one.
    pub fn format_with(&self, target: Option<&str>) -> String {
        let rel = |off: i32| target.map_or_else(|| format!(".{off:+}"), str::to_string);
        let ops = match *self {
            Insn::MovN { rd, rs } => format!("{rd}, {rs}"),
            Insn::AddiN { rd, rs, imm } | Insn::Addi { rd, rs, imm } => format!("{rd}, {rs}, {imm}"),
            Insn::L32iN { rt, rs, off } | Insn::S32iN { rt, rs, off } => format!("{rt}, {rs}, {off}"),
            Insn::Ret | Insn::Nop | Insn::Hlt | Insn::Rfe => String::new(),
            Insn::Jx { rs } | Insn::Callx0 { rs } | Insn::Out { rs } | Insn::WsrEpc1 { rs } => {
                rs.to_string()
            }
            Insn::In { rd } | Insn::Instat { rd } | Insn::RsrEpc1 { rd } => rd.to_string(),
            Insn::BeqzN { rs, off }
            | Insn::BnezN { rs, off }
            | Insn::Beqz { rs, off }
            | Insn::Bnez { rs, off } => format!("{rs}, {}", rel(off)),
            Insn::Movi { rd, imm } => format!("{rd}, {imm}"),
            Insn::L32r { rd, off } => format!("{rd}, {}", rel(off)),
            Insn::Call0 { off } | Insn::J { off } => rel(off),
            Insn::L32i { rt, rs, off }
            | Insn::S32i { rt, rs, off }
            | Insn::L8ui { rt, rs, off }
            | Insn::S8i { rt, rs, off } => format!("{rt}, {rs}, {off}"),
            Insn::Beq { rs, rt, off }
            | Insn::Bne { rs, rt, off }
            | Insn::Bltu { rs, rt, off }
            | Insn::Bgeu { rs, rt, off } => format!("{rs}, {rt}, {}", rel(off)),
            Insn::Slli { rd, rs, sh } | Insn::Srli { rd, rs, sh } => format!("{rd}, {rs}, {sh}"),
            Insn::Andi { rd, rs, imm } => format!("{rd}, {rs}, {imm}"),
            Insn::Add { rd, rs, rt }
            | Insn::Sub { rd, rs, rt }
            | Insn::And { rd, rs, rt }
            | Insn::Or { rd, rs, rt }
            | Insn::Xor { rd, rs, rt } => format!("{rd}, {rs}, {rt}"),
        };
        if ops.is_empty() {
            self.mnemonic().to_string()
        } else {
            format!("{} {ops}", self.mnemonic())
        }
    }
}

impl fmt::Display for Insn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format_with(None))
    }
}

/// Reads the signed 24-bit field of a wide instruction at `bytes[0..4]`.
pub fn read_rel24(bytes: &[u8]) -> i32 {
    (u32::from_le_bytes([0, bytes[1], bytes[2], bytes[3]]) as i32) >> 8
}

/// Overwrites the signed 24-bit field of a wide instruction.
pub fn write_rel24(bytes: &mut [u8], value: i32) {
    let v = value as u32;
    bytes[1] = v as u8;
    bytes[2] = (v >> 8) as u8;
    bytes[3] = (v >> 16) as u8;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: u8) -> Reg {
        Reg::new(n).unwrap()
    }

    #[test]
    fn zero_bytes_are_illegal() {
        assert_eq!(Insn::decode(&[0, 0]), None);
        assert_eq!(Insn::decode(&[0, 0, 0, 0]), None);
        assert_eq!(Insn::decode(&[0x0f, 0, 0, 0]), None);
    }

    #[test]
    fn widths_follow_the_opcode_nibble() {
        assert_eq!(Insn::MovN { rd: r(2), rs: r(3) }.encode().unwrap().len(), 2);
        assert_eq!(Insn::Call0 { off: 8 }.encode().unwrap().len(), 4);
        assert_eq!(Insn::Ret.encode().unwrap(), vec![0x05, 0x00]);
    }

    #[test]
    fn narrow_ranges() {
        assert!(Insn::AddiN { rd: r(0), rs: r(0), imm: -12 }.encode().is_ok());
        assert!(Insn::AddiN { rd: r(0), rs: r(0), imm: 32 }.encode().is_err());
        assert!(Insn::AddiN { rd: r(0), rs: r(0), imm: 6 }.encode().is_err());
        assert!(Insn::L32iN { rt: r(0), rs: r(1), off: 64 }.encode().is_err());
        assert!(Insn::BeqzN { rs: r(2), off: -256 }.encode().is_ok());
        assert!(Insn::BeqzN { rs: r(2), off: 254 }.encode().is_ok());
        assert!(Insn::BeqzN { rs: r(2), off: 256 }.encode().is_err());
        assert!(Insn::Movi { rd: r(2), imm: 1 << 23 }.encode().is_err());
    }

    #[test]
    fn rel24_field_helpers() {
        let mut bytes = Insn::Call0 { off: 0 }.encode().unwrap();
        write_rel24(&mut bytes, -4);
        assert_eq!(read_rel24(&bytes), -4);
        assert_eq!(Insn::decode(&bytes), Some(Insn::Call0 { off: -4 }));
    }

    fn any_insn() -> impl Strategy<Value = Insn> {
        let reg = (0u8..16).prop_map(r);
        prop_oneof![
            (reg.clone(), reg.clone()).prop_map(|(rd, rs)| Insn::MovN { rd, rs }),
            (reg.clone(), reg.clone(), -8i32..8).prop_map(|(rd, rs, i)| Insn::AddiN { rd, rs, imm: i * 4 }),
            (reg.clone(), reg.clone(), 0u32..16).prop_map(|(rt, rs, o)| Insn::S32iN { rt, rs, off: o * 4 }),
            (reg.clone(), -128i32..128).prop_map(|(rs, o)| Insn::BnezN { rs, off: o * 2 }),
            (reg.clone(), -(1i32 << 23)..(1 << 23)).prop_map(|(rd, imm)| Insn::Movi { rd, imm }),
            (-(1i32 << 23)..(1 << 23)).prop_map(|off| Insn::Call0 { off }),
            (reg.clone(), reg.clone(), any::<i16>()).prop_map(|(rs, rt, o)| Insn::Bltu { rs, rt, off: o as i32 }),
            (reg.clone(), reg.clone(), 0u32..32).prop_map(|(rd, rs, sh)| Insn::Srli { rd, rs, sh }),
            (reg.clone(), reg.clone(), reg.clone()).prop_map(|(rd, rs, rt)| Insn::Xor { rd, rs, rt }),
            reg.clone().prop_map(|rd| Insn::RsrEpc1 { rd }),
            reg.prop_map(|rs| Insn::Jx { rs }),
            Just(Insn::Rfe),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(insn in any_insn()) {
            let bytes = insn.encode().unwrap();
            prop_assert_eq!(bytes.len(), insn.width());
            prop_assert_eq!(Insn::decode(&bytes), Some(insn));
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..6)) {
            if let Some(insn) = Insn::decode(&bytes) {
                prop_assert_eq!(insn.encode().unwrap(), bytes[..insn.width()].to_vec());
            }
        }
    }
}
