//! Wrapper stubs and the shared instrumentation runtime, emitted as assembly.
//!
//! A stub for `X` saves a15 below the stack pointer, keeps the caller's
//! return address in a15 and calls the shared tail with a pointer to its
//! descriptor (the address of `hr_X` followed by the name string). The tail
//! pushes a [`ReturnStackEntry`], optionally prints a trace line, loads the
//! canary into a0 and jumps to `hr_X`. When `hr_X` returns it jumps to the
//! canary, faults, and the handler pops the entry and resumes the caller.
//!
//! Frame use below the caller's stack pointer: 16 bytes in the stub and
//! tail, 256 in the handler (of which the deepest slot written is
//! [`HANDLER_REACH`] bytes down), 64 more in each trace routine.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::object::ObjectUnit;
use crate::rewriter::InstrumentationPolicy;
use crate::toolchain::layout::LayoutError;
use crate::toolchain::{assemble, AsmError, MemoryLayout};

pub const ENTRY_SIZE: u32 = 12;
pub const STUB_FRAME: u32 = 16;
pub const SCRATCH_FRAME: u32 = 256;
/// Distance below the caller's stack pointer of the lowest word the handler
/// stores (a2 at frame offset 20).
pub const HANDLER_REACH: u32 = SCRATCH_FRAME - 20;
pub const TRACE_FRAME: u32 = 64;
/// Bytes of code and descriptor in every stub, excluding the name.
pub const STUB_SIZE: u32 = 16;
pub const MAX_NAME_LEN: usize = 255;

pub const STUB_SECTION_PREFIX: &str = ".text.lh_stub.";
pub const TAIL: &str = "__lh_tail";
pub const TAIL_MASTER: &str = "__lh_tail_master";
pub const HANDLER: &str = "__lh_illegal";
pub const DUMP: &str = "__lh_stack_chk_fail";
pub const ENTRY: &str = crate::toolchain::link::HOOKED_ENTRY;
pub const TRACE_CALL: &str = "__lh_trace_call";
pub const TRACE_RET: &str = "__lh_trace_ret";
pub const RS_TOP: &str = "__lh_rs_top";
pub const DUMP_REGS: &str = "__lh_dump_regs";

pub const SMASH_MARKER: &str = "*** STACK SMASH DETECTED***";
pub const DUMP_BELOW_SP: u32 = 144;
pub const DUMP_WINDOW: u32 = 384;
pub const DUMP_ROW: u32 = 16;

/// One return-stack record as laid out in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReturnStackEntry {
    pub return_address: u32,
    pub name_ref: u32,
    pub saved_scratch: u32,
}

impl ReturnStackEntry {
    pub fn to_bytes(&self) -> [u8; 12] {
        let mut out = [0; 12];
        out[0..4].copy_from_slice(&self.return_address.to_le_bytes());
        out[4..8].copy_from_slice(&self.name_ref.to_le_bytes());
        out[8..12].copy_from_slice(&self.saved_scratch.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; 12]) -> ReturnStackEntry {
        let w = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        ReturnStackEntry { return_address: w(0), name_ref: w(4), saved_scratch: w(8) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubArtifact {
    pub wrapped_name: String,
    /// Name the stub is exported under; the original function name.
    pub stub_symbol: String,
    pub code: String,
    /// Zero-terminated name, padded to a word.
    pub name_literal: Vec<u8>,
}

impl StubArtifact {
    pub fn size(&self) -> u32 {
        STUB_SIZE + self.name_literal.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeArtifact {
    pub handler_asm: String,
    pub dump_asm: String,
    pub installer_asm: String,
    /// Tail, trace printers, formatting helpers and runtime data.
    pub support_asm: String,
    pub return_stack_base: u32,
    pub return_stack_size: u32,
    pub canary: u32,
    pub scratch_frame_size: u32,
}

impl RuntimeArtifact {
    pub fn source(&self) -> String {
        [&self.handler_asm, &self.dump_asm, &self.installer_asm, &self.support_asm]
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Error)]
pub enum StubError {
    #[error("name {0:?} is longer than {MAX_NAME_LEN} bytes")]
    NameTooLong(String),
    #[error("name {0:?} is not a plain symbol")]
    BadName(String),
    #[error("layout: {0}")]
    Layout(#[from] LayoutError),
    #[error("assembling the wrapper: {0}")]
    Asm(#[from] AsmError),
}

fn valid_symbol(name: &str) -> bool {
    let mut chars = name.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

pub fn name_literal(name: &str) -> Vec<u8> {
    let mut bytes = name.as_bytes().to_vec();
    bytes.push(0);
    bytes.resize(bytes.len().next_multiple_of(4), 0);
    bytes
}

pub fn generate_stub(name: &str, policy: &InstrumentationPolicy) -> Result<StubArtifact, StubError> {
    if name.len() > MAX_NAME_LEN {
        return Err(StubError::NameTooLong(name.to_string()));
    }
    if !valid_symbol(name) {
        return Err(StubError::BadName(name.to_string()));
    }
    let wrapped = policy.renamed(name);
    let tail = if policy.master_function.as_deref() == Some(name) { TAIL_MASTER } else { TAIL };
    // call0 leaves a0 two bytes short of the descriptor, which sits after
    // the alignment padding.
    let code = format!(
        "\
.section {STUB_SECTION_PREFIX}{name}, code
.global {name}
.type {name}, @function
{name}:
  addi.n a1, a1, -{STUB_FRAME}
  s32i.n a15, a1, 0
  mov.n a15, a0
  call0 {tail}
  .align 4
  .word {wrapped}
  .asciz \"{name}\"
"
    );
    Ok(StubArtifact { wrapped_name: wrapped, stub_symbol: name.to_string(), code, name_literal: name_literal(name) })
}

/// Calls `__lh_puts` on a string label.
fn puts(out: &mut String, label: &str) {
    writeln!(out, "  l32r a2, ={label}\n  call0 __lh_puts").unwrap();
}

fn saves(out: &mut String, op: &str) {
    for r in (0..16).filter(|&r| r != 1) {
        writeln!(out, "  {op}.n a{r}, a1, {}", 4 * r).unwrap();
    }
}

fn handler_asm(policy: &InstrumentationPolicy) -> String {
    let mut s = format!(
        "\
.section .text.lh_handler, code
.global {HANDLER}
.type {HANDLER}, @function
{HANDLER}:
  addi a1, a1, -{SCRATCH_FRAME}
  s32i.n a2, a1, 20
  s32i.n a3, a1, 24
  s32i.n a4, a1, 28
  rsr.epc1 a3
  l32r a2, ={canary:#010x}
  sub a2, a2, a3
  beqz.n a2, .Lh_match
  call0 {DUMP}
.Lh_match:
  l32r a2, ={RS_TOP}
  l32i.n a3, a2, 0
  addi.n a3, a3, -{ENTRY_SIZE}
  s32i.n a3, a2, 0
",
        canary = policy.canary
    );
    if policy.trace_enabled {
        writeln!(s, "  call0 {TRACE_RET}").unwrap();
    }
    writeln!(
        s,
        "\
  l32i.n a0, a3, 0
  l32i.n a15, a3, 8
  l32i.n a2, a1, 20
  l32i.n a3, a1, 24
  l32i.n a4, a1, 28
  addi a1, a1, {SCRATCH_FRAME}
  wsr.epc1 a0
  rfe"
    )
    .unwrap();
    s
}

fn dump_asm(policy: &InstrumentationPolicy) -> String {
    let mut s = format!(
        "\
.section .text.lh_dump, code
.global {DUMP}
.type {DUMP}, @function
; Entered from the handler: a1 = handler frame, a3 = faulting pc.
{DUMP}:
  l32r a2, ={DUMP_REGS}
  s32i.n a3, a2, 0
"
    );
    for r in 5..16 {
        writeln!(s, "  s32i.n a{r}, a2, {}", 4 * r).unwrap();
    }
    for (r, off) in [(4, 28), (3, 24), (2, 20)] {
        writeln!(s, "  l32i.n a4, a1, {off}\n  s32i.n a4, a2, {}", 4 * r).unwrap();
    }
    writeln!(s, "  addi a4, a1, {SCRATCH_FRAME}\n  s32i.n a4, a2, 4\n  mov.n a6, a2").unwrap();
    puts(&mut s, ".Ls_smash");
    writeln!(s, "  l32r a7, ={RS_TOP}\n  l32i.n a7, a7, 0\n  l32i a2, a7, -{}\n  call0 __lh_puts", ENTRY_SIZE - 4)
        .unwrap();
    puts(&mut s, ".Ls_pc");
    s.push_str("  l32i.n a2, a6, 0\n  call0 __lh_hex8\n");
    puts(&mut s, ".Ls_canary");
    writeln!(s, "  l32r a2, ={:#010x}\n  call0 __lh_hex8", policy.canary).unwrap();
    puts(&mut s, ".Ls_regs");
    for row in 0..4 {
        for col in 0..4 {
            let r = row + 4 * col;
            if col > 0 {
                puts(&mut s, ".Ls_gap");
            }
            puts(&mut s, &format!(".Ls_a{r}"));
            if r != 0 {
                writeln!(s, "  l32i.n a2, a6, {}\n  call0 __lh_hex8", 4 * r).unwrap();
            }
        }
        puts(&mut s, ".Ls_nl");
    }
    puts(&mut s, ".Ls_stack");
    writeln!(
        s,
        "\
  l32i.n a8, a6, 4
  addi a8, a8, -{DUMP_BELOW_SP}
  srli a8, a8, 4
  slli a8, a8, 4
  mov.n a2, a8
  call0 __lh_hex8",
    )
    .unwrap();
    puts(&mut s, ".Ls_colon");
    writeln!(s, "  movi a9, {}\n.Ld_line:", DUMP_WINDOW / DUMP_ROW).unwrap();
    puts(&mut s, ".Ls_0x");
    s.push_str("  mov.n a2, a8\n  call0 __lh_hex8\n");
    puts(&mut s, ".Ls_colon_sp");
    s.push_str(
        "\
  movi a10, 0
.Ld_byte:
  add a2, a8, a10
  l8ui a2, a2, 0
  call0 __lh_hex2
  addi a10, a10, 1
  movi a11, 16
  beq a10, a11, .Ld_eol
  movi a11, 32
  movi a12, 8
  bne a10, a12, .Ld_sep
  out a11
.Ld_sep:
  out a11
  j .Ld_byte
.Ld_eol:
  movi a11, 10
  out a11
  addi a8, a8, 16
  addi a9, a9, -1
  bnez a9, .Ld_line
  hlt
",
    );
    s
}

fn installer_asm(policy: &InstrumentationPolicy) -> String {
    let install = format!(
        "\
  l32r a2, =__exc_table
  l32r a3, ={HANDLER}
  s32i.n a3, a2, 0
"
    );
    match &policy.master_function {
        // Reached from the master stub with a0, a1 and a15 live; a2 and a3
        // are parked in the stub frame like the tail does.
        Some(_) => format!(
            "\
.section .text.lh_install, code
.global {TAIL_MASTER}
.type {TAIL_MASTER}, @function
{TAIL_MASTER}:
  s32i.n a2, a1, 4
  s32i.n a3, a1, 8
{install}  l32i.n a2, a1, 4
  l32i.n a3, a1, 8
  j {TAIL}
"
        ),
        None => format!(
            "\
.section .text.lh_install, code
.global {ENTRY}
.type {ENTRY}, @function
{ENTRY}:
{install}  movi a2, 0
  movi a3, 0
  j _start
"
        ),
    }
}

fn support_asm(policy: &InstrumentationPolicy) -> String {
    let mut s = format!(
        "\
.section .text.lh_runtime, code
.global {TAIL}
.type {TAIL}, @function
; a0 = descriptor - 2, a15 = caller return address, [a1] = caller a15.
{TAIL}:
  addi a0, a0, 2
  s32i.n a2, a1, 4
  s32i.n a3, a1, 8
  l32r a2, ={RS_TOP}
  l32i.n a3, a2, 0
  s32i.n a15, a3, 0
  addi.n a15, a0, 4
  s32i.n a15, a3, 4
  l32i.n a15, a1, 0
  s32i.n a15, a3, 8
  addi.n a3, a3, {ENTRY_SIZE}
  s32i.n a3, a2, 0
  l32i.n a15, a0, 0
"
    );
    if policy.trace_enabled {
        writeln!(s, "  call0 {TRACE_CALL}").unwrap();
    }
    writeln!(
        s,
        "\
  l32i.n a2, a1, 4
  l32i.n a3, a1, 8
  addi.n a1, a1, {STUB_FRAME}
  l32r a0, ={canary:#010x}
  jx a15
",
        canary = policy.canary
    )
    .unwrap();

    if policy.trace_enabled {
        for (name, depth, is_ret) in [(TRACE_CALL, STUB_FRAME, 0), (TRACE_RET, SCRATCH_FRAME, 1)] {
            writeln!(s, ".global {name}\n.type {name}, @function\n{name}:\n  addi a1, a1, -{TRACE_FRAME}").unwrap();
            saves(&mut s, "s32i");
            writeln!(
                s,
                "  addi a2, a1, {}\n  movi a3, {is_ret}\n  call0 __lh_trace_line",
                TRACE_FRAME + depth
            )
            .unwrap();
            saves(&mut s, "l32i");
            writeln!(s, "  addi a1, a1, {TRACE_FRAME}\n  ret").unwrap();
        }
        // a2 = caller sp, a3 = 1 for returns. Free to clobber all but a1.
        s.push_str(
            "\
__lh_trace_line:
  mov.n a14, a0
  mov.n a13, a2
  l32r a6, =__lh_rs_top
  l32i.n a12, a6, 0
  mov.n a11, a12
  bnez.n a3, .Ltl_ret
  addi.n a11, a11, -12
  j .Ltl_open
.Ltl_ret:
",
        );
        puts(&mut s, ".Ls_ret");
        s.push_str(".Ltl_open:\n");
        puts(&mut s, ".Ls_open");
        s.push_str("  mov.n a2, a12\n  call0 __lh_hex8\n");
        puts(&mut s, ".Ls_trace_a0");
        s.push_str("  l32i.n a2, a11, 0\n  call0 __lh_hexn\n");
        puts(&mut s, ".Ls_trace_a15");
        s.push_str("  l32i.n a2, a11, 8\n  call0 __lh_hexn\n");
        puts(&mut s, ".Ls_name");
        s.push_str("  l32i.n a2, a11, 4\n  call0 __lh_puts\n");
        puts(&mut s, ".Ls_sp");
        s.push_str("  mov.n a2, a13\n  call0 __lh_hex8\n");
        puts(&mut s, ".Ls_nl");
        s.push_str("  mov.n a0, a14\n  ret\n");
    }

    // Formatting helpers; they clobber a2..a5 only.
    s.push_str(
        "\
.global __lh_puts
__lh_puts:
  l8ui a3, a2, 0
  beqz.n a3, .Lputs_done
  out a3
  addi a2, a2, 1
  j __lh_puts
.Lputs_done:
  ret
.global __lh_hexn
__lh_hexn:
  movi a4, 8
  bnez a2, .Lhexn_skip
  movi a3, 48
  out a3
  ret
.Lhexn_skip:
  srli a3, a2, 28
  bnez a3, .Lhex_loop
  slli a2, a2, 4
  addi a4, a4, -1
  j .Lhexn_skip
.global __lh_hex2
__lh_hex2:
  movi a4, 2
  slli a2, a2, 24
  j .Lhex_loop
.global __lh_hex8
__lh_hex8:
  movi a4, 8
.Lhex_loop:
  srli a3, a2, 28
  movi a5, 10
  bltu a3, a5, .Lhex_dec
  addi a3, a3, 39
.Lhex_dec:
  addi a3, a3, 48
  out a3
  slli a2, a2, 4
  addi a4, a4, -1
  bnez a4, .Lhex_loop
  ret
",
    );

    writeln!(
        s,
        "
.section .data.lh_runtime, data
.global {RS_TOP}
{RS_TOP}:
  .word __rs_base

.section .bss.lh_runtime, bss
.global {DUMP_REGS}
{DUMP_REGS}:
  .space 64

.section .rodata.lh_runtime, rodata"
    )
    .unwrap();
    let mut strings: Vec<(String, String)> = vec![
        ("smash".into(), format!("{SMASH_MARKER}\\nreturning from function ")),
        ("pc".into(), "\\nhalting execution. pc=".into()),
        ("canary".into(), ", canary=".into()),
        ("regs".into(), "\\n\\nRegister state:\\n".into()),
        ("gap".into(), "  ".into()),
        ("nl".into(), "\\n".into()),
        ("stack".into(), "\\nstack dump at ".into()),
        ("colon".into(), ":\\n".into()),
        ("0x".into(), "0x".into()),
        ("colon_sp".into(), ": ".into()),
        ("a0".into(), "a0=(unk)   ".into()),
    ];
    for r in 1..16 {
        strings.push((format!("a{r}"), format!("a{r}=")));
    }
    if policy.trace_enabled {
        strings.extend([
            ("ret".into(), "ret ".into()),
            ("open".into(), "(0x".into()),
            ("trace_a0".into(), ") a0=0x".into()),
            ("trace_a15".into(), " a15=0x".into()),
            ("name".into(), " name='".into()),
            ("sp".into(), "' sp=".into()),
        ]);
    }
    for (label, text) in strings {
        writeln!(s, ".Ls_{label}:\n  .asciz \"{text}\"").unwrap();
    }
    s
}

pub fn generate_runtime(policy: &InstrumentationPolicy, layout: &MemoryLayout) -> Result<RuntimeArtifact, StubError> {
    layout.validate()?;
    layout.check_canary(policy.canary)?;
    Ok(RuntimeArtifact {
        handler_asm: handler_asm(policy),
        dump_asm: dump_asm(policy),
        installer_asm: installer_asm(policy),
        support_asm: support_asm(policy),
        return_stack_base: layout.return_stack_base,
        return_stack_size: layout.return_stack_size,
        canary: policy.canary,
        scratch_frame_size: SCRATCH_FRAME,
    })
}

pub fn build_wrapper_object(stubs: &[StubArtifact], runtime: &RuntimeArtifact) -> Result<ObjectUnit, StubError> {
    let mut src = runtime.source();
    for stub in stubs {
        src.push('\n');
        src.push_str(&stub.code);
    }
    Ok(assemble(&src)?)
}
