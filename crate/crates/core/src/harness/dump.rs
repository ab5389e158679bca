//! Crash dumps printed by the runtime's stack-check routine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stubgen::{DUMP_ROW, DUMP_WINDOW, SMASH_MARKER};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashDump {
    pub fn_name: String,
    pub pc: u32,
    pub canary: u32,
    /// a1..a15; a0 is not recoverable and is printed as unknown.
    pub registers: [u32; 15],
    pub stack_base: u32,
    pub stack_bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DumpError {
    #[error("incomplete dump: {0}")]
    Incomplete(String),
    #[error("malformed dump at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
}

impl CrashDump {
    pub fn register(&self, index: usize) -> Option<u32> {
        index.checked_sub(1).and_then(|i| self.registers.get(i).copied())
    }

    /// Text exactly as the runtime prints it.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{SMASH_MARKER}\nreturning from function {}\nhalting execution. pc={:08x}, canary={:08x}\n\nRegister state:\n",
            self.fn_name, self.pc, self.canary
        );
        for row in 0..4 {
            let cells: Vec<String> = (0..4)
                .map(|col| {
                    let r = row + 4 * col;
                    match self.register(r) {
                        Some(v) => format!("a{r}={v:08x}"),
                        None => "a0=(unk)   ".to_string(),
                    }
                })
                .collect();
            out.push_str(&cells.join("  "));
            out.push('\n');
        }
        out.push_str(&format!("\nstack dump at {:08x}:\n", self.stack_base));
        for (i, line) in self.stack_bytes.chunks(DUMP_ROW as usize).enumerate() {
            out.push_str(&format!("0x{:08x}: ", self.stack_base.wrapping_add(i as u32 * DUMP_ROW)));
            for (j, b) in line.iter().enumerate() {
                out.push_str(&format!("{b:02x}"));
                out.push_str(match j {
                    15 => "\n",
                    7 => "  ",
                    _ => " ",
                });
            }
        }
        out
    }

    /// Length of the longest run of `byte` in the stack window.
    pub fn longest_run(&self, byte: u8) -> usize {
        let mut best = 0;
        let mut run = 0;
        for &b in &self.stack_bytes {
            run = if b == byte { run + 1 } else { 0 };
            best = best.max(run);
        }
        best
    }
}

const DUMP_LINES: usize = 11 + (DUMP_WINDOW / DUMP_ROW) as usize;

/// Byte offset of the first dump marker in `uart`.
pub fn find_marker(uart: &[u8]) -> Option<usize> {
    uart.windows(SMASH_MARKER.len()).position(|w| w == SMASH_MARKER.as_bytes())
}

fn hex32(text: &str) -> Option<u32> {
    (text.len() == 8).then(|| u32::from_str_radix(text, 16).ok()).flatten()
}

/// Finds and parses a dump. A marker followed by fewer lines than a full
/// dump is an [`DumpError::Incomplete`] error, not an absence.
pub fn detect_crash(uart: &[u8]) -> Result<Option<CrashDump>, DumpError> {
    let Some(start) = find_marker(uart) else {
        return Ok(None);
    };
    parse_dump_at(uart, start).map(|(dump, _)| Some(dump))
}

/// Parses the dump starting at `start`; also returns the offset just past it.
pub fn parse_dump_at(uart: &[u8], start: usize) -> Result<(CrashDump, usize), DumpError> {
    let mut lines = Vec::with_capacity(DUMP_LINES);
    let mut at = start;
    while lines.len() < DUMP_LINES {
        let Some(nl) = uart[at..].iter().position(|&b| b == b'\n') else {
            return Err(DumpError::Incomplete(format!("{} of {DUMP_LINES} lines present", lines.len())));
        };
        lines.push((at, String::from_utf8_lossy(&uart[at..at + nl]).into_owned()));
        at += nl + 1;
    }
    let bad = |offset: usize, reason: &str| DumpError::Malformed { offset, reason: reason.to_string() };

    let (o, l) = &lines[1];
    let fn_name = l.strip_prefix("returning from function ").ok_or_else(|| bad(*o, "function line"))?.to_string();
    let (o, l) = &lines[2];
    let (pc, canary) = l
        .strip_prefix("halting execution. pc=")
        .and_then(|r| r.split_once(", canary="))
        .and_then(|(pc, c)| Some((hex32(pc)?, hex32(c)?)))
        .ok_or_else(|| bad(*o, "pc/canary line"))?;
    if !lines[3].1.is_empty() || lines[4].1 != "Register state:" {
        return Err(bad(lines[3].0, "register header"));
    }
    let mut registers = [None; 16];
    for (o, l) in &lines[5..9] {
        for cell in l.split_whitespace() {
            let (name, value) = cell.split_once('=').ok_or_else(|| bad(*o, "register cell"))?;
            let r: usize = name.strip_prefix('a').and_then(|n| n.parse().ok()).filter(|&r| r < 16).ok_or_else(|| bad(*o, "register name"))?;
            if r == 0 {
                if value != "(unk)" {
                    return Err(bad(*o, "a0 should be unknown"));
                }
                registers[0] = Some(0);
            } else {
                registers[r] = Some(hex32(value).ok_or_else(|| bad(*o, "register value"))?);
            }
        }
    }
    if registers.iter().any(Option::is_none) {
        return Err(bad(lines[5].0, "missing registers"));
    }
    let (o, l) = &lines[10];
    if !lines[9].1.is_empty() {
        return Err(bad(lines[9].0, "blank line before stack dump"));
    }
    let stack_base = l
        .strip_prefix("stack dump at ")
        .and_then(|r| r.strip_suffix(':'))
        .and_then(hex32)
        .ok_or_else(|| bad(*o, "stack header"))?;
    let mut stack_bytes = Vec::with_capacity(DUMP_WINDOW as usize);
    for (i, (o, l)) in lines[11..].iter().enumerate() {
        let expect = stack_base.wrapping_add(i as u32 * DUMP_ROW);
        let (addr, bytes) = l.split_once(": ").ok_or_else(|| bad(*o, "stack line"))?;
        if addr.strip_prefix("0x").and_then(hex32) != Some(expect) {
            return Err(bad(*o, "stack line address"));
        }
        let row: Vec<u8> = bytes
            .split_whitespace()
            .map(|b| (b.len() == 2).then(|| u8::from_str_radix(b, 16).ok()).flatten())
            .collect::<Option<_>>()
            .ok_or_else(|| bad(*o, "stack byte"))?;
        if row.len() != DUMP_ROW as usize {
            return Err(bad(*o, "stack line length"));
        }
        stack_bytes.extend(row);
    }
    let regs: [u32; 15] = std::array::from_fn(|i| registers[i + 1].unwrap());
    Ok((CrashDump { fn_name, pc, canary, registers: regs, stack_base, stack_bytes }, at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> CrashDump {
        CrashDump {
            fn_name: "shell_tcp_recvcb".into(),
            pc: 0x2323_2323,
            canary: 0xdead_dead,
            registers: std::array::from_fn(|i| i as u32 * 0x1111),
            stack_base: 0x3ff3_af60,
            stack_bytes: (0..384).map(|i| i as u8).collect(),
        }
    }

    #[test]
    fn absent_and_truncated() {
        assert_eq!(detect_crash(b"hello"), Ok(None));
        let text = sample().render();
        let cut = text.len() - 20;
        assert!(matches!(detect_crash(&text.as_bytes()[..cut]), Err(DumpError::Incomplete(_))));
    }

    #[test]
    fn malformed_is_distinct() {
        let text = sample().render().replace("canary=deaddead", "canary=xyz");
        assert!(matches!(detect_crash(text.as_bytes()), Err(DumpError::Malformed { .. })));
    }

    proptest! {
        #[test]
        fn render_parse_adjunction(
            name in "[a-z_][a-z0-9_]{0,30}",
            pc: u32, canary: u32, base: u32,
            regs in proptest::array::uniform15(any::<u32>()),
            bytes in proptest::collection::vec(any::<u8>(), 384),
            prefix in proptest::collection::vec(any::<u8>(), 0..40),
        ) {
            let dump = CrashDump { fn_name: name, pc, canary, registers: regs, stack_base: base, stack_bytes: bytes };
            let mut uart: Vec<u8> = prefix.into_iter().filter(|&b| b != b'*').collect();
            uart.extend(dump.render().bytes());
            prop_assert_eq!(detect_crash(&uart), Ok(Some(dump)));
        }
    }
}
