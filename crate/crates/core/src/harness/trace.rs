//! Trace lines printed by the runtime, interleaved with program output.
//!
//! ```text
//! (0x3ff3f00c) a0=0x40100008 a15=0x0 name='main' sp=3ff3b000
//! ret (0x3ff3f000) a0=0x40100008 a15=0x0 name='main' sp=3ff3b000
//! ```
//!
//! The first field is the return-stack top after the push or pop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dump::{find_marker, parse_dump_at};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Call,
    Return,
    Smash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub kind: TraceKind,
    pub fn_name: String,
    pub return_stack_top: u32,
    pub a0: u32,
    pub a15: u32,
    pub sp: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line at byte {offset}: {reason}")]
pub struct TraceError {
    pub offset: usize,
    pub reason: String,
}

impl TraceEvent {
    /// The line as the runtime prints it, without the newline. Smash events
    /// have no line form.
    pub fn format(&self) -> Option<String> {
        let prefix = match self.kind {
            TraceKind::Call => "",
            TraceKind::Return => "ret ",
            TraceKind::Smash => return None,
        };
        Some(format!(
            "{prefix}(0x{:08x}) a0=0x{:x} a15=0x{:x} name='{}' sp={:08x}",
            self.return_stack_top, self.a0, self.a15, self.fn_name, self.sp
        ))
    }
}

fn hex_prefixed(text: &str) -> Option<u32> {
    let digits = text.strip_prefix("0x")?;
    if digits.is_empty() || digits.len() > 8 {
        return None;
    }
    u32::from_str_radix(digits, 16).ok()
}

pub fn parse_trace_line(line: &str) -> Result<TraceEvent, String> {
    let (kind, rest) = match line.strip_prefix("ret ") {
        Some(rest) => (TraceKind::Return, rest),
        None => (TraceKind::Call, line),
    };
    let rest = rest.strip_prefix('(').ok_or("missing '('")?;
    let (top, rest) = rest.split_once(") a0=").ok_or("missing ') a0='")?;
    if top.len() != 10 {
        return Err("stack top must have 8 hex digits".into());
    }
    let return_stack_top = hex_prefixed(top).ok_or("bad stack top")?;
    let (a0, rest) = rest.split_once(" a15=").ok_or("missing ' a15='")?;
    let a0 = hex_prefixed(a0).ok_or("bad a0")?;
    let (a15, rest) = rest.split_once(" name='").ok_or("missing ' name='")?;
    let a15 = hex_prefixed(a15).ok_or("bad a15")?;
    let (name, sp) = rest.rsplit_once("' sp=").ok_or("missing ' sp='")?;
    if sp.len() != 8 {
        return Err("sp must have 8 hex digits".into());
    }
    let sp = u32::from_str_radix(sp, 16).map_err(|_| "bad sp")?;
    Ok(TraceEvent { kind, fn_name: name.to_string(), return_stack_top, a0, a15, sp })
}

/// Whether a trace line starts at `at`: `ret (0x` or `(0x` followed by
/// eight hex digits and `) a0=0x`.
fn signature_at(uart: &[u8], at: usize) -> bool {
    let rest = &uart[at..];
    let rest = rest.strip_prefix(b"ret ").unwrap_or(rest);
    rest.len() >= 18
        && rest.starts_with(b"(0x")
        && rest[3..11].iter().all(u8::is_ascii_hexdigit)
        && &rest[11..18] == b") a0=0x"
}

/// Splits UART output into trace events and the remaining program output.
/// A crash dump, if present, becomes a trailing smash event and stays in
/// the program output.
pub fn split_trace(uart: &[u8]) -> Result<(Vec<TraceEvent>, Vec<u8>), TraceError> {
    let mut events = Vec::new();
    let mut rest = Vec::with_capacity(uart.len());
    let mut at = 0;
    let dump_at = find_marker(uart).unwrap_or(uart.len());
    while at < dump_at {
        if (uart[at] == b'(' || uart[at] == b'r') && signature_at(uart, at) {
            let end = uart[at..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| TraceError { offset: at, reason: "unterminated trace line".into() })?;
            let line = std::str::from_utf8(&uart[at..at + end])
                .map_err(|_| TraceError { offset: at, reason: "not utf-8".into() })?;
            events.push(parse_trace_line(line).map_err(|reason| TraceError { offset: at, reason })?);
            at += end + 1;
        } else {
            rest.push(uart[at]);
            at += 1;
        }
    }
    rest.extend_from_slice(&uart[dump_at..]);
    if dump_at < uart.len() {
        let (dump, _) = parse_dump_at(uart, dump_at).map_err(|e| TraceError { offset: dump_at, reason: e.to_string() })?;
        let top = events.iter().rev().find(|e| e.kind != TraceKind::Smash).map_or(0, |e| e.return_stack_top);
        events.push(TraceEvent {
            kind: TraceKind::Smash,
            fn_name: dump.fn_name.clone(),
            return_stack_top: top,
            a0: dump.pc,
            a15: dump.registers[14],
            sp: dump.registers[0],
        });
    }
    Ok((events, rest))
}

/// Checks call/return pairing against a shadow stack: each call moves the
/// top by +12, each return by -12 and names the most recent open call.
pub fn check_nesting(events: &[TraceEvent]) -> Result<(), String> {
    let mut shadow: Vec<&TraceEvent> = Vec::new();
    let mut last_top: Option<u32> = None;
    for (i, e) in events.iter().enumerate() {
        let expect = |delta: i64| {
            last_top.is_none_or(|t| t as i64 + delta == e.return_stack_top as i64)
        };
        match e.kind {
            TraceKind::Call => {
                if !expect(12) {
                    return Err(format!("event {i}: call does not advance the top by 12"));
                }
                shadow.push(e);
            }
            TraceKind::Return => {
                if !expect(-12) {
                    return Err(format!("event {i}: return does not retreat the top by 12"));
                }
                let open = shadow.pop().ok_or_else(|| format!("event {i}: return without call"))?;
                if (open.fn_name.as_str(), open.a0, open.a15) != (e.fn_name.as_str(), e.a0, e.a15) {
                    return Err(format!("event {i}: return of {} pairs with call of {}", e.fn_name, open.fn_name));
                }
            }
            TraceKind::Smash => continue,
        }
        last_top = Some(e.return_stack_top);
    }
    Ok(())
}
