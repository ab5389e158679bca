//! Instruction-level emulator of the toy target.
//!
//! Fault model: data loads from unmapped memory return a fixed pattern,
//! stores there are dropped (unless `trap_unmapped_store`), and only a
//! control transfer to non-executable memory or an undecodable opcode
//! raises an exception. Exceptions save the faulting pc in `epc1` and jump
//! through the handler table in RAM; a zero slot means no handler.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Insn;
use crate::toolchain::{FirmwareImage, MemoryLayout, RegionFlags};

/// Exception cause of illegal instructions and bad fetches.
pub const CAUSE_ILLEGAL: u32 = 0;
/// Exception cause of stores to unmapped memory, when trapping is enabled.
pub const CAUSE_STORE: u32 = 1;

pub const DEFAULT_CYCLE_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmConfig {
    pub layout: MemoryLayout,
    pub unmapped_read_pattern: u32,
    pub trap_unmapped_store: bool,
    pub cycle_budget: u64,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            layout: MemoryLayout::default(),
            unmapped_read_pattern: 0,
            trap_unmapped_store: false,
            cycle_budget: DEFAULT_CYCLE_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Running,
    Halted,
    UnhandledFault { cause: u32, epc: u32 },
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmState {
    pub regs: [u32; 16],
    pub pc: u32,
    pub epc1: u32,
    pub cycles: u64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitStatus {
    pub status: Status,
    pub state: VmState,
    /// Everything written to the UART since the last reset.
    pub uart_bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Executed,
    Fault { cause: u32, epc: u32 },
    Stopped(Status),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogEvent {
    Fault { cycle: u64, cause: u32, epc: u32 },
    Uart { cycle: u64, byte: u8 },
    Reset,
}

impl LogEvent {
    pub fn line(&self) -> String {
        match self {
            LogEvent::Fault { cycle, cause, epc } => format!("fault cycle={cycle} cause={cause} epc={epc:#010x}"),
            LogEvent::Uart { cycle, byte } => format!("uart cycle={cycle} byte={byte:#04x}"),
            LogEvent::Reset => "reset".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("segment at {base:#010x} (+{len}) does not fit inside one region")]
    SegmentOutsideRegion { base: u32, len: usize },
    #[error("entry {0:#010x} is not executable")]
    EntryNotExec(u32),
    #[error("layout: {0}")]
    Layout(#[from] crate::toolchain::layout::LayoutError),
    #[error("cycle budget must be positive")]
    ZeroBudget,
}

#[derive(Debug, Clone)]
struct Memory {
    base: u32,
    end: u64,
    flags: RegionFlags,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Vm {
    config: VmConfig,
    image: FirmwareImage,
    memory: Vec<Memory>,
    regs: [u32; 16],
    pc: u32,
    epc1: u32,
    cycles: u64,
    status: Status,
    /// Set between an exception dispatch and the first instruction of the
    /// handler; a second fault in that window is unrecoverable.
    dispatching: bool,
    input: VecDeque<u8>,
    uart: Vec<u8>,
    uart_read: usize,
    log: Option<Vec<LogEvent>>,
}

enum Access {
    Ok,
    Fault(u32),
}

impl Vm {
    pub fn create(image: &FirmwareImage, config: VmConfig) -> Result<Vm, VmError> {
        config.layout.validate()?;
        if config.cycle_budget == 0 {
            return Err(VmError::ZeroBudget);
        }
        for seg in &image.segments {
            let fits = config.layout.regions.iter().any(|r| {
                seg.base >= r.base && seg.base as u64 + seg.bytes.len() as u64 <= r.end()
            });
            if !fits {
                return Err(VmError::SegmentOutsideRegion { base: seg.base, len: seg.bytes.len() });
            }
        }
        if !config.layout.is_exec(image.entry) {
            return Err(VmError::EntryNotExec(image.entry));
        }
        let memory = config
            .layout
            .regions
            .iter()
            .map(|r| Memory { base: r.base, end: r.end(), flags: r.flags, bytes: vec![0; r.size as usize] })
            .collect();
        let mut vm = Vm {
            config,
            image: image.clone(),
            memory,
            regs: [0; 16],
            pc: 0,
            epc1: 0,
            cycles: 0,
            status: Status::Running,
            dispatching: false,
            input: VecDeque::new(),
            uart: Vec::new(),
            uart_read: 0,
            log: None,
        };
        vm.load();
        Ok(vm)
    }

    fn load(&mut self) {
        for m in &mut self.memory {
            m.bytes.fill(0);
        }
        for seg in &self.image.segments {
            let m = self
                .memory
                .iter_mut()
                .find(|m| seg.base >= m.base && seg.base as u64 + seg.bytes.len() as u64 <= m.end)
                .expect("checked at create");
            let at = (seg.base - m.base) as usize;
            m.bytes[at..at + seg.bytes.len()].copy_from_slice(&seg.bytes);
        }
        self.regs = [0; 16];
        self.pc = self.image.entry;
        self.epc1 = 0;
        self.cycles = 0;
        self.status = Status::Running;
        self.dispatching = false;
    }

    /// Simulated reset line: reloads memory from the image, zeroes the
    /// registers, drops queued input and clears the UART buffer.
    pub fn pull_reset(&mut self) {
        self.load();
        self.input.clear();
        self.uart.clear();
        self.uart_read = 0;
        if let Some(log) = &mut self.log {
            log.push(LogEvent::Reset);
        }
    }

    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn log(&self) -> &[LogEvent] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for e in self.log() {
            writeln!(out, "{}", e.line()).unwrap();
        }
        out
    }

    pub fn feed_input(&mut self, bytes: &[u8]) {
        self.input.extend(bytes);
    }

    /// UART bytes written since the previous call.
    pub fn read_uart(&mut self) -> Vec<u8> {
        let out = self.uart[self.uart_read..].to_vec();
        self.uart_read = self.uart.len();
        out
    }

    pub fn uart(&self) -> &[u8] {
        &self.uart
    }

    pub fn config(&self) -> &VmConfig {
        &self.config
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn regs(&self) -> &[u32; 16] {
        &self.regs
    }

    pub fn set_reg(&mut self, index: usize, value: u32) {
        self.regs[index] = value;
    }

    pub fn pc(&self) -> u32 {
        self.pc
    }

    pub fn set_pc(&mut self, pc: u32) {
        self.pc = pc;
    }

    pub fn epc1(&self) -> u32 {
        self.epc1
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    pub fn state(&self) -> VmState {
        VmState { regs: self.regs, pc: self.pc, epc1: self.epc1, cycles: self.cycles, status: self.status }
    }

    fn region(&self, addr: u32) -> Option<&Memory> {
        self.memory.iter().find(|m| addr >= m.base && (addr as u64) < m.end)
    }

    /// Reads memory without side effects; unmapped bytes read as the pattern.
    pub fn peek_u8(&self, addr: u32) -> u8 {
        match self.region(addr) {
            Some(m) => m.bytes[(addr - m.base) as usize],
            None => (self.config.unmapped_read_pattern >> (8 * (addr & 3))) as u8,
        }
    }

    pub fn peek_u32(&self, addr: u32) -> u32 {
        if let Some(m) = self.region(addr) {
            if addr as u64 + 4 <= m.end {
                let at = (addr - m.base) as usize;
                return u32::from_le_bytes(m.bytes[at..at + 4].try_into().unwrap());
            }
        }
        u32::from_le_bytes(std::array::from_fn(|i| self.peek_u8(addr.wrapping_add(i as u32))))
    }

    /// Writes memory directly, ignoring permissions; unmapped bytes are dropped.
    pub fn poke(&mut self, addr: u32, bytes: &[u8]) {
        for (i, &b) in bytes.iter().enumerate() {
            let a = addr.wrapping_add(i as u32);
            if let Some(m) = self.memory.iter_mut().find(|m| a >= m.base && (a as u64) < m.end) {
                m.bytes[(a - m.base) as usize] = b;
            }
        }
    }

    fn load_u32(&mut self, addr: u32) -> u32 {
        let layout = &self.config.layout;
        if addr == layout.input_channel {
            return self.input.pop_front().map_or(u32::MAX, u32::from);
        }
        if addr == layout.input_channel.wrapping_add(4) {
            return self.input.len() as u32;
        }
        self.peek_u32(addr)
    }

    fn load_u8(&mut self, addr: u32) -> u8 {
        let layout = &self.config.layout;
        if addr == layout.input_channel || addr == layout.input_channel.wrapping_add(4) {
            return self.load_u32(addr) as u8;
        }
        self.peek_u8(addr)
    }

    fn emit(&mut self, byte: u8) {
        self.uart.push(byte);
        if let Some(log) = &mut self.log {
            log.push(LogEvent::Uart { cycle: self.cycles, byte });
        }
    }

    fn store(&mut self, addr: u32, bytes: &[u8]) -> Access {
        if addr == self.config.layout.uart_out {
            self.emit(bytes[0]);
            return Access::Ok;
        }
        for (i, &b) in bytes.iter().enumerate() {
            let a = addr.wrapping_add(i as u32);
            match self.memory.iter_mut().find(|m| a >= m.base && (a as u64) < m.end) {
                Some(m) if m.flags.write => m.bytes[(a - m.base) as usize] = b,
                _ if self.config.trap_unmapped_store => return Access::Fault(CAUSE_STORE),
                _ => {}
            }
        }
        Access::Ok
    }

    fn fetch(&self) -> Option<Insn> {
        let m = self.region(self.pc).filter(|m| m.flags.exec)?;
        let at = (self.pc - m.base) as usize;
        Insn::decode(&m.bytes[at..])
    }

    fn raise(&mut self, cause: u32) -> StepEvent {
        let epc = self.pc;
        if let Some(log) = &mut self.log {
            log.push(LogEvent::Fault { cycle: self.cycles, cause, epc });
        }
        let slot = self.config.layout.exception_table_base.wrapping_add(4 * cause);
        let handler = self.peek_u32(slot);
        if handler == 0 || self.dispatching {
            self.status = Status::UnhandledFault { cause, epc };
            return StepEvent::Stopped(self.status);
        }
        self.epc1 = epc;
        self.pc = handler;
        self.dispatching = true;
        StepEvent::Fault { cause, epc }
    }

    /// Executes one instruction (or one exception dispatch). Each call
    /// costs one cycle.
    pub fn step(&mut self) -> StepEvent {
        if self.status != Status::Running {
            return StepEvent::Stopped(self.status);
        }
        if self.cycles >= self.config.cycle_budget {
            self.status = Status::BudgetExhausted;
            return StepEvent::Stopped(self.status);
        }
        self.cycles += 1;
        let Some(insn) = self.fetch() else {
            return self.raise(CAUSE_ILLEGAL);
        };
        let pc = self.pc;
        let mut next = pc.wrapping_add(insn.width() as u32);
        let r = |x: crate::isa::Reg| x.index();
        let rel = |off: i32| pc.wrapping_add(off as u32);
        match insn {
            Insn::MovN { rd, rs } => self.regs[r(rd)] = self.regs[r(rs)],
            Insn::AddiN { rd, rs, imm } | Insn::Addi { rd, rs, imm } => {
                self.regs[r(rd)] = self.regs[r(rs)].wrapping_add(imm as u32)
            }
            Insn::L32iN { rt, rs, off } => {
                let a = self.regs[r(rs)].wrapping_add(off);
                self.regs[r(rt)] = self.load_u32(a);
            }
            Insn::L32i { rt, rs, off } => {
                let a = self.regs[r(rs)].wrapping_add(off as u32);
                self.regs[r(rt)] = self.load_u32(a);
            }
            Insn::L8ui { rt, rs, off } => {
                let a = self.regs[r(rs)].wrapping_add(off as u32);
                self.regs[r(rt)] = self.load_u8(a) as u32;
            }
            Insn::S32iN { rt, rs, off } => {
                let a = self.regs[r(rs)].wrapping_add(off);
                if let Access::Fault(c) = self.store(a, &self.regs[r(rt)].to_le_bytes()) {
                    return self.raise(c);
                }
            }
            Insn::S32i { rt, rs, off } => {
                let a = self.regs[r(rs)].wrapping_add(off as u32);
                if let Access::Fault(c) = self.store(a, &self.regs[r(rt)].to_le_bytes()) {
                    return self.raise(c);
                }
            }
            Insn::S8i { rt, rs, off } => {
                let a = self.regs[r(rs)].wrapping_add(off as u32);
                if let Access::Fault(c) = self.store(a, &[self.regs[r(rt)] as u8]) {
                    return self.raise(c);
                }
            }
            Insn::Ret => next = self.regs[0],
            Insn::Nop => {}
            Insn::Hlt => {
                self.status = Status::Halted;
                self.dispatching = false;
                return StepEvent::Stopped(self.status);
            }
            Insn::Rfe => next = self.epc1,
            Insn::Jx { rs } => next = self.regs[r(rs)],
            Insn::Callx0 { rs } => {
                next = self.regs[r(rs)];
                self.regs[0] = pc.wrapping_add(2);
            }
            Insn::Out { rs } => self.emit(self.regs[r(rs)] as u8),
            Insn::In { rd } => self.regs[r(rd)] = self.input.pop_front().map_or(u32::MAX, u32::from),
            Insn::Instat { rd } => self.regs[r(rd)] = self.input.len() as u32,
            Insn::BeqzN { rs, off } | Insn::Beqz { rs, off } => {
                if self.regs[r(rs)] == 0 {
                    next = rel(off)
                }
            }
            Insn::BnezN { rs, off } | Insn::Bnez { rs, off } => {
                if self.regs[r(rs)] != 0 {
                    next = rel(off)
                }
            }
            Insn::Beq { rs, rt, off } => {
                if self.regs[r(rs)] == self.regs[r(rt)] {
                    next = rel(off)
                }
            }
            Insn::Bne { rs, rt, off } => {
                if self.regs[r(rs)] != self.regs[r(rt)] {
                    next = rel(off)
                }
            }
            Insn::Bltu { rs, rt, off } => {
                if self.regs[r(rs)] < self.regs[r(rt)] {
                    next = rel(off)
                }
            }
            Insn::Bgeu { rs, rt, off } => {
                if self.regs[r(rs)] >= self.regs[r(rt)] {
                    next = rel(off)
                }
            }
            Insn::Movi { rd, imm } => self.regs[r(rd)] = imm as u32,
            Insn::L32r { rd, off } => self.regs[r(rd)] = self.load_u32(rel(off)),
            Insn::Call0 { off } => {
                self.regs[0] = pc.wrapping_add(4);
                next = rel(off);
            }
            Insn::J { off } => next = rel(off),
            Insn::Slli { rd, rs, sh } => self.regs[r(rd)] = self.regs[r(rs)] << sh,
            Insn::Srli { rd, rs, sh } => self.regs[r(rd)] = self.regs[r(rs)] >> sh,
            Insn::Andi { rd, rs, imm } => self.regs[r(rd)] = self.regs[r(rs)] & imm,
            Insn::Add { rd, rs, rt } => self.regs[r(rd)] = self.regs[r(rs)].wrapping_add(self.regs[r(rt)]),
            Insn::Sub { rd, rs, rt } => self.regs[r(rd)] = self.regs[r(rs)].wrapping_sub(self.regs[r(rt)]),
            Insn::And { rd, rs, rt } => self.regs[r(rd)] = self.regs[r(rs)] & self.regs[r(rt)],
            Insn::Or { rd, rs, rt } => self.regs[r(rd)] = self.regs[r(rs)] | self.regs[r(rt)],
            Insn::Xor { rd, rs, rt } => self.regs[r(rd)] = self.regs[r(rs)] ^ self.regs[r(rt)],
            Insn::RsrEpc1 { rd } => self.regs[r(rd)] = self.epc1,
            Insn::WsrEpc1 { rs } => self.epc1 = self.regs[r(rs)],
        }
        self.pc = next;
        self.dispatching = false;
        StepEvent::Executed
    }

    /// Runs until the program stops or `budget` (default: the configured
    /// budget) cycles have elapsed since reset.
    pub fn run(&mut self, budget: Option<u64>) -> ExitStatus {
        if let Some(b) = budget {
            self.config.cycle_budget = b.max(1);
        }
        while let StepEvent::Executed | StepEvent::Fault { .. } = self.step() {}
        self.exit_status()
    }

    pub fn exit_status(&self) -> ExitStatus {
        ExitStatus { status: self.status, state: self.state(), uart_bytes: self.uart.clone() }
    }
}
