//! Running images and making sense of what they print: trace lines, crash
//! dumps, fuzzing and size accounting.

pub mod device;
pub mod dump;
pub mod fuzz;
pub mod size;
pub mod trace;

pub use device::DeviceController;
pub use dump::{detect_crash, CrashDump, DumpError};
pub use fuzz::{fuzz, fuzz_with, CrashRecord, FuzzConfig, FuzzReport, Mutator};
pub use size::{percent_hundredths, size_report, SizeLine, SizeReport};
pub use trace::{check_nesting, parse_trace_line, split_trace, TraceError, TraceEvent, TraceKind};

use thiserror::Error;

use crate::toolchain::FirmwareImage;
use crate::vm::{ExitStatus, Vm, VmConfig, VmError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRun {
    pub exit: ExitStatus,
    pub events: Vec<TraceEvent>,
    /// UART output with the trace lines removed.
    pub output: Vec<u8>,
}

pub fn trace_run(image: &FirmwareImage, input: &[u8], config: &VmConfig) -> Result<TraceRun, HarnessError> {
    let mut vm = Vm::create(image, config.clone())?;
    vm.feed_input(input);
    let exit = vm.run(None);
    let (events, output) = split_trace(&exit.uart_bytes)?;
    Ok(TraceRun { exit, events, output })
}
