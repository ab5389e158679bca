//! Test programs shipped as assembly, and the pipeline that builds each one
//! twice: plain, and rewritten + wrapped.
//!
//! `crt0.s` is linked into every sample and never instrumented, so `_start`
//! always runs unhooked.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::object::ObjectUnit;
use crate::rewriter::{apply_call_path_instrumentation, InstrumentationPolicy, RewriteError, RewritePlan};
use crate::stubgen::{build_wrapper_object, generate_runtime, generate_stub, RuntimeArtifact, StubArtifact, StubError};
use crate::toolchain::{assemble, link, AsmError, FirmwareImage, LinkError, MemoryLayout};

pub const CRT0: &str = include_str!("../samples/crt0.s");
pub const XOR_SERVICE: &str = include_str!("../samples/xor_service.s");
pub const RECVCB_VULNERABLE: &str = include_str!("../samples/recvcb_vulnerable.s");
pub const RECVCB_SAFE: &str = include_str!("../samples/recvcb_safe.s");
pub const NESTED: &str = include_str!("../samples/nested.s");
pub const CANARY_PROBE: &str = include_str!("../samples/canary_probe.s");
pub const RECURSION: &str = include_str!("../samples/recursion.s");
pub const SEED_HELLO: &[u8] = include_bytes!("../samples/seeds/hello.bin");

/// Name of the vulnerable receive handler.
pub const RECV_HANDLER: &str = "shell_tcp_recvcb";
/// Longest input that stays inside the vulnerable frame.
pub const OVERFLOW_THRESHOLD: usize = 24;
/// Bytes of stack the recursion sample runs on.
pub const RECURSION_STACK: u32 = 1024;
/// Stack bytes per level of `rec`.
pub const RECURSION_FRAME: u32 = 16;
pub const XOR_KEY: u8 = 0x42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Echo {
    /// Every input byte comes back xored with [`XOR_KEY`].
    Xor,
    /// As `Xor`, but only the first `n` bytes.
    XorTruncated(usize),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleProgram {
    pub name: &'static str,
    /// (file name, text); the first is always crt0.
    pub sources: Vec<(&'static str, &'static str)>,
    pub seeds: Vec<(&'static str, &'static [u8])>,
    pub echo: Echo,
    pub overflow_threshold: Option<usize>,
}

impl SampleProgram {
    /// UART output expected from a benign run.
    pub fn expected_echo(&self, input: &[u8]) -> Option<Vec<u8>> {
        let xor = |b: &[u8]| b.iter().map(|&x| x ^ XOR_KEY).collect();
        match self.echo {
            Echo::Xor if self.overflow_threshold.is_none_or(|t| input.len() <= t) => Some(xor(input)),
            Echo::XorTruncated(n) => Some(xor(&input[..input.len().min(n)])),
            _ => None,
        }
    }
}

pub const SAMPLE_NAMES: [&str; 5] = ["xor_service", "xor_service_safe", "nested", "canary_probe", "recursion"];

pub fn sample(name: &str) -> Option<SampleProgram> {
    let seeds = vec![("hello.bin", SEED_HELLO)];
    let crt0 = ("crt0.s", CRT0);
    Some(match name {
        "xor_service" => SampleProgram {
            name: "xor_service",
            sources: vec![crt0, ("xor_service.s", XOR_SERVICE), ("recvcb_vulnerable.s", RECVCB_VULNERABLE)],
            seeds,
            echo: Echo::Xor,
            overflow_threshold: Some(OVERFLOW_THRESHOLD),
        },
        "xor_service_safe" => SampleProgram {
            name: "xor_service_safe",
            sources: vec![crt0, ("xor_service.s", XOR_SERVICE), ("recvcb_safe.s", RECVCB_SAFE)],
            seeds,
            echo: Echo::XorTruncated(20),
            overflow_threshold: None,
        },
        "nested" => SampleProgram {
            name: "nested",
            sources: vec![crt0, ("nested.s", NESTED)],
            seeds: Vec::new(),
            echo: Echo::None,
            overflow_threshold: None,
        },
        "canary_probe" => SampleProgram {
            name: "canary_probe",
            sources: vec![crt0, ("canary_probe.s", CANARY_PROBE)],
            seeds: Vec::new(),
            echo: Echo::None,
            overflow_threshold: None,
        },
        "recursion" => SampleProgram {
            name: "recursion",
            sources: vec![crt0, ("recursion.s", RECURSION)],
            seeds: Vec::new(),
            echo: Echo::None,
            overflow_threshold: None,
        },
        _ => return None,
    })
}

/// Deepest `n` the recursion sample survives on `stack` bytes when every
/// call also needs `reach` bytes below the caller's stack pointer.
pub fn recursion_depth(stack: u32, reach: u32) -> u32 {
    stack.saturating_sub(reach) / RECURSION_FRAME
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("unknown sample {0}")]
    Unknown(String),
    #[error("{file}: {source}")]
    Asm { file: String, source: AsmError },
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Stub(#[from] StubError),
    #[error(transparent)]
    Link(#[from] LinkError),
}

/// Output of [`instrument_and_link`].
#[derive(Debug, Clone)]
pub struct Instrumented {
    pub rewritten: Vec<ObjectUnit>,
    pub wrapper: ObjectUnit,
    pub plan: RewritePlan,
    pub stubs: Vec<StubArtifact>,
    pub runtime: RuntimeArtifact,
    pub image: FirmwareImage,
}

/// Rewrites `app`, generates the wrapper and links everything with the
/// untouched `support` objects.
pub fn instrument_and_link(
    app: &[ObjectUnit],
    support: &[ObjectUnit],
    policy: &InstrumentationPolicy,
    layout: &MemoryLayout,
) -> Result<Instrumented, SampleError> {
    let mut rewritten = Vec::with_capacity(app.len());
    let mut plan = RewritePlan::default();
    for unit in app {
        let (out, part) = apply_call_path_instrumentation(unit, policy)?;
        rewritten.push(out);
        plan.units.extend(part.units);
        plan.skipped.extend(part.skipped);
    }
    let stubs = plan.targets().iter().map(|n| generate_stub(n, policy)).collect::<Result<Vec<_>, _>>()?;
    let runtime = generate_runtime(policy, layout)?;
    let wrapper = build_wrapper_object(&stubs, &runtime)?;
    let mut units: Vec<ObjectUnit> = support.to_vec();
    units.extend(rewritten.iter().cloned());
    units.push(wrapper.clone());
    let image = link(&units, layout)?;
    Ok(Instrumented { rewritten, wrapper, plan, stubs, runtime, image })
}

#[derive(Debug, Clone)]
pub struct SampleBuild {
    pub program: SampleProgram,
    pub objects: Vec<ObjectUnit>,
    pub baseline: FirmwareImage,
    pub instrumented: FirmwareImage,
    pub detail: Instrumented,
}

pub fn assemble_sample(program: &SampleProgram) -> Result<Vec<ObjectUnit>, SampleError> {
    program
        .sources
        .iter()
        .map(|(file, text)| assemble(text).map_err(|source| SampleError::Asm { file: file.to_string(), source }))
        .collect()
}

pub fn build_sample(name: &str, policy: &InstrumentationPolicy, layout: &MemoryLayout) -> Result<SampleBuild, SampleError> {
    let program = sample(name).ok_or_else(|| SampleError::Unknown(name.to_string()))?;
    let objects = assemble_sample(&program)?;
    let baseline = link(&objects, layout)?;
    let detail = instrument_and_link(&objects[1..], &objects[..1], policy, layout)?;
    Ok(SampleBuild { program, objects, baseline, instrumented: detail.image.clone(), detail })
}
