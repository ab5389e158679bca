#![allow(dead_code)]

use linkhook::isa::Insn;
use linkhook::object::{ArchiveUnit, ObjectUnit, SectionKind};
use linkhook::rewriter::InstrumentationPolicy;
use linkhook::samples::{assemble_sample, sample, SAMPLE_NAMES};
use linkhook::stubgen::{build_wrapper_object, generate_runtime, generate_stub};
use linkhook::toolchain::asm::{is_mapping_symbol, MAP_CODE};
use linkhook::toolchain::{assemble, FirmwareImage, MemoryLayout};

/// Exercises what the samples do not: function pointers in data and pools,
/// weak and local functions, a call into another unit.
pub const POINTERS: &str = r#"
.section .text.dispatch, code
.global dispatch
.type dispatch, @function
dispatch:
  addi a1, a1, -16
  s32i.n a0, a1, 0
  call0 helper
  call0 local_fn
  l32r a2, =helper
  callx0 a2
  l32r a2, =table
  l32i.n a2, a2, 4
  callx0 a2
  call0 extern_fn
  l32i.n a0, a1, 0
  addi a1, a1, 16
  ret

.section .text.helper, code
.global helper
.type helper, @function
helper:
  ret

.section .text.soft, code
.weak soft
.type soft, @function
soft:
  j helper

.section .text.local, code
.type local_fn, @function
local_fn:
  ret

.section .data.table
.global table
.type table, @object
table:
  .word helper
  .word dispatch
  .word soft
  .word helper+4
"#;

/// Every object the suite treats as a fixture: the assembled samples,
/// the pointer fixture and one wrapper object per tracing mode.
pub fn fixture_objects() -> Vec<(String, ObjectUnit)> {
    let mut out = Vec::new();
    for name in SAMPLE_NAMES {
        let program = sample(name).unwrap();
        for ((file, _), unit) in program.sources.iter().zip(assemble_sample(&program).unwrap()) {
            out.push((format!("{name}/{file}"), unit));
        }
    }
    out.push(("pointers.s".into(), assemble(POINTERS).unwrap()));
    for trace in [false, true] {
        let policy = InstrumentationPolicy { trace_enabled: trace, ..Default::default() };
        let stubs = ["main", "helper", "shell_tcp_recvcb"].map(|n| generate_stub(n, &policy).unwrap());
        let runtime = generate_runtime(&policy, &MemoryLayout::default()).unwrap();
        out.push((format!("wrapper-trace-{trace}"), build_wrapper_object(&stubs, &runtime).unwrap()));
    }
    out
}

pub fn fixture_archives() -> Vec<ArchiveUnit> {
    let objects = fixture_objects();
    let mut long = ArchiveUnit { members: Vec::new() };
    for (i, (_, u)) in objects.iter().enumerate() {
        long.members.push((format!("member_with_a_rather_long_file_name_{i}.o"), u.clone()));
    }
    let short = ArchiveUnit { members: objects.iter().take(3).enumerate().map(|(i, (_, u))| (format!("m{i}.o"), u.clone())).collect() };
    vec![long, short, ArchiveUnit { members: Vec::new() }]
}

/// A call, jump or literal-pool word found by linear disassembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Site {
    pub unit: usize,
    pub section: usize,
    pub offset: u32,
    pub target: u32,
}

/// Disassembles every placed code section of `image`, using the mapping
/// symbols of `units` to tell instructions from data, and returns the
/// absolute targets of `call0`, `j` and every data word.
pub fn disassemble_sites(image: &FirmwareImage, units: &[ObjectUnit]) -> Vec<Site> {
    let mut sites = Vec::new();
    for placed in image.sections.iter().filter(|s| s.kind == SectionKind::Code) {
        let unit = &units[placed.unit];
        let bytes = image.read(placed.base, placed.size as usize);
        let mut maps: Vec<(u32, bool)> = unit
            .symbols
            .iter()
            .filter(|s| s.defined && s.section_index == Some(placed.index) && is_mapping_symbol(&s.name))
            .map(|s| (s.value, s.name == MAP_CODE))
            .collect();
        maps.sort();
        let is_code = |at: u32| maps.iter().rev().find(|(o, _)| *o <= at).is_none_or(|(_, c)| *c);
        let mut at = 0u32;
        while (at as usize) < bytes.len() {
            let pc = placed.base + at;
            if !is_code(at) {
                if at.is_multiple_of(4) && at as usize + 4 <= bytes.len() {
                    let word = u32::from_le_bytes(bytes[at as usize..at as usize + 4].try_into().unwrap());
                    sites.push(Site { unit: placed.unit, section: placed.index, offset: at, target: word });
                    at += 4;
                } else {
                    at += 1;
                }
                continue;
            }
            match Insn::decode(&bytes[at as usize..]) {
                Some(insn) => {
                    if let Insn::Call0 { off } | Insn::J { off } = insn {
                        sites.push(Site { unit: placed.unit, section: placed.index, offset: at, target: pc.wrapping_add(off as u32) });
                    }
                    at += insn.width() as u32;
                }
                None => at += 1,
            }
        }
    }
    sites
}
