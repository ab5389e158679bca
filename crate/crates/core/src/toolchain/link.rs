//! Static linker: places sections into the layout's code and data regions,
//! resolves symbols and applies relocations, producing a flat image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::layout::MemoryLayout;
use crate::isa::{self, REL24_MAX, REL24_MIN};
use crate::object::{Binding, ObjectUnit, RelocKind, SectionKind, SymbolType, MACHINE_TOY};

/// Entry symbol used when present; the runtime defines it when no master
/// function installs the handler.
pub const HOOKED_ENTRY: &str = "__lh_entry";
pub const DEFAULT_ENTRY: &str = "_start";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub base: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedSection {
    pub unit: usize,
    /// Index of the section within its unit.
    pub index: usize,
    pub name: String,
    pub kind: SectionKind,
    pub base: u32,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FirmwareImage {
    pub segments: Vec<Segment>,
    pub entry: u32,
    pub symbol_map: BTreeMap<String, u32>,
    pub sections: Vec<PlacedSection>,
}

impl FirmwareImage {
    /// Bytes stored in segments (bss excluded).
    pub fn segment_bytes(&self) -> u64 {
        self.segments.iter().map(|s| s.bytes.len() as u64).sum()
    }

    /// Bytes occupied in the address space, bss included.
    pub fn footprint(&self) -> u64 {
        self.sections.iter().map(|s| s.size as u64).sum()
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbol_map.get(name).copied()
    }

    /// Reads `len` bytes at `addr` from the segments; gaps read as zero.
    pub fn read(&self, addr: u32, len: usize) -> Vec<u8> {
        let mut out = vec![0; len];
        for seg in &self.segments {
            for (i, b) in out.iter_mut().enumerate() {
                let a = addr as u64 + i as u64;
                if a >= seg.base as u64 && a < seg.base as u64 + seg.bytes.len() as u64 {
                    *b = seg.bytes[(a - seg.base as u64) as usize];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("undefined symbol {0}")]
    Undefined(String),
    #[error("duplicate definition of {0}")]
    Duplicate(String),
    #[error("unit {unit} has machine tag {tag:#06x}, expected {expected:#06x}")]
    Machine { unit: usize, tag: u16, expected: u16 },
    #[error("relocation at {addr:#010x} against {symbol}: value {value} does not fit the field")]
    Overflow { addr: u32, symbol: String, value: i64 },
    #[error("relocation at {addr:#010x}: {kind:?} does not match the instruction there")]
    KindMismatch { addr: u32, kind: RelocKind },
    #[error("region `{region}` overflows: need {need} bytes, have {have}")]
    RegionOverflow { region: String, need: u64, have: u32 },
    #[error("unit {unit} is malformed: {reason}")]
    Invalid { unit: usize, reason: String },
    #[error("no entry symbol (`{HOOKED_ENTRY}` or `{DEFAULT_ENTRY}`)")]
    NoEntry,
    #[error("entry {0:#010x} is not executable")]
    EntryNotExec(u32),
    #[error("layout: {0}")]
    Layout(#[from] super::layout::LayoutError),
}

/// Symbols the linker provides from the layout unless a unit defines them.
pub fn layout_symbols(layout: &MemoryLayout) -> Vec<(&'static str, u32)> {
    vec![
        ("__stack_top", layout.stack_top),
        ("__stack_base", layout.stack_base()),
        ("__rs_base", layout.return_stack_base),
        ("__rs_end", layout.return_stack_base.wrapping_add(layout.return_stack_size)),
        ("__exc_table", layout.exception_table_base),
        ("__uart_out", layout.uart_out),
        ("__input", layout.input_channel),
    ]
}

struct Cursor {
    region: String,
    base: u32,
    size: u32,
    next: u64,
}

impl Cursor {
    fn place(&mut self, size: u32, align: u32) -> Result<u32, LinkError> {
        let at = self.next.next_multiple_of(align.max(1) as u64);
        let end = at + size as u64;
        if end > self.base as u64 + self.size as u64 {
            return Err(LinkError::RegionOverflow {
                region: self.region.clone(),
                need: end - self.base as u64,
                have: self.size,
            });
        }
        self.next = end;
        Ok(at as u32)
    }
}

pub fn link(units: &[ObjectUnit], layout: &MemoryLayout) -> Result<FirmwareImage, LinkError> {
    layout.validate()?;
    for (i, u) in units.iter().enumerate() {
        u.validate().map_err(|e| LinkError::Invalid { unit: i, reason: e.to_string() })?;
        if u.machine_tag != MACHINE_TOY {
            return Err(LinkError::Machine { unit: i, tag: u.machine_tag, expected: MACHINE_TOY });
        }
    }
    let cursor = |name: &str| {
        let r = layout.region(name).expect("validated");
        Cursor { region: r.name.clone(), base: r.base, size: r.size, next: r.base as u64 }
    };
    let mut code = cursor(&layout.code_region);
    let mut data = cursor(&layout.data_region);

    // Placement order: all code, then read-only data into the code region;
    // data then bss into the data region. Units keep their input order.
    let mut bases: Vec<Vec<Option<u32>>> = units.iter().map(|u| vec![None; u.sections.len()]).collect();
    let mut placed = Vec::new();
    let passes = [
        (SectionKind::Code, true),
        (SectionKind::Readonly, true),
        (SectionKind::Data, false),
        (SectionKind::Bss, false),
    ];
    for (kind, in_code) in passes {
        for (ui, unit) in units.iter().enumerate() {
            for (si, s) in unit.sections.iter().enumerate() {
                if s.kind != kind {
                    continue;
                }
                let cur = if in_code { &mut code } else { &mut data };
                let base = cur.place(s.size(), s.alignment)?;
                bases[ui][si] = Some(base);
                placed.push(PlacedSection { unit: ui, index: si, name: s.name.clone(), kind, base, size: s.size() });
            }
        }
    }

    // Global symbol table.
    let mut globals: BTreeMap<String, (u32, Binding)> = BTreeMap::new();
    for (ui, unit) in units.iter().enumerate() {
        for sym in unit.symbols.iter().filter(|s| s.is_global_definition()) {
            let Some(base) = sym.section_index.and_then(|s| bases[ui][s]) else { continue };
            let addr = base.wrapping_add(sym.value);
            match globals.get(&sym.name) {
                Some((_, Binding::Global)) if sym.binding == Binding::Global => {
                    return Err(LinkError::Duplicate(sym.name.clone()));
                }
                Some((_, Binding::Global)) => {}
                Some((_, _)) if sym.binding == Binding::Weak => {}
                _ => {
                    globals.insert(sym.name.clone(), (addr, sym.binding));
                }
            }
        }
    }
    for (name, value) in layout_symbols(layout) {
        globals.entry(name.to_string()).or_insert((value, Binding::Global));
    }

    let mut images: Vec<Vec<Vec<u8>>> =
        units.iter().map(|u| u.sections.iter().map(|s| s.bytes.clone()).collect()).collect();

    for (ui, unit) in units.iter().enumerate() {
        for r in &unit.relocations {
            let sym = &unit.symbols[r.symbol_index];
            let s_addr = if sym.defined && (sym.binding == Binding::Local || sym.sym_type == SymbolType::Section) {
                let base = sym.section_index.and_then(|s| bases[ui][s]).unwrap_or(0);
                base.wrapping_add(sym.value)
            } else {
                match globals.get(&sym.name) {
                    Some((addr, _)) => *addr,
                    None if sym.binding == Binding::Weak => 0,
                    None => return Err(LinkError::Undefined(sym.name.clone())),
                }
            };
            let Some(p_base) = bases[ui][r.target_section] else { continue };
            let p = p_base.wrapping_add(r.offset);
            let Some(field) = images[ui][r.target_section].get_mut(r.offset as usize..r.offset as usize + 4) else {
                return Err(LinkError::KindMismatch { addr: p, kind: r.kind });
            };
            let target = s_addr as i64 + r.addend as i64;
            let expect_op = match r.kind {
                RelocKind::Abs32 => {
                    field.copy_from_slice(&(target as u32).to_le_bytes());
                    continue;
                }
                RelocKind::CallRel => 10,
                RelocKind::BranchRel => 11,
                RelocKind::Literal => 9,
                RelocKind::Unknown(_) => return Err(LinkError::KindMismatch { addr: p, kind: r.kind }),
            };
            let op_ok = field[0] & 0xf == expect_op && (expect_op == 9 || field[0] >> 4 == 0);
            if !op_ok {
                return Err(LinkError::KindMismatch { addr: p, kind: r.kind });
            }
            let value = ((target - p as i64) as i32) as i64;
            if !(REL24_MIN..=REL24_MAX).contains(&value) {
                return Err(LinkError::Overflow { addr: p, symbol: sym.name.clone(), value });
            }
            isa::write_rel24(field, value as i32);
        }
        // Undefined symbols nobody referenced still have to resolve.
        for sym in unit.symbols.iter().filter(|s| !s.defined && s.binding == Binding::Global) {
            if !globals.contains_key(&sym.name) {
                return Err(LinkError::Undefined(sym.name.clone()));
            }
        }
    }

    let mut segments = Vec::new();
    for p in &placed {
        if p.kind == SectionKind::Bss || p.size == 0 {
            continue;
        }
        segments.push(Segment { base: p.base, bytes: std::mem::take(&mut images[p.unit][p.index]) });
    }

    let entry = globals
        .get(HOOKED_ENTRY)
        .or_else(|| globals.get(DEFAULT_ENTRY))
        .map(|(a, _)| *a)
        .ok_or(LinkError::NoEntry)?;
    if !layout.is_exec(entry) {
        return Err(LinkError::EntryNotExec(entry));
    }
    let symbol_map = globals.into_iter().map(|(n, (a, _))| (n, a)).collect();
    Ok(FirmwareImage { segments, entry, symbol_map, sections: placed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolchain::asm::assemble;

    fn unit(src: &str) -> ObjectUnit {
        assemble(src).unwrap()
    }

    #[test]
    fn resolves_calls_and_literals() {
        let a = unit(".text\n.global _start\n_start:\n  l32r a1, =__stack_top\n  call0 f\n  hlt\n");
        let b = unit(".text\n.global f\nf:\n  ret\n");
        let layout = MemoryLayout::default();
        let img = link(&[a, b], &layout).unwrap();
        let start = img.symbol("_start").unwrap();
        let f = img.symbol("f").unwrap();
        assert_eq!(img.entry, start);
        let call = img.read(start + 4, 4);
        assert_eq!(isa::Insn::decode(&call), Some(isa::Insn::Call0 { off: (f - (start + 4)) as i32 }));
        let l32r = isa::Insn::decode(&img.read(start, 4)).unwrap();
        let lit_addr = start.wrapping_add(l32r.relative_offset().unwrap() as u32);
        assert_eq!(img.read(lit_addr, 4), layout.stack_top.to_le_bytes());
        assert_eq!(img.segment_bytes(), img.footprint());
    }

    #[test]
    fn undefined_and_duplicate() {
        let a = unit(".text\n.global _start\n_start:\n  call0 fct\n");
        assert_eq!(link(std::slice::from_ref(&a), &MemoryLayout::default()), Err(LinkError::Undefined("fct".into())));
        let m1 = unit(".text\n.global main\nmain:\n  ret\n");
        assert_eq!(link(&[m1.clone(), m1], &MemoryLayout::default()), Err(LinkError::Duplicate("main".into())));
    }

    #[test]
    fn weak_yields_to_global() {
        let w = unit(".text\n.weak f\nf:\n  nop\n  ret\n");
        let g = unit(".text\n.global f\n.global _start\n_start:\nf:\n  ret\n");
        let img = link(&[w, g], &MemoryLayout::default()).unwrap();
        assert_eq!(img.symbol("f"), img.symbol("_start"));
    }

    #[test]
    fn overflow_is_an_error() {
        let mut layout = MemoryLayout::default();
        layout.regions[0].size = 16;
        let big = unit(".text\n.global _start\n_start:\n  .space 32\n");
        assert!(matches!(link(&[big], &layout), Err(LinkError::RegionOverflow { .. })));
    }
}
