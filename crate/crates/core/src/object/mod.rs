//! In-memory model of relocatable objects and static archives.
//!
//! The carrier format is 32-bit little-endian ELF (`ET_REL`) with a
//! project-reserved machine id, see [`elf`]. Archives use the System V /
//! GNU `ar` layout with an extended-name table, see [`archive`].

pub mod archive;
pub mod elf;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{emit_archive, parse_archive, ArchiveUnit};
pub use elf::{emit_object, parse_object};

/// Machine id stored in `e_machine` for objects of the toy ISA.
pub const MACHINE_TOY: u16 = 0x4c4b;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SectionKind {
    Code,
    Data,
    Readonly,
    Bss,
    RelocTable,
    Symtab,
    Strtab,
    Other,
}

impl SectionKind {
    /// Position in the normalized section order.
    fn rank(self) -> u8 {
        match self {
            SectionKind::Code => 0,
            SectionKind::Data => 1,
            SectionKind::Readonly => 2,
            SectionKind::Bss => 3,
            SectionKind::Other => 4,
            SectionKind::RelocTable => 5,
            SectionKind::Symtab => 6,
            SectionKind::Strtab => 7,
        }
    }

    /// Kind implied by a conventional section name (`.text.foo`, `.bss`, ...).
    pub fn from_name(name: &str) -> Option<SectionKind> {
        let matches = |prefix: &str| {
            name == prefix || name.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('.'))
        };
        if matches(".text") {
            Some(SectionKind::Code)
        } else if matches(".data") {
            Some(SectionKind::Data)
        } else if matches(".rodata") {
            Some(SectionKind::Readonly)
        } else if matches(".bss") {
            Some(SectionKind::Bss)
        } else {
            None
        }
    }

    pub fn default_flags(self) -> SectionFlags {
        match self {
            SectionKind::Code => SectionFlags { alloc: true, exec: true, write: false },
            SectionKind::Data | SectionKind::Bss => SectionFlags { alloc: true, exec: false, write: true },
            SectionKind::Readonly => SectionFlags { alloc: true, exec: false, write: false },
            _ => SectionFlags::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SectionFlags {
    pub alloc: bool,
    pub exec: bool,
    pub write: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub kind: SectionKind,
    /// Stored contents; always empty for [`SectionKind::Bss`].
    pub bytes: Vec<u8>,
    /// Size of a `bss` section. Zero for every other kind.
    pub nobits_size: u32,
    pub alignment: u32,
    pub flags: SectionFlags,
}

impl Section {
    pub fn new(name: impl Into<String>, kind: SectionKind, bytes: Vec<u8>) -> Section {
        Section {
            name: name.into(),
            kind,
            bytes,
            nobits_size: 0,
            alignment: 4,
            flags: kind.default_flags(),
        }
    }

    pub fn bss(name: impl Into<String>, size: u32) -> Section {
        Section {
            nobits_size: size,
            ..Section::new(name, SectionKind::Bss, Vec::new())
        }
    }

    /// Size in the address space, including `bss` sections.
    pub fn size(&self) -> u32 {
        if self.kind == SectionKind::Bss {
            self.nobits_size
        } else {
            self.bytes.len() as u32
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Binding {
    Local,
    Global,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymbolType {
    Func,
    Object,
    Notype,
    /// Section symbol, the anchor of section-relative relocations.
    Section,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolRecord {
    pub name: String,
    pub binding: Binding,
    pub defined: bool,
    pub section_index: Option<usize>,
    pub value: u32,
    pub size: u32,
    pub sym_type: SymbolType,
}

impl SymbolRecord {
    /// An undefined global import.
    pub fn import(name: impl Into<String>) -> SymbolRecord {
        SymbolRecord {
            name: name.into(),
            binding: Binding::Global,
            defined: false,
            section_index: None,
            value: 0,
            size: 0,
            sym_type: SymbolType::Notype,
        }
    }

    pub fn is_global_definition(&self) -> bool {
        self.defined && self.binding != Binding::Local
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelocKind {
    /// 32-bit absolute address, `S + A`.
    Abs32,
    /// 24-bit pc-relative field of `call0`.
    CallRel,
    /// 24-bit pc-relative field of `j`.
    BranchRel,
    /// 24-bit pc-relative field of `l32r`.
    Literal,
    /// A relocation type this toolchain does not understand; carried verbatim.
    Unknown(u8),
}

impl RelocKind {
    pub fn to_elf(self) -> u8 {
        match self {
            RelocKind::Abs32 => 1,
            RelocKind::CallRel => 2,
            RelocKind::BranchRel => 3,
            RelocKind::Literal => 4,
            RelocKind::Unknown(t) => t,
        }
    }

    pub fn from_elf(t: u8) -> RelocKind {
        match t {
            1 => RelocKind::Abs32,
            2 => RelocKind::CallRel,
            3 => RelocKind::BranchRel,
            4 => RelocKind::Literal,
            other => RelocKind::Unknown(other),
        }
    }

    /// Bytes covered by the patched field, counted from the relocation offset.
    pub fn field_width(self) -> u32 {
        4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelocationRecord {
    pub target_section: usize,
    pub offset: u32,
    pub symbol_index: usize,
    pub kind: RelocKind,
    pub addend: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObjectUnit {
    pub sections: Vec<Section>,
    pub symbols: Vec<SymbolRecord>,
    pub relocations: Vec<RelocationRecord>,
    pub machine_tag: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantError {
    #[error("duplicate global definition of `{0}`")]
    DuplicateGlobal(String),
    #[error("symbol `{name}` refers to missing section {index}")]
    BadSymbolSection { name: String, index: usize },
    #[error("symbol `{0}`: defined symbols need a section, undefined ones must have none and value 0")]
    SymbolDefinition(String),
    #[error("relocation {index} refers to missing {what}")]
    BadRelocationIndex { index: usize, what: &'static str },
    #[error("relocation {index} field at offset {offset:#x} overruns section `{section}`")]
    RelocationOutOfBounds { index: usize, offset: u32, section: String },
    #[error("section `{0}`: alignment must be a nonzero power of two")]
    BadAlignment(String),
    #[error("section `{0}`: bss sections store no bytes")]
    BssWithBytes(String),
}

impl ObjectUnit {
    pub fn empty() -> ObjectUnit {
        ObjectUnit { machine_tag: MACHINE_TOY, ..Default::default() }
    }

    /// Checks cross-index validity and the per-type invariants.
    pub fn validate(&self) -> Result<(), InvariantError> {
        for section in &self.sections {
            if section.alignment == 0 || !section.alignment.is_power_of_two() {
                return Err(InvariantError::BadAlignment(section.name.clone()));
            }
            if section.kind == SectionKind::Bss && !section.bytes.is_empty() {
                return Err(InvariantError::BssWithBytes(section.name.clone()));
            }
        }
        let mut globals = HashSet::new();
        for sym in &self.symbols {
            match (sym.defined, sym.section_index) {
                (true, Some(index)) if index >= self.sections.len() => {
                    return Err(InvariantError::BadSymbolSection { name: sym.name.clone(), index });
                }
                (true, Some(_)) => {}
                (false, None) if sym.value == 0 => {}
                _ => return Err(InvariantError::SymbolDefinition(sym.name.clone())),
            }
            if sym.is_global_definition() && !globals.insert(sym.name.as_str()) {
                return Err(InvariantError::DuplicateGlobal(sym.name.clone()));
            }
        }
        for (index, reloc) in self.relocations.iter().enumerate() {
            let Some(section) = self.sections.get(reloc.target_section) else {
                return Err(InvariantError::BadRelocationIndex { index, what: "section" });
            };
            if reloc.symbol_index >= self.symbols.len() {
                return Err(InvariantError::BadRelocationIndex { index, what: "symbol" });
            }
            let end = reloc.offset as u64 + reloc.kind.field_width() as u64;
            if end > section.size() as u64 {
                return Err(InvariantError::RelocationOutOfBounds {
                    index,
                    offset: reloc.offset,
                    section: section.name.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn section_by_name(&self, name: &str) -> Option<usize> {
        self.sections.iter().position(|s| s.name == name)
    }

    pub fn symbol_by_name(&self, name: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s.name == name)
    }

    /// Global or weak symbol defined in this unit under `name`.
    pub fn global_definition(&self, name: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s.name == name && s.is_global_definition())
    }

    /// Sum of all section sizes, counting `bss` by its size field.
    pub fn content_size(&self) -> u64 {
        self.sections.iter().map(|s| s.size() as u64).sum()
    }

    /// Returns the canonical form that [`emit_object`] writes: sections
    /// stably ordered by kind (code, data, readonly, bss, other), locals
    /// before non-locals in the symbol table, relocations grouped by
    /// target section. Indices are remapped accordingly.
    pub fn normalized(&self) -> ObjectUnit {
        let mut section_order: Vec<usize> = (0..self.sections.len()).collect();
        section_order.sort_by_key(|&i| self.sections[i].kind.rank());
        let mut section_map = vec![0; self.sections.len()];
        for (new, &old) in section_order.iter().enumerate() {
            section_map[old] = new;
        }

        let mut symbol_order: Vec<usize> = (0..self.symbols.len()).collect();
        symbol_order.sort_by_key(|&i| self.symbols[i].binding != Binding::Local);
        let mut symbol_map = vec![0; self.symbols.len()];
        for (new, &old) in symbol_order.iter().enumerate() {
            symbol_map[old] = new;
        }

        let sections = section_order.iter().map(|&i| self.sections[i].clone()).collect();
        let symbols = symbol_order
            .iter()
            .map(|&i| {
                let mut sym = self.symbols[i].clone();
                sym.section_index = sym.section_index.map(|s| section_map.get(s).copied().unwrap_or(s));
                sym
            })
            .collect();
        let mut relocations: Vec<RelocationRecord> = self
            .relocations
            .iter()
            .map(|r| RelocationRecord {
                target_section: section_map.get(r.target_section).copied().unwrap_or(r.target_section),
                symbol_index: symbol_map.get(r.symbol_index).copied().unwrap_or(r.symbol_index),
                ..*r
            })
            .collect();
        relocations.sort_by_key(|r| r.target_section);

        ObjectUnit { sections, symbols, relocations, machine_tag: self.machine_tag }
    }
}
