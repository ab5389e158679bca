//! ELF32 little-endian relocatable reader and writer.
//!
//! Only what the toy toolchain needs is understood: `PROGBITS`/`NOBITS`
//! content sections, one `SYMTAB` with its `STRTAB`, and `RELA` tables.
//! Anything else is carried as an opaque [`SectionKind::Other`] section.

use thiserror::Error;

use super::{
    Binding, InvariantError, ObjectUnit, RelocKind, RelocationRecord, Section, SectionFlags,
    SectionKind, SymbolRecord, SymbolType, MACHINE_TOY,
};

const EHDR_SIZE: usize = 52;
const SHDR_SIZE: usize = 40;
const SYM_SIZE: usize = 16;
const RELA_SIZE: usize = 12;

const ET_REL: u16 = 1;

const SHT_NULL: u32 = 0;
const SHT_PROGBITS: u32 = 1;
const SHT_SYMTAB: u32 = 2;
const SHT_STRTAB: u32 = 3;
const SHT_RELA: u32 = 4;
const SHT_NOBITS: u32 = 8;

const SHF_WRITE: u32 = 0x1;
const SHF_ALLOC: u32 = 0x2;
const SHF_EXECINSTR: u32 = 0x4;
const SHF_INFO_LINK: u32 = 0x40;

const SHN_LORESERVE: u16 = 0xff00;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{0} out of bounds")]
    OutOfBounds(&'static str),
    #[error("bad ELF magic")]
    BadMagic,
    #[error("unsupported {field}: {value:#x}")]
    Unsupported { field: &'static str, value: u32 },
    #[error("invalid {field}: {value}")]
    BadIndex { field: &'static str, value: u32 },
    #[error("string table entry for {0} is not terminated")]
    UnterminatedString(&'static str),
    #[error("{0} is not valid UTF-8")]
    BadName(&'static str),
    #[error("more than one symbol table")]
    MultipleSymtabs,
    #[error("model invariant violated: {0}")]
    Invariant(#[from] InvariantError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmitError {
    #[error("refusing to emit: {0}")]
    Invariant(#[from] InvariantError),
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn slice(&self, offset: u64, len: u64, what: &'static str) -> Result<&'a [u8], ParseError> {
        let end = offset.checked_add(len).ok_or(ParseError::OutOfBounds(what))?;
        if end > self.bytes.len() as u64 {
            return Err(ParseError::OutOfBounds(what));
        }
        Ok(&self.bytes[offset as usize..end as usize])
    }

    fn u16(&self, offset: usize, what: &'static str) -> Result<u16, ParseError> {
        let b = self.slice(offset as u64, 2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, offset: usize, what: &'static str) -> Result<u32, ParseError> {
        let b = self.slice(offset as u64, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Clone, Copy)]
struct SectionHeader {
    name: u32,
    sh_type: u32,
    flags: u32,
    offset: u32,
    size: u32,
    link: u32,
    info: u32,
    addralign: u32,
    entsize: u32,
}

fn c_string<'a>(table: &'a [u8], offset: u32, what: &'static str) -> Result<&'a str, ParseError> {
    let rest = table.get(offset as usize..).ok_or(ParseError::OutOfBounds(what))?;
    let end = rest.iter().position(|&b| b == 0).ok_or(ParseError::UnterminatedString(what))?;
    std::str::from_utf8(&rest[..end]).map_err(|_| ParseError::BadName(what))
}

pub fn parse_object(bytes: &[u8]) -> Result<ObjectUnit, ParseError> {
    let r = Reader { bytes };
    let ident = r.slice(0, EHDR_SIZE as u64, "ELF header")?;
    if &ident[..4] != b"\x7fELF" {
        return Err(ParseError::BadMagic);
    }
    if ident[4] != 1 {
        return Err(ParseError::Unsupported { field: "EI_CLASS", value: ident[4] as u32 });
    }
    if ident[5] != 1 {
        return Err(ParseError::Unsupported { field: "EI_DATA", value: ident[5] as u32 });
    }
    let e_type = r.u16(16, "e_type")?;
    if e_type != ET_REL {
        return Err(ParseError::Unsupported { field: "e_type", value: e_type as u32 });
    }
    let machine = r.u16(18, "e_machine")?;
    if machine != MACHINE_TOY {
        return Err(ParseError::Unsupported { field: "e_machine", value: machine as u32 });
    }
    let shoff = r.u32(32, "e_shoff")?;
    let shentsize = r.u16(46, "e_shentsize")?;
    let shnum = r.u16(48, "e_shnum")?;
    let shstrndx = r.u16(50, "e_shstrndx")?;

    let mut unit = ObjectUnit::empty();
    if shnum == 0 {
        return Ok(unit);
    }
    if shentsize as usize != SHDR_SIZE {
        return Err(ParseError::Unsupported { field: "e_shentsize", value: shentsize as u32 });
    }
    r.slice(shoff as u64, shnum as u64 * SHDR_SIZE as u64, "section table")?;

    let headers: Vec<SectionHeader> = (0..shnum as usize)
        .map(|i| {
            let base = shoff as usize + i * SHDR_SIZE;
            Ok(SectionHeader {
                name: r.u32(base, "sh_name")?,
                sh_type: r.u32(base + 4, "sh_type")?,
                flags: r.u32(base + 8, "sh_flags")?,
                offset: r.u32(base + 16, "sh_offset")?,
                size: r.u32(base + 20, "sh_size")?,
                link: r.u32(base + 24, "sh_link")?,
                info: r.u32(base + 28, "sh_info")?,
                addralign: r.u32(base + 32, "sh_addralign")?,
                entsize: r.u32(base + 36, "sh_entsize")?,
            })
        })
        .collect::<Result<_, ParseError>>()?;

    let shstr_header = headers
        .get(shstrndx as usize)
        .filter(|h| h.sh_type == SHT_STRTAB)
        .ok_or(ParseError::BadIndex { field: "e_shstrndx", value: shstrndx as u32 })?;
    let shstrtab = r.slice(shstr_header.offset as u64, shstr_header.size as u64, "section name table")?;

    // ELF section index -> model section index, for content sections only.
    let mut content_index: Vec<Option<usize>> = vec![None; headers.len()];
    let mut symtab: Option<usize> = None;
    let mut relas = Vec::new();
    for (i, h) in headers.iter().enumerate().skip(1) {
        match h.sh_type {
            SHT_NULL | SHT_STRTAB => {}
            SHT_SYMTAB => {
                if symtab.replace(i).is_some() {
                    return Err(ParseError::MultipleSymtabs);
                }
            }
            SHT_RELA => relas.push(i),
            sh_type => {
                let name = c_string(shstrtab, h.name, "section name")?.to_string();
                let flags = SectionFlags {
                    alloc: h.flags & SHF_ALLOC != 0,
                    exec: h.flags & SHF_EXECINSTR != 0,
                    write: h.flags & SHF_WRITE != 0,
                };
                let kind = match sh_type {
                    SHT_NOBITS => SectionKind::Bss,
                    SHT_PROGBITS if flags.exec => SectionKind::Code,
                    SHT_PROGBITS if flags.write => SectionKind::Data,
                    SHT_PROGBITS if flags.alloc => SectionKind::Readonly,
                    _ => SectionKind::Other,
                };
                let alignment = h.addralign.max(1);
                if !alignment.is_power_of_two() {
                    return Err(ParseError::BadIndex { field: "sh_addralign", value: h.addralign });
                }
                let (bytes, nobits_size) = if kind == SectionKind::Bss {
                    (Vec::new(), h.size)
                } else {
                    (r.slice(h.offset as u64, h.size as u64, "section contents")?.to_vec(), 0)
                };
                content_index[i] = Some(unit.sections.len());
                unit.sections.push(Section { name, kind, bytes, nobits_size, alignment, flags });
            }
        }
    }

    if let Some(si) = symtab {
        let h = headers[si];
        if h.entsize as usize != SYM_SIZE {
            return Err(ParseError::Unsupported { field: "symtab sh_entsize", value: h.entsize });
        }
        let strh = headers
            .get(h.link as usize)
            .filter(|s| s.sh_type == SHT_STRTAB)
            .ok_or(ParseError::BadIndex { field: "symtab sh_link", value: h.link })?;
        let strtab = r.slice(strh.offset as u64, strh.size as u64, "symbol string table")?;
        let table = r.slice(h.offset as u64, h.size as u64, "symbol table")?;
        for entry in table.chunks_exact(SYM_SIZE).skip(1) {
            let word = |o: usize| u32::from_le_bytes([entry[o], entry[o + 1], entry[o + 2], entry[o + 3]]);
            let name = c_string(strtab, word(0), "symbol name")?.to_string();
            let value = word(4);
            let size = word(8);
            let info = entry[12];
            let shndx = u16::from_le_bytes([entry[14], entry[15]]);
            let binding = match info >> 4 {
                0 => Binding::Local,
                1 => Binding::Global,
                2 => Binding::Weak,
                b => return Err(ParseError::Unsupported { field: "st_bind", value: b as u32 }),
            };
            let sym_type = match info & 0xf {
                0 => SymbolType::Notype,
                1 => SymbolType::Object,
                2 => SymbolType::Func,
                3 => SymbolType::Section,
                t => return Err(ParseError::Unsupported { field: "st_type", value: t as u32 }),
            };
            let section_index = match shndx {
                0 => None,
                n if n >= SHN_LORESERVE => {
                    return Err(ParseError::Unsupported { field: "st_shndx", value: n as u32 })
                }
                n => Some(
                    content_index
                        .get(n as usize)
                        .copied()
                        .flatten()
                        .ok_or(ParseError::BadIndex { field: "st_shndx", value: n as u32 })?,
                ),
            };
            unit.symbols.push(SymbolRecord {
                name,
                binding,
                defined: section_index.is_some(),
                section_index,
                value,
                size,
                sym_type,
            });
        }
    }

    for ri in relas {
        let h = headers[ri];
        if h.entsize as usize != RELA_SIZE {
            return Err(ParseError::Unsupported { field: "rela sh_entsize", value: h.entsize });
        }
        if symtab.is_none() || h.link as usize != symtab.unwrap_or(0) {
            return Err(ParseError::BadIndex { field: "rela sh_link", value: h.link });
        }
        let target_section = content_index
            .get(h.info as usize)
            .copied()
            .flatten()
            .ok_or(ParseError::BadIndex { field: "rela sh_info", value: h.info })?;
        let table = r.slice(h.offset as u64, h.size as u64, "relocation table")?;
        for entry in table.chunks_exact(RELA_SIZE) {
            let word = |o: usize| u32::from_le_bytes([entry[o], entry[o + 1], entry[o + 2], entry[o + 3]]);
            let info = word(4);
            let sym = info >> 8;
            if sym == 0 || sym as usize > unit.symbols.len() {
                return Err(ParseError::BadIndex { field: "r_info symbol", value: sym });
            }
            unit.relocations.push(RelocationRecord {
                target_section,
                offset: word(0),
                symbol_index: sym as usize - 1,
                kind: RelocKind::from_elf(info as u8),
                addend: word(8) as i32,
            });
        }
    }

    unit.validate()?;
    Ok(unit)
}

fn align_up(value: usize, align: usize) -> usize {
    value.div_ceil(align) * align
}

struct StringTable {
    bytes: Vec<u8>,
}

impl StringTable {
    fn new() -> StringTable {
        StringTable { bytes: vec![0] }
    }

    fn add(&mut self, s: &str) -> u32 {
        if s.is_empty() {
            return 0;
        }
        let offset = self.bytes.len() as u32;
        self.bytes.extend_from_slice(s.as_bytes());
        self.bytes.push(0);
        offset
    }
}

struct OutSection {
    name: u32,
    sh_type: u32,
    flags: u32,
    offset: usize,
    size: usize,
    link: u32,
    info: u32,
    addralign: u32,
    entsize: u32,
}

/// Writes `unit` in normalized form (see [`ObjectUnit::normalized`]).
pub fn emit_object(unit: &ObjectUnit) -> Result<Vec<u8>, EmitError> {
    unit.validate()?;
    let unit = unit.normalized();

    let mut out = vec![0u8; EHDR_SIZE];
    let mut shstrtab = StringTable::new();
    let mut headers: Vec<OutSection> = vec![OutSection {
        name: 0,
        sh_type: SHT_NULL,
        flags: 0,
        offset: 0,
        size: 0,
        link: 0,
        info: 0,
        addralign: 0,
        entsize: 0,
    }];

    for section in &unit.sections {
        let align = section.alignment.max(1) as usize;
        let offset = align_up(out.len(), align);
        out.resize(offset, 0);
        out.extend_from_slice(&section.bytes);
        let mut flags = 0;
        if section.flags.alloc {
            flags |= SHF_ALLOC;
        }
        if section.flags.exec {
            flags |= SHF_EXECINSTR;
        }
        if section.flags.write {
            flags |= SHF_WRITE;
        }
        headers.push(OutSection {
            name: shstrtab.add(&section.name),
            sh_type: if section.kind == SectionKind::Bss { SHT_NOBITS } else { SHT_PROGBITS },
            flags,
            offset,
            size: section.size() as usize,
            link: 0,
            info: 0,
            addralign: section.alignment,
            entsize: 0,
        });
    }

    let symtab_index = (1 + unit.sections.len() + {
        let mut targets: Vec<usize> = unit.relocations.iter().map(|r| r.target_section).collect();
        targets.dedup();
        targets.len()
    }) as u32;

    let mut start = 0;
    while start < unit.relocations.len() {
        let target = unit.relocations[start].target_section;
        let end = start
            + unit.relocations[start..]
                .iter()
                .take_while(|r| r.target_section == target)
                .count();
        let offset = align_up(out.len(), 4);
        out.resize(offset, 0);
        for reloc in &unit.relocations[start..end] {
            out.extend_from_slice(&reloc.offset.to_le_bytes());
            let info = ((reloc.symbol_index as u32 + 1) << 8) | reloc.kind.to_elf() as u32;
            out.extend_from_slice(&info.to_le_bytes());
            out.extend_from_slice(&reloc.addend.to_le_bytes());
        }
        headers.push(OutSection {
            name: shstrtab.add(&format!(".rela{}", unit.sections[target].name)),
            sh_type: SHT_RELA,
            flags: SHF_INFO_LINK,
            offset,
            size: (end - start) * RELA_SIZE,
            link: symtab_index,
            info: target as u32 + 1,
            addralign: 4,
            entsize: RELA_SIZE as u32,
        });
        start = end;
    }

    let mut strtab = StringTable::new();
    let offset = align_up(out.len(), 4);
    out.resize(offset + SYM_SIZE, 0);
    for sym in &unit.symbols {
        let bind = match sym.binding {
            Binding::Local => 0u8,
            Binding::Global => 1,
            Binding::Weak => 2,
        };
        let ty = match sym.sym_type {
            SymbolType::Notype => 0u8,
            SymbolType::Object => 1,
            SymbolType::Func => 2,
            SymbolType::Section => 3,
        };
        out.extend_from_slice(&strtab.add(&sym.name).to_le_bytes());
        out.extend_from_slice(&sym.value.to_le_bytes());
        out.extend_from_slice(&sym.size.to_le_bytes());
        out.push((bind << 4) | ty);
        out.push(0);
        let shndx = sym.section_index.map_or(0, |i| i as u16 + 1);
        out.extend_from_slice(&shndx.to_le_bytes());
    }
    let first_global = 1 + unit.symbols.iter().take_while(|s| s.binding == Binding::Local).count();
    headers.push(OutSection {
        name: shstrtab.add(".symtab"),
        sh_type: SHT_SYMTAB,
        flags: 0,
        offset,
        size: (unit.symbols.len() + 1) * SYM_SIZE,
        link: symtab_index + 1,
        info: first_global as u32,
        addralign: 4,
        entsize: SYM_SIZE as u32,
    });

    let offset = out.len();
    out.extend_from_slice(&strtab.bytes);
    headers.push(OutSection {
        name: shstrtab.add(".strtab"),
        sh_type: SHT_STRTAB,
        flags: 0,
        offset,
        size: strtab.bytes.len(),
        link: 0,
        info: 0,
        addralign: 1,
        entsize: 0,
    });

    let shstrndx = headers.len();
    let name = shstrtab.add(".shstrtab");
    let offset = out.len();
    out.extend_from_slice(&shstrtab.bytes);
    headers.push(OutSection {
        name,
        sh_type: SHT_STRTAB,
        flags: 0,
        offset,
        size: shstrtab.bytes.len(),
        link: 0,
        info: 0,
        addralign: 1,
        entsize: 0,
    });

    let shoff = align_up(out.len(), 4);
    out.resize(shoff, 0);
    for h in &headers {
        for word in [
            h.name,
            h.sh_type,
            h.flags,
            0,
            h.offset as u32,
            h.size as u32,
            h.link,
            h.info,
            h.addralign,
            h.entsize,
        ] {
            out.extend_from_slice(&word.to_le_bytes());
        }
    }

    out[..4].copy_from_slice(b"\x7fELF");
    out[4] = 1; // ELFCLASS32
    out[5] = 1; // ELFDATA2LSB
    out[6] = 1; // EV_CURRENT
    out[16..18].copy_from_slice(&ET_REL.to_le_bytes());
    out[18..20].copy_from_slice(&unit.machine_tag.to_le_bytes());
    out[20..24].copy_from_slice(&1u32.to_le_bytes());
    out[32..36].copy_from_slice(&(shoff as u32).to_le_bytes());
    out[40..42].copy_from_slice(&(EHDR_SIZE as u16).to_le_bytes());
    out[46..48].copy_from_slice(&(SHDR_SIZE as u16).to_le_bytes());
    out[48..50].copy_from_slice(&(headers.len() as u16).to_le_bytes());
    out[50..52].copy_from_slice(&(shstrndx as u16).to_le_bytes());
    Ok(out)
}
