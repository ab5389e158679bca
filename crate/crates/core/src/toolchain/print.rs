//! Canonical printer: renders an [`ObjectUnit`] produced by the assembler
//! back into source that assembles to the same unit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use super::asm::{is_mapping_symbol, Expr, MAP_CODE, MAP_DATA, MAP_POOL};
use crate::isa::Insn;
use crate::object::{Binding, ObjectUnit, RelocKind, RelocationRecord, SectionKind, SymbolType};

fn kind_word(kind: SectionKind) -> &'static str {
    match kind {
        SectionKind::Code => "code",
        SectionKind::Readonly => "rodata",
        SectionKind::Bss => "bss",
        _ => "data",
    }
}

fn target_expr(unit: &ObjectUnit, r: &RelocationRecord) -> Expr {
    Expr::Sym { name: unit.symbols[r.symbol_index].name.clone(), addend: r.addend as i64 }
}

fn word_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn print_object(unit: &ObjectUnit) -> String {
    let mut out = String::new();
    for sym in &unit.symbols {
        match (sym.defined, sym.binding) {
            (false, Binding::Weak) => writeln!(out, ".weak {}", sym.name).unwrap(),
            (false, _) => writeln!(out, ".extern {}", sym.name).unwrap(),
            _ => {}
        }
    }

    for (si, section) in unit.sections.iter().enumerate() {
        if !matches!(section.kind, SectionKind::Code | SectionKind::Data | SectionKind::Readonly | SectionKind::Bss) {
            continue;
        }
        out.push('\n');
        if SectionKind::from_name(&section.name) == Some(section.kind) {
            writeln!(out, ".section {}", section.name).unwrap();
        } else {
            writeln!(out, ".section {}, {}", section.name, kind_word(section.kind)).unwrap();
        }
        if section.alignment > 4 {
            writeln!(out, "  .align {}", section.alignment).unwrap();
        }

        let mut labels: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut maps: BTreeMap<u32, &str> = BTreeMap::new();
        for (i, sym) in unit.symbols.iter().enumerate() {
            if sym.section_index != Some(si) || sym.sym_type == SymbolType::Section || !sym.defined {
                continue;
            }
            if is_mapping_symbol(&sym.name) {
                maps.insert(sym.value, unit.symbols[i].name.as_str());
            } else {
                labels.entry(sym.value).or_default().push(i);
            }
        }
        let relocs: BTreeMap<u32, &RelocationRecord> =
            unit.relocations.iter().filter(|r| r.target_section == si).map(|r| (r.offset, r)).collect();

        let label_line = |out: &mut String, i: usize| {
            let sym = &unit.symbols[i];
            match sym.binding {
                Binding::Global => writeln!(out, ".global {}", sym.name).unwrap(),
                Binding::Weak => writeln!(out, ".weak {}", sym.name).unwrap(),
                Binding::Local => {}
            }
            match sym.sym_type {
                SymbolType::Func => writeln!(out, ".type {}, @function", sym.name).unwrap(),
                SymbolType::Object => writeln!(out, ".type {}, @object", sym.name).unwrap(),
                _ => {}
            }
        };

        if section.kind == SectionKind::Bss {
            let mut at = 0;
            for (&offset, syms) in &labels {
                if offset > at {
                    writeln!(out, "  .space {}", offset - at).unwrap();
                    at = offset;
                }
                for &i in syms {
                    label_line(&mut out, i);
                    writeln!(out, "{}:", unit.symbols[i].name).unwrap();
                }
            }
            if section.nobits_size > at {
                writeln!(out, "  .space {}", section.nobits_size - at).unwrap();
            }
            continue;
        }

        let bytes = &section.bytes;
        let pool_start = maps.iter().find(|(_, &n)| n == MAP_POOL).map(|(&o, _)| o);
        let limit = pool_start.unwrap_or(bytes.len() as u32);

        // Pool entries first, in order, so `=expr` operands find them again.
        let mut pool: Vec<Expr> = Vec::new();
        if let Some(start) = pool_start {
            let referenced = |at: u32| {
                bytes[at as usize..at as usize + 4] != [0; 4]
                    || relocs.contains_key(&at)
                    || labels.contains_key(&at)
                    || unit.relocations.iter().any(|r| {
                        r.target_section == si
                            && r.kind == RelocKind::Literal
                            && r.addend == at as i32
                            && unit.symbols[r.symbol_index].sym_type == SymbolType::Section
                    })
            };
            // Zero words nobody points at are alignment padding after the pool.
            let mut end = bytes.len() as u32 / 4 * 4;
            while end > start && !referenced(end - 4) {
                end -= 4;
            }
            for at in (start..end).step_by(4) {
                let expr = match relocs.get(&at) {
                    Some(r) if r.kind == RelocKind::Abs32 => target_expr(unit, r),
                    _ => Expr::Num(word_at(bytes, at as usize) as i64),
                };
                match labels.get(&at).and_then(|syms| syms.first().copied()) {
                    Some(i) => {
                        label_line(&mut out, i);
                        writeln!(out, "  .literal {}, {}", unit.symbols[i].name, expr).unwrap();
                    }
                    None => writeln!(out, "  .literal {}", expr).unwrap(),
                }
                pool.push(expr);
            }
        }

        let mut boundaries: BTreeSet<u32> = labels.keys().copied().chain(maps.keys().copied()).collect();
        boundaries.extend(relocs.keys().copied());
        boundaries.insert(limit);
        let next_boundary = |at: u32| boundaries.range(at + 1..).next().copied().unwrap_or(limit).min(limit);

        let mut data_mode = section.kind != SectionKind::Code;
        let mut at = 0u32;
        while at < limit {
            if let Some(&m) = maps.get(&at) {
                data_mode = m == MAP_DATA;
                debug_assert!(m != MAP_CODE || !data_mode);
            }
            if let Some(syms) = labels.get(&at) {
                for &i in syms {
                    label_line(&mut out, i);
                    writeln!(out, "{}:", unit.symbols[i].name).unwrap();
                }
            }
            let stop = next_boundary(at);
            if !data_mode {
                if let Some(insn) = Insn::decode(&bytes[at as usize..stop as usize]) {
                    let width = insn.width() as u32;
                    let text = match (insn, relocs.get(&at)) {
                        (Insn::L32r { rd, .. }, Some(r)) if r.kind == RelocKind::Literal => {
                            let own_pool = unit.symbols[r.symbol_index].sym_type == SymbolType::Section
                                && unit.symbols[r.symbol_index].section_index == Some(si);
                            let pool_index = pool_start
                                .filter(|&p| own_pool && r.addend >= p as i32 && (r.addend - p as i32) % 4 == 0)
                                .map(|p| ((r.addend - p as i32) / 4) as usize);
                            match pool_index.filter(|&k| k < pool.len()) {
                                Some(k) if pool.iter().position(|e| *e == pool[k]) == Some(k) => {
                                    format!("l32r {rd}, ={}", pool[k])
                                }
                                _ => format!("l32r {rd}, {}", target_expr(unit, r)),
                            }
                        }
                        (_, Some(r)) if matches!(r.kind, RelocKind::CallRel | RelocKind::BranchRel) => {
                            insn.format_with(Some(&target_expr(unit, r).to_string()))
                        }
                        _ => insn.to_string(),
                    };
                    writeln!(out, "  {text}").unwrap();
                    at += width;
                    continue;
                }
            }
            // Data: a relocated word, an aligned word, or single bytes.
            if let Some(r) = relocs.get(&at).filter(|r| r.kind == RelocKind::Abs32) {
                writeln!(out, "  .word {}", target_expr(unit, r)).unwrap();
                at += 4;
            } else if at.is_multiple_of(4) && at + 4 <= stop {
                writeln!(out, "  .word {:#x}", word_at(bytes, at as usize)).unwrap();
                at += 4;
            } else {
                writeln!(out, "  .byte {:#x}", bytes[at as usize]).unwrap();
                at += 1;
            }
            if !data_mode && section.kind == SectionKind::Code {
                // The assembler records the switch itself.
                data_mode = true;
            }
        }
    }
    out
}
