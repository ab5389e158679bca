//! System V / GNU `ar` archives of relocatable objects.
//!
//! Member names longer than 15 bytes go through the `//` extended-name
//! table. A `/` symbol index, if present, is skipped on read and never
//! written. Emitted headers are deterministic (zero mtime/uid/gid, mode 644).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::elf::{emit_object, parse_object, EmitError, ParseError};
use super::ObjectUnit;

const MAGIC: &[u8; 8] = b"!<arch>\n";
const HEADER_LEN: usize = 60;
const SHORT_NAME_MAX: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArchiveUnit {
    pub members: Vec<(String, ObjectUnit)>,
}

impl ArchiveUnit {
    pub fn member(&self, name: &str) -> Option<&ObjectUnit> {
        self.members.iter().find(|(n, _)| n == name).map(|(_, u)| u)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArchiveError {
    #[error("bad archive magic")]
    BadMagic,
    #[error("truncated member header at offset {0}")]
    TruncatedHeader(usize),
    #[error("truncated member `{0}`")]
    TruncatedMember(String),
    #[error("malformed member header at offset {offset}: {field}")]
    BadHeader { offset: usize, field: &'static str },
    #[error("extended name reference {0} outside the name table")]
    BadNameReference(usize),
    #[error("duplicate member name `{0}`")]
    DuplicateMember(String),
    #[error("member name `{0}` cannot be stored")]
    BadMemberName(String),
    #[error("member `{member}`: {source}")]
    Member {
        member: String,
        #[source]
        source: ParseError,
    },
    #[error("member `{member}`: {source}")]
    Emit {
        member: String,
        #[source]
        source: EmitError,
    },
}

fn parse_decimal(field: &[u8], offset: usize, name: &'static str) -> Result<usize, ArchiveError> {
    let text = std::str::from_utf8(field)
        .map_err(|_| ArchiveError::BadHeader { offset, field: name })?
        .trim_end_matches(' ');
    text.parse().map_err(|_| ArchiveError::BadHeader { offset, field: name })
}

pub fn parse_archive(bytes: &[u8]) -> Result<ArchiveUnit, ArchiveError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let mut pos = MAGIC.len();
    let mut name_table: &[u8] = &[];
    let mut seen = HashSet::new();
    let mut archive = ArchiveUnit::default();

    while pos < bytes.len() {
        let header = bytes.get(pos..pos + HEADER_LEN).ok_or(ArchiveError::TruncatedHeader(pos))?;
        if &header[58..60] != b"`\n" {
            return Err(ArchiveError::BadHeader { offset: pos, field: "terminator" });
        }
        let size = parse_decimal(&header[48..58], pos, "size")?;
        let raw_name = &header[..16];
        let trimmed = {
            let end = raw_name.iter().rposition(|&b| b != b' ').map_or(0, |i| i + 1);
            &raw_name[..end]
        };
        let data_start = pos + HEADER_LEN;
        let data = bytes.get(data_start..data_start.saturating_add(size));

        let name = if trimmed == b"/" || trimmed == b"/SYM64/" {
            None
        } else if trimmed == b"//" {
            name_table = data.ok_or_else(|| ArchiveError::TruncatedMember("//".into()))?;
            None
        } else if let Some(reference) = trimmed.strip_prefix(b"/") {
            let index = parse_decimal(reference, pos, "extended name reference")?;
            let rest = name_table.get(index..).ok_or(ArchiveError::BadNameReference(index))?;
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or(ArchiveError::BadNameReference(index))?;
            let entry = &rest[..end];
            let entry = entry.strip_suffix(b"/").unwrap_or(entry);
            Some(String::from_utf8_lossy(entry).into_owned())
        } else {
            let short = trimmed.strip_suffix(b"/").unwrap_or(trimmed);
            Some(String::from_utf8_lossy(short).into_owned())
        };

        if let Some(name) = name {
            let data = data.ok_or_else(|| ArchiveError::TruncatedMember(name.clone()))?;
            if !seen.insert(name.clone()) {
                return Err(ArchiveError::DuplicateMember(name));
            }
            let unit = parse_object(data)
                .map_err(|source| ArchiveError::Member { member: name.clone(), source })?;
            archive.members.push((name, unit));
        } else if data.is_none() {
            return Err(ArchiveError::TruncatedMember(String::from_utf8_lossy(trimmed).into_owned()));
        }

        pos = data_start + size + (size & 1);
    }
    Ok(archive)
}

fn push_header(out: &mut Vec<u8>, name: &str, size: usize) {
    let mut header = format!("{name:<16}{:<12}{:<6}{:<6}{:<8}{size:<10}`\n", 0, 0, 0, 644);
    debug_assert_eq!(header.len(), HEADER_LEN);
    header.truncate(HEADER_LEN);
    out.extend_from_slice(header.as_bytes());
}

pub fn emit_archive(archive: &ArchiveUnit) -> Result<Vec<u8>, ArchiveError> {
    let mut seen = HashSet::new();
    for (name, _) in &archive.members {
        if name.is_empty() || name.contains('/') || name.contains('\n') {
            return Err(ArchiveError::BadMemberName(name.clone()));
        }
        if !seen.insert(name.as_str()) {
            return Err(ArchiveError::DuplicateMember(name.clone()));
        }
    }

    let mut name_table = Vec::new();
    let mut header_names = Vec::with_capacity(archive.members.len());
    for (name, _) in &archive.members {
        if name.len() > SHORT_NAME_MAX {
            header_names.push(format!("/{}", name_table.len()));
            name_table.extend_from_slice(name.as_bytes());
            name_table.extend_from_slice(b"/\n");
        } else {
            header_names.push(format!("{name}/"));
        }
    }

    let mut out = MAGIC.to_vec();
    if !name_table.is_empty() {
        push_header(&mut out, "//", name_table.len());
        out.extend_from_slice(&name_table);
        if name_table.len() % 2 == 1 {
            out.push(b'\n');
        }
    }
    for ((name, unit), header_name) in archive.members.iter().zip(header_names) {
        let data = emit_object(unit).map_err(|source| ArchiveError::Emit { member: name.clone(), source })?;
        push_header(&mut out, &header_name, data.len());
        out.extend_from_slice(&data);
        if data.len() % 2 == 1 {
            out.push(b'\n');
        }
    }
    Ok(out)
}
