//! Image files: the segment blobs concatenated into one `.bin`, plus a
//! sidecar text map.
//!
//! ```text
//! .entry 0x40100000
//! .segment 0x40100000 0 412        base, offset into the blob, length
//! main 0x40100010
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use super::link::{FirmwareImage, Segment};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("map line {line}: {reason}")]
    Map { line: usize, reason: String },
    #[error("segment at {base:#010x} reaches past the end of the blob")]
    Blob { base: u32 },
    #[error("map has no .entry line")]
    NoEntry,
}

pub fn write_map(image: &FirmwareImage) -> String {
    let mut out = format!(".entry {:#010x}\n", image.entry);
    let mut offset = 0;
    for seg in &image.segments {
        out.push_str(&format!(".segment {:#010x} {} {}\n", seg.base, offset, seg.bytes.len()));
        offset += seg.bytes.len();
    }
    for (name, value) in &image.symbol_map {
        out.push_str(&format!("{name} {value:#010x}\n"));
    }
    out
}

pub fn write_blob(image: &FirmwareImage) -> Vec<u8> {
    image.segments.iter().flat_map(|s| s.bytes.iter().copied()).collect()
}

fn parse_u32(text: &str) -> Option<u32> {
    match text.strip_prefix("0x") {
        Some(hex) => u32::from_str_radix(hex, 16).ok(),
        None => text.parse().ok(),
    }
}

/// Rebuilds an image from its blob and map. Placement details other than
/// segments, entry and symbols are not stored and come back empty.
pub fn read_image(blob: &[u8], map: &str) -> Result<FirmwareImage, ImageError> {
    let mut entry = None;
    let mut segments = Vec::new();
    let mut symbol_map = BTreeMap::new();
    for (i, raw) in map.lines().enumerate() {
        let line = i + 1;
        let bad = |reason: &str| ImageError::Map { line, reason: reason.to_string() };
        let fields: Vec<&str> = raw.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            [".entry", addr] => entry = Some(parse_u32(addr).ok_or_else(|| bad("bad address"))?),
            [".segment", base, off, len] => {
                let base = parse_u32(base).ok_or_else(|| bad("bad base"))?;
                let off: usize = off.parse().map_err(|_| bad("bad offset"))?;
                let len: usize = len.parse().map_err(|_| bad("bad length"))?;
                let bytes = off
                    .checked_add(len)
                    .and_then(|end| blob.get(off..end))
                    .ok_or(ImageError::Blob { base })?;
                segments.push(Segment { base, bytes: bytes.to_vec() });
            }
            [name, value] if !name.starts_with('.') => {
                symbol_map.insert(name.to_string(), parse_u32(value).ok_or_else(|| bad("bad value"))?);
            }
            _ => return Err(bad("unrecognized line")),
        }
    }
    Ok(FirmwareImage { segments, entry: entry.ok_or(ImageError::NoEntry)?, symbol_map, sections: Vec::new() })
}
