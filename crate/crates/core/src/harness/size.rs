//! Size accounting of an instrumented archive.
//!
//! A member's instrumented size is its rewritten content plus the stubs of
//! the functions it lost to the wrapper. The rest of the wrapper (the
//! runtime) is reported once, on its own line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::object::{ArchiveUnit, ObjectUnit};
use crate::stubgen::STUB_SECTION_PREFIX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeLine {
    pub name: String,
    pub original: u64,
    pub instrumented: u64,
    /// Increase in hundredths of a percent, rounded half up.
    pub increase_hundredths: i64,
}

impl SizeLine {
    pub fn new(name: impl Into<String>, original: u64, instrumented: u64) -> SizeLine {
        SizeLine { name: name.into(), original, instrumented, increase_hundredths: percent_hundredths(original, instrumented) }
    }

    pub fn percent(&self) -> String {
        let h = self.increase_hundredths;
        let sign = if h < 0 { "-" } else { "" };
        format!("{sign}{}.{:02}", h.abs() / 100, h.abs() % 100)
    }
}

/// `100 * (new - old) / old` in hundredths, half away from zero.
pub fn percent_hundredths(original: u64, instrumented: u64) -> i64 {
    if original == 0 {
        return 0;
    }
    let diff = instrumented as i128 - original as i128;
    let num = 20000 * diff.abs();
    let den = 2 * original as i128;
    let q = ((num + original as i128) / den) as i64;
    if diff < 0 {
        -q
    } else {
        q
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub members: Vec<SizeLine>,
    /// Wrapper bytes not attributed to any member.
    pub runtime: u64,
    pub total: SizeLine,
}

impl SizeReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<24} {:>10} {:>12} {:>9}\n", "member", "original", "instrumented", "increase");
        for l in self.members.iter().chain([&self.total]) {
            out.push_str(&format!("{:<24} {:>10} {:>12} {:>8}%\n", l.name, l.original, l.instrumented, l.percent()));
        }
        out.push_str(&format!("{:<24} {:>10} {:>12}\n", "(runtime)", 0, self.runtime));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SizeError {
    #[error("member lists differ: {0}")]
    MemberMismatch(String),
}

fn stub_size(wrapper: &ObjectUnit, name: &str) -> Option<u64> {
    let sec = wrapper.section_by_name(&format!("{STUB_SECTION_PREFIX}{name}"))?;
    Some(wrapper.sections[sec].size() as u64)
}

pub fn size_report(original: &ArchiveUnit, instrumented: &ArchiveUnit, wrapper: &ObjectUnit) -> Result<SizeReport, SizeError> {
    let names = |a: &ArchiveUnit| a.members.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    if names(original) != names(instrumented) {
        return Err(SizeError::MemberMismatch(format!("{:?} vs {:?}", names(original), names(instrumented))));
    }
    let mut members = Vec::new();
    let mut attributed = 0;
    for ((name, before), (_, after)) in original.members.iter().zip(&instrumented.members) {
        let mut stubs = 0;
        for sym in after.symbols.iter().filter(|s| !s.defined) {
            if before.global_definition(&sym.name).is_some() {
                stubs += stub_size(wrapper, &sym.name).unwrap_or(0);
            }
        }
        attributed += stubs;
        members.push(SizeLine::new(name.clone(), before.content_size(), after.content_size() + stubs));
    }
    let runtime = wrapper.content_size() - attributed;
    let orig_total = members.iter().map(|l| l.original).sum();
    let instr_total = members.iter().map(|l| l.instrumented).sum::<u64>() + runtime;
    Ok(SizeReport { members, runtime, total: SizeLine::new("total", orig_total, instr_total) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(percent_hundredths(100, 100), 0);
        assert_eq!(percent_hundredths(3, 4), 3333);
        assert_eq!(percent_hundredths(3, 5), 6667);
        // 0.00125% rounds down to 0.00, 0.005% up to 0.01.
        assert_eq!(percent_hundredths(8, 9), 1250);
        assert_eq!(percent_hundredths(80000, 80001), 0);
        assert_eq!(percent_hundredths(40000, 40002), 1);
        assert_eq!(SizeLine::new("x", 3, 4).percent(), "33.33");
        assert_eq!(percent_hundredths(0, 10), 0);
    }

    #[test]
    fn mismatch() {
        let a = ArchiveUnit { members: vec![("a.o".into(), ObjectUnit::empty())] };
        let b = ArchiveUnit { members: vec![] };
        assert!(size_report(&a, &b, &ObjectUnit::empty()).is_err());
    }
}
