//! Call-path rewriting of relocatable objects.
//!
//! A selected function `X` is renamed to `prefix + X` in place, an undefined
//! global `X` is appended to the symbol table, and every relocation that
//! referenced the old symbol is pointed at that import instead. Section bytes
//! are left alone; the linker later resolves `X` to the generated stub.

use std::fmt;

use glob::Pattern;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::object::{ArchiveUnit, Binding, InvariantError, ObjectUnit, RelocKind, SectionKind, SymbolRecord, SymbolType};

pub const DEFAULT_PREFIX: &str = "hr_";
pub const DEFAULT_CANARY: u32 = 0xdead_dead;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentationPolicy {
    pub prefix: String,
    /// Empty means every function is a candidate.
    pub include_patterns: Vec<String>,
    pub exclude_patterns: Vec<String>,
    /// Function whose stub installs the exception handler. Without one the
    /// handler is installed by an entry trampoline before `_start`.
    pub master_function: Option<String>,
    pub canary: u32,
    pub trace_enabled: bool,
}

impl Default for InstrumentationPolicy {
    fn default() -> Self {
        InstrumentationPolicy {
            prefix: DEFAULT_PREFIX.to_string(),
            include_patterns: Vec::new(),
            exclude_patterns: Vec::new(),
            master_function: None,
            canary: DEFAULT_CANARY,
            trace_enabled: false,
        }
    }
}

impl InstrumentationPolicy {
    pub fn validate(&self) -> Result<(), RewriteError> {
        if self.prefix.is_empty() {
            return Err(RewriteError::Policy("prefix must not be empty".into()));
        }
        for p in self.include_patterns.iter().chain(&self.exclude_patterns) {
            Pattern::new(p).map_err(|e| RewriteError::Policy(format!("bad pattern {p:?}: {e}")))?;
        }
        Ok(())
    }

    fn matches_any(patterns: &[String], name: &str) -> bool {
        patterns.iter().any(|p| Pattern::new(p).is_ok_and(|p| p.matches(name)))
    }

    /// Include/exclude verdict for one name; exclusion wins.
    pub fn admits(&self, name: &str) -> Result<(), SkipReason> {
        if Self::matches_any(&self.exclude_patterns, name) {
            return Err(SkipReason::Excluded);
        }
        if !self.include_patterns.is_empty() && !Self::matches_any(&self.include_patterns, name) {
            return Err(SkipReason::NotIncluded);
        }
        Ok(())
    }

    pub fn renamed(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    AlreadyPrefixed,
    WeakBinding,
    Excluded,
    NotIncluded,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::AlreadyPrefixed => "already prefixed",
            SkipReason::WeakBinding => "weak binding",
            SkipReason::Excluded => "excluded by pattern",
            SkipReason::NotIncluded => "not matched by include patterns",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rename {
    pub original: String,
    pub renamed: String,
    /// Indices into the unit's relocation table.
    pub relocations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub member: Option<String>,
    pub name: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitPlan {
    pub member: Option<String>,
    pub renames: Vec<Rename>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewritePlan {
    pub units: Vec<UnitPlan>,
    pub skipped: Vec<Skip>,
}

impl RewritePlan {
    /// Original names of every renamed function, in plan order.
    pub fn targets(&self) -> Vec<String> {
        self.units.iter().flat_map(|u| u.renames.iter().map(|r| r.original.clone())).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.units.iter().all(|u| u.renames.is_empty())
    }

    /// One line per rename and per skip.
    pub fn render(&self) -> String {
        let qualify = |member: &Option<String>, name: &str| match member {
            Some(m) => format!("{m}:{name}"),
            None => name.to_string(),
        };
        let mut out = String::new();
        for unit in &self.units {
            for r in &unit.renames {
                let relocs: Vec<String> = r.relocations.iter().map(usize::to_string).collect();
                out.push_str(&format!(
                    "rename {} -> {} relocs=[{}]\n",
                    qualify(&unit.member, &r.original),
                    r.renamed,
                    relocs.join(",")
                ));
            }
        }
        for s in &self.skipped {
            out.push_str(&format!("skip {} ({})\n", qualify(&s.member, &s.name), s.reason));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("invalid object: {0}")]
    InvalidUnit(#[from] InvariantError),
    #[error("policy: {0}")]
    Policy(String),
    #[error("renaming {name} to {renamed} would introduce a conflict: {renamed} already exists")]
    Collision { name: String, renamed: String },
    #[error("relocation {index} has unsupported kind {kind}")]
    UnknownRelocation { index: usize, kind: u8 },
    #[error("{name} is defined by both {first} and {second}")]
    DuplicateDefinition { name: String, first: String, second: String },
    #[error("member {member}: {source}")]
    Member { member: String, source: Box<RewriteError> },
}

fn is_function(unit: &ObjectUnit, sym: &SymbolRecord) -> bool {
    match sym.sym_type {
        SymbolType::Func => true,
        SymbolType::Notype => sym
            .section_index
            .and_then(|i| unit.sections.get(i))
            .is_some_and(|s| s.kind == SectionKind::Code || s.flags.exec),
        _ => false,
    }
}

/// Selected names and skipped candidates, both in symbol-table order.
fn selection(unit: &ObjectUnit, policy: &InstrumentationPolicy) -> (Vec<String>, Vec<(String, SkipReason)>) {
    let mut selected = Vec::new();
    let mut skipped = Vec::new();
    for sym in &unit.symbols {
        if !sym.defined || sym.binding == Binding::Local || !is_function(unit, sym) {
            continue;
        }
        let verdict = if sym.binding == Binding::Weak {
            Err(SkipReason::WeakBinding)
        } else if sym.name.starts_with(&policy.prefix) {
            Err(SkipReason::AlreadyPrefixed)
        } else {
            policy.admits(&sym.name)
        };
        match verdict {
            Ok(()) => selected.push(sym.name.clone()),
            Err(reason) => skipped.push((sym.name.clone(), reason)),
        }
    }
    (selected, skipped)
}

/// Global, defined functions admitted by the policy and not yet prefixed.
pub fn select_targets(unit: &ObjectUnit, policy: &InstrumentationPolicy) -> Vec<String> {
    selection(unit, policy).0
}

pub fn apply_call_path_instrumentation(
    unit: &ObjectUnit,
    policy: &InstrumentationPolicy,
) -> Result<(ObjectUnit, RewritePlan), RewriteError> {
    rewrite_unit(unit, policy, None)
}

fn rewrite_unit(
    unit: &ObjectUnit,
    policy: &InstrumentationPolicy,
    member: Option<&str>,
) -> Result<(ObjectUnit, RewritePlan), RewriteError> {
    policy.validate()?;
    unit.validate()?;
    if let Some((index, r)) = unit.relocations.iter().enumerate().find(|(_, r)| matches!(r.kind, RelocKind::Unknown(_))) {
        return Err(RewriteError::UnknownRelocation { index, kind: r.kind.to_elf() });
    }
    let (targets, skipped) = selection(unit, policy);
    for name in &targets {
        let renamed = policy.renamed(name);
        if unit.symbols.iter().any(|s| s.name == renamed) {
            return Err(RewriteError::Collision { name: name.clone(), renamed });
        }
    }

    let mut out = unit.clone();
    let mut renames = Vec::new();
    for name in targets {
        let old = out.global_definition(&name).expect("selected symbols are defined");
        let renamed = policy.renamed(&name);
        out.symbols[old].name = renamed.clone();
        let import = out.symbols.len();
        out.symbols.push(SymbolRecord::import(name.clone()));
        let mut relocations = Vec::new();
        for (i, r) in out.relocations.iter_mut().enumerate() {
            if r.symbol_index == old {
                r.symbol_index = import;
                relocations.push(i);
            }
        }
        renames.push(Rename { original: name, renamed, relocations });
    }
    let member = member.map(str::to_string);
    let plan = RewritePlan {
        units: vec![UnitPlan { member: member.clone(), renames }],
        skipped: skipped.into_iter().map(|(name, reason)| Skip { member: member.clone(), name, reason }).collect(),
    };
    Ok((out, plan))
}

/// Rewrites every member. Selected names defined by more than one member are
/// rejected before anything is changed.
pub fn instrument_archive(
    archive: &ArchiveUnit,
    policy: &InstrumentationPolicy,
) -> Result<(ArchiveUnit, RewritePlan), RewriteError> {
    policy.validate()?;
    let mut owner: std::collections::HashMap<String, &str> = std::collections::HashMap::new();
    for (member, unit) in &archive.members {
        for name in select_targets(unit, policy) {
            if let Some(first) = owner.insert(name.clone(), member) {
                return Err(RewriteError::DuplicateDefinition { name, first: first.to_string(), second: member.clone() });
            }
        }
    }
    let mut members = Vec::with_capacity(archive.members.len());
    let mut plan = RewritePlan::default();
    for (member, unit) in &archive.members {
        let (rewritten, part) = rewrite_unit(unit, policy, Some(member))
            .map_err(|e| RewriteError::Member { member: member.clone(), source: Box::new(e) })?;
        members.push((member.clone(), rewritten));
        plan.units.extend(part.units);
        plan.skipped.extend(part.skipped);
    }
    Ok((ArchiveUnit { members }, plan))
}
