//! Memory map of the emulated target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionFlags {
    #[serde(default)]
    pub exec: bool,
    #[serde(default)]
    pub write: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub base: u32,
    pub size: u32,
    #[serde(default)]
    pub flags: RegionFlags,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base as u64 + self.size as u64
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && (addr as u64) < self.end()
    }

    fn overlaps(&self, base: u64, end: u64) -> bool {
        (self.base as u64) < end && base < self.end()
    }
}

/// Regions plus the fixed addresses the runtime and the VM agree on.
///
/// Every region listed is mapped; anything else is unmapped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub regions: Vec<Region>,
    /// Region receiving code and read-only sections.
    pub code_region: String,
    /// Region receiving data and bss sections.
    pub data_region: String,
    /// Program stack region; `stack_top` is the initial stack pointer.
    pub stack_region: String,
    pub stack_top: u32,
    pub exception_table_base: u32,
    pub uart_out: u32,
    /// Reads pop one input byte (or return `u32::MAX` when empty);
    /// `input_channel + 4` reads the number of queued bytes.
    pub input_channel: u32,
    pub return_stack_base: u32,
    pub return_stack_size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("region `{0}` is empty or wraps the address space")]
    BadRegion(String),
    #[error("regions `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("no region named `{0}`")]
    MissingRegion(String),
    #[error("{what} at {addr:#010x} is not inside a writable region")]
    NotWritable { what: &'static str, addr: u32 },
    #[error("return stack intersects region `{0}`")]
    ReturnStackOverlap(String),
    #[error("stack top {0:#010x} lies outside the stack region")]
    BadStackTop(u32),
    #[error("canary {canary:#010x} variant {variant:#010x} lands in executable region `{region}`")]
    CanaryExecutable { canary: u32, variant: u32, region: String },
    #[error("{0}")]
    Toml(String),
}

impl Default for MemoryLayout {
    fn default() -> Self {
        let region = |name: &str, base, size, exec, write| Region {
            name: name.into(),
            base,
            size,
            flags: RegionFlags { exec, write },
        };
        MemoryLayout {
            regions: vec![
                region("iram", 0x4010_0000, 0x1_0000, true, false),
                region("dram", 0x3ff0_0000, 0x2_0000, false, true),
                // 0x3ff20000..0x3ff30000 stays unmapped: a guard hole below the stack
                region("stack", 0x3ff3_0000, 0xc000, false, true),
                region("vectors", 0x3ff3_c000, 0x3000, false, true),
                region("rstack", 0x3ff3_f000, 0x1000, false, true),
            ],
            code_region: "iram".into(),
            data_region: "dram".into(),
            stack_region: "stack".into(),
            stack_top: 0x3ff3_b000,
            exception_table_base: 0x3ff3_c000,
            uart_out: 0x6000_0000,
            input_channel: 0x6000_0010,
            return_stack_base: 0x3ff3_f000,
            return_stack_size: 0x1000,
        }
    }
}

impl MemoryLayout {
    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn region_at(&self, addr: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(addr))
    }

    pub fn is_exec(&self, addr: u32) -> bool {
        self.region_at(addr).is_some_and(|r| r.flags.exec)
    }

    pub fn stack_base(&self) -> u32 {
        self.region(&self.stack_region).map_or(0, |r| r.base)
    }

    pub fn from_toml(text: &str) -> Result<MemoryLayout, LayoutError> {
        let layout: MemoryLayout = toml::from_str(text).map_err(|e| LayoutError::Toml(e.to_string()))?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("layout serializes")
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        for r in &self.regions {
            if r.size == 0 || r.end() > 1 << 32 {
                return Err(LayoutError::BadRegion(r.name.clone()));
            }
        }
        for (i, a) in self.regions.iter().enumerate() {
            for b in &self.regions[i + 1..] {
                if a.overlaps(b.base as u64, b.end()) || a.name == b.name {
                    return Err(LayoutError::Overlap(a.name.clone(), b.name.clone()));
                }
            }
        }
        for name in [&self.code_region, &self.data_region, &self.stack_region] {
            self.region(name).ok_or_else(|| LayoutError::MissingRegion(name.clone()))?;
        }
        let stack = self.region(&self.stack_region).unwrap();
        if self.stack_top <= stack.base || self.stack_top as u64 > stack.end() {
            return Err(LayoutError::BadStackTop(self.stack_top));
        }
        let writable = |addr: u32| self.region_at(addr).is_some_and(|r| r.flags.write);
        if !writable(self.exception_table_base) {
            return Err(LayoutError::NotWritable { what: "exception table", addr: self.exception_table_base });
        }
        let rs_base = self.return_stack_base as u64;
        let rs_end = rs_base + self.return_stack_size as u64;
        if self.return_stack_size < 12 || !writable(self.return_stack_base) {
            return Err(LayoutError::NotWritable { what: "return stack", addr: self.return_stack_base });
        }
        let home = self.region_at(self.return_stack_base).unwrap();
        if rs_end > home.end() {
            return Err(LayoutError::NotWritable { what: "return stack end", addr: home.end() as u32 });
        }
        // The return stack must own its region outright: no code, data, stack or table in it.
        for name in [&self.code_region, &self.data_region, &self.stack_region] {
            if home.name == *name {
                return Err(LayoutError::ReturnStackOverlap(name.clone()));
            }
        }
        let table = self.exception_table_base as u64;
        if table + 64 > rs_base && table < rs_end {
            return Err(LayoutError::ReturnStackOverlap("exception table".into()));
        }
        Ok(())
    }

    /// All words that differ from `canary` in exactly one byte.
    pub fn single_byte_variants(canary: u32) -> impl Iterator<Item = u32> {
        (0..4u32).flat_map(move |byte| {
            let shift = byte * 8;
            let original = (canary >> shift) & 0xff;
            (0..=255u32)
                .filter(move |&v| v != original)
                .map(move |v| (canary & !(0xff << shift)) | (v << shift))
        })
    }

    /// Checks that the canary and every single-byte variant of it fault
    /// when used as a jump target.
    pub fn check_canary(&self, canary: u32) -> Result<(), LayoutError> {
        for variant in std::iter::once(canary).chain(Self::single_byte_variants(canary)) {
            if let Some(region) = self.region_at(variant).filter(|r| r.flags.exec) {
                return Err(LayoutError::CanaryExecutable { canary, variant, region: region.name.clone() });
            }
        }
        Ok(())
    }
}
