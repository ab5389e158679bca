//! Mutational fuzzing against a simulated device.
//!
//! Iteration `i` draws from a ChaCha stream keyed by `(rng_seed, i)`, so the
//! report does not depend on how iterations are spread over workers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::device::DeviceController;
use super::dump::{detect_crash, CrashDump};
use crate::toolchain::FirmwareImage;
use crate::vm::{Status, VmConfig, VmError};

pub const MAX_INPUT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutator {
    ByteFlip,
    ByteSet,
    Truncate,
    ExtendRepeat,
    LengthSweep,
}

impl Mutator {
    pub const ALL: [Mutator; 5] =
        [Mutator::ByteFlip, Mutator::ByteSet, Mutator::Truncate, Mutator::ExtendRepeat, Mutator::LengthSweep];

    pub fn parse(name: &str) -> Option<Mutator> {
        Mutator::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mutator::ByteFlip => "byte-flip",
            Mutator::ByteSet => "byte-set",
            Mutator::Truncate => "truncate",
            Mutator::ExtendRepeat => "extend-repeat",
            Mutator::LengthSweep => "length-sweep",
        }
    }

    pub fn apply(self, input: &mut Vec<u8>, rng: &mut impl Rng, iteration: u64) {
        match self {
            Mutator::ByteFlip if !input.is_empty() => {
                let i = rng.gen_range(0..input.len());
                input[i] ^= 1 << rng.gen_range(0..8);
            }
            Mutator::ByteSet if !input.is_empty() => {
                let i = rng.gen_range(0..input.len());
                input[i] = rng.gen();
            }
            Mutator::Truncate => {
                let n = rng.gen_range(0..=input.len());
                input.truncate(n);
            }
            Mutator::ExtendRepeat => {
                let chunk = if input.is_empty() {
                    vec![rng.gen()]
                } else {
                    let start = rng.gen_range(0..input.len());
                    let end = rng.gen_range(start + 1..=input.len());
                    input[start..end].to_vec()
                };
                let times = rng.gen_range(1..=32);
                for _ in 0..times {
                    input.extend_from_slice(&chunk);
                }
            }
            Mutator::LengthSweep => {
                // Cycles through every length up to 64, padding by repeating.
                let len = (iteration % 65) as usize;
                if input.is_empty() {
                    input.push(rng.gen());
                }
                *input = input.iter().copied().cycle().take(len).collect();
            }
            Mutator::ByteFlip | Mutator::ByteSet => input.push(rng.gen()),
        }
        input.truncate(MAX_INPUT);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub fn_name: String,
    pub pc: u32,
    pub input: Vec<u8>,
    pub dump: CrashDump,
    /// First iteration that produced this crash.
    pub iteration: u64,
}

impl CrashRecord {
    pub fn file_stem(&self) -> String {
        let safe: String = self.fn_name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect();
        format!("crash_{safe}_{:08x}", self.pc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub iterations: u64,
    pub unique_crashes: Vec<CrashRecord>,
    pub resets: u64,
    pub hangs: u64,
    /// Runs that stopped on an exception with no dump (or a broken one).
    pub faults: u64,
    pub clean: u64,
    pub rng_seed: u64,
}

impl FuzzReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "iterations {}\nrng_seed {}\nresets {}\nclean {}\nhangs {}\nfaults {}\nunique_crashes {}\n",
            self.iterations,
            self.rng_seed,
            self.resets,
            self.clean,
            self.hangs,
            self.faults,
            self.unique_crashes.len()
        );
        for c in &self.unique_crashes {
            let hex: String = c.input.iter().map(|b| format!("{b:02x}")).collect();
            out.push_str(&format!("crash {} pc={:08x} iteration={} input={hex}\n", c.fn_name, c.pc, c.iteration));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// Writes `crash_<fn>_<pc>.input` and `.dump` for every unique crash.
    pub fn write_corpus(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for c in &self.unique_crashes {
            let stem = c.file_stem();
            std::fs::write(dir.join(format!("{stem}.input")), &c.input)?;
            std::fs::write(dir.join(format!("{stem}.dump")), c.dump.render())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub iterations: u64,
    pub rng_seed: u64,
    pub mutators: Vec<Mutator>,
    pub workers: usize,
    pub vm: VmConfig,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig { iterations: 5000, rng_seed: 1, mutators: Mutator::ALL.to_vec(), workers: 1, vm: VmConfig::default() }
    }
}

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("at least one mutator is required")]
    NoMutators,
    #[error(transparent)]
    Vm(#[from] VmError),
}

enum Outcome {
    Clean,
    Hang,
    Fault,
    Crash(CrashDump),
}

/// Input for iteration `i`: a seed with one to four stacked mutations.
pub fn mutate_input(seeds: &[Vec<u8>], mutators: &[Mutator], rng_seed: u64, iteration: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(iteration);
    let mut input = seeds.choose(&mut rng).expect("seeds checked").clone();
    for _ in 0..rng.gen_range(1..=4) {
        let m = *mutators.choose(&mut rng).expect("mutators checked");
        m.apply(&mut input, &mut rng, iteration);
    }
    input
}

fn classify(dev: &mut DeviceController, input: &[u8]) -> Outcome {
    let exit = dev.exchange(input);
    match exit.status {
        Status::BudgetExhausted => Outcome::Hang,
        _ => match detect_crash(&exit.uart_bytes) {
            Ok(Some(dump)) => Outcome::Crash(dump),
            Ok(None) if exit.status == Status::Halted => Outcome::Clean,
            _ => Outcome::Fault,
        },
    }
}

pub fn fuzz(
    image: &FirmwareImage,
    seeds: &[Vec<u8>],
    iterations: u64,
    rng_seed: u64,
    mutators: &[Mutator],
) -> Result<FuzzReport, FuzzError> {
    let config = FuzzConfig { iterations, rng_seed, mutators: mutators.to_vec(), ..FuzzConfig::default() };
    fuzz_with(image, seeds, &config)
}

pub fn fuzz_with(image: &FirmwareImage, seeds: &[Vec<u8>], config: &FuzzConfig) -> Result<FuzzReport, FuzzError> {
    if seeds.is_empty() {
        return Err(FuzzError::NoSeeds);
    }
    if config.mutators.is_empty() {
        return Err(FuzzError::NoMutators);
    }
    let workers = config.workers.max(1) as u64;
    let shard = |w: u64| -> Result<Vec<(u64, Vec<u8>, Outcome)>, FuzzError> {
        let mut dev = DeviceController::new(image, config.vm.clone())?;
        let mut out = Vec::new();
        let mut i = w;
        while i < config.iterations {
            let input = mutate_input(seeds, &config.mutators, config.rng_seed, i);
            let outcome = classify(&mut dev, &input);
            out.push((i, input, outcome));
            i += workers;
        }
        Ok(out)
    };
    let mut results = if workers == 1 {
        shard(0)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|w| s.spawn(move || shard(w))).collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("fuzz worker panicked")?);
            }
            Ok::<_, FuzzError>(all)
        })?
    };
    results.sort_by_key(|(i, _, _)| *i);

    let mut report = FuzzReport {
        iterations: config.iterations,
        unique_crashes: Vec::new(),
        resets: config.iterations,
        hangs: 0,
        faults: 0,
        clean: 0,
        rng_seed: config.rng_seed,
    };
    let mut seen = BTreeMap::new();
    for (iteration, input, outcome) in results {
        match outcome {
            Outcome::Clean => report.clean += 1,
            Outcome::Hang => report.hangs += 1,
            Outcome::Fault => report.faults += 1,
            Outcome::Crash(dump) => {
                let key = (dump.fn_name.clone(), dump.pc);
                seen.entry(key).or_insert_with(|| {
                    report.unique_crashes.push(CrashRecord { fn_name: dump.fn_name.clone(), pc: dump.pc, input, dump, iteration });
                });
            }
        }
    }
    Ok(report)
}

/// Re-runs a stored input from reset and returns its dump, if any.
pub fn replay(image: &FirmwareImage, config: &VmConfig, input: &[u8]) -> Result<Option<CrashDump>, FuzzError> {
    let mut dev = DeviceController::new(image, config.clone())?;
    let exit = dev.exchange(input);
    Ok(detect_crash(&exit.uart_bytes).ok().flatten())
}
