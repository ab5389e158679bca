//! Command-line front end.
//!
//! Policy settings come from flags, then `HR_*` environment variables, then
//! defaults: `HR_PREFIX`, `HR_CANARY`, `HR_INCLUDE` and `HR_EXCLUDE` (comma
//! separated globs), `HR_MASTER`, `HR_TRACE` (`1`/`true`/`yes`).
//!
//! Exit codes: 0 success, 1 I/O, 2 usage, 3 parse, 4 rewrite, 5 link,
//! 6 stack smash detected, 7 other runtime failure (fault without dump,
//! hang).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::harness::{self, detect_crash, fuzz::FuzzConfig, size_report, split_trace, Mutator};
use crate::object::{emit_archive, emit_object, parse_archive, parse_object, ArchiveUnit, ObjectUnit};
use crate::rewriter::{apply_call_path_instrumentation, instrument_archive, InstrumentationPolicy, RewritePlan};
use crate::samples::{build_sample, SampleError};
use crate::stubgen::{build_wrapper_object, generate_runtime, generate_stub};
use crate::toolchain::image::{read_image, write_blob, write_map};
use crate::toolchain::{assemble, link, FirmwareImage, MemoryLayout};
use crate::vm::{Status, Vm, VmConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_REWRITE: i32 = 4;
pub const EXIT_LINK: i32 = 5;
pub const EXIT_SMASH: i32 = 6;
pub const EXIT_RUNTIME: i32 = 7;

#[derive(Debug, Parser)]
#[command(name = "linkhook", version, about = "Link-time call/return instrumentation toolkit")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct PolicyArgs {
    #[arg(long)]
    prefix: Option<String>,
    /// 32-bit canary, decimal or 0x-prefixed hex.
    #[arg(long)]
    canary: Option<String>,
    /// Comma separated globs of functions to instrument.
    #[arg(long)]
    include: Option<String>,
    #[arg(long)]
    exclude: Option<String>,
    /// Function whose stub installs the handler.
    #[arg(long)]
    master: Option<String>,
    #[arg(long, conflicts_with = "no_trace")]
    trace: bool,
    #[arg(long)]
    no_trace: bool,
    /// Memory layout TOML; the built-in layout otherwise.
    #[arg(long)]
    layout: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rewrite an object (.o) or archive (.a) and generate its wrapper.
    Instrument {
        input: PathBuf,
        #[arg(short, long, default_value = ".")]
        out_dir: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Assemble a source file into an object.
    Assemble {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Link objects and archives into an image (`.bin` plus `.map`).
    Link {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Run an image until it halts.
    Run {
        image: PathBuf,
        /// Symbol map; defaults to the image path with a `.map` extension.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Print parsed trace events to stderr and strip them from stdout.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Fuzz an image through its input channel.
    Fuzz {
        image: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        /// Seed input files.
        #[arg(long = "seed", required = true)]
        seeds: Vec<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        iterations: u64,
        #[arg(long, default_value_t = 1)]
        rng_seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Comma separated subset of byte-flip, byte-set, truncate,
        /// extend-repeat, length-sweep.
        #[arg(long)]
        mutators: Option<String>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Directory for crash inputs and dumps.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Compare an archive before and after instrumentation.
    SizeReport {
        original: PathBuf,
        instrumented: PathBuf,
        wrapper: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Build a shipped sample, plain and instrumented.
    BuildSample {
        name: String,
        #[arg(short, long, default_value = ".")]
        out_dir: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
    },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn fail(code: i32, message: impl std::fmt::Display) -> Failure {
    Failure { code, message: message.to_string() }
}

type Outcome = Result<i32, Failure>;

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

fn parse_u32(text: &str) -> Option<u32> {
    let text = text.trim();
    match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16).ok(),
        None => text.parse().ok(),
    }
}

fn split_list(text: &str) -> Vec<String> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn load_layout(path: Option<&Path>) -> Result<MemoryLayout, Failure> {
    match path {
        None => Ok(MemoryLayout::default()),
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|_| fail(EXIT_PARSE, format!("{}: not utf-8", p.display())))?;
            MemoryLayout::from_toml(&text).map_err(|e| fail(EXIT_PARSE, format!("{}: {e}", p.display())))
        }
    }
}

fn resolve_policy(args: &PolicyArgs, env: &BTreeMap<String, String>) -> Result<InstrumentationPolicy, Failure> {
    let pick = |flag: &Option<String>, var: &str| flag.clone().or_else(|| env.get(var).cloned());
    let mut policy = InstrumentationPolicy::default();
    if let Some(p) = pick(&args.prefix, "HR_PREFIX") {
        policy.prefix = p;
    }
    if let Some(c) = pick(&args.canary, "HR_CANARY") {
        policy.canary = parse_u32(&c).ok_or_else(|| fail(EXIT_USAGE, format!("bad canary {c:?}")))?;
    }
    if let Some(i) = pick(&args.include, "HR_INCLUDE") {
        policy.include_patterns = split_list(&i);
    }
    if let Some(e) = pick(&args.exclude, "HR_EXCLUDE") {
        policy.exclude_patterns = split_list(&e);
    }
    policy.master_function = pick(&args.master, "HR_MASTER").filter(|m| !m.is_empty());
    policy.trace_enabled = if args.trace {
        true
    } else if args.no_trace {
        false
    } else {
        env.get("HR_TRACE").is_some_and(|v| matches!(v.to_ascii_lowercase().as_str(), "1" | "true" | "yes" | "on"))
    };
    policy.validate().map_err(|e| fail(EXIT_USAGE, e))?;
    Ok(policy)
}

fn load_image(path: &Path, map: Option<&Path>) -> Result<FirmwareImage, Failure> {
    let blob = read(path)?;
    let map_path = map.map(Path::to_path_buf).unwrap_or_else(|| path.with_extension("map"));
    let map = String::from_utf8(read(&map_path)?).map_err(|_| fail(EXIT_PARSE, "map is not utf-8"))?;
    read_image(&blob, &map).map_err(|e| fail(EXIT_PARSE, format!("{}: {e}", map_path.display())))
}

fn save_image(path: &Path, image: &FirmwareImage) -> Result<(), Failure> {
    write(path, write_blob(image))?;
    write(&path.with_extension("map"), write_map(image))
}

fn is_archive(bytes: &[u8]) -> bool {
    bytes.starts_with(b"!<arch>\n")
}

fn load_units(path: &Path) -> Result<Vec<ObjectUnit>, Failure> {
    let bytes = read(path)?;
    let parse = |e: &dyn std::fmt::Display| fail(EXIT_PARSE, format!("{}: {e}", path.display()));
    if is_archive(&bytes) {
        Ok(parse_archive(&bytes).map_err(|e| parse(&e))?.members.into_iter().map(|(_, u)| u).collect())
    } else {
        Ok(vec![parse_object(&bytes).map_err(|e| parse(&e))?])
    }
}

fn wrapper_for(plan: &RewritePlan, policy: &InstrumentationPolicy, layout: &MemoryLayout) -> Result<ObjectUnit, Failure> {
    let stubs = plan
        .targets()
        .iter()
        .map(|n| generate_stub(n, policy))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| fail(EXIT_REWRITE, e))?;
    let runtime = generate_runtime(policy, layout).map_err(|e| fail(EXIT_REWRITE, e))?;
    build_wrapper_object(&stubs, &runtime).map_err(|e| fail(EXIT_REWRITE, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "out".to_string(), |s| s.to_string_lossy().into_owned())
}

fn instrument(input: &Path, out_dir: &Path, policy: &InstrumentationPolicy, layout: &MemoryLayout, err: &mut dyn Write, verbose: bool) -> Outcome {
    let bytes = read(input)?;
    std::fs::create_dir_all(out_dir).map_err(|e| fail(EXIT_IO, e))?;
    let parse = |e: &dyn std::fmt::Display| fail(EXIT_PARSE, format!("{}: {e}", input.display()));
    let plan = if is_archive(&bytes) {
        let archive: ArchiveUnit = parse_archive(&bytes).map_err(|e| parse(&e))?;
        let (out, plan) = instrument_archive(&archive, policy).map_err(|e| fail(EXIT_REWRITE, e))?;
        let emitted = emit_archive(&out).map_err(|e| fail(EXIT_REWRITE, e))?;
        write(&out_dir.join(format!("{}.hr.a", stem(input))), emitted)?;
        plan
    } else {
        let unit = parse_object(&bytes).map_err(|e| parse(&e))?;
        let (out, plan) = apply_call_path_instrumentation(&unit, policy).map_err(|e| fail(EXIT_REWRITE, e))?;
        let emitted = emit_object(&out).map_err(|e| fail(EXIT_REWRITE, e))?;
        write(&out_dir.join(format!("{}.hr.o", stem(input))), emitted)?;
        plan
    };
    let wrapper = wrapper_for(&plan, policy, layout)?;
    write(&out_dir.join("wrapper.o"), emit_object(&wrapper).map_err(|e| fail(EXIT_REWRITE, e))?)?;
    write(&out_dir.join("plan.txt"), plan.render())?;
    if verbose {
        writeln!(err, "instrumented {} functions", plan.targets().len()).ok();
    }
    Ok(EXIT_OK)
}

fn run_image(
    image: &FirmwareImage,
    config: VmConfig,
    input: &[u8],
    trace: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let mut vm = Vm::create(image, config).map_err(|e| fail(EXIT_RUNTIME, e))?;
    vm.feed_input(input);
    let exit = vm.run(None);
    let shown = if trace {
        let (events, rest) = split_trace(&exit.uart_bytes).map_err(|e| fail(EXIT_PARSE, e))?;
        for e in events.iter().filter_map(|e| e.format()) {
            writeln!(err, "{e}").ok();
        }
        rest
    } else {
        exit.uart_bytes.clone()
    };
    out.write_all(&shown).map_err(|e| fail(EXIT_IO, e))?;
    match detect_crash(&exit.uart_bytes) {
        Ok(Some(dump)) => {
            writeln!(err, "stack smash in {} at pc={:08x}", dump.fn_name, dump.pc).ok();
            return Ok(EXIT_SMASH);
        }
        Err(e) => {
            writeln!(err, "{e}").ok();
            return Ok(EXIT_SMASH);
        }
        Ok(None) => {}
    }
    match exit.status {
        Status::Halted => Ok(EXIT_OK),
        other => {
            writeln!(err, "stopped: {other:?} after {} cycles", exit.state.cycles).ok();
            Ok(EXIT_RUNTIME)
        }
    }
}

fn dispatch(cli: Cli, env: &BTreeMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let verbose = cli.verbose;
    match cli.command {
        Command::Instrument { input, out_dir, policy } => {
            let layout = load_layout(policy.layout.as_deref())?;
            let policy = resolve_policy(&policy, env)?;
            instrument(&input, &out_dir, &policy, &layout, err, verbose)
        }
        Command::Assemble { input, output } => {
            let text = String::from_utf8(read(&input)?).map_err(|_| fail(EXIT_PARSE, "source is not utf-8"))?;
            let unit = assemble(&text).map_err(|e| fail(EXIT_PARSE, format!("{}:{e}", input.display())))?;
            write(&output, emit_object(&unit).map_err(|e| fail(EXIT_PARSE, e))?)?;
            Ok(EXIT_OK)
        }
        Command::Link { inputs, output, layout } => {
            let layout = load_layout(layout.as_deref())?;
            let mut units = Vec::new();
            for path in &inputs {
                units.extend(load_units(path)?);
            }
            let image = link(&units, &layout).map_err(|e| fail(EXIT_LINK, e))?;
            save_image(&output, &image)?;
            if verbose {
                writeln!(err, "entry {:#010x}, {} bytes", image.entry, image.footprint()).ok();
            }
            Ok(EXIT_OK)
        }
        Command::Run { image, map, input, trace, budget, layout } => {
            let layout = load_layout(layout.as_deref())?;
            let image = load_image(&image, map.as_deref())?;
            let input = input.map(|p| read(&p)).transpose()?.unwrap_or_default();
            let mut config = VmConfig { layout, ..VmConfig::default() };
            if let Some(b) = budget {
                config.cycle_budget = b.max(1);
            }
            run_image(&image, config, &input, trace, out, err)
        }
        Command::Fuzz { image, map, seeds, iterations, rng_seed, workers, mutators, budget, report, json, corpus, layout } => {
            let layout = load_layout(layout.as_deref())?;
            let image = load_image(&image, map.as_deref())?;
            let seeds = seeds.iter().map(|p| read(p)).collect::<Result<Vec<_>, _>>()?;
            let mutators = match mutators {
                None => Mutator::ALL.to_vec(),
                Some(list) => split_list(&list)
                    .iter()
                    .map(|m| Mutator::parse(m).ok_or_else(|| fail(EXIT_USAGE, format!("unknown mutator {m}"))))
                    .collect::<Result<_, _>>()?,
            };
            let mut vm = VmConfig { layout, ..VmConfig::default() };
            if let Some(b) = budget {
                vm.cycle_budget = b.max(1);
            }
            let config = FuzzConfig { iterations, rng_seed, mutators, workers, vm };
            let result = harness::fuzz_with(&image, &seeds, &config).map_err(|e| fail(EXIT_USAGE, e))?;
            let text = result.to_text();
            out.write_all(text.as_bytes()).map_err(|e| fail(EXIT_IO, e))?;
            if let Some(p) = report {
                write(&p, &text)?;
            }
            if let Some(p) = json {
                write(&p, result.to_json())?;
            }
            if let Some(dir) = corpus {
                result.write_corpus(&dir).map_err(|e| fail(EXIT_IO, e))?;
            }
            Ok(EXIT_OK)
        }
        Command::SizeReport { original, instrumented, wrapper, json } => {
            let archive = |p: &Path| -> Result<ArchiveUnit, Failure> {
                parse_archive(&read(p)?).map_err(|e| fail(EXIT_PARSE, format!("{}: {e}", p.display())))
            };
            let original = archive(&original)?;
            let instrumented = archive(&instrumented)?;
            let wrapper = parse_object(&read(&wrapper)?).map_err(|e| fail(EXIT_PARSE, e))?;
            let report = size_report(&original, &instrumented, &wrapper).map_err(|e| fail(EXIT_USAGE, e))?;
            let text = if json { report.to_json() + "\n" } else { report.to_text() };
            out.write_all(text.as_bytes()).map_err(|e| fail(EXIT_IO, e))?;
            Ok(EXIT_OK)
        }
        Command::BuildSample { name, out_dir, policy } => {
            let layout = load_layout(policy.layout.as_deref())?;
            let policy = resolve_policy(&policy, env)?;
            let build = build_sample(&name, &policy, &layout).map_err(|e| match e {
                SampleError::Unknown(_) => fail(EXIT_USAGE, e),
                SampleError::Asm { .. } => fail(EXIT_PARSE, e),
                SampleError::Rewrite(_) | SampleError::Stub(_) => fail(EXIT_REWRITE, e),
                SampleError::Link(_) => fail(EXIT_LINK, e),
            })?;
            std::fs::create_dir_all(&out_dir).map_err(|e| fail(EXIT_IO, e))?;
            save_image(&out_dir.join(format!("{name}.bin")), &build.instrumented)?;
            save_image(&out_dir.join(format!("{name}.base.bin")), &build.baseline)?;
            write(&out_dir.join(format!("{name}.plan.txt")), build.detail.plan.render())?;
            Ok(EXIT_OK)
        }
    }
}

/// Runs the CLI on `args` (including the program name).
pub fn run(args: &[String], env: &BTreeMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            write!(target, "{}", e.render()).ok();
            return code;
        }
    };
    match dispatch(cli, env, out, err) {
        Ok(code) => code,
        Err(f) => {
            writeln!(err, "error: {}", f.message).ok();
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flags_override_env() {
        let e = env(&[("HR_CANARY", "0xabababab"), ("HR_PREFIX", "zz_"), ("HR_TRACE", "1"), ("HR_EXCLUDE", "a*, b*")]);
        let p = resolve_policy(&PolicyArgs::default(), &e).unwrap();
        assert_eq!((p.canary, p.prefix.as_str(), p.trace_enabled), (0xabab_abab, "zz_", true));
        assert_eq!(p.exclude_patterns, ["a*", "b*"]);
        let args = PolicyArgs { canary: Some("0xdeadbeef".into()), no_trace: true, ..Default::default() };
        let p = resolve_policy(&args, &e).unwrap();
        assert_eq!((p.canary, p.trace_enabled), (0xdead_beef, false));
    }

    #[test]
    fn unknown_flag_is_usage() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let args: Vec<String> = ["linkhook", "run", "--bogus"].iter().map(|s| s.to_string()).collect();
        assert_eq!(run(&args, &BTreeMap::new(), &mut out, &mut err), EXIT_USAGE);
        let args: Vec<String> = ["linkhook", "--help"].iter().map(|s| s.to_string()).collect();
        assert_eq!(run(&args, &BTreeMap::new(), &mut out, &mut err), EXIT_OK);
    }
}
