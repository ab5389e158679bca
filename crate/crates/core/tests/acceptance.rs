//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion fails. Runs without the libtest
//! harness so the lines are never captured.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use linkhook::harness::{self, check_nesting, detect_crash, size_report, split_trace, FuzzConfig, TraceKind};
use linkhook::object::{emit_archive, emit_object, parse_archive, parse_object, ArchiveUnit, Binding, ObjectUnit, SymbolType};
use linkhook::rewriter::{apply_call_path_instrumentation, instrument_archive, InstrumentationPolicy, DEFAULT_CANARY};
use linkhook::samples::{self, build_sample, instrument_and_link, RECV_HANDLER};
use linkhook::stubgen::{self, build_wrapper_object, generate_runtime, STUB_SECTION_PREFIX, STUB_SIZE};
use linkhook::toolchain::{assemble, link, FirmwareImage, MemoryLayout};
use linkhook::vm::{LogEvent, Status, Vm, VmConfig, CAUSE_ILLEGAL};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn run(image: &FirmwareImage, input: &[u8]) -> linkhook::vm::ExitStatus {
    let mut vm = Vm::create(image, VmConfig::default()).unwrap();
    vm.feed_input(input);
    vm.run(None)
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {took:?}, limit {limit:?}"));
    }
    Ok(())
}

fn smash_detection() -> Check {
    let start = Instant::now();
    let build = build_sample("xor_service", &InstrumentationPolicy::default(), &MemoryLayout::default()).unwrap();
    let exit = run(&build.instrumented, &[b'a'; 64]);
    let text = String::from_utf8_lossy(&exit.uart_bytes).into_owned();
    for needle in ["*** STACK SMASH DETECTED***", &format!("returning from function {RECV_HANDLER}"), "canary=deaddead", "a0=(unk)"] {
        ensure!(text.contains(needle), "uart lacks {needle:?}");
    }
    let dump = detect_crash(&exit.uart_bytes).map_err(|e| e.to_string())?.ok_or("no dump parsed")?;
    ensure!(dump.stack_bytes.len() == 384, "stack window is {} bytes", dump.stack_bytes.len());
    // 'a' ^ 0x42
    let run = dump.longest_run(b'a' ^ 0x42);
    ensure!(run >= 32, "longest 0x23 run is {run}");
    within(start, Duration::from_secs(5))?;
    Ok(format!("pc={:08x}, run of 0x23 = {run} bytes, {:?}", dump.pc, start.elapsed()))
}

fn transparency() -> Check {
    let layout = MemoryLayout::default();
    let traced = InstrumentationPolicy { trace_enabled: true, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut agree = 0;
    for (policy, label) in [(InstrumentationPolicy::default(), "plain"), (traced, "traced")] {
        let build = build_sample("xor_service", &policy, &layout).unwrap();
        for case in 0..1000 {
            let len = rng.gen_range(0..=20);
            let input: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let base = run(&build.baseline, &input);
            let inst = run(&build.instrumented, &input);
            let (_, output) = split_trace(&inst.uart_bytes).map_err(|e| format!("{label} case {case}: {e}"))?;
            ensure!(output == base.uart_bytes, "{label} case {case}: output differs for {input:02x?}");
            ensure!(inst.status == base.status, "{label} case {case}: {:?} vs {:?}", inst.status, base.status);
            agree += 1;
        }
    }
    Ok(format!("{agree}/2000 identical (1000 plain, 1000 traced)"))
}

/// Functions the rewriter must pick under the default policy, worked out
/// from the symbol table alone.
fn expected_targets(unit: &ObjectUnit, prefix: &str) -> BTreeSet<String> {
    unit.symbols
        .iter()
        .filter(|s| s.defined && s.binding == Binding::Global && s.sym_type == SymbolType::Func && !s.name.starts_with(prefix))
        .map(|s| s.name.clone())
        .collect()
}

type RelocKey = (String, u32, u8, i32);

fn reloc_multiset(unit: &ObjectUnit, with_name: bool) -> BTreeMap<(RelocKey, String), usize> {
    let mut out = BTreeMap::new();
    for r in &unit.relocations {
        let name = if with_name { unit.symbols[r.symbol_index].name.clone() } else { String::new() };
        *out.entry(((unit.sections[r.target_section].name.clone(), r.offset, r.kind.to_elf(), r.addend), name)).or_insert(0) += 1;
    }
    out
}

fn rewrite_soundness() -> Check {
    let policy = InstrumentationPolicy::default();
    let mut targets_seen = 0;
    let mut objects = 0;
    // Wrapper objects are rewriter output, not input.
    for (name, unit) in common::fixture_objects().into_iter().filter(|(n, _)| !n.starts_with("wrapper")) {
        let (out, plan) = apply_call_path_instrumentation(&unit, &policy).map_err(|e| format!("{name}: {e}"))?;
        // Scan the emitted bytes, not the in-memory unit.
        let out = parse_object(&emit_object(&out).unwrap()).map_err(|e| format!("{name}: {e}"))?;
        let expected = expected_targets(&unit, &policy.prefix);
        let planned: BTreeSet<String> = plan.targets().into_iter().collect();
        ensure!(planned == expected, "{name}: planned {planned:?}, expected {expected:?}");
        for x in &expected {
            let renamed = format!("{}{x}", policy.prefix);
            let defs = out.symbols.iter().filter(|s| s.name == renamed && s.defined).count();
            let imports = out.symbols.iter().filter(|s| s.name == *x && !s.defined).count();
            let others = out.symbols.iter().filter(|s| s.name == *x && s.defined).count();
            ensure!(defs == 1 && imports == 1 && others == 0, "{name}: {x} has {defs} defs of {renamed}, {imports} imports, {others} defs");
            let refs = out.relocations.iter().filter(|r| out.symbols[r.symbol_index].name == renamed).count();
            ensure!(refs == 0, "{name}: {refs} relocations still reference {renamed}");
        }
        ensure!(reloc_multiset(&unit, false) == reloc_multiset(&out, false), "{name}: relocation multiset changed");
        ensure!(reloc_multiset(&unit, true) == reloc_multiset(&out, true), "{name}: a relocation changed its symbol name");
        targets_seen += expected.len();
        objects += 1;
    }
    Ok(format!("{objects} objects, {targets_seen} targets"))
}

fn link_routing() -> Check {
    let layout = MemoryLayout::default();
    let mut routed = 0;
    for name in samples::SAMPLE_NAMES {
        let build = build_sample(name, &InstrumentationPolicy::default(), &layout).unwrap();
        let targets = build.detail.plan.targets();
        let base_addr: BTreeMap<u32, &str> = targets.iter().map(|t| (build.baseline.symbol(t).unwrap(), t.as_str())).collect();
        let mut inst_units = vec![build.objects[0].clone()];
        inst_units.extend(build.detail.rewritten.iter().cloned());
        inst_units.push(build.detail.wrapper.clone());
        let before = common::disassemble_sites(&build.baseline, &build.objects);
        let after: BTreeMap<(usize, usize, u32), u32> =
            common::disassemble_sites(&build.instrumented, &inst_units).into_iter().map(|s| ((s.unit, s.section, s.offset), s.target)).collect();
        let stub_range = |x: &str| {
            build
                .instrumented
                .sections
                .iter()
                .find(|s| s.name == format!("{STUB_SECTION_PREFIX}{x}"))
                .map(|s| (s.base, s.base + s.size))
        };
        let mut sites = 0;
        for site in before {
            let Some(x) = base_addr.get(&site.target) else { continue };
            let now = after.get(&(site.unit, site.section, site.offset)).ok_or(format!("{name}: site {site:?} vanished"))?;
            let (lo, hi) = stub_range(x).ok_or(format!("{name}: no stub section for {x}"))?;
            ensure!(*now == lo, "{name}: site {site:?} for {x} resolves to {now:#x}, stub at {lo:#x}..{hi:#x}");
            sites += 1;
        }
        ensure!(sites > 0, "{name}: no call sites to instrumented functions");
        routed += sites;
    }
    Ok(format!("{routed}/{routed} former call sites resolve to stubs"))
}

fn canary_perturbation() -> Check {
    let start = Instant::now();
    let layout = MemoryLayout::default();
    let build = build_sample("canary_probe", &InstrumentationPolicy::default(), &layout).unwrap();
    let exec: Vec<(u64, u64)> =
        layout.regions.iter().filter(|r| r.flags.exec).map(|r| (r.base as u64, r.base as u64 + r.size as u64)).collect();
    let mut vm = Vm::create(&build.instrumented, VmConfig::default()).unwrap();
    vm.enable_log();
    let mut variants = 0;
    for byte in 0..4 {
        for value in 0..=255u32 {
            let shift = 8 * byte;
            if value == (DEFAULT_CANARY >> shift) & 0xff {
                continue;
            }
            let v = (DEFAULT_CANARY & !(0xff << shift)) | (value << shift);
            ensure!(!exec.iter().any(|&(lo, hi)| (lo..hi).contains(&(v as u64))), "{v:#010x} is executable");
            vm.pull_reset();
            vm.feed_input(&v.to_le_bytes());
            let exit = vm.run(None);
            let since_reset = vm.log().iter().rposition(|e| *e == LogEvent::Reset).map_or(0, |i| i + 1);
            let first = vm.log()[since_reset..].iter().find_map(|e| match e {
                LogEvent::Fault { cause, epc, .. } => Some((*cause, *epc)),
                _ => None,
            });
            ensure!(first == Some((CAUSE_ILLEGAL, v)), "{v:#010x}: first fault {first:?}");
            let dump = detect_crash(&exit.uart_bytes).map_err(|e| e.to_string())?.ok_or(format!("{v:#010x}: no dump"))?;
            ensure!(dump.pc == v && dump.canary == DEFAULT_CANARY && dump.fn_name == "victim", "{v:#010x}: dump {} pc={:08x}", dump.fn_name, dump.pc);
            variants += 1;
        }
    }
    ensure!(variants == 1020, "{variants} variants");
    within(start, Duration::from_secs(10))?;
    Ok(format!("{variants}/1020 variants fault with cause 0 and dump, {:?}", start.elapsed()))
}

/// Largest `n` for which the recursion sample prints `n + 1`.
fn measured_depth(image: &FirmwareImage) -> u32 {
    (0..=255u8).take_while(|&n| run(image, &[n]).uart_bytes == [n.wrapping_add(1)]).count() as u32 - 1
}

fn return_stack_discipline() -> Check {
    let layout = MemoryLayout::default();
    let traced = InstrumentationPolicy { trace_enabled: true, ..Default::default() };
    let build = build_sample("nested", &traced, &layout).unwrap();
    let exit = run(&build.instrumented, b"");
    let (events, output) = split_trace(&exit.uart_bytes).map_err(|e| e.to_string())?;
    ensure!(output == b"fgh\n", "nested output {output:?}");
    ensure!(!events.iter().any(|e| e.kind == TraceKind::Smash), "unexpected smash");
    let mut depth = 0i32;
    let mut max_depth = 0;
    let mut tops = vec![layout.return_stack_base];
    for e in &events {
        let delta = e.return_stack_top as i64 - *tops.last().unwrap() as i64;
        let want = if e.kind == TraceKind::Call { 12 } else { -12 };
        ensure!(delta == want, "{} {:?}: delta {delta}", e.fn_name, e.kind);
        depth += want.signum() as i32;
        max_depth = max_depth.max(depth);
        tops.push(e.return_stack_top);
    }
    check_nesting(&events)?;
    ensure!(depth == 0 && max_depth >= 3, "depth ends at {depth}, peaks at {max_depth}");

    let build = build_sample("recursion", &InstrumentationPolicy::default(), &layout).unwrap();
    let d = measured_depth(&build.baseline);
    let d_inst = measured_depth(&build.instrumented);
    let frame = samples::RECURSION_FRAME;
    let stack = samples::RECURSION_STACK;
    // Each level costs one frame either way; the instrumented build also
    // needs room below sp for the handler's scratch frame on the way out.
    let documented = stack / frame - (stack - stubgen::HANDLER_REACH) / frame;
    ensure!(d == stack / frame, "uninstrumented depth {d}");
    ensure!(d - d_inst == documented, "D-D' = {} - {} = {}, documented {documented}", d, d_inst, d - d_inst);
    Ok(format!("{} events, max depth {max_depth}; D={d} D'={d_inst} loss {documented}", events.len()))
}

fn size_model() -> Check {
    let layout = MemoryLayout::default();
    let mut src = String::from(".section .text.main, code\n.global main\n.type main, @function\nmain:\n  addi a1, a1, -16\n  s32i.n a0, a1, 0\n");
    for i in 0..16 {
        src.push_str(&format!("  call0 fn_{i:02}\n"));
    }
    src.push_str("  l32i.n a0, a1, 0\n  addi a1, a1, 16\n  ret\n");
    for i in 0..16 {
        // Name lengths vary so literal padding differs between functions.
        let body = "  nop\n".repeat(i % 3);
        src.push_str(&format!(".section .text.fn_{i:02}, code\n.global fn_{i:02}\n.type fn_{i:02}, @function\nfn_{i:02}:\n{body}  ret\n"));
    }
    let crt0 = assemble(samples::CRT0).unwrap();
    let app = assemble(&src).unwrap();
    let baseline = link(&[crt0.clone(), app.clone()], &layout).unwrap();
    let policy = InstrumentationPolicy::default();
    let runtime = generate_runtime(&policy, &layout).unwrap();
    let runtime_size = build_wrapper_object(&[], &runtime).unwrap().content_size();
    let mut lines = Vec::new();
    for k in [1usize, 2, 4, 8, 16] {
        let names: Vec<String> = (0..k).map(|i| format!("fn_{i:02}")).collect();
        let policy = InstrumentationPolicy { include_patterns: names.clone(), ..Default::default() };
        let built = instrument_and_link(std::slice::from_ref(&app), std::slice::from_ref(&crt0), &policy, &layout).map_err(|e| e.to_string())?;
        let literals: u64 = names.iter().map(|n| (n.len() as u64 + 1).div_ceil(4) * 4).sum();
        let model = k as u64 * STUB_SIZE as u64 + literals + runtime_size;
        let added = built.image.footprint() - baseline.footprint();
        ensure!(added == model, "k={k}: added {added}, model {model}, residual {}", added as i64 - model as i64);
        lines.push(format!("k={k}:{added}"));
    }

    let objects = samples::assemble_sample(&samples::sample("xor_service").unwrap()).unwrap();
    let archive = ArchiveUnit { members: objects.iter().enumerate().map(|(i, u)| (format!("m{i}.o"), u.clone())).collect() };
    let none = InstrumentationPolicy { exclude_patterns: vec!["*".into()], ..Default::default() };
    let (out, plan) = instrument_archive(&archive, &none).map_err(|e| e.to_string())?;
    let wrapper = build_wrapper_object(&[], &generate_runtime(&none, &layout).unwrap()).unwrap();
    let report = size_report(&archive, &out, &wrapper).map_err(|e| e.to_string())?;
    ensure!(plan.targets().is_empty(), "excluded archive still has targets");
    for m in &report.members {
        ensure!(m.percent() == "0.00", "{} reports {}%", m.name, m.percent());
    }
    Ok(format!("runtime {runtime_size} B, stub {STUB_SIZE} B, {}; excluded archive all 0.00%", lines.join(" ")))
}

fn fuzzing() -> Check {
    let start = Instant::now();
    let layout = MemoryLayout::default();
    let policy = InstrumentationPolicy::default();
    let vulnerable = build_sample("xor_service", &policy, &layout).unwrap().instrumented;
    let safe = build_sample("xor_service_safe", &policy, &layout).unwrap().instrumented;
    let seeds = vec![b"hello".to_vec()];
    let config = FuzzConfig { iterations: 5000, rng_seed: 1, ..Default::default() };
    let report = harness::fuzz_with(&vulnerable, &seeds, &config).map_err(|e| e.to_string())?;
    let single = start.elapsed();
    ensure!(single < Duration::from_secs(60), "single worker took {single:?}");
    ensure!(
        report.unique_crashes.iter().any(|c| c.fn_name == RECV_HANDLER),
        "no crash keyed to {RECV_HANDLER}: {:?}",
        report.unique_crashes.iter().map(|c| &c.fn_name).collect::<Vec<_>>()
    );
    let first = report.unique_crashes.iter().map(|c| c.iteration).min().unwrap();
    let safe_report = harness::fuzz_with(&safe, &seeds, &config).map_err(|e| e.to_string())?;
    ensure!(safe_report.unique_crashes.is_empty(), "safe variant crashed {} times", safe_report.unique_crashes.len());
    for workers in [2, 4] {
        let parallel = harness::fuzz_with(&vulnerable, &seeds, &FuzzConfig { workers, ..config.clone() }).map_err(|e| e.to_string())?;
        ensure!(parallel == report, "{workers} workers changed the report");
    }
    let again = harness::fuzz_with(&vulnerable, &seeds, &config).map_err(|e| e.to_string())?;
    ensure!(again == report, "report is not deterministic");
    Ok(format!("{} unique crash(es), first at iteration {first}; safe variant 0; single worker {single:?}", report.unique_crashes.len()))
}

fn round_trip_and_robustness() -> Check {
    let start = Instant::now();
    let objects = common::fixture_objects();
    for (name, unit) in &objects {
        let bytes = emit_object(unit).map_err(|e| format!("{name}: {e}"))?;
        let back = parse_object(&bytes).map_err(|e| format!("{name}: {e}"))?;
        ensure!(back == unit.normalized(), "{name}: parse(emit(u)) differs from u");
    }
    let archives = common::fixture_archives();
    for a in &archives {
        let back = parse_archive(&emit_archive(a).unwrap()).map_err(|e| e.to_string())?;
        ensure!(back.members.len() == a.members.len(), "archive member count changed");
        for ((n1, u1), (n2, u2)) in a.members.iter().zip(&back.members) {
            ensure!(n1 == n2 && u1.normalized() == *u2, "archive member {n1} differs");
        }
    }

    // Half of the inputs are pure noise, half are valid files with a few
    // bytes damaged, so parsing gets past the magic checks.
    let valid: Vec<Vec<u8>> = objects
        .iter()
        .map(|(_, u)| emit_object(u).unwrap())
        .chain(archives.iter().map(|a| emit_archive(a).unwrap()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut errors = 0u32;
    for i in 0..100_000u32 {
        let bytes = if i % 2 == 0 {
            let len = rng.gen_range(0..256);
            (0..len).map(|_| rng.gen()).collect()
        } else {
            let mut b = valid[rng.gen_range(0..valid.len())].clone();
            for _ in 0..rng.gen_range(1..=4) {
                let at = rng.gen_range(0..b.len());
                b[at] = rng.gen();
            }
            if rng.gen_bool(0.2) {
                b.truncate(rng.gen_range(0..b.len()));
            }
            b
        };
        errors += parse_object(&bytes).is_err() as u32;
        errors += parse_archive(&bytes).is_err() as u32;
    }

    let layout = MemoryLayout::default();
    let code_base = layout.region(&layout.code_region).unwrap().base;
    let config = VmConfig { cycle_budget: 64, ..Default::default() };
    let mut statuses: BTreeMap<String, u32> = BTreeMap::new();
    for i in 0..100_000u32 {
        let len = rng.gen_range(1..96);
        let code: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let image = FirmwareImage {
            segments: vec![linkhook::toolchain::Segment { base: code_base, bytes: code }],
            entry: code_base,
            symbol_map: BTreeMap::new(),
            sections: Vec::new(),
        };
        let mut vm = Vm::create(&image, config.clone()).map_err(|e| format!("program {i}: {e}"))?;
        vm.feed_input(&i.to_le_bytes());
        let status = vm.run(None).status;
        let key = match status {
            Status::Halted => "halted",
            Status::UnhandledFault { .. } => "fault",
            Status::BudgetExhausted => "budget",
            Status::Running => return Err(format!("program {i} still running")),
        };
        *statuses.entry(key.into()).or_insert(0) += 1;
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} objects and {} archives round-trip; {errors} parse errors over 200000 parses; vm {statuses:?}; {:?}",
        objects.len(),
        archives.len(),
        start.elapsed()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("smash-detection", smash_detection),
        ("transparency", transparency),
        ("rewrite-soundness", rewrite_soundness),
        ("link-routing", link_routing),
        ("canary-perturbation", canary_perturbation),
        ("return-stack-discipline", return_stack_discipline),
        ("size-model", size_model),
        ("fuzzing", fuzzing),
        ("round-trip-robustness", round_trip_and_robustness),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL {} {name}: {why}", i + 1);
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
