use std::collections::BTreeMap;
use std::path::Path;

use linkhook::cli::{self, EXIT_LINK, EXIT_OK, EXIT_PARSE, EXIT_REWRITE, EXIT_SMASH, EXIT_USAGE};
use linkhook::object::{emit_archive, parse_archive, parse_object, ArchiveUnit};
use linkhook::samples::{self, CRT0, RECVCB_VULNERABLE, XOR_SERVICE};
use linkhook::toolchain::assemble;

struct Outcome {
    code: i32,
    out: String,
    err: String,
}

fn cli_env(args: &[&str], env: &[(&str, &str)]) -> Outcome {
    let args: Vec<String> = std::iter::once("linkhook").chain(args.iter().copied()).map(String::from).collect();
    let env: BTreeMap<String, String> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(&args, &env, &mut out, &mut err);
    Outcome { code, out: String::from_utf8_lossy(&out).into_owned(), err: String::from_utf8_lossy(&err).into_owned() }
}

fn cli(args: &[&str]) -> Outcome {
    cli_env(args, &[])
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Assembles the xor service into `dir`, returning (crt0.o, app.o, recv.o).
fn assemble_service(dir: &Path) -> [std::path::PathBuf; 3] {
    let mut out = Vec::new();
    for (name, src) in [("crt0", CRT0), ("xor_service", XOR_SERVICE), ("recv", RECVCB_VULNERABLE)] {
        let s = dir.join(format!("{name}.s"));
        let o = dir.join(format!("{name}.o"));
        std::fs::write(&s, src).unwrap();
        let r = cli(&["assemble", p(&s), "-o", p(&o)]);
        assert_eq!(r.code, EXIT_OK, "{}", r.err);
        out.push(o);
    }
    out.try_into().unwrap()
}

#[test]
fn instrument_link_run_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let [crt0, app, recv] = assemble_service(dir.path());
    let hr = dir.path().join("hr");
    for obj in [&app, &recv] {
        let r = cli(&["instrument", p(obj), "-o", p(&hr)]);
        assert_eq!(r.code, EXIT_OK, "{}", r.err);
    }
    // The second run overwrote wrapper.o; only recv's functions are wrapped.
    let plan = std::fs::read_to_string(hr.join("plan.txt")).unwrap();
    assert!(plan.contains("rename shell_tcp_recvcb -> hr_shell_tcp_recvcb"), "{plan}");
    let image = dir.path().join("fw.bin");
    let r = cli(&["link", p(&crt0), p(&app), p(&hr.join("recv.hr.o")), p(&hr.join("wrapper.o")), "-o", p(&image)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(dir.path().join("fw.map").exists());

    let input = dir.path().join("in.bin");
    std::fs::write(&input, b"hi").unwrap();
    let r = cli(&["run", p(&image), "--input", p(&input)]);
    assert_eq!((r.code, r.out.as_bytes()), (EXIT_OK, &[b'h' ^ 0x42, b'i' ^ 0x42][..]));

    std::fs::write(&input, [b'a'; 64]).unwrap();
    let r = cli(&["run", p(&image), "--input", p(&input)]);
    assert_eq!(r.code, EXIT_SMASH);
    assert!(r.out.contains("*** STACK SMASH DETECTED***"));
    assert!(r.err.contains("shell_tcp_recvcb"));
}

#[test]
fn env_canary_reaches_the_runtime_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.bin");
    std::fs::write(&input, [b'a'; 64]).unwrap();
    for (env, flag, want) in [
        (vec![("HR_CANARY", "0xabababab")], None, "canary=abababab"),
        (vec![("HR_CANARY", "0xabababab")], Some("0xdeadbeef"), "canary=deadbeef"),
        (vec![], None, "canary=deaddead"),
    ] {
        let out = dir.path().join(want);
        let mut args = vec!["build-sample", "xor_service", "-o", p(&out)];
        if let Some(f) = flag {
            args.extend(["--canary", f]);
        }
        let r = cli_env(&args, &env);
        assert_eq!(r.code, EXIT_OK, "{}", r.err);
        let r = cli(&["run", p(&out.join("xor_service.bin")), "--input", p(&input)]);
        assert_eq!(r.code, EXIT_SMASH);
        assert!(r.out.contains(want), "{want}: {}", r.out);
    }
}

#[test]
fn trace_flag_separates_events() {
    let dir = tempfile::tempdir().unwrap();
    let r = cli_env(&["build-sample", "nested", "-o", p(dir.path())], &[("HR_TRACE", "1")]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let r = cli(&["run", p(&dir.path().join("nested.bin")), "--trace"]);
    assert_eq!((r.code, r.out.as_str()), (EXIT_OK, "fgh\n"));
    assert_eq!(r.err.lines().filter(|l| l.starts_with("(0x")).count(), 4, "{}", r.err);
    assert_eq!(r.err.lines().filter(|l| l.starts_with("ret (0x")).count(), 4);
}

#[test]
fn archive_instrument_and_size_report() {
    let dir = tempfile::tempdir().unwrap();
    let program = samples::sample("xor_service").unwrap();
    let members = samples::assemble_sample(&program).unwrap();
    let archive = ArchiveUnit { members: vec![("service.o".into(), members[1].clone()), ("recv.o".into(), members[2].clone())] };
    let lib = dir.path().join("libsvc.a");
    std::fs::write(&lib, emit_archive(&archive).unwrap()).unwrap();
    let r = cli(&["instrument", p(&lib), "-o", p(dir.path()), "--exclude", "ets_*,read_input"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let out = parse_archive(&std::fs::read(dir.path().join("libsvc.hr.a")).unwrap()).unwrap();
    assert_eq!(out.members.len(), 2);
    let plan = std::fs::read_to_string(dir.path().join("plan.txt")).unwrap();
    assert!(plan.contains("skip service.o:ets_memcpy (excluded by pattern)"), "{plan}");

    let r = cli(&["size-report", p(&lib), p(&dir.path().join("libsvc.hr.a")), p(&dir.path().join("wrapper.o"))]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.lines().any(|l| l.starts_with("recv.o")), "{}", r.out);
    assert!(r.out.contains("(runtime)"));
    let r = cli(&["size-report", p(&lib), p(&dir.path().join("libsvc.hr.a")), p(&dir.path().join("wrapper.o")), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    assert_eq!(v["members"].as_array().unwrap().len(), 2);

    // Linking the instrumented archive still works.
    let crt0 = dir.path().join("crt0.o");
    std::fs::write(&crt0, linkhook::object::emit_object(&assemble(CRT0).unwrap()).unwrap()).unwrap();
    let image = dir.path().join("fw.bin");
    let r = cli(&["link", p(&crt0), p(&dir.path().join("libsvc.hr.a")), p(&dir.path().join("wrapper.o")), "-o", p(&image)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
}

#[test]
fn fuzz_writes_reports_and_corpus() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["build-sample", "xor_service", "-o", p(dir.path())]).code, EXIT_OK);
    let seed = dir.path().join("hello.bin");
    std::fs::write(&seed, samples::SEED_HELLO).unwrap();
    let corpus = dir.path().join("crashes");
    let json = dir.path().join("report.json");
    let fw = dir.path().join("xor_service.bin");
    let args = ["fuzz", p(&fw), "--seed", p(&seed), "--iterations", "300", "--json", p(&json), "--corpus", p(&corpus)];
    let r = cli(&args);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("iterations 300"));
    let report: linkhook::harness::FuzzReport = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(!report.unique_crashes.is_empty());
    let c = &report.unique_crashes[0];
    let stem = corpus.join(c.file_stem());
    assert_eq!(std::fs::read(stem.with_extension("input")).unwrap(), c.input);
    assert_eq!(std::fs::read_to_string(stem.with_extension("dump")).unwrap(), c.dump.render());

    let r = cli(&["fuzz", p(&dir.path().join("xor_service.bin")), "--seed", p(&seed), "--mutators", "bogus"]);
    assert_eq!(r.code, EXIT_USAGE);
}

#[test]
fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(cli(&["run", "/nonexistent/fw.bin"]).code, cli::EXIT_IO);

    let junk = dir.path().join("junk.o");
    std::fs::write(&junk, b"not an object").unwrap();
    assert_eq!(cli(&["instrument", p(&junk), "-o", p(dir.path())]).code, EXIT_PARSE);

    let bad = dir.path().join("bad.s");
    std::fs::write(&bad, "frob a1\n").unwrap();
    let r = cli(&["assemble", p(&bad), "-o", p(&junk)]);
    assert_eq!(r.code, EXIT_PARSE);

    // hr_f already exists, so renaming f would collide.
    let clash = dir.path().join("clash.s");
    std::fs::write(&clash, ".text\n.global f\n.type f, @function\nf:\n  ret\n.global hr_f\nhr_f:\n  ret\n").unwrap();
    let o = dir.path().join("clash.o");
    assert_eq!(cli(&["assemble", p(&clash), "-o", p(&o)]).code, EXIT_OK);
    let r = cli(&["instrument", p(&o), "-o", p(dir.path())]);
    assert_eq!(r.code, EXIT_REWRITE, "{}", r.err);
    assert_eq!(cli_env(&["instrument", p(&o), "-o", p(dir.path())], &[("HR_CANARY", "zz")]).code, EXIT_USAGE);

    let undefined = dir.path().join("u.s");
    std::fs::write(&undefined, ".text\n.global _start\n_start:\n  call0 missing\n").unwrap();
    let o = dir.path().join("u.o");
    assert_eq!(cli(&["assemble", p(&undefined), "-o", p(&o)]).code, EXIT_OK);
    assert!(parse_object(&std::fs::read(&o).unwrap()).is_ok());
    let r = cli(&["link", p(&o), "-o", p(&dir.path().join("u.bin"))]);
    assert_eq!(r.code, EXIT_LINK, "{}", r.err);

    let spin = dir.path().join("spin.s");
    std::fs::write(&spin, ".text\n.global _start\n_start:\n  j _start\n").unwrap();
    let o = dir.path().join("spin.o");
    assert_eq!(cli(&["assemble", p(&spin), "-o", p(&o)]).code, EXIT_OK);
    let bin = dir.path().join("spin.bin");
    assert_eq!(cli(&["link", p(&o), "-o", p(&bin)]).code, EXIT_OK);
    let r = cli(&["run", p(&bin), "--budget", "1000"]);
    assert_eq!(r.code, cli::EXIT_RUNTIME);
    assert!(r.err.contains("BudgetExhausted"), "{}", r.err);
}

#[test]
fn layout_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let mut layout = linkhook::toolchain::MemoryLayout::default();
    let path = dir.path().join("layout.toml");
    std::fs::write(&path, layout.to_toml()).unwrap();
    let r = cli(&["build-sample", "nested", "-o", p(dir.path()), "--layout", p(&path)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    // A canary inside the code region is refused.
    let code = layout.region(&layout.code_region).unwrap().base;
    layout.return_stack_size = layout.return_stack_size.max(12);
    std::fs::write(&path, layout.to_toml()).unwrap();
    let r = cli(&["build-sample", "nested", "-o", p(dir.path()), "--layout", p(&path), "--canary", &format!("{code:#x}")]);
    assert_ne!(r.code, EXIT_OK);
    std::fs::write(&path, "regions = 3").unwrap();
    assert_eq!(cli(&["build-sample", "nested", "-o", p(dir.path()), "--layout", p(&path)]).code, EXIT_PARSE);
}
