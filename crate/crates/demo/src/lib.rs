//! Browser bindings for the linkhook toolkit.
//!
//! Each exported function returns a JSON string; `www/index.html` renders it.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use linkhook::harness::{detect_crash, split_trace, TraceKind};
use linkhook::rewriter::InstrumentationPolicy;
use linkhook::samples::{self, build_sample, instrument_and_link};
use linkhook::stubgen::{build_wrapper_object, generate_runtime, name_literal, STUB_SIZE};
use linkhook::toolchain::{assemble, link, MemoryLayout};
use linkhook::vm::{Status, Vm, VmConfig};

fn status_json(status: &Status) -> Value {
    match status {
        Status::Running => json!({"kind": "running"}),
        Status::Halted => json!({"kind": "halted"}),
        Status::BudgetExhausted => json!({"kind": "budget_exhausted"}),
        Status::UnhandledFault { cause, epc } => json!({"kind": "fault", "cause": cause, "epc": format!("{epc:08x}")}),
    }
}

fn error(e: impl std::fmt::Display) -> String {
    json!({"error": e.to_string()}).to_string()
}

/// Runs the xor service on `input`, plain or instrumented.
pub fn service_run(input: &[u8], instrumented: bool, trace: bool, canary: u32) -> Result<Value, String> {
    let policy = InstrumentationPolicy { trace_enabled: trace, canary, ..Default::default() };
    let build = build_sample("xor_service", &policy, &MemoryLayout::default()).map_err(|e| e.to_string())?;
    let image = if instrumented { &build.instrumented } else { &build.baseline };
    let mut vm = Vm::create(image, VmConfig::default()).map_err(|e| e.to_string())?;
    vm.feed_input(input);
    let exit = vm.run(None);
    let (events, output) = split_trace(&exit.uart_bytes).map_err(|e| e.to_string())?;
    let trace: Vec<String> = events.iter().filter(|e| e.kind != TraceKind::Smash).filter_map(|e| e.format()).collect();
    let dump = detect_crash(&exit.uart_bytes).ok().flatten().map(|d| {
        json!({"function": d.fn_name, "pc": format!("{:08x}", d.pc), "text": d.render(), "longest_run": d.longest_run(samples::XOR_KEY ^ b'a')})
    });
    Ok(json!({
        "status": status_json(&exit.status),
        "cycles": exit.state.cycles,
        "output": String::from_utf8_lossy(&output),
        "output_hex": output.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" "),
        "trace": trace,
        "dump": dump,
    }))
}

/// Where each single-byte variant of `canary` lands in the default layout.
pub fn canary_variants(canary: u32) -> Value {
    let layout = MemoryLayout::default();
    let mut rows = Vec::new();
    let mut executable = 0;
    for v in MemoryLayout::single_byte_variants(canary) {
        let region = layout.region_at(v);
        let exec = region.is_some_and(|r| r.flags.exec);
        executable += exec as u32;
        rows.push(json!({"value": format!("{v:08x}"), "region": region.map(|r| r.name.clone()), "exec": exec}));
    }
    json!({
        "canary": format!("{canary:08x}"),
        "canary_region": layout.region_at(canary).map(|r| r.name.clone()),
        "variants": rows,
        "executable": executable,
        "usable": layout.check_canary(canary).is_ok(),
    })
}

/// Added bytes when `k` leaf functions named `fn_00..` are instrumented,
/// measured by linking and predicted by the model.
pub fn size_model(k: u32, trace: bool) -> Result<Value, String> {
    let k = k.min(64) as usize;
    let layout = MemoryLayout::default();
    let mut src = String::from(".section .text.main, code\n.global main\n.type main, @function\nmain:\n  ret\n");
    for i in 0..k {
        src.push_str(&format!(".section .text.fn_{i:02}, code\n.global fn_{i:02}\n.type fn_{i:02}, @function\nfn_{i:02}:\n  ret\n"));
    }
    let crt0 = assemble(samples::CRT0).map_err(|e| e.to_string())?;
    let app = assemble(&src).map_err(|e| e.to_string())?;
    let base = link(&[crt0.clone(), app.clone()], &layout).map_err(|e| e.to_string())?;
    let policy = InstrumentationPolicy { include_patterns: vec!["fn_*".into()], trace_enabled: trace, ..Default::default() };
    let built = instrument_and_link(&[app], &[crt0], &policy, &layout).map_err(|e| e.to_string())?;
    let runtime = generate_runtime(&policy, &layout).map_err(|e| e.to_string())?;
    let runtime_size = build_wrapper_object(&[], &runtime).map_err(|e| e.to_string())?.content_size();
    let literals: u64 = (0..k).map(|i| name_literal(&format!("fn_{i:02}")).len() as u64).sum();
    Ok(json!({
        "k": k,
        "baseline": base.footprint(),
        "instrumented": built.image.footprint(),
        "added": built.image.footprint() - base.footprint(),
        "stubs": k as u64 * STUB_SIZE as u64,
        "literals": literals,
        "runtime": runtime_size,
    }))
}

/// `input` is text; `hex` switches it to whitespace separated hex bytes.
#[wasm_bindgen]
pub fn run_service(input: &str, hex: bool, instrumented: bool, trace: bool, canary: u32) -> String {
    let bytes = if hex {
        match input.split_whitespace().map(|t| u8::from_str_radix(t, 16)).collect::<Result<Vec<u8>, _>>() {
            Ok(b) => b,
            Err(e) => return error(e),
        }
    } else {
        input.as_bytes().to_vec()
    };
    service_run(&bytes, instrumented, trace, canary).map_or_else(error, |v| v.to_string())
}

#[wasm_bindgen]
pub fn canary_map(canary: u32) -> String {
    canary_variants(canary).to_string()
}

#[wasm_bindgen]
pub fn size_for(k: u32, trace: bool) -> String {
    size_model(k, trace).map_or_else(error, |v| v.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overflow_is_caught() {
        let v: Value = serde_json::from_str(&run_service(&"a".repeat(64), false, true, false, 0xdead_dead)).unwrap();
        assert_eq!(v["dump"]["function"], "shell_tcp_recvcb");
        assert_eq!(v["dump"]["pc"], "23232323");
        let v: Value = serde_json::from_str(&run_service("68 69", true, true, true, 0xdead_dead)).unwrap();
        assert_eq!(v["output_hex"], "2a 2b");
        // main, read_input, shell_tcp_recvcb and ets_memcpy, each in and out.
        assert_eq!(v["trace"].as_array().unwrap().len(), 8);
        assert!(run_service("zz", true, true, false, 0xdead_dead).contains("error"));
    }

    #[test]
    fn default_canary_has_no_executable_variant() {
        let v = canary_variants(0xdead_dead);
        assert_eq!(v["variants"].as_array().unwrap().len(), 1020);
        assert_eq!((v["executable"].as_u64(), v["usable"].as_bool()), (Some(0), Some(true)));
    }

    #[test]
    fn size_model_has_no_residual() {
        for k in [0, 3, 9] {
            let v = size_model(k, false).unwrap();
            let parts = ["stubs", "literals", "runtime"].iter().map(|f| v[f].as_u64().unwrap()).sum::<u64>();
            assert_eq!(v["added"].as_u64().unwrap(), parts, "k={k}");
        }
    }
}
