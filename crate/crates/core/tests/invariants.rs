use std::collections::BTreeSet;

use proptest::prelude::*;

use linkhook::harness::{parse_trace_line, percent_hundredths, split_trace, TraceEvent, TraceKind};
use linkhook::object::{emit_object, parse_object};
use linkhook::rewriter::{apply_call_path_instrumentation, InstrumentationPolicy};
use linkhook::samples::build_sample;
use linkhook::stubgen::ReturnStackEntry;
use linkhook::toolchain::{assemble, print_object, MemoryLayout};
use linkhook::vm::{Vm, VmConfig};

/// Source for `n` functions; function `i` calls each callee listed in
/// `calls[i]` and takes the address of the ones in `refs[i]`.
fn program(calls: &[Vec<usize>], refs: &[Vec<usize>], weak: &[bool]) -> String {
    let n = calls.len();
    let mut src = String::new();
    for i in 0..n {
        src.push_str(&format!(".section .text.f{i}, code\n"));
        src.push_str(if weak[i] { ".weak" } else { ".global" });
        src.push_str(&format!(" f{i}\n.type f{i}, @function\nf{i}:\n  addi a1, a1, -16\n  s32i.n a0, a1, 0\n"));
        for &c in &calls[i] {
            src.push_str(&format!("  call0 f{}\n", c % n));
        }
        for &r in &refs[i] {
            src.push_str(&format!("  l32r a2, =f{}\n", r % n));
        }
        src.push_str("  l32i.n a0, a1, 0\n  addi a1, a1, 16\n  ret\n");
    }
    src.push_str(".section .data.ptrs\nptrs:\n");
    for i in 0..n {
        src.push_str(&format!("  .word f{i}\n"));
    }
    src
}

fn program_strategy() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<bool>)> {
    (1usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(0usize..8, 0..4), n),
            prop::collection::vec(prop::collection::vec(0usize..8, 0..2), n),
            prop::collection::vec(prop::bool::weighted(0.2), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rewrite_renames_only_and_keeps_relocations((calls, refs, weak) in program_strategy(), exclude in prop::collection::vec(0usize..8, 0..3)) {
        let unit = assemble(&program(&calls, &refs, &weak)).unwrap();
        let policy = InstrumentationPolicy { exclude_patterns: exclude.iter().map(|e| format!("f{e}")).collect(), ..Default::default() };
        let (out, plan) = apply_call_path_instrumentation(&unit, &policy).unwrap();
        let targets: BTreeSet<String> = plan.targets().into_iter().collect();
        let expected: BTreeSet<String> = (0..calls.len())
            .filter(|i| !weak[*i] && !exclude.contains(i))
            .map(|i| format!("f{i}"))
            .collect();
        prop_assert_eq!(&targets, &expected);
        prop_assert_eq!(out.sections.clone(), unit.sections.clone());
        prop_assert_eq!(out.relocations.len(), unit.relocations.len());
        for (a, b) in unit.relocations.iter().zip(&out.relocations) {
            prop_assert_eq!((a.target_section, a.offset, a.kind, a.addend), (b.target_section, b.offset, b.kind, b.addend));
            prop_assert_eq!(&unit.symbols[a.symbol_index].name, &out.symbols[b.symbol_index].name);
        }
        let back = parse_object(&emit_object(&out).unwrap()).unwrap();
        prop_assert_eq!(back, out.normalized());
    }

    #[test]
    fn printed_source_reassembles((calls, refs, weak) in program_strategy()) {
        let unit = assemble(&program(&calls, &refs, &weak)).unwrap();
        let again = assemble(&print_object(&unit)).unwrap();
        prop_assert_eq!(again.normalized(), unit.normalized());
    }

    #[test]
    fn trace_lines_round_trip(
        call in any::<bool>(),
        top in any::<u32>(),
        a0 in any::<u32>(),
        a15 in any::<u32>(),
        sp in any::<u32>(),
        name in "[A-Za-z_][A-Za-z0-9_.$]{0,40}",
        noise in "[a-z ]{0,20}",
    ) {
        let kind = if call { TraceKind::Call } else { TraceKind::Return };
        let event = TraceEvent { kind, fn_name: name, return_stack_top: top, a0, a15, sp };
        let line = event.format().unwrap();
        prop_assert_eq!(parse_trace_line(&line).unwrap(), event.clone());
        let uart = format!("{noise}{line}\n{noise}");
        let (events, rest) = split_trace(uart.as_bytes()).unwrap();
        prop_assert_eq!(events, vec![event]);
        prop_assert_eq!(rest, format!("{noise}{noise}").into_bytes());
    }

    #[test]
    fn percent_matches_rational_rounding(original in 1u64..1_000_000, instrumented in 0u64..2_000_000) {
        // Exact rational oracle: round half away from zero on 10000*d/o.
        let d = instrumented as i128 - original as i128;
        let scaled = 10000 * d.abs();
        let o = original as i128;
        let (q, r) = (scaled / o, scaled % o);
        let magnitude = if 2 * r >= o { q + 1 } else { q };
        let want = if d < 0 { -magnitude } else { magnitude };
        prop_assert_eq!(percent_hundredths(original, instrumented) as i128, want);
    }

    #[test]
    fn entries_round_trip(return_address in any::<u32>(), name_ref in any::<u32>(), saved_scratch in any::<u32>()) {
        let e = ReturnStackEntry { return_address, name_ref, saved_scratch };
        prop_assert_eq!(ReturnStackEntry::from_bytes(&e.to_bytes()), e);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Any input up to the overflow threshold echoes the same way with and
    /// without instrumentation, and sp ends at the same place.
    #[test]
    fn instrumentation_is_transparent_below_threshold(input in prop::collection::vec(any::<u8>(), 0..=24), trace in any::<bool>()) {
        let policy = InstrumentationPolicy { trace_enabled: trace, ..Default::default() };
        let build = build_sample("xor_service", &policy, &MemoryLayout::default()).unwrap();
        let exec = |image| {
            let mut vm = Vm::create(image, VmConfig::default()).unwrap();
            vm.feed_input(&input);
            let exit = vm.run(None);
            (exit.status, split_trace(&exit.uart_bytes).unwrap().1, exit.state.regs[1])
        };
        let base = exec(&build.baseline);
        let inst = exec(&build.instrumented);
        prop_assert_eq!(&inst, &base);
        let want: Vec<u8> = input.iter().map(|b| b ^ 0x42).collect();
        prop_assert_eq!(base.1, want);
    }
}
