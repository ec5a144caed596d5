//! Property tests for the trace log format: formatting and parsing are
//! exact inverses over realistic event content, whole logs round-trip, and
//! parse errors carry line numbers.

use proptest::prelude::*;

use svcvirt_core::trace::{Op, Trace, TraceEvent};
use svcvirt_core::types::{Pid, Placement, VmId};

const ALL_OPS: [Op; 18] = [
    Op::Create,
    Op::Open,
    Op::Delete,
    Op::OpenService,
    Op::RegisterCtrlHandler,
    Op::StringApi,
    Op::FileOpen,
    Op::StartPending,
    Op::StartAborted,
    Op::SignalRunning,
    Op::Wait,
    Op::Sleep,
    Op::Stop,
    Op::StopService,
    Op::VirtA,
    Op::VirtB,
    Op::VirtC,
    Op::VirtD,
];

/// Argument content as the simulator produces it: object paths, service
/// names, file paths — spaces and backslashes included.
fn arg_strategy() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 _.:\\\\{}-]{1,40}".prop_filter(
        "field markers cannot appear inside argument fields",
        |s| !s.contains(" xarg=") && !s.contains(" result="),
    )
}

fn event_strategy() -> impl Strategy<Value = TraceEvent> {
    (
        proptest::num::u64::ANY,
        proptest::num::u32::ANY,
        prop_oneof![Just(None), (1u32..=99).prop_map(Some)],
        0..ALL_OPS.len(),
        arg_strategy(),
        arg_strategy(),
        prop_oneof![
            Just("ok".to_string()),
            "[a-z][a-z-]{1,20}".prop_filter("no trailing dash", |s| !s.ends_with('-')),
        ],
    )
        .prop_map(|(step, pid, vm, op_idx, arg, xarg, result)| TraceEvent {
            step,
            pid: Pid(pid),
            vm: match vm {
                None => Placement::Host,
                Some(id) => Placement::Vm(VmId::new(id).unwrap()),
            },
            op: ALL_OPS[op_idx],
            arg,
            xarg,
            result,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn single_lines_round_trip(ev in event_strategy()) {
        let line = ev.format_line();
        let back = TraceEvent::parse_line(&line, 1).unwrap();
        prop_assert_eq!(back, ev);
    }

    #[test]
    fn whole_logs_round_trip(events in proptest::collection::vec(event_strategy(), 0..20)) {
        let mut trace = Trace::new();
        for ev in &events {
            trace.push(ev.clone());
        }
        let text = trace.to_log_string();
        let back = Trace::parse_log(&text).unwrap();
        prop_assert_eq!(back.events(), trace.events());
        // Formatting the reparsed log reproduces the text byte for byte.
        prop_assert_eq!(back.to_log_string(), text);
    }

    #[test]
    fn corrupt_lines_report_their_number(
        events in proptest::collection::vec(event_strategy(), 1..6),
        garbage in "[a-z ]{1,20}".prop_filter("blank lines are skipped, not errors", |s| {
            !s.trim().is_empty()
        }),
    ) {
        let mut text = String::new();
        for ev in &events {
            text.push_str(&ev.format_line());
            text.push('\n');
        }
        text.push_str(&garbage);
        text.push('\n');
        let err = Trace::parse_log(&text).unwrap_err();
        prop_assert_eq!(err.line, events.len() + 1);
    }
}

/// The parser anchors on the *last* ` xarg=` and ` result=` markers, so an
/// original argument containing marker-lookalike text still round-trips as
/// long as the transformed argument is marker-free.
#[test]
fn marker_lookalikes_inside_the_original_argument_survive() {
    let ev = TraceEvent {
        step: 3,
        pid: Pid(8),
        vm: Placement::Host,
        op: Op::Open,
        arg: r"\Odd\name xarg=trap result=trap".to_string(),
        xarg: r"\Odd\plain".to_string(),
        result: "ok".to_string(),
    };
    let back = TraceEvent::parse_line(&ev.format_line(), 1).unwrap();
    assert_eq!(back, ev);
}
