//! Append-only event trace. Every intercepted operation becomes one line:
//!
//! ```text
//! step=<n> pid=<p> vm=<v|host> op=<name> arg=<original> xarg=<transformed> result=<ok|error-code>
//! ```
//!
//! Arguments may contain spaces and backslashes, so the parser anchors on
//! the *last* ` xarg=` / ` result=` markers instead of splitting on spaces.

use std::fmt;

use thiserror::Error;

use crate::types::{Pid, Placement, VmId};

/// Result column value for a successful operation.
pub const RESULT_OK: &str = "ok";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("trace line {line}: {reason}")]
pub struct TraceParseError {
    pub line: usize,
    pub reason: String,
}

/// Operation tags. Object-namespace operations (`create`/`open`/`delete`)
/// are the ones trace diffing aligns on; the rest record service control
/// traffic and lifecycle transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Create,
    Open,
    Delete,
    OpenService,
    RegisterCtrlHandler,
    StringApi,
    FileOpen,
    StartPending,
    StartAborted,
    SignalRunning,
    Wait,
    Sleep,
    Stop,
    StopService,
    VirtA,
    VirtB,
    VirtC,
    VirtD,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::Create => "create",
            Op::Open => "open",
            Op::Delete => "delete",
            Op::OpenService => "open_service",
            Op::RegisterCtrlHandler => "register_ctrl_handler",
            Op::StringApi => "string_api",
            Op::FileOpen => "file_open",
            Op::StartPending => "start_pending",
            Op::StartAborted => "start_aborted",
            Op::SignalRunning => "signal_running",
            Op::Wait => "wait",
            Op::Sleep => "sleep",
            Op::Stop => "stop",
            Op::StopService => "stop_service",
            Op::VirtA => "virt_a",
            Op::VirtB => "virt_b",
            Op::VirtC => "virt_c",
            Op::VirtD => "virt_d",
        }
    }

    pub fn parse(s: &str) -> Option<Op> {
        Some(match s {
            "create" => Op::Create,
            "open" => Op::Open,
            "delete" => Op::Delete,
            "open_service" => Op::OpenService,
            "register_ctrl_handler" => Op::RegisterCtrlHandler,
            "string_api" => Op::StringApi,
            "file_open" => Op::FileOpen,
            "start_pending" => Op::StartPending,
            "start_aborted" => Op::StartAborted,
            "signal_running" => Op::SignalRunning,
            "wait" => Op::Wait,
            "sleep" => Op::Sleep,
            "stop" => Op::Stop,
            "stop_service" => Op::StopService,
            "virt_a" => Op::VirtA,
            "virt_b" => Op::VirtB,
            "virt_c" => Op::VirtC,
            "virt_d" => Op::VirtD,
            _ => return None,
        })
    }

    /// Whether diffing aligns on this op (object-namespace traffic).
    pub fn is_object_op(self) -> bool {
        matches!(self, Op::Create | Op::Open | Op::Delete)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub pid: Pid,
    pub vm: Placement,
    pub op: Op,
    /// Argument as the caller issued it.
    pub arg: String,
    /// Argument after interception (equal to `arg` for host callers).
    pub xarg: String,
    /// `ok` or a short error code.
    pub result: String,
}

impl TraceEvent {
    pub fn ok(&self) -> bool {
        self.result == RESULT_OK
    }

    /// Whether interception changed the argument.
    pub fn renamed(&self) -> bool {
        self.arg != self.xarg
    }

    pub fn format_line(&self) -> String {
        format!(
            "step={} pid={} vm={} op={} arg={} xarg={} result={}",
            self.step, self.pid, self.vm, self.op, self.arg, self.xarg, self.result
        )
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<TraceEvent, TraceParseError> {
        let err = |reason: String| TraceParseError {
            line: line_no,
            reason,
        };

        // Fixed-order prefix fields are space-free; take them token-wise.
        let mut rest = line;
        let mut take = |field: &'static str| -> Result<&str, TraceParseError> {
            let tagged = rest
                .strip_prefix(&format!("{field}="))
                .ok_or_else(|| err(format!("expected `{field}=`")))?;
            let end = tagged.find(' ').ok_or_else(|| err("truncated line".into()))?;
            rest = &tagged[end + 1..];
            Ok(&tagged[..end])
        };

        let step: u64 = take("step")?
            .parse()
            .map_err(|_| err("bad step number".into()))?;
        let pid: u32 = take("pid")?
            .parse()
            .map_err(|_| err("bad pid".into()))?;
        let vm_tok = take("vm")?;
        let vm = if vm_tok == "host" {
            Placement::Host
        } else {
            let id: u32 = vm_tok.parse().map_err(|_| err("bad vm field".into()))?;
            Placement::Vm(VmId::new(id).ok_or_else(|| err("vm id 0 is invalid".into()))?)
        };
        let op_tok = take("op")?;
        let op = Op::parse(op_tok).ok_or_else(|| err(format!("unknown op {op_tok:?}")))?;

        // Arguments may contain spaces; anchor on the rightmost markers.
        let body = rest
            .strip_prefix("arg=")
            .ok_or_else(|| err("expected `arg=`".into()))?;
        let (front, result) = body
            .rsplit_once(" result=")
            .ok_or_else(|| err("expected `result=`".into()))?;
        let (arg, xarg) = front
            .rsplit_once(" xarg=")
            .ok_or_else(|| err("expected `xarg=`".into()))?;
        if result.is_empty() || result.contains(' ') {
            return Err(err("bad result field".into()));
        }

        Ok(TraceEvent {
            step,
            pid: Pid(pid),
            vm,
            op,
            arg: arg.to_string(),
            xarg: xarg.to_string(),
            result: result.to_string(),
        })
    }
}

/// The whole trace of a run.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Trace {
        Trace::default()
    }

    pub fn push(&mut self, ev: TraceEvent) {
        self.events.push(ev);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Full log, one line per event, newline-terminated.
    pub fn to_log_string(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&ev.format_line());
            out.push('\n');
        }
        out
    }

    /// Parses a full log. Reports the first unparseable line by number.
    pub fn parse_log(text: &str) -> Result<Trace, TraceParseError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            events.push(TraceEvent::parse_line(line, i + 1)?);
        }
        Ok(Trace { events })
    }
}
