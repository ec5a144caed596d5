//! Process simulation: services and core processes are driven by small
//! declarative behavior scripts (images) instead of real binaries. A process
//! is a set of threads; each thread executes one image, one action per
//! scheduler step, in strict round-robin order.
//!
//! The action grammar (one action per line in scenario files):
//!
//! ```text
//! connect-pipe
//! register self | register literal <name>
//! open-service self | open-service literal <name>
//! string-api self | string-api literal <name>
//! create <kind> <object-name>
//! open <kind> <object-name>
//! delete <object-name>
//! file-open <drive-path>
//! wait-for <service-name>
//! signal-running
//! sleep <steps>
//! stop
//! ```
//!
//! `<kind>` is one of `port named-pipe mutex section event file`. Object
//! names run to the end of the line and may contain spaces.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::namespace::Handle;
use crate::types::{ObjectKind, ObjectName, Pid, Placement, ServiceName};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("bad action {line:?}: {reason}")]
pub struct ActionParseError {
    pub line: String,
    pub reason: String,
}

/// A service-name argument in a script: the service's own (started-under)
/// name, or a literal baked into the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NameRef {
    SelfName,
    HardCoded(String),
}

impl fmt::Display for NameRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NameRef::SelfName => f.write_str("self"),
            NameRef::HardCoded(s) => write!(f, "literal {s}"),
        }
    }
}

/// One step of an image script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Open the control pipe the manager created for this start.
    ConnectControlPipe,
    RegisterCtrlHandler { name: NameRef },
    OpenService { name: NameRef },
    /// A plain string-formatting use of a service name (no side effects,
    /// but interception still rewrites and traces it).
    StringApiUse { name: NameRef },
    CreateObject { kind: ObjectKind, name: ObjectName },
    OpenObject { kind: ObjectKind, name: ObjectName },
    DeleteObject { name: ObjectName },
    /// Open a file by absolute drive path (always succeeds; exists to make
    /// per-VM path redirection visible in traces).
    FileOpen { path: String },
    /// Block until the named service is Running.
    WaitForService { name: ServiceName },
    SignalRunning,
    Sleep { steps: u32 },
    /// End the thread; a service still starting is marked failed.
    Stop,
}

impl Action {
    pub fn parse(line: &str) -> Result<Action, ActionParseError> {
        let err = |reason: &str| ActionParseError {
            line: line.to_string(),
            reason: reason.to_string(),
        };
        let trimmed = line.trim();
        let (verb, rest) = match trimmed.split_once(' ') {
            Some((v, r)) => (v, r.trim_start()),
            None => (trimmed, ""),
        };
        let name_ref = |rest: &str| -> Result<NameRef, ActionParseError> {
            if rest == "self" {
                Ok(NameRef::SelfName)
            } else if let Some(lit) = rest.strip_prefix("literal ") {
                if lit.is_empty() {
                    Err(err("empty literal"))
                } else {
                    Ok(NameRef::HardCoded(lit.to_string()))
                }
            } else {
                Err(err("expected `self` or `literal <name>`"))
            }
        };
        let object_name = |rest: &str| -> Result<ObjectName, ActionParseError> {
            ObjectName::new(rest).map_err(|e| err(&e.to_string()))
        };
        let kind_and_name = |rest: &str| -> Result<(ObjectKind, ObjectName), ActionParseError> {
            let (kind_tok, name) = rest
                .split_once(' ')
                .ok_or_else(|| err("expected `<kind> <object-name>`"))?;
            let kind = ObjectKind::parse(kind_tok)
                .ok_or_else(|| err(&format!("unknown object kind {kind_tok:?}")))?;
            Ok((kind, object_name(name)?))
        };

        match verb {
            "connect-pipe" if rest.is_empty() => Ok(Action::ConnectControlPipe),
            "register" => Ok(Action::RegisterCtrlHandler { name: name_ref(rest)? }),
            "open-service" => Ok(Action::OpenService { name: name_ref(rest)? }),
            "string-api" => Ok(Action::StringApiUse { name: name_ref(rest)? }),
            "create" => {
                let (kind, name) = kind_and_name(rest)?;
                Ok(Action::CreateObject { kind, name })
            }
            "open" => {
                let (kind, name) = kind_and_name(rest)?;
                Ok(Action::OpenObject { kind, name })
            }
            "delete" => Ok(Action::DeleteObject { name: object_name(rest)? }),
            "file-open" => {
                if rest.is_empty() {
                    Err(err("expected a file path"))
                } else {
                    Ok(Action::FileOpen { path: rest.to_string() })
                }
            }
            "wait-for" => {
                let name = ServiceName::new(rest).map_err(|e| err(&e.to_string()))?;
                Ok(Action::WaitForService { name })
            }
            "signal-running" if rest.is_empty() => Ok(Action::SignalRunning),
            "sleep" => {
                let steps: u32 = rest.parse().map_err(|_| err("expected a step count"))?;
                Ok(Action::Sleep { steps })
            }
            "stop" if rest.is_empty() => Ok(Action::Stop),
            _ => Err(err("unknown action")),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::ConnectControlPipe => f.write_str("connect-pipe"),
            Action::RegisterCtrlHandler { name } => write!(f, "register {name}"),
            Action::OpenService { name } => write!(f, "open-service {name}"),
            Action::StringApiUse { name } => write!(f, "string-api {name}"),
            Action::CreateObject { kind, name } => write!(f, "create {kind} {name}"),
            Action::OpenObject { kind, name } => write!(f, "open {kind} {name}"),
            Action::DeleteObject { name } => write!(f, "delete {name}"),
            Action::FileOpen { path } => write!(f, "file-open {path}"),
            Action::WaitForService { name } => write!(f, "wait-for {name}"),
            Action::SignalRunning => f.write_str("signal-running"),
            Action::Sleep { steps } => write!(f, "sleep {steps}"),
            Action::Stop => f.write_str("stop"),
        }
    }
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// A behavior script standing in for a binary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceImage {
    pub id: String,
    pub script: Vec<Action>,
}

/// Image id used for spawned group-hosting processes.
pub const SVCHOST_IMAGE: &str = "svchost";
/// Image id used for the manager's own process.
pub const SCM_IMAGE: &str = "scm";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("image already registered: {0}")]
    Duplicate(String),
    #[error("unknown image: {0}")]
    Unknown(String),
}

#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    images: BTreeMap<String, ServiceImage>,
}

impl ImageStore {
    /// A store pre-populated with the built-in empty images the kernel
    /// spawns for itself (`scm`, `svchost`).
    pub fn with_builtins() -> ImageStore {
        let mut store = ImageStore::default();
        for id in [SCM_IMAGE, SVCHOST_IMAGE] {
            store
                .register(ServiceImage { id: id.to_string(), script: Vec::new() })
                .unwrap();
        }
        store
    }

    pub fn register(&mut self, image: ServiceImage) -> Result<(), ImageError> {
        let key = image.id.to_lowercase();
        if self.images.contains_key(&key) {
            return Err(ImageError::Duplicate(image.id));
        }
        self.images.insert(key, image);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ServiceImage> {
        self.images.get(&id.to_lowercase())
    }

    pub fn require(&self, id: &str) -> Result<&ServiceImage, ImageError> {
        self.get(id).ok_or_else(|| ImageError::Unknown(id.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Hard-coded name scanning
// ---------------------------------------------------------------------------

/// The two API classes whose service-name arguments get rewritten for VM
/// processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApiClass {
    ServiceApi,
    StringApi,
}

impl ApiClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ApiClass::ServiceApi => "service-api",
            ApiClass::StringApi => "string-api",
        }
    }
}

impl fmt::Display for ApiClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardcodedFinding {
    /// Position in the script.
    pub index: usize,
    pub api_class: ApiClass,
    pub literal: String,
}

/// Lists every script action of the two rewritten API classes whose name
/// argument is a baked-in literal rather than the service's own name.
pub fn scan_image_for_hardcoded_names(image: &ServiceImage) -> Vec<HardcodedFinding> {
    let mut findings = Vec::new();
    for (index, action) in image.script.iter().enumerate() {
        let (api_class, name) = match action {
            Action::RegisterCtrlHandler { name } | Action::OpenService { name } => {
                (ApiClass::ServiceApi, name)
            }
            Action::StringApiUse { name } => (ApiClass::StringApi, name),
            _ => continue,
        };
        if let NameRef::HardCoded(literal) = name {
            findings.push(HardcodedFinding {
                index,
                api_class,
                literal: literal.clone(),
            });
        }
    }
    findings
}

// ---------------------------------------------------------------------------
// Processes and threads
// ---------------------------------------------------------------------------

/// What a process is for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcessRole {
    /// Boot-time host process (never placed in a VM).
    Core,
    /// Shared process hosting one group of dll services.
    SvchostHost { group: String },
    /// A service running its own executable.
    ServiceExe,
}

/// One thread: an image cursor plus the service it hosts, if any.
#[derive(Debug, Clone)]
pub struct Thread {
    pub image: String,
    pub cursor: usize,
    pub service: Option<ServiceName>,
    /// Handles this thread obtained, keyed by the scripted (pre-rename,
    /// case-folded) object name.
    pub handles: BTreeMap<String, Handle>,
    pub sleep_left: Option<u32>,
    pub done: bool,
    /// Done because the script ran out: the thread idles (keeping its
    /// process alive) rather than having terminated.
    pub parked: bool,
}

impl Thread {
    pub fn new(image: String, service: Option<ServiceName>) -> Thread {
        Thread {
            image,
            cursor: 0,
            service,
            handles: BTreeMap::new(),
            sleep_left: None,
            done: false,
            parked: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProcessRecord {
    pub pid: Pid,
    pub image: String,
    pub image_path: String,
    pub params: Vec<String>,
    pub placement: Placement,
    pub role: ProcessRole,
    pub threads: Vec<Thread>,
    pub exited: bool,
}

impl ProcessRecord {
    /// Services hosted by this process's threads, in thread order.
    pub fn hosted_services(&self) -> Vec<ServiceName> {
        self.threads
            .iter()
            .filter_map(|t| t.service.clone())
            .collect()
    }

    /// A process exits when every thread has finished.
    pub fn all_threads_done(&self) -> bool {
        self.threads.iter().all(|t| t.done)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ProcessTable {
    procs: BTreeMap<u32, ProcessRecord>,
    next_pid: u32,
}

impl ProcessTable {
    pub fn new() -> ProcessTable {
        ProcessTable::default()
    }

    /// Allocates the next pid (monotonic from 1) and stores the record.
    pub fn insert_with_pid(&mut self, build: impl FnOnce(Pid) -> ProcessRecord) -> Pid {
        self.next_pid += 1;
        let pid = Pid(self.next_pid);
        self.procs.insert(pid.0, build(pid));
        pid
    }

    pub fn get(&self, pid: Pid) -> Option<&ProcessRecord> {
        self.procs.get(&pid.0)
    }

    pub fn get_mut(&mut self, pid: Pid) -> Option<&mut ProcessRecord> {
        self.procs.get_mut(&pid.0)
    }

    /// The live group-hosting process for a group, if any.
    pub fn find_svchost(&self, group: &str) -> Option<Pid> {
        let want = group.to_lowercase();
        self.procs.values().find_map(|p| match &p.role {
            ProcessRole::SvchostHost { group } if !p.exited && group.to_lowercase() == want => {
                Some(p.pid)
            }
            _ => None,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &ProcessRecord> {
        self.procs.values()
    }

    pub fn len(&self) -> usize {
        self.procs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.procs.is_empty()
    }
}

/// The ready queue: (pid, thread index) in strict round-robin. New threads
/// join at the back; a thread that executes (or blocks) re-queues at the
/// back until it finishes.
#[derive(Debug, Clone, Default)]
pub struct ReadyQueue {
    queue: VecDeque<(Pid, usize)>,
}

impl ReadyQueue {
    pub fn new() -> ReadyQueue {
        ReadyQueue::default()
    }

    pub fn enqueue(&mut self, pid: Pid, thread: usize) {
        self.queue.push_back((pid, thread));
    }

    pub fn pop(&mut self) -> Option<(Pid, usize)> {
        self.queue.pop_front()
    }

    pub fn requeue(&mut self, pid: Pid, thread: usize) {
        self.queue.push_back((pid, thread));
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Pid, usize)> {
        self.queue.iter()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}
