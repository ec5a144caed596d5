//! Service control manager: the service database, its registry image, start
//! ordering, and the control-handler bookkeeping services go through while
//! starting.
//!
//! The in-memory database is a snapshot: it reflects the registry as of the
//! last [`Scm::load_database`], and later registry edits become visible only
//! through [`Scm::create_service`], which writes both places.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;

use thiserror::Error;

use crate::registry::{Registry, RegistryError, RegistryPath, ValuePayload};
use crate::types::{ObjectName, Pid, Placement, ServiceName};

/// Registry key holding one subkey per service.
pub const SERVICES_KEY: &str = r"HKLM\SYSTEM\CurrentControlSet\Services";
/// Registry key holding one value per svchost group (a list of member
/// service names).
pub const SVCHOST_KEY: &str = r"HKLM\SOFTWARE\Microsoft\WindowsNT\CurrentVersion\SvcHost";

pub fn services_path() -> RegistryPath {
    RegistryPath::parse(SERVICES_KEY).unwrap()
}

pub fn svchost_path() -> RegistryPath {
    RegistryPath::parse(SVCHOST_KEY).unwrap()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScmError {
    #[error("unknown service: {0}")]
    UnknownService(String),
    #[error("service already exists: {0}")]
    ServiceExists(String),
    #[error("malformed service record {key}: {reason}")]
    MalformedRecord { key: String, reason: String },
    #[error("service {of} depends on unknown service {missing}")]
    UnknownDependency { of: String, missing: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    DependencyCycle(Vec<String>),
    #[error("access to service {0} refused: running in a different placement")]
    AccessRefused(String),
    #[error("control handler claims unknown or non-starting service name {claimed:?}")]
    NameMismatch { claimed: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

impl ScmError {
    /// Short code used in trace lines.
    pub fn code(&self) -> &'static str {
        match self {
            ScmError::UnknownService(_) => "unknown-service",
            ScmError::ServiceExists(_) => "service-exists",
            ScmError::MalformedRecord { .. } => "malformed-record",
            ScmError::UnknownDependency { .. } => "unknown-dependency",
            ScmError::DependencyCycle(_) => "dependency-cycle",
            ScmError::AccessRefused(_) => "access-refused",
            ScmError::NameMismatch { .. } => "name-mismatch",
            ScmError::Registry(_) => "registry-error",
        }
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartType {
    Auto,
    Manual,
}

/// How a service is hosted: its own executable, or a DLL loaded into a
/// shared group-hosting process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceKind {
    ExeHosted {
        /// Behavior-script id standing in for the binary.
        image: String,
        /// Executable path; placement-relevant (workspace remapping).
        image_path: String,
        params: Vec<String>,
    },
    DllHosted {
        /// Hosting group; the group process is spawned with `-k <group>`.
        group: String,
        image: String,
        /// DLL path.
        image_path: String,
    },
}

impl ServiceKind {
    pub fn kind_tag(&self) -> &'static str {
        match self {
            ServiceKind::ExeHosted { .. } => "exe",
            ServiceKind::DllHosted { .. } => "dll",
        }
    }

    pub fn image(&self) -> &str {
        match self {
            ServiceKind::ExeHosted { image, .. } | ServiceKind::DllHosted { image, .. } => image,
        }
    }

    pub fn image_path(&self) -> &str {
        match self {
            ServiceKind::ExeHosted { image_path, .. }
            | ServiceKind::DllHosted { image_path, .. } => image_path,
        }
    }

    pub fn group(&self) -> Option<&str> {
        match self {
            ServiceKind::ExeHosted { .. } => None,
            ServiceKind::DllHosted { group, .. } => Some(group),
        }
    }
}

/// One service database entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRecord {
    pub name: ServiceName,
    pub kind: ServiceKind,
    pub start_type: StartType,
    pub depends_on_services: Vec<ServiceName>,
    pub depends_on_groups: Vec<String>,
    /// Host for originals; the tagged VM for virtualized clones.
    pub owner_vm: Placement,
}

/// Why a service ended up Failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureReason {
    /// A same-named service was reachable in another placement, or the
    /// control handler claimed a name that is not starting here.
    NameConflict,
    /// The control-pipe handshake missed (typically a renamed pipe name).
    ControlPipe,
    /// A dependency failed while this start was pending.
    Dependency(ServiceName),
    /// Any other failed action during startup, by error code.
    Other(String),
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::NameConflict => f.write_str("name-conflict"),
            FailureReason::ControlPipe => f.write_str("control-pipe"),
            FailureReason::Dependency(name) => write!(f, "dependency:{name}"),
            FailureReason::Other(code) => f.write_str(code),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceStatus {
    Registered,
    StartPending,
    Running,
    Stopped,
    Failed(FailureReason),
}

impl ServiceStatus {
    pub fn is_running(&self) -> bool {
        matches!(self, ServiceStatus::Running)
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, ServiceStatus::Failed(_))
    }
}

impl fmt::Display for ServiceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServiceStatus::Registered => f.write_str("registered"),
            ServiceStatus::StartPending => f.write_str("start-pending"),
            ServiceStatus::Running => f.write_str("running"),
            ServiceStatus::Stopped => f.write_str("stopped"),
            ServiceStatus::Failed(reason) => write!(f, "failed({reason})"),
        }
    }
}

/// Mutable per-service state alongside the record.
#[derive(Debug, Clone)]
pub struct ServiceRuntime {
    pub status: ServiceStatus,
    /// Whether a process/thread has been launched for the current start.
    pub launched: bool,
    pub pipe: Option<ObjectName>,
    pub pipe_connected: bool,
    pub handler_registered: bool,
    /// Hosting (pid, thread index) once launched.
    pub host: Option<(Pid, usize)>,
}

impl ServiceRuntime {
    fn fresh() -> ServiceRuntime {
        ServiceRuntime {
            status: ServiceStatus::Registered,
            launched: false,
            pipe: None,
            pipe_connected: false,
            handler_registered: false,
            host: None,
        }
    }

    /// Clears per-start state (used when a stopped service starts again).
    pub fn reset_for_start(&mut self) {
        self.launched = false;
        self.pipe = None;
        self.pipe_connected = false;
        self.handler_registered = false;
        self.host = None;
    }
}

/// Opaque handle returned by a successful service open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceHandle(pub u64);

// ---------------------------------------------------------------------------
// The manager
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Scm {
    /// Lowercased name -> record.
    db: BTreeMap<String, ServiceRecord>,
    runtime: BTreeMap<String, ServiceRuntime>,
    next_pipe: u32,
    next_handle: u64,
}

impl Scm {
    pub fn new() -> Scm {
        Scm::default()
    }

    pub fn record(&self, name: &ServiceName) -> Option<&ServiceRecord> {
        self.db.get(&name.key())
    }

    pub fn record_by_str(&self, name: &str) -> Option<&ServiceRecord> {
        self.db.get(&name.to_lowercase())
    }

    pub fn runtime(&self, name: &ServiceName) -> Option<&ServiceRuntime> {
        self.runtime.get(&name.key())
    }

    pub fn runtime_mut(&mut self, name: &ServiceName) -> Option<&mut ServiceRuntime> {
        self.runtime.get_mut(&name.key())
    }

    pub fn status(&self, name: &ServiceName) -> Option<&ServiceStatus> {
        self.runtime(name).map(|r| &r.status)
    }

    pub fn services(&self) -> impl Iterator<Item = &ServiceRecord> {
        self.db.values()
    }

    pub fn len(&self) -> usize {
        self.db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.db.is_empty()
    }

    pub fn contains(&self, name: &ServiceName) -> bool {
        self.db.contains_key(&name.key())
    }

    /// Auto-start services in case-insensitive name order.
    pub fn auto_start_names(&self) -> Vec<ServiceName> {
        self.db
            .values()
            .filter(|r| r.start_type == StartType::Auto)
            .map(|r| r.name.clone())
            .collect()
    }

    /// Allocates the next host-global control pipe name
    /// (`\Device\NamedPipe\net\NtControlPipe<n>`, n from 1).
    pub fn next_control_pipe(&mut self) -> ObjectName {
        self.next_pipe += 1;
        ObjectName::new(format!(r"\Device\NamedPipe\net\NtControlPipe{}", self.next_pipe)).unwrap()
    }

    // -- loading and creation ------------------------------------------------

    /// Replaces the database with the registry's current service content.
    /// Returns how many services were loaded.
    pub fn load_database(&mut self, registry: &Registry) -> Result<usize, ScmError> {
        let mut db = BTreeMap::new();
        let mut runtime = BTreeMap::new();
        let root = services_path();
        for subkey in registry.subkeys(&root) {
            let record = read_record(registry, &subkey)?;
            let key = record.name.key();
            db.insert(key.clone(), record);
            runtime.insert(key, ServiceRuntime::fresh());
        }
        self.db = db;
        self.runtime = runtime;
        Ok(self.db.len())
    }

    /// Registers a new service in both the database and the registry. The
    /// registry key may already exist (e.g. copied ahead of time); its
    /// schema values are (over)written from the record.
    pub fn create_service(
        &mut self,
        registry: &mut Registry,
        record: ServiceRecord,
    ) -> Result<(), ScmError> {
        validate_record(&record)?;
        let key = record.name.key();
        if self.db.contains_key(&key) {
            return Err(ScmError::ServiceExists(record.name.to_string()));
        }
        write_record(registry, &record)?;
        self.db.insert(key.clone(), record);
        self.runtime.insert(key, ServiceRuntime::fresh());
        Ok(())
    }

    /// Updates the stored image path of a service (database and registry).
    pub fn update_image_path(
        &mut self,
        registry: &mut Registry,
        name: &ServiceName,
        new_path: &str,
    ) -> Result<(), ScmError> {
        let record = self
            .db
            .get_mut(&name.key())
            .ok_or_else(|| ScmError::UnknownService(name.to_string()))?;
        match &mut record.kind {
            ServiceKind::ExeHosted { image_path, .. }
            | ServiceKind::DllHosted { image_path, .. } => {
                *image_path = new_path.to_string();
            }
        }
        let keypath = services_path().join(record.name.as_str());
        let handle = registry.create_key(&keypath);
        registry.set_value(handle, "ImagePath", ValuePayload::Str(new_path.to_string()))?;
        Ok(())
    }

    // -- start ordering ------------------------------------------------------

    /// Every database service whose group equals `group` (case-insensitive),
    /// in name order.
    pub fn group_members(&self, group: &str) -> Vec<ServiceName> {
        let want = group.to_lowercase();
        self.db
            .values()
            .filter(|r| r.kind.group().is_some_and(|g| g.to_lowercase() == want))
            .map(|r| r.name.clone())
            .collect()
    }

    /// Direct dependencies of a record: declared services plus every member
    /// of each declared group, in deterministic order.
    pub fn effective_deps(&self, record: &ServiceRecord) -> Result<Vec<ServiceName>, ScmError> {
        let mut deps = Vec::new();
        for dep in &record.depends_on_services {
            let found = self
                .db
                .get(&dep.key())
                .ok_or_else(|| ScmError::UnknownDependency {
                    of: record.name.to_string(),
                    missing: dep.to_string(),
                })?;
            deps.push(found.name.clone());
        }
        for group in &record.depends_on_groups {
            deps.extend(self.group_members(group));
        }
        Ok(deps)
    }

    /// Dependency-respecting start order for `roots` and their transitive
    /// dependencies: every dependency precedes its dependents, and ties
    /// break by case-insensitive base name (so a virtualized set orders
    /// exactly like its originals), then VM id, then full name.
    pub fn compute_start_order(&self, roots: &[ServiceName]) -> Result<Vec<ServiceName>, ScmError> {
        // Closure over effective dependencies.
        let mut closure: BTreeMap<String, ServiceRecord> = BTreeMap::new();
        let mut stack: Vec<ServiceName> = Vec::new();
        for root in roots {
            let record = self
                .db
                .get(&root.key())
                .ok_or_else(|| ScmError::UnknownService(root.to_string()))?;
            stack.push(record.name.clone());
        }
        while let Some(name) = stack.pop() {
            let key = name.key();
            if closure.contains_key(&key) {
                continue;
            }
            let record = self
                .db
                .get(&key)
                .ok_or_else(|| ScmError::UnknownService(name.to_string()))?;
            closure.insert(key, record.clone());
            for dep in self.effective_deps(record)? {
                stack.push(dep);
            }
        }

        // Kahn's algorithm, deterministic pop order.
        let sort_key = |name: &ServiceName| {
            (
                name.base_name().key(),
                name.vm_suffix().map(|v| v.get()).unwrap_or(0),
                name.key(),
            )
        };
        let mut indegree: BTreeMap<String, usize> =
            closure.keys().map(|k| (k.clone(), 0)).collect();
        let mut dependents: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (key, record) in &closure {
            for dep in self.effective_deps(record)? {
                let dep_key = dep.key();
                if dep_key == *key {
                    // Self-dependency is a one-node cycle.
                    return Err(ScmError::DependencyCycle(vec![
                        record.name.to_string(),
                        record.name.to_string(),
                    ]));
                }
                *indegree.get_mut(key).unwrap() += 1;
                dependents.entry(dep_key).or_default().push(key.clone());
            }
        }
        let mut heap: BinaryHeap<Reverse<((String, u32, String), String)>> = indegree
            .iter()
            .filter(|(_, &deg)| deg == 0)
            .map(|(k, _)| Reverse((sort_key(&closure[k].name), k.clone())))
            .collect();
        let mut order = Vec::new();
        while let Some(Reverse((_, key))) = heap.pop() {
            order.push(closure[&key].name.clone());
            for dependent in dependents.get(&key).cloned().unwrap_or_default() {
                let deg = indegree.get_mut(&dependent).unwrap();
                *deg -= 1;
                if *deg == 0 {
                    heap.push(Reverse((sort_key(&closure[&dependent].name), dependent)));
                }
            }
        }
        if order.len() < closure.len() {
            return Err(ScmError::DependencyCycle(self.extract_cycle(&closure, &indegree)));
        }
        Ok(order)
    }

    /// Walks the unresolved remainder of a stalled topological sort to name
    /// one concrete cycle, deterministically.
    fn extract_cycle(
        &self,
        closure: &BTreeMap<String, ServiceRecord>,
        indegree: &BTreeMap<String, usize>,
    ) -> Vec<String> {
        let remaining: BTreeSet<&String> = indegree
            .iter()
            .filter(|(_, &deg)| deg > 0)
            .map(|(k, _)| k)
            .collect();
        let start = remaining.iter().next().unwrap().to_string();
        let mut path: Vec<String> = Vec::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut cur = start;
        loop {
            if let Some(&at) = seen.get(&cur) {
                let mut cycle: Vec<String> = path[at..]
                    .iter()
                    .map(|k| closure[k].name.to_string())
                    .collect();
                cycle.push(closure[&cur].name.to_string());
                return cycle;
            }
            seen.insert(cur.clone(), path.len());
            path.push(cur.clone());
            // Follow the smallest unresolved dependency; one must exist,
            // otherwise this node would have been sorted.
            let record = &closure[&cur];
            let next = self
                .effective_deps(record)
                .unwrap_or_default()
                .into_iter()
                .map(|d| d.key())
                .filter(|k| remaining.contains(k))
                .min()
                .unwrap();
            cur = next;
        }
    }

    // -- open / register -----------------------------------------------------

    /// Opens a service by name on behalf of a caller placement. Refused when
    /// the named service is Running in a different placement than the
    /// caller's — the same name must not be reachable across the boundary.
    pub fn open_service(
        &mut self,
        caller: Placement,
        name: &str,
    ) -> Result<ServiceHandle, ScmError> {
        let record = self
            .db
            .get(&name.to_lowercase())
            .ok_or_else(|| ScmError::UnknownService(name.to_string()))?;
        let running = self
            .runtime
            .get(&record.name.key())
            .map(|r| r.status.is_running())
            .unwrap_or(false);
        if running && record.owner_vm != caller {
            return Err(ScmError::AccessRefused(record.name.to_string()));
        }
        self.next_handle += 1;
        Ok(ServiceHandle(self.next_handle))
    }

    /// Registers a control handler: the claimed name must match (case-
    /// insensitively) a StartPending service among those the calling process
    /// hosts. On success that service may proceed to Running.
    pub fn register_ctrl_handler(
        &mut self,
        hosted: &[ServiceName],
        claimed: &str,
    ) -> Result<ServiceName, ScmError> {
        let want = claimed.to_lowercase();
        for name in hosted {
            if name.key() == want {
                if let Some(rt) = self.runtime.get_mut(&name.key()) {
                    if rt.status == ServiceStatus::StartPending {
                        rt.handler_registered = true;
                        return Ok(name.clone());
                    }
                }
            }
        }
        Err(ScmError::NameMismatch {
            claimed: claimed.to_string(),
        })
    }

    /// Running services that declare a dependency (directly or via group)
    /// on `name`, in name order.
    pub fn running_dependents(&self, name: &ServiceName) -> Vec<ServiceName> {
        let target_key = name.key();
        let target_group = self
            .db
            .get(&target_key)
            .and_then(|r| r.kind.group().map(str::to_lowercase));
        self.db
            .values()
            .filter(|r| {
                self.runtime
                    .get(&r.name.key())
                    .map(|rt| rt.status.is_running())
                    .unwrap_or(false)
            })
            .filter(|r| {
                r.depends_on_services.iter().any(|d| d.key() == target_key)
                    || target_group.as_ref().is_some_and(|g| {
                        r.depends_on_groups.iter().any(|dg| dg.to_lowercase() == *g)
                    })
            })
            .map(|r| r.name.clone())
            .collect()
    }

    // -- reporting -----------------------------------------------------------

    /// One line per service, sorted by name:
    /// `<name> <kind> <group|-> <status> vm=<id|host>`.
    pub fn status_report(&self) -> String {
        let mut out = String::new();
        for record in self.db.values() {
            let status = self
                .runtime
                .get(&record.name.key())
                .map(|r| r.status.to_string())
                .unwrap_or_else(|| ServiceStatus::Registered.to_string());
            out.push_str(&format!(
                "{} {} {} {} vm={}\n",
                record.name,
                record.kind.kind_tag(),
                record.kind.group().unwrap_or("-"),
                status,
                record.owner_vm,
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Registry (de)serialization
// ---------------------------------------------------------------------------

const TYPE_EXE: i64 = 16;
const TYPE_DLL: i64 = 32;
const START_AUTO: i64 = 2;
const START_MANUAL: i64 = 3;

fn validate_record(record: &ServiceRecord) -> Result<(), ScmError> {
    let malformed = |reason: &str| ScmError::MalformedRecord {
        key: record.name.to_string(),
        reason: reason.to_string(),
    };
    // The name's tag and the owner placement must agree.
    match record.name.vm_suffix() {
        Some(vm) if record.owner_vm != Placement::Vm(vm) => {
            return Err(malformed("name tag does not match owner vm"));
        }
        None if record.owner_vm != Placement::Host => {
            return Err(malformed("untagged name owned by a vm"));
        }
        _ => {}
    }
    if record.kind.image().is_empty() {
        return Err(malformed("missing image"));
    }
    if record.kind.image_path().is_empty() {
        return Err(malformed("missing image path"));
    }
    if let ServiceKind::DllHosted { group, .. } = &record.kind {
        if group.is_empty() {
            return Err(malformed("dll-hosted service without a group"));
        }
    }
    Ok(())
}

/// Writes a record's schema values under its service key and, for group-
/// hosted services, appends the name to the group's membership value.
pub fn write_record(registry: &mut Registry, record: &ServiceRecord) -> Result<(), ScmError> {
    let key = registry.create_key(&services_path().join(record.name.as_str()));
    let set = |registry: &mut Registry, name: &str, payload: ValuePayload| {
        registry.set_value(key, name, payload).map_err(ScmError::from)
    };
    let (ty, image, image_path) = match &record.kind {
        ServiceKind::ExeHosted { image, image_path, .. } => (TYPE_EXE, image, image_path),
        ServiceKind::DllHosted { image, image_path, .. } => (TYPE_DLL, image, image_path),
    };
    set(registry, "Type", ValuePayload::Int(ty))?;
    set(
        registry,
        "Start",
        ValuePayload::Int(match record.start_type {
            StartType::Auto => START_AUTO,
            StartType::Manual => START_MANUAL,
        }),
    )?;
    set(registry, "ImagePath", ValuePayload::Str(image_path.clone()))?;
    set(registry, "ImageId", ValuePayload::Str(image.clone()))?;
    set(
        registry,
        "DependOnService",
        ValuePayload::List(record.depends_on_services.iter().map(|d| d.to_string()).collect()),
    )?;
    set(
        registry,
        "DependOnGroup",
        ValuePayload::List(record.depends_on_groups.clone()),
    )?;
    match &record.kind {
        ServiceKind::ExeHosted { params, .. } => {
            set(registry, "Parameters", ValuePayload::List(params.clone()))?;
        }
        ServiceKind::DllHosted { group, .. } => {
            set(registry, "Group", ValuePayload::Str(group.clone()))?;
            append_group_member(registry, group, &record.name)?;
        }
    }
    Ok(())
}

fn append_group_member(
    registry: &mut Registry,
    group: &str,
    member: &ServiceName,
) -> Result<(), ScmError> {
    let key = registry.create_key(&svchost_path());
    let mut members = match registry.get_value(key, group)? {
        Some(ValuePayload::List(items)) => items.clone(),
        _ => Vec::new(),
    };
    if !members.iter().any(|m| m.to_lowercase() == member.key()) {
        members.push(member.to_string());
    }
    registry.set_value(key, group, ValuePayload::List(members))?;
    Ok(())
}

/// Reads one service record from its registry subkey.
fn read_record(registry: &Registry, subkey: &str) -> Result<ServiceRecord, ScmError> {
    let malformed = |reason: String| ScmError::MalformedRecord {
        key: subkey.to_string(),
        reason,
    };
    let name = ServiceName::new(subkey).map_err(|e| malformed(e.to_string()))?;
    let path = services_path().join(subkey);

    let int_value = |value: &str| -> Result<i64, ScmError> {
        match registry.value_at(&path, value) {
            Some(ValuePayload::Int(n)) => Ok(*n),
            Some(_) => Err(malformed(format!("{value} must be an int"))),
            None => Err(malformed(format!("missing {value}"))),
        }
    };
    let str_value = |value: &str| -> Result<String, ScmError> {
        match registry.value_at(&path, value) {
            Some(ValuePayload::Str(s)) => Ok(s.clone()),
            Some(_) => Err(malformed(format!("{value} must be a string"))),
            None => Err(malformed(format!("missing {value}"))),
        }
    };
    let list_value = |value: &str| -> Result<Vec<String>, ScmError> {
        match registry.value_at(&path, value) {
            Some(ValuePayload::List(items)) => Ok(items.clone()),
            Some(_) => Err(malformed(format!("{value} must be a list"))),
            None => Ok(Vec::new()),
        }
    };

    let ty = int_value("Type")?;
    let start = match int_value("Start")? {
        START_AUTO => StartType::Auto,
        START_MANUAL => StartType::Manual,
        other => return Err(malformed(format!("unsupported Start value {other}"))),
    };
    let image_path = str_value("ImagePath")?;
    let image = str_value("ImageId")?;
    let kind = match ty {
        TYPE_EXE => ServiceKind::ExeHosted {
            image,
            image_path,
            params: list_value("Parameters")?,
        },
        TYPE_DLL => ServiceKind::DllHosted {
            group: str_value("Group")?,
            image,
            image_path,
        },
        other => return Err(malformed(format!("unsupported Type value {other}"))),
    };
    let mut depends_on_services = Vec::new();
    for dep in list_value("DependOnService")? {
        depends_on_services.push(ServiceName::new(dep).map_err(|e| malformed(e.to_string()))?);
    }
    let owner_vm = match name.vm_suffix() {
        Some(vm) => Placement::Vm(vm),
        None => Placement::Host,
    };
    let record = ServiceRecord {
        name,
        kind,
        start_type: start,
        depends_on_services,
        depends_on_groups: list_value("DependOnGroup")?,
        owner_vm,
    };
    validate_record(&record)?;
    Ok(record)
}
