//! The simulated machine: one façade owning the registry, the object
//! namespace, the service manager, the VM monitor, and the process table,
//! driving everything with a deterministic round-robin scheduler.
//!
//! Determinism contract: given the same installed services, images, and
//! command sequence, every run produces byte-identical traces and dumps.
//! The scheduler executes exactly one action per step; a thread blocked on
//! `wait-for` re-queues without consuming a step number or tracing; a full
//! pass in which every queued thread is blocked is a stall and ends the run.

use std::fmt;

use thiserror::Error;

use crate::namespace::{ExemptionList, Namespace};
use crate::procsim::{
    Action, ImageError, ImageStore, NameRef, ProcessRecord, ProcessRole, ProcessTable,
    ReadyQueue, ServiceImage, Thread, SCM_IMAGE, SVCHOST_IMAGE,
};
use crate::registry::Registry;
use crate::scm::{FailureReason, Scm, ScmError, ServiceKind, ServiceRecord, ServiceStatus};
use crate::trace::{Op, Trace, TraceEvent, RESULT_OK};
use crate::types::{NameError, ObjectKind, ObjectName, Pid, Placement, ServiceName, VmId};
use crate::virtualizer::{virtualize_service, NameRewriteTable, VirtualizeError};
use crate::vmm::{classify_process, intercept, InterceptCtx, SyscallRequest, VmTable, VmmError};

/// Image path of the manager's own process.
pub const SERVICES_EXE_PATH: &str = r"c:\WINNT\system32\services.exe";
/// Image path used for spawned group-hosting processes.
pub const SVCHOST_EXE_PATH: &str = r"c:\WINNT\system32\svchost.exe";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("already booted")]
    AlreadyBooted,
    #[error("not booted")]
    NotBooted,
    #[error("unknown service: {0}")]
    UnknownService(String),
    #[error("service is not running or starting: {0}")]
    NotRunning(String),
    #[error("unknown vm: {0}")]
    UnknownVm(u32),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Name(#[from] NameError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Virtualize(#[from] VirtualizeError),
    #[error(transparent)]
    Vmm(#[from] VmmError),
}

/// One in-flight start request: the dependency-ordered launch plan and a
/// cursor. Members launch strictly one at a time; the transaction waits at a
/// member until it is Running, and aborts the unlaunched remainder if a
/// member fails.
#[derive(Debug, Clone)]
struct StartTxn {
    root: ServiceName,
    order: Vec<ServiceName>,
    next: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// One thread executed one action.
    Executed,
    /// Every queued thread is blocked; nothing can run.
    Stalled,
    /// The ready queue is empty.
    Idle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    /// Nothing left to run and no start transaction outstanding.
    Quiescent,
    /// Blocked threads or transactions that can never advance.
    Stalled(Vec<String>),
    /// The step budget ran out before the machine went quiet.
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    /// Steps executed by this run call.
    pub steps: u64,
    pub outcome: RunOutcome,
}

impl RunReport {
    pub fn summary(&self) -> String {
        match &self.outcome {
            RunOutcome::Quiescent => format!("quiescent after {} steps", self.steps),
            RunOutcome::Stalled(detail) => {
                format!("stalled after {} steps: {}", self.steps, detail.join("; "))
            }
            RunOutcome::StepLimit => format!("step limit reached after {} steps", self.steps),
        }
    }
}

/// Result of a stop command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopReport {
    pub service: ServiceName,
    /// Running services that depend on the one stopped (left running; the
    /// caller is warned).
    pub running_dependents: Vec<ServiceName>,
}

enum Slot {
    /// Entry refers to a dead process or finished thread; drop it.
    Dead,
    /// The thread's script is exhausted.
    Exhausted,
    /// The thread's next action is a wait that cannot complete yet.
    BlockedWait,
    Runnable(Action),
}

/// What one executed action writes to the trace, plus how a startup failure
/// of it is classified.
struct Line {
    op: Op,
    arg: String,
    xarg: String,
    result: String,
    fail: FailureReason,
    /// Whether the cursor advances afterwards (sleep/stop manage their own).
    advance: bool,
}

pub struct Kernel {
    registry: Registry,
    namespace: Namespace,
    exemptions: ExemptionList,
    vms: VmTable,
    processes: ProcessTable,
    scm: Scm,
    images: ImageStore,
    rewrites: NameRewriteTable,
    ready: ReadyQueue,
    trace: Trace,
    txns: Vec<StartTxn>,
    steps_executed: u64,
    scm_pid: Pid,
    booted: bool,
    name_rewrite_enabled: bool,
}

impl Kernel {
    pub fn new(exemptions: ExemptionList) -> Kernel {
        Kernel {
            registry: Registry::new(),
            namespace: Namespace::new(),
            exemptions,
            vms: VmTable::new(),
            processes: ProcessTable::new(),
            scm: Scm::new(),
            images: ImageStore::with_builtins(),
            rewrites: NameRewriteTable::new(),
            ready: ReadyQueue::new(),
            trace: Trace::new(),
            txns: Vec::new(),
            steps_executed: 0,
            scm_pid: Pid(0),
            booted: false,
            name_rewrite_enabled: true,
        }
    }

    pub fn with_default_exemptions() -> Kernel {
        Kernel::new(ExemptionList::shipped())
    }

    /// Turns hard-coded service-name argument rewriting on or off. When
    /// off, service-control and string API arguments from VM processes pass
    /// through untouched, so a duplicated service that bakes its original
    /// name into those calls collides with the original. Object-name
    /// renaming and file-path remapping are unaffected.
    pub fn set_name_rewrite(&mut self, enabled: bool) {
        self.name_rewrite_enabled = enabled;
    }

    // -- setup ---------------------------------------------------------------

    pub fn register_image(&mut self, image: ServiceImage) -> Result<(), KernelError> {
        self.images.register(image)?;
        Ok(())
    }

    /// Installs a service record (database and registry). Normally done
    /// before boot; the boot-time database load re-reads the registry.
    pub fn install_service(&mut self, record: ServiceRecord) -> Result<(), KernelError> {
        self.scm.create_service(&mut self.registry, record)?;
        Ok(())
    }

    pub fn create_vm(&mut self) -> VmId {
        self.vms.create_vm()
    }

    /// Boots the machine: loads the service database from the registry,
    /// spawns the manager process (pid 1) and the given core host processes,
    /// and queues every auto-start service. Returns the number of services
    /// loaded. Call [`Kernel::run`] afterwards to let the starts proceed.
    pub fn boot(&mut self, core: &[(String, Vec<String>)]) -> Result<usize, KernelError> {
        if self.booted {
            return Err(KernelError::AlreadyBooted);
        }
        self.booted = true;
        let loaded = self.scm.load_database(&self.registry)?;

        let scm_pid = self.processes.insert_with_pid(|pid| ProcessRecord {
            pid,
            image: SCM_IMAGE.to_string(),
            image_path: SERVICES_EXE_PATH.to_string(),
            params: Vec::new(),
            placement: Placement::Host,
            role: ProcessRole::Core,
            threads: Vec::new(),
            exited: false,
        });
        self.scm_pid = scm_pid;
        self.emit(scm_pid, Placement::Host, Op::FileOpen, SERVICES_EXE_PATH, SERVICES_EXE_PATH, RESULT_OK);

        for (image_id, params) in core {
            let image = self.images.require(image_id)?.id.clone();
            let path = format!(r"c:\WINNT\system32\{}.exe", image.to_lowercase());
            let placement = classify_process(&path, params, &self.vms)?;
            let pid = self.processes.insert_with_pid(|pid| ProcessRecord {
                pid,
                image: image.clone(),
                image_path: path.clone(),
                params: params.clone(),
                placement,
                role: ProcessRole::Core,
                threads: vec![Thread::new(image.clone(), None)],
                exited: false,
            });
            self.ready.enqueue(pid, 0);
            self.emit(pid, placement, Op::FileOpen, path.clone(), path, RESULT_OK);
        }

        for name in self.scm.auto_start_names() {
            self.begin_start(&name)?;
        }
        Ok(loaded)
    }

    // -- commands ------------------------------------------------------------

    /// Requests a start. A service already running is a no-op; one already
    /// starting joins the in-flight start.
    pub fn start_service(&mut self, name: &str) -> Result<(), KernelError> {
        if !self.booted {
            return Err(KernelError::NotBooted);
        }
        let svc = self
            .scm
            .record_by_str(name)
            .ok_or_else(|| KernelError::UnknownService(name.to_string()))?
            .name
            .clone();
        match self.scm.status(&svc) {
            Some(ServiceStatus::Running) | Some(ServiceStatus::StartPending) => Ok(()),
            _ => self.begin_start(&svc),
        }
    }

    fn begin_start(&mut self, root: &ServiceName) -> Result<(), KernelError> {
        let order = self.scm.compute_start_order(std::slice::from_ref(root))?;
        for svc in &order {
            let needs_start = matches!(
                self.scm.status(svc),
                Some(ServiceStatus::Registered)
                    | Some(ServiceStatus::Stopped)
                    | Some(ServiceStatus::Failed(_))
            );
            if needs_start {
                let rt = self.scm.runtime_mut(svc).expect("ordered service has runtime");
                rt.reset_for_start();
                rt.status = ServiceStatus::StartPending;
                let name = svc.as_str().to_string();
                self.emit(self.scm_pid, Placement::Host, Op::StartPending, name.clone(), name, RESULT_OK);
            }
        }
        self.txns.push(StartTxn { root: root.clone(), order, next: 0 });
        self.pump();
        Ok(())
    }

    /// Stops a running (or still-starting) service, killing its thread. Any
    /// running dependents are reported, not stopped.
    pub fn stop_service(&mut self, name: &str) -> Result<StopReport, KernelError> {
        if !self.booted {
            return Err(KernelError::NotBooted);
        }
        let svc = self
            .scm
            .record_by_str(name)
            .ok_or_else(|| KernelError::UnknownService(name.to_string()))?
            .name
            .clone();
        let stoppable = matches!(
            self.scm.status(&svc),
            Some(ServiceStatus::Running) | Some(ServiceStatus::StartPending)
        );
        if !stoppable {
            return Err(KernelError::NotRunning(svc.to_string()));
        }
        let running_dependents = self.scm.running_dependents(&svc);
        let host = self.scm.runtime(&svc).and_then(|r| r.host);
        if let Some((pid, tidx)) = host {
            if let Some(proc) = self.processes.get_mut(pid) {
                if let Some(thread) = proc.threads.get_mut(tidx) {
                    thread.done = true;
                    thread.parked = false;
                }
            }
            self.refresh_exit(pid);
        }
        self.scm.runtime_mut(&svc).expect("known service").status = ServiceStatus::Stopped;
        let name = svc.as_str().to_string();
        self.emit(self.scm_pid, Placement::Host, Op::StopService, name.clone(), name, RESULT_OK);
        self.pump();
        Ok(StopReport { service: svc, running_dependents })
    }

    /// Duplicates a service (and its dependency closure) into a VM.
    pub fn virtualize(&mut self, name: &str, vm: u32) -> Result<Vec<ServiceName>, KernelError> {
        if !self.booted {
            return Err(KernelError::NotBooted);
        }
        let vm = VmId::new(vm).ok_or(KernelError::UnknownVm(vm))?;
        let svc = self
            .scm
            .record_by_str(name)
            .ok_or_else(|| KernelError::UnknownService(name.to_string()))?
            .name
            .clone();
        let outcome = virtualize_service(
            &mut self.scm,
            &mut self.registry,
            &mut self.rewrites,
            &self.vms,
            &mut self.trace,
            self.steps_executed,
            self.scm_pid,
            &svc,
            vm,
        )?;
        Ok(outcome.created)
    }

    // -- scheduling ----------------------------------------------------------

    /// Runs until the machine is quiet, stalls, or the step budget is spent.
    pub fn run(&mut self, max_steps: u64) -> RunReport {
        let start = self.steps_executed;
        self.pump();
        loop {
            if self.steps_executed - start >= max_steps {
                return RunReport {
                    steps: self.steps_executed - start,
                    outcome: RunOutcome::StepLimit,
                };
            }
            match self.step() {
                StepOutcome::Executed => {}
                StepOutcome::Idle => {
                    self.pump();
                    if !self.ready.is_empty() {
                        continue;
                    }
                    let outcome = if self.txns.is_empty() {
                        RunOutcome::Quiescent
                    } else {
                        RunOutcome::Stalled(self.stall_detail())
                    };
                    return RunReport { steps: self.steps_executed - start, outcome };
                }
                StepOutcome::Stalled => {
                    return RunReport {
                        steps: self.steps_executed - start,
                        outcome: RunOutcome::Stalled(self.stall_detail()),
                    };
                }
            }
        }
    }

    /// Executes at most one action. Blocked threads re-queue silently;
    /// threads of dead processes and exhausted scripts are retired along the
    /// way without consuming the step.
    pub fn step(&mut self) -> StepOutcome {
        loop {
            if self.ready.is_empty() {
                return StepOutcome::Idle;
            }
            let pass = self.ready.len();
            let mut housekeeping = false;
            for _ in 0..pass {
                let Some((pid, tidx)) = self.ready.pop() else { break };
                match self.inspect(pid, tidx) {
                    Slot::Dead => {
                        housekeeping = true;
                    }
                    Slot::Exhausted => {
                        self.finish_thread(pid, tidx);
                        self.pump();
                        housekeeping = true;
                    }
                    Slot::BlockedWait => {
                        self.ready.requeue(pid, tidx);
                    }
                    Slot::Runnable(action) => {
                        self.steps_executed += 1;
                        self.execute_action(pid, tidx, action);
                        let alive = self
                            .processes
                            .get(pid)
                            .is_some_and(|p| {
                                !p.exited && p.threads.get(tidx).is_some_and(|t| !t.done)
                            });
                        if alive {
                            self.ready.requeue(pid, tidx);
                        }
                        self.pump();
                        return StepOutcome::Executed;
                    }
                }
            }
            if !housekeeping {
                return if self.ready.is_empty() {
                    StepOutcome::Idle
                } else {
                    StepOutcome::Stalled
                };
            }
        }
    }

    fn inspect(&self, pid: Pid, tidx: usize) -> Slot {
        let Some(proc) = self.processes.get(pid) else { return Slot::Dead };
        if proc.exited {
            return Slot::Dead;
        }
        let Some(thread) = proc.threads.get(tidx) else { return Slot::Dead };
        if thread.done {
            return Slot::Dead;
        }
        let Some(image) = self.images.get(&thread.image) else { return Slot::Dead };
        let Some(action) = image.script.get(thread.cursor) else { return Slot::Exhausted };
        if let Action::WaitForService { name } = action {
            let target = self.wait_target(proc.placement, name);
            if matches!(
                self.scm.status(&target),
                Some(ServiceStatus::StartPending) | Some(ServiceStatus::Registered)
            ) {
                return Slot::BlockedWait;
            }
        }
        Slot::Runnable(action.clone())
    }

    /// The effective wait/start target for a caller: VM callers wait on the
    /// rewritten (duplicated) name of a virtualized original.
    fn wait_target(&self, placement: Placement, name: &ServiceName) -> ServiceName {
        match placement {
            Placement::Vm(vm) if self.name_rewrite_enabled => {
                ServiceName::new(self.rewrites.rewrite(vm, name.as_str()))
                    .unwrap_or_else(|_| name.clone())
            }
            _ => name.clone(),
        }
    }

    fn ictx(&self, placement: Placement) -> InterceptCtx<'_> {
        InterceptCtx {
            placement,
            exemptions: &self.exemptions,
            rewrites: self.name_rewrite_enabled.then_some(&self.rewrites),
        }
    }

    // -- start transactions ----------------------------------------------------

    fn pump(&mut self) {
        loop {
            let mut progress = false;
            let mut i = 0;
            while i < self.txns.len() {
                match self.advance_txn(i) {
                    TxnVerdict::Remove => {
                        self.txns.remove(i);
                        progress = true;
                    }
                    TxnVerdict::Advanced => {
                        progress = true;
                        i += 1;
                    }
                    TxnVerdict::Waiting => {
                        i += 1;
                    }
                }
            }
            if !progress {
                return;
            }
        }
    }

    fn advance_txn(&mut self, i: usize) -> TxnVerdict {
        let mut advanced = false;
        loop {
            let next_svc = {
                let txn = &self.txns[i];
                txn.order.get(txn.next).cloned()
            };
            let Some(svc) = next_svc else { return TxnVerdict::Remove };
            match self.scm.status(&svc).cloned() {
                Some(ServiceStatus::Running) => {
                    self.txns[i].next += 1;
                    advanced = true;
                }
                Some(ServiceStatus::StartPending) => {
                    let launched = self.scm.runtime(&svc).map(|r| r.launched).unwrap_or(false);
                    if launched {
                        return if advanced { TxnVerdict::Advanced } else { TxnVerdict::Waiting };
                    }
                    self.launch_service(&svc);
                    advanced = true;
                }
                // Failed, Stopped, or gone: this member cannot complete.
                _ => {
                    self.abort_txn_remainder(i, &svc);
                    return TxnVerdict::Remove;
                }
            }
        }
    }

    /// Marks the not-yet-launched remainder of a transaction failed because
    /// `failed` cannot reach Running.
    fn abort_txn_remainder(&mut self, i: usize, failed: &ServiceName) {
        let txn = &self.txns[i];
        let remaining: Vec<ServiceName> = txn.order[(txn.next + 1).min(txn.order.len())..].to_vec();
        for svc in remaining {
            let still_waiting = self
                .scm
                .runtime(&svc)
                .map(|r| r.status == ServiceStatus::StartPending && !r.launched)
                .unwrap_or(false);
            if still_waiting {
                let reason = FailureReason::Dependency(failed.clone());
                let result = reason.to_string();
                self.scm.runtime_mut(&svc).expect("known service").status =
                    ServiceStatus::Failed(reason);
                self.emit(
                    self.scm_pid,
                    Placement::Host,
                    Op::StartAborted,
                    svc.as_str().to_string(),
                    failed.as_str().to_string(),
                    result,
                );
            }
        }
    }

    /// Creates the control pipe and the hosting process/thread for one
    /// StartPending service. Failures are recorded on the service; the
    /// transaction sees them on its next advance.
    fn launch_service(&mut self, svc: &ServiceName) {
        let Some(record) = self.scm.record(svc).cloned() else {
            // Defensive: ordered members always have records.
            return;
        };
        {
            let rt = self.scm.runtime_mut(svc).expect("known service");
            rt.launched = true;
        }

        // The manager allocates and creates the control pipe on the host.
        let pipe = self.scm.next_control_pipe();
        let created = self
            .namespace
            .create(ObjectKind::NamedPipe, pipe.clone(), self.scm_pid, Placement::Host);
        let result = match created {
            Ok(_) => RESULT_OK.to_string(),
            Err(e) => e.code().to_string(),
        };
        self.emit(
            self.scm_pid,
            Placement::Host,
            Op::Create,
            pipe.to_string(),
            pipe.to_string(),
            result,
        );
        self.scm.runtime_mut(svc).expect("known service").pipe = Some(pipe);

        match &record.kind {
            ServiceKind::ExeHosted { image, image_path, params } => {
                if self.images.get(image).is_none() {
                    self.fail_launch(svc, image_path, "unknown-image");
                    return;
                }
                let placement = match classify_process(image_path, params, &self.vms) {
                    Ok(p) => p,
                    Err(e) => {
                        self.fail_launch(svc, image_path, e.code());
                        return;
                    }
                };
                let image = image.clone();
                let image_path = image_path.clone();
                let params = params.clone();
                let service = svc.clone();
                let pid = self.processes.insert_with_pid(|pid| ProcessRecord {
                    pid,
                    image: image.clone(),
                    image_path: image_path.clone(),
                    params,
                    placement,
                    role: ProcessRole::ServiceExe,
                    threads: vec![Thread::new(image.clone(), Some(service))],
                    exited: false,
                });
                self.ready.enqueue(pid, 0);
                self.trace_image_load(pid, placement, &image_path);
                let rt = self.scm.runtime_mut(svc).expect("known service");
                rt.host = Some((pid, 0));
            }
            ServiceKind::DllHosted { group, image, image_path } => {
                if self.images.get(image).is_none() {
                    self.fail_launch(svc, image_path, "unknown-image");
                    return;
                }
                if let Some(host_pid) = self.processes.find_svchost(group) {
                    let placement = self.processes.get(host_pid).expect("live svchost").placement;
                    let tidx = {
                        let proc = self.processes.get_mut(host_pid).expect("live svchost");
                        proc.threads.push(Thread::new(image.clone(), Some(svc.clone())));
                        proc.threads.len() - 1
                    };
                    self.ready.enqueue(host_pid, tidx);
                    self.trace_image_load(host_pid, placement, image_path);
                    let rt = self.scm.runtime_mut(svc).expect("known service");
                    rt.host = Some((host_pid, tidx));
                } else {
                    let params = vec!["-k".to_string(), group.clone()];
                    let placement = match classify_process(SVCHOST_EXE_PATH, &params, &self.vms) {
                        Ok(p) => p,
                        Err(e) => {
                            self.fail_launch(svc, SVCHOST_EXE_PATH, e.code());
                            return;
                        }
                    };
                    let group = group.clone();
                    let image = image.clone();
                    let service = svc.clone();
                    let pid = self.processes.insert_with_pid(|pid| ProcessRecord {
                        pid,
                        image: SVCHOST_IMAGE.to_string(),
                        image_path: SVCHOST_EXE_PATH.to_string(),
                        params,
                        placement,
                        role: ProcessRole::SvchostHost { group },
                        threads: vec![Thread::new(image.clone(), Some(service))],
                        exited: false,
                    });
                    self.ready.enqueue(pid, 0);
                    self.trace_image_load(pid, placement, SVCHOST_EXE_PATH);
                    self.trace_image_load(pid, placement, image_path);
                    let rt = self.scm.runtime_mut(svc).expect("known service");
                    rt.host = Some((pid, 0));
                }
            }
        }
    }

    fn fail_launch(&mut self, svc: &ServiceName, path: &str, code: &str) {
        self.emit(
            self.scm_pid,
            Placement::Host,
            Op::FileOpen,
            path.to_string(),
            path.to_string(),
            code.to_string(),
        );
        self.scm.runtime_mut(svc).expect("known service").status =
            ServiceStatus::Failed(FailureReason::Other(code.to_string()));
    }

    /// Traces an image load through interception (making per-VM path
    /// redirection visible).
    fn trace_image_load(&mut self, pid: Pid, placement: Placement, path: &str) {
        let req = SyscallRequest::FileOpen { path: path.to_string() };
        let (xarg, result) = match intercept(&req, self.ictx(placement)) {
            Ok(t) => (t.arg_string(), RESULT_OK.to_string()),
            Err(e) => (path.to_string(), e.code().to_string()),
        };
        self.emit(pid, placement, Op::FileOpen, path.to_string(), xarg, result);
    }

    // -- action execution ------------------------------------------------------

    fn execute_action(&mut self, pid: Pid, tidx: usize, action: Action) {
        let (placement, service, hosted) = {
            let proc = self.processes.get(pid).expect("scheduled process exists");
            (proc.placement, proc.threads[tidx].service.clone(), proc.hosted_services())
        };
        let was_pending = service
            .as_ref()
            .is_some_and(|s| matches!(self.scm.status(s), Some(ServiceStatus::StartPending)));
        let self_name = || -> String {
            service.as_ref().map(|s| s.as_str().to_string()).unwrap_or_else(|| "-".to_string())
        };

        let line: Line = match &action {
            Action::ConnectControlPipe => {
                let pipe = service
                    .as_ref()
                    .and_then(|s| self.scm.runtime(s))
                    .and_then(|r| r.pipe.clone());
                match pipe {
                    None => Line {
                        op: Op::Open,
                        arg: "-".to_string(),
                        xarg: "-".to_string(),
                        result: "no-pipe".to_string(),
                        fail: FailureReason::ControlPipe,
                        advance: true,
                    },
                    Some(pipe) => {
                        let req = SyscallRequest::OpenObject {
                            kind: ObjectKind::NamedPipe,
                            name: pipe.clone(),
                        };
                        let transformed =
                            intercept(&req, self.ictx(placement)).expect("object rename is total");
                        let eff = object_name_of(&transformed).expect("object request").clone();
                        let result = match self.open_with_isolation(ObjectKind::NamedPipe, &eff, placement) {
                            Ok(_) => {
                                if let Some(svc) = &service {
                                    self.scm.runtime_mut(svc).expect("known service").pipe_connected =
                                        true;
                                }
                                RESULT_OK.to_string()
                            }
                            Err(code) => code.to_string(),
                        };
                        Line {
                            op: Op::Open,
                            arg: pipe.to_string(),
                            xarg: eff.to_string(),
                            result,
                            fail: FailureReason::ControlPipe,
                            advance: true,
                        }
                    }
                }
            }

            Action::CreateObject { kind, name } => {
                let req = SyscallRequest::CreateObject { kind: *kind, name: name.clone() };
                let transformed =
                    intercept(&req, self.ictx(placement)).expect("object rename is total");
                let eff = object_name_of(&transformed).expect("object request").clone();
                let result = match self.namespace.create(*kind, eff.clone(), pid, placement) {
                    Ok(handle) => {
                        let proc = self.processes.get_mut(pid).expect("scheduled process");
                        proc.threads[tidx].handles.insert(name.key(), handle);
                        RESULT_OK.to_string()
                    }
                    Err(e) => e.code().to_string(),
                };
                let fail = FailureReason::Other(result.clone());
                Line {
                    op: Op::Create,
                    arg: name.to_string(),
                    xarg: eff.to_string(),
                    result,
                    fail,
                    advance: true,
                }
            }

            Action::OpenObject { kind, name } => {
                let req = SyscallRequest::OpenObject { kind: *kind, name: name.clone() };
                let transformed =
                    intercept(&req, self.ictx(placement)).expect("object rename is total");
                let eff = object_name_of(&transformed).expect("object request").clone();
                let result = match self.open_with_isolation(*kind, &eff, placement) {
                    Ok(handle) => {
                        let proc = self.processes.get_mut(pid).expect("scheduled process");
                        proc.threads[tidx].handles.insert(name.key(), handle);
                        RESULT_OK.to_string()
                    }
                    Err(code) => code.to_string(),
                };
                let fail = FailureReason::Other(result.clone());
                Line {
                    op: Op::Open,
                    arg: name.to_string(),
                    xarg: eff.to_string(),
                    result,
                    fail,
                    advance: true,
                }
            }

            Action::DeleteObject { name } => {
                let req = SyscallRequest::DeleteObject { name: name.clone() };
                let transformed =
                    intercept(&req, self.ictx(placement)).expect("object rename is total");
                let eff = object_name_of(&transformed).expect("object request").clone();
                let held = {
                    let proc = self.processes.get(pid).expect("scheduled process");
                    proc.threads[tidx].handles.get(&name.key()).copied()
                };
                let outcome: Result<(), &str> = match held {
                    Some(handle) => {
                        self.namespace.delete(handle).map(|_| ()).map_err(|e| e.code())
                    }
                    None => {
                        let kind = self.namespace.lookup(&eff).map(|entry| entry.kind);
                        match kind {
                            None => Err("not-found"),
                            Some(kind) => self
                                .open_with_isolation(kind, &eff, placement)
                                .and_then(|handle| {
                                    self.namespace
                                        .delete(handle)
                                        .map(|_| ())
                                        .map_err(|e| e.code())
                                }),
                        }
                    }
                };
                let result = match outcome {
                    Ok(()) => {
                        let proc = self.processes.get_mut(pid).expect("scheduled process");
                        proc.threads[tidx].handles.remove(&name.key());
                        RESULT_OK.to_string()
                    }
                    Err(code) => code.to_string(),
                };
                let fail = FailureReason::Other(result.clone());
                Line {
                    op: Op::Delete,
                    arg: name.to_string(),
                    xarg: eff.to_string(),
                    result,
                    fail,
                    advance: true,
                }
            }

            Action::FileOpen { path } => {
                let req = SyscallRequest::FileOpen { path: path.clone() };
                let (xarg, result) = match intercept(&req, self.ictx(placement)) {
                    Ok(t) => (t.arg_string(), RESULT_OK.to_string()),
                    Err(e) => (path.clone(), e.code().to_string()),
                };
                let fail = FailureReason::Other(result.clone());
                Line { op: Op::FileOpen, arg: path.clone(), xarg, result, fail, advance: true }
            }

            Action::OpenService { name } => {
                let original = match name {
                    NameRef::SelfName => self_name(),
                    NameRef::HardCoded(s) => s.clone(),
                };
                let req = SyscallRequest::OpenService { name: original.clone() };
                let transformed =
                    intercept(&req, self.ictx(placement)).expect("service rewrite is total");
                let eff = transformed.arg_string();
                let (result, fail) = match self.scm.open_service(placement, &eff) {
                    Ok(_) => (RESULT_OK.to_string(), FailureReason::Other(String::new())),
                    Err(e @ ScmError::AccessRefused(_)) => {
                        (e.code().to_string(), FailureReason::NameConflict)
                    }
                    Err(e) => {
                        let code = e.code().to_string();
                        (code.clone(), FailureReason::Other(code))
                    }
                };
                Line { op: Op::OpenService, arg: original, xarg: eff, result, fail, advance: true }
            }

            Action::RegisterCtrlHandler { name } => {
                let original = match name {
                    NameRef::SelfName => self_name(),
                    NameRef::HardCoded(s) => s.clone(),
                };
                let req = SyscallRequest::RegisterCtrlHandler { name: original.clone() };
                let transformed =
                    intercept(&req, self.ictx(placement)).expect("service rewrite is total");
                let eff = transformed.arg_string();
                let result = match self.scm.register_ctrl_handler(&hosted, &eff) {
                    Ok(_) => RESULT_OK.to_string(),
                    Err(e) => e.code().to_string(),
                };
                Line {
                    op: Op::RegisterCtrlHandler,
                    arg: original,
                    xarg: eff,
                    result,
                    fail: FailureReason::NameConflict,
                    advance: true,
                }
            }

            Action::StringApiUse { name } => {
                let original = match name {
                    NameRef::SelfName => self_name(),
                    NameRef::HardCoded(s) => s.clone(),
                };
                let req = SyscallRequest::StringApiUse { name: original.clone() };
                let transformed =
                    intercept(&req, self.ictx(placement)).expect("service rewrite is total");
                Line {
                    op: Op::StringApi,
                    arg: original,
                    xarg: transformed.arg_string(),
                    result: RESULT_OK.to_string(),
                    fail: FailureReason::Other(String::new()),
                    advance: true,
                }
            }

            Action::WaitForService { name } => {
                let target = self.wait_target(placement, name);
                let (result, fail) = match self.scm.status(&target).cloned() {
                    Some(ServiceStatus::Running) => {
                        (RESULT_OK.to_string(), FailureReason::Other(String::new()))
                    }
                    Some(ServiceStatus::Stopped) | Some(ServiceStatus::Failed(_)) => {
                        let reason = FailureReason::Dependency(target.clone());
                        (reason.to_string(), reason)
                    }
                    None => (
                        "unknown-service".to_string(),
                        FailureReason::Other("unknown-service".to_string()),
                    ),
                    // StartPending/Registered are filtered out as blocked
                    // before execution.
                    Some(_) => (
                        "blocked".to_string(),
                        FailureReason::Other("blocked".to_string()),
                    ),
                };
                Line {
                    op: Op::Wait,
                    arg: name.as_str().to_string(),
                    xarg: target.as_str().to_string(),
                    result,
                    fail,
                    advance: true,
                }
            }

            Action::SignalRunning => {
                let result = match &service {
                    None => RESULT_OK.to_string(),
                    Some(svc) => match self.scm.status(svc).cloned() {
                        Some(ServiceStatus::StartPending) => {
                            let (connected, registered) = self
                                .scm
                                .runtime(svc)
                                .map(|r| (r.pipe_connected, r.handler_registered))
                                .unwrap_or((false, false));
                            if !connected {
                                "no-pipe".to_string()
                            } else if !registered {
                                "no-handler".to_string()
                            } else {
                                self.scm.runtime_mut(svc).expect("known service").status =
                                    ServiceStatus::Running;
                                RESULT_OK.to_string()
                            }
                        }
                        Some(ServiceStatus::Running) => RESULT_OK.to_string(),
                        _ => "not-starting".to_string(),
                    },
                };
                let fail = FailureReason::Other(result.clone());
                Line {
                    op: Op::SignalRunning,
                    arg: self_name(),
                    xarg: self_name(),
                    result,
                    fail,
                    advance: true,
                }
            }

            Action::Sleep { steps } => {
                let remaining = {
                    let proc = self.processes.get_mut(pid).expect("scheduled process");
                    let thread = &mut proc.threads[tidx];
                    let remaining = thread.sleep_left.take().unwrap_or(*steps);
                    if remaining <= 1 {
                        thread.cursor += 1;
                    } else {
                        thread.sleep_left = Some(remaining - 1);
                    }
                    remaining
                };
                Line {
                    op: Op::Sleep,
                    arg: remaining.to_string(),
                    xarg: remaining.to_string(),
                    result: RESULT_OK.to_string(),
                    fail: FailureReason::Other(String::new()),
                    advance: false,
                }
            }

            Action::Stop => {
                {
                    let proc = self.processes.get_mut(pid).expect("scheduled process");
                    let thread = &mut proc.threads[tidx];
                    thread.done = true;
                    thread.parked = false;
                }
                if let Some(svc) = &service {
                    match self.scm.status(svc).cloned() {
                        Some(ServiceStatus::StartPending) => {
                            self.scm.runtime_mut(svc).expect("known service").status =
                                ServiceStatus::Failed(FailureReason::Other(
                                    "stopped-before-running".to_string(),
                                ));
                        }
                        Some(ServiceStatus::Running) => {
                            self.scm.runtime_mut(svc).expect("known service").status =
                                ServiceStatus::Stopped;
                        }
                        _ => {}
                    }
                }
                self.refresh_exit(pid);
                Line {
                    op: Op::Stop,
                    arg: self_name(),
                    xarg: self_name(),
                    result: RESULT_OK.to_string(),
                    fail: FailureReason::Other(String::new()),
                    advance: false,
                }
            }
        };

        self.emit(pid, placement, line.op, line.arg, line.xarg, line.result.clone());

        if line.result != RESULT_OK && was_pending {
            if let Some(svc) = &service {
                self.scm.runtime_mut(svc).expect("known service").status =
                    ServiceStatus::Failed(line.fail);
                let proc = self.processes.get_mut(pid).expect("scheduled process");
                let thread = &mut proc.threads[tidx];
                thread.done = true;
                thread.parked = false;
                self.refresh_exit(pid);
            }
        } else if line.advance {
            let proc = self.processes.get_mut(pid).expect("scheduled process");
            proc.threads[tidx].cursor += 1;
        }
    }

    /// Isolation rule at open time: the object must exist under the
    /// effective name, the opener's placement must match the creator's (or
    /// the name must be exempt), and the kind must match — in that order.
    fn open_with_isolation(
        &mut self,
        kind: ObjectKind,
        effective: &ObjectName,
        caller: Placement,
    ) -> Result<crate::namespace::Handle, &'static str> {
        self.namespace
            .open_isolated(kind, effective, caller, &self.exemptions)
            .map_err(|e| e.code())
    }

    /// Retires a thread whose script ran out. While a start is pending this
    /// counts as dying before ready; otherwise the thread parks (its service
    /// keeps running, its process stays alive).
    fn finish_thread(&mut self, pid: Pid, tidx: usize) {
        let service = {
            let proc = self.processes.get(pid).expect("scheduled process");
            proc.threads[tidx].service.clone()
        };
        let pending = service
            .as_ref()
            .is_some_and(|s| matches!(self.scm.status(s), Some(ServiceStatus::StartPending)));
        {
            let proc = self.processes.get_mut(pid).expect("scheduled process");
            let thread = &mut proc.threads[tidx];
            thread.done = true;
            thread.parked = !pending;
        }
        if pending {
            if let Some(svc) = &service {
                self.scm.runtime_mut(svc).expect("known service").status =
                    ServiceStatus::Failed(FailureReason::Other(
                        "stopped-before-running".to_string(),
                    ));
            }
        }
        self.refresh_exit(pid);
    }

    /// A process exits when every thread is done and none merely parked.
    fn refresh_exit(&mut self, pid: Pid) {
        if let Some(proc) = self.processes.get_mut(pid) {
            if !proc.threads.is_empty()
                && proc.threads.iter().all(|t| t.done)
                && proc.threads.iter().all(|t| !t.parked)
            {
                proc.exited = true;
            }
        }
    }

    fn emit(
        &mut self,
        pid: Pid,
        vm: Placement,
        op: Op,
        arg: impl Into<String>,
        xarg: impl Into<String>,
        result: impl Into<String>,
    ) {
        self.trace.push(TraceEvent {
            step: self.steps_executed,
            pid,
            vm,
            op,
            arg: arg.into(),
            xarg: xarg.into(),
            result: result.into(),
        });
    }

    fn stall_detail(&self) -> Vec<String> {
        let mut detail = Vec::new();
        for &(pid, tidx) in self.ready.iter() {
            let Some(proc) = self.processes.get(pid) else { continue };
            let Some(thread) = proc.threads.get(tidx) else { continue };
            if thread.done {
                continue;
            }
            if let Some(image) = self.images.get(&thread.image) {
                if let Some(Action::WaitForService { name }) = image.script.get(thread.cursor) {
                    let target = self.wait_target(proc.placement, name);
                    detail.push(format!("pid {pid} blocked on wait-for {target}"));
                }
            }
        }
        for txn in &self.txns {
            if let Some(member) = txn.order.get(txn.next) {
                detail.push(format!("start of {} waiting on {}", txn.root, member));
            }
        }
        detail
    }

    // -- accessors ----------------------------------------------------------

    pub fn booted(&self) -> bool {
        self.booted
    }

    pub fn steps_executed(&self) -> u64 {
        self.steps_executed
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn scm(&self) -> &Scm {
        &self.scm
    }

    pub fn namespace(&self) -> &Namespace {
        &self.namespace
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut Registry {
        &mut self.registry
    }

    pub fn exemptions(&self) -> &ExemptionList {
        &self.exemptions
    }

    pub fn rewrites(&self) -> &NameRewriteTable {
        &self.rewrites
    }

    pub fn vms(&self) -> &VmTable {
        &self.vms
    }

    pub fn processes(&self) -> &ProcessTable {
        &self.processes
    }

    pub fn service_status(&self, name: &str) -> Option<ServiceStatus> {
        let record = self.scm.record_by_str(name)?;
        self.scm.status(&record.name).cloned()
    }

    /// `<name> <kind> <group|-> <status> vm=<id|host>` per service.
    pub fn status_report(&self) -> String {
        self.scm.status_report()
    }

    pub fn namespace_dump(&self) -> String {
        self.namespace.dump()
    }

    pub fn registry_dump(&self) -> String {
        self.registry.dump()
    }
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("booted", &self.booted)
            .field("steps_executed", &self.steps_executed)
            .field("services", &self.scm.len())
            .field("objects", &self.namespace.len())
            .field("processes", &self.processes.len())
            .finish()
    }
}

enum TxnVerdict {
    Remove,
    Advanced,
    Waiting,
}

fn object_name_of(req: &SyscallRequest) -> Option<&ObjectName> {
    match req {
        SyscallRequest::CreateObject { name, .. }
        | SyscallRequest::OpenObject { name, .. }
        | SyscallRequest::DeleteObject { name } => Some(name),
        _ => None,
    }
}
