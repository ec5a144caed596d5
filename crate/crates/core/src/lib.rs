//! Deterministic simulator of OS-level service virtualization for a
//! Windows-like service ecosystem.
//!
//! The machine model: named kernel objects live in one global [`namespace`];
//! services are declared in a [`registry`] database and managed by an
//! [`scm`] (control pipes, dependency-ordered starts, control-handler
//! registration); lightweight VMs share that single kernel, with a monitor
//! ([`vmm`]) renaming every resource name that crosses the syscall boundary
//! so each VM sees a private view. Well-known rendezvous names stay shared
//! through an exemption list; a service moves into a VM by duplicating its
//! database entry, placing the duplicate in the VM, remapping its binary
//! path, and rewriting hard-coded uses of its original name
//! ([`virtualizer`]). Every intercepted request is traced, and the
//! [`analyzer`] diffs host-vs-VM traces to propose exemption-list additions.
//!
//! [`kernel::Kernel`] wires the pieces together behind a deterministic
//! round-robin scheduler: same inputs, byte-identical traces.

pub mod analyzer;
pub mod kernel;
pub mod namespace;
pub mod procsim;
pub mod registry;
pub mod scm;
pub mod trace;
pub mod types;
pub mod virtualizer;
pub mod vmm;

pub use kernel::{Kernel, KernelError, RunOutcome, RunReport, StepOutcome, StopReport};
pub use namespace::{ExemptionList, ExemptionPattern, Namespace, DEFAULT_EXEMPTIONS};
pub use scm::{FailureReason, Scm, ServiceKind, ServiceRecord, ServiceStatus, StartType};
pub use trace::{Op, Trace, TraceEvent, RESULT_OK};
pub use types::{ObjectKind, ObjectName, Pid, Placement, ServiceName, VmId};
