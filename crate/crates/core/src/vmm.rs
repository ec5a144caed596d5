//! The virtualization monitor: tracks live VMs, decides which VM (if any) a
//! process belongs to, rewrites resource names at the syscall boundary, and
//! remaps file paths into per-VM workspace directories.
//!
//! Interception is the single choke point: every request a process issues
//! passes through [`intercept`] before it touches the namespace or the SCM,
//! and the (original, transformed) argument pair is what the trace records.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::namespace::{rename_for_vm, ExemptionList};
use crate::types::{find_vm_tag, ObjectKind, ObjectName, Placement, VmId};
use crate::virtualizer::NameRewriteTable;

/// Prefix of every VM workspace directory; VM `n` owns `c:\fvms\VM-<n>\`.
pub const WORKSPACE_PREFIX: &str = r"c:\fvms\VM-";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmmError {
    #[error("vm {0} is not live")]
    UnknownVm(u32),
    #[error("placement conflict: parameter tag names vm {param_vm}, image path names vm {path_vm}")]
    ClassificationConflict { param_vm: u32, path_vm: u32 },
    #[error("cannot remap a path without a drive prefix: {0:?}")]
    UnremappablePath(String),
}

impl VmmError {
    pub fn code(&self) -> &'static str {
        match self {
            VmmError::UnknownVm(_) => "unknown-vm",
            VmmError::ClassificationConflict { .. } => "classification-conflict",
            VmmError::UnremappablePath(_) => "bad-path",
        }
    }
}

/// Registry of live VMs. Ids are monotonic from 1 and never reused.
#[derive(Debug, Clone, Default)]
pub struct VmTable {
    next: u32,
    live: BTreeSet<u32>,
}

impl VmTable {
    pub fn new() -> VmTable {
        VmTable::default()
    }

    pub fn create_vm(&mut self) -> VmId {
        self.next += 1;
        self.live.insert(self.next);
        VmId::new(self.next).unwrap()
    }

    pub fn is_live(&self, vm: VmId) -> bool {
        self.live.contains(&vm.get())
    }

    pub fn require_live(&self, vm: VmId) -> Result<(), VmmError> {
        if self.is_live(vm) {
            Ok(())
        } else {
            Err(VmmError::UnknownVm(vm.get()))
        }
    }

    pub fn live_vms(&self) -> impl Iterator<Item = VmId> + '_ {
        self.live.iter().map(|&id| VmId::new(id).unwrap())
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }
}

/// The VM owning a workspace path like `c:\fvms\VM-3\C\WINNT\...`, if any.
/// Matching is case-insensitive.
pub fn workspace_vm_of(path: &str) -> Option<VmId> {
    let lower = path.to_lowercase();
    let rest = lower.strip_prefix(r"c:\fvms\vm-")?;
    let sep = rest.find('\\')?;
    let digits = &rest[..sep];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    VmId::new(digits.parse().ok()?)
}

/// A parameter tag like `rpcss-vm5`: the trailing `-vm<digits>` of the first
/// tagged parameter, scanning in order.
fn param_vm_of(params: &[String]) -> Option<VmId> {
    params.iter().find_map(|p| find_vm_tag(p).map(|(_, vm)| vm))
}

/// Decides a process's placement from its image path and parameters.
///
/// The parameter tag takes precedence; when both a tag and a workspace path
/// are present they must agree. A tag or path naming a VM that is not live
/// is an error — placement is never guessed.
pub fn classify_process(
    image_path: &str,
    params: &[String],
    vms: &VmTable,
) -> Result<Placement, VmmError> {
    let param_vm = param_vm_of(params);
    let path_vm = workspace_vm_of(image_path);
    if let (Some(p), Some(q)) = (param_vm, path_vm) {
        if p != q {
            return Err(VmmError::ClassificationConflict {
                param_vm: p.get(),
                path_vm: q.get(),
            });
        }
    }
    match param_vm.or(path_vm) {
        Some(vm) => {
            vms.require_live(vm)?;
            Ok(Placement::Vm(vm))
        }
        None => Ok(Placement::Host),
    }
}

/// Rewrites an absolute drive-letter path into a VM workspace path:
/// `<d>:\rest` becomes `c:\fvms\VM-<id>\<D>\rest`. Paths already inside the
/// same VM's workspace pass through unchanged.
pub fn remap_file_path(path: &str, vm: VmId) -> Result<String, VmmError> {
    if workspace_vm_of(path) == Some(vm) {
        return Ok(path.to_string());
    }
    let bytes = path.as_bytes();
    let has_drive = bytes.len() >= 3
        && bytes[0].is_ascii_alphabetic()
        && bytes[1] == b':'
        && bytes[2] == b'\\';
    if !has_drive {
        return Err(VmmError::UnremappablePath(path.to_string()));
    }
    let drive = (bytes[0] as char).to_ascii_uppercase();
    let rest = &path[3..];
    if rest.is_empty() {
        Ok(format!("{WORKSPACE_PREFIX}{}\\{drive}", vm.get()))
    } else {
        Ok(format!("{WORKSPACE_PREFIX}{}\\{drive}\\{rest}", vm.get()))
    }
}

// ---------------------------------------------------------------------------
// Interception
// ---------------------------------------------------------------------------

/// A request crossing the syscall boundary, before or after transformation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyscallRequest {
    CreateObject { kind: ObjectKind, name: ObjectName },
    OpenObject { kind: ObjectKind, name: ObjectName },
    DeleteObject { name: ObjectName },
    OpenService { name: String },
    RegisterCtrlHandler { name: String },
    StringApiUse { name: String },
    FileOpen { path: String },
}

impl SyscallRequest {
    /// The argument as it appears in a trace line.
    pub fn arg_string(&self) -> String {
        match self {
            SyscallRequest::CreateObject { name, .. }
            | SyscallRequest::OpenObject { name, .. }
            | SyscallRequest::DeleteObject { name } => name.to_string(),
            SyscallRequest::OpenService { name }
            | SyscallRequest::RegisterCtrlHandler { name }
            | SyscallRequest::StringApiUse { name } => name.clone(),
            SyscallRequest::FileOpen { path } => path.clone(),
        }
    }
}

/// Everything interception needs to know about the calling process.
#[derive(Debug, Clone, Copy)]
pub struct InterceptCtx<'a> {
    pub placement: Placement,
    /// Effective exemption list; pass an empty list to disable exemptions.
    pub exemptions: &'a ExemptionList,
    /// Service-name rewrite table for the caller's VM; `None` disables
    /// hard-coded-name rewriting.
    pub rewrites: Option<&'a NameRewriteTable>,
}

/// Transforms one request for the calling process. Host callers pass
/// through untouched; VM callers get object names renamed (modulo
/// exemptions), service-name arguments rewritten (when a rewrite table is
/// supplied), and file paths remapped into the VM workspace.
pub fn intercept(req: &SyscallRequest, ctx: InterceptCtx<'_>) -> Result<SyscallRequest, VmmError> {
    let vm = match ctx.placement {
        Placement::Host => return Ok(req.clone()),
        Placement::Vm(vm) => vm,
    };
    let rewrite = |name: &str| -> String {
        match ctx.rewrites {
            Some(table) => table.rewrite(vm, name),
            None => name.to_string(),
        }
    };
    Ok(match req {
        SyscallRequest::CreateObject { kind, name } => SyscallRequest::CreateObject {
            kind: *kind,
            name: rename_for_vm(name, vm, ctx.exemptions),
        },
        SyscallRequest::OpenObject { kind, name } => SyscallRequest::OpenObject {
            kind: *kind,
            name: rename_for_vm(name, vm, ctx.exemptions),
        },
        SyscallRequest::DeleteObject { name } => SyscallRequest::DeleteObject {
            name: rename_for_vm(name, vm, ctx.exemptions),
        },
        SyscallRequest::OpenService { name } => SyscallRequest::OpenService { name: rewrite(name) },
        SyscallRequest::RegisterCtrlHandler { name } => {
            SyscallRequest::RegisterCtrlHandler { name: rewrite(name) }
        }
        SyscallRequest::StringApiUse { name } => {
            SyscallRequest::StringApiUse { name: rewrite(name) }
        }
        SyscallRequest::FileOpen { path } => SyscallRequest::FileOpen {
            path: remap_file_path(path, vm)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vms_with(n: u32) -> VmTable {
        let mut t = VmTable::new();
        for _ in 0..n {
            t.create_vm();
        }
        t
    }

    fn vm(n: u32) -> VmId {
        VmId::new(n).unwrap()
    }

    #[test]
    fn vm_ids_are_monotonic_from_one() {
        let mut t = VmTable::new();
        assert_eq!(t.create_vm(), vm(1));
        assert_eq!(t.create_vm(), vm(2));
        assert!(t.is_live(vm(1)));
        assert!(!t.is_live(vm(3)));
    }

    #[test]
    fn parameter_tag_classifies() {
        let vms = vms_with(5);
        let got = classify_process(
            r"c:\WINNT\system32\svchost.exe",
            &["-k".into(), "rpcss-vm5".into()],
            &vms,
        )
        .unwrap();
        assert_eq!(got, Placement::Vm(vm(5)));
    }

    #[test]
    fn workspace_path_classifies() {
        let vms = vms_with(1);
        let got = classify_process(
            r"c:\fvms\VM-1\C\WINNT\system32\inetsrv\inetinfo.exe",
            &[],
            &vms,
        )
        .unwrap();
        assert_eq!(got, Placement::Vm(vm(1)));
    }

    #[test]
    fn untagged_processes_are_host() {
        let vms = vms_with(3);
        let got = classify_process(
            r"c:\WINNT\system32\svchost.exe",
            &["-k".into(), "netsvcs".into()],
            &vms,
        )
        .unwrap();
        assert_eq!(got, Placement::Host);
    }

    #[test]
    fn disagreeing_tag_and_path_conflict() {
        let vms = vms_with(2);
        let got = classify_process(
            r"c:\fvms\VM-1\C\WINNT\system32\svchost.exe",
            &["-k".into(), "rpcss-vm2".into()],
            &vms,
        );
        assert_eq!(
            got,
            Err(VmmError::ClassificationConflict {
                param_vm: 2,
                path_vm: 1
            })
        );
    }

    #[test]
    fn non_live_vm_is_an_error() {
        let vms = vms_with(1);
        let got = classify_process(
            r"c:\WINNT\system32\svchost.exe",
            &["-k".into(), "rpcss-vm9".into()],
            &vms,
        );
        assert_eq!(got, Err(VmmError::UnknownVm(9)));
    }

    #[test]
    fn remap_folds_drive_into_workspace() {
        assert_eq!(
            remap_file_path(r"c:\WINNT\system32\inetsrv\inetinfo.exe", vm(1)).unwrap(),
            r"c:\fvms\VM-1\C\WINNT\system32\inetsrv\inetinfo.exe"
        );
        assert_eq!(
            remap_file_path(r"d:\data\db.ibd", vm(2)).unwrap(),
            r"c:\fvms\VM-2\D\data\db.ibd"
        );
    }

    #[test]
    fn remap_is_idempotent_per_vm() {
        let once = remap_file_path(r"c:\WINNT\notepad.exe", vm(3)).unwrap();
        assert_eq!(remap_file_path(&once, vm(3)).unwrap(), once);
    }

    #[test]
    fn remap_rejects_driveless_paths() {
        assert!(matches!(
            remap_file_path(r"WINNT\system32\x.exe", vm(1)),
            Err(VmmError::UnremappablePath(_))
        ));
        assert!(matches!(
            remap_file_path("", vm(1)),
            Err(VmmError::UnremappablePath(_))
        ));
    }

    #[test]
    fn host_requests_pass_through_interception() {
        let list = ExemptionList::shipped();
        let ctx = InterceptCtx {
            placement: Placement::Host,
            exemptions: &list,
            rewrites: None,
        };
        let req = SyscallRequest::CreateObject {
            kind: ObjectKind::Section,
            name: ObjectName::new(r"\BaseNamedObjects\Anything").unwrap(),
        };
        assert_eq!(intercept(&req, ctx).unwrap(), req);
    }

    #[test]
    fn vm_object_names_are_renamed_unless_exempt() {
        let list = ExemptionList::shipped();
        let ctx = InterceptCtx {
            placement: Placement::Vm(vm(1)),
            exemptions: &list,
            rewrites: None,
        };
        let private = SyscallRequest::OpenObject {
            kind: ObjectKind::Mutex,
            name: ObjectName::new(r"\BaseNamedObjects\Work").unwrap(),
        };
        let exempt = SyscallRequest::OpenObject {
            kind: ObjectKind::Port,
            name: ObjectName::new(r"\RPC Control\ntsvcs").unwrap(),
        };
        assert_eq!(
            intercept(&private, ctx).unwrap().arg_string(),
            r"\BaseNamedObjects\Work-vm1"
        );
        assert_eq!(intercept(&exempt, ctx).unwrap().arg_string(), r"\RPC Control\ntsvcs");
    }
}
