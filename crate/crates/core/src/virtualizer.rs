//! Service duplication into a VM, done in four steps per service, applied
//! to the service's transitive dependency closure first:
//!
//! a. duplicate the manager's database entry (the registry subtree and the
//!    in-memory record) under the VM-tagged name,
//! b. mark the duplicate for placement inside the VM,
//! c. for exe-hosted services, point the duplicate at the VM workspace copy
//!    of its executable,
//! d. register the original name in the VM's rewrite table so hard-coded
//!    uses of it from inside the VM are redirected to the duplicate.
//!
//! Each step emits one trace line (`virt_a` .. `virt_d`).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::registry::{Registry, RegistryError};
use crate::scm::{services_path, Scm, ScmError, ServiceKind, ServiceRecord, StartType};
use crate::trace::{Op, Trace, TraceEvent, RESULT_OK};
use crate::types::{find_vm_tag, Pid, Placement, ServiceName, VmId};
use crate::vmm::{remap_file_path, VmTable, VmmError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VirtualizeError {
    #[error("service is already virtualized into vm {vm}: {service}")]
    AlreadyVirtualized { service: ServiceName, vm: VmId },
    #[error("not an original service name (already carries a vm tag): {service}")]
    NotAnOriginal { service: ServiceName },
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Vmm(#[from] VmmError),
}

// ---------------------------------------------------------------------------
// Name rewrite table
// ---------------------------------------------------------------------------

/// Per-VM map of original service names whose uses from inside that VM are
/// redirected to the VM duplicate by appending the VM suffix.
#[derive(Debug, Clone, Default)]
pub struct NameRewriteTable {
    /// vm number -> (case-folded original name -> display casing).
    per_vm: BTreeMap<u32, BTreeMap<String, String>>,
}

impl NameRewriteTable {
    pub fn new() -> NameRewriteTable {
        NameRewriteTable::default()
    }

    pub fn add(&mut self, vm: VmId, original: &ServiceName) {
        self.per_vm
            .entry(vm.get())
            .or_default()
            .entry(original.key())
            .or_insert_with(|| original.as_str().to_string());
    }

    pub fn is_registered(&self, vm: VmId, name: &str) -> bool {
        self.per_vm
            .get(&vm.get())
            .is_some_and(|set| set.contains_key(&name.to_lowercase()))
    }

    /// Rewrites a service-name argument used from inside `vm`. The caller's
    /// casing is preserved; an argument that already carries this VM's tag
    /// for a registered original is left alone, so the rewrite is
    /// idempotent. Names that were never virtualized into this VM pass
    /// through unchanged.
    pub fn rewrite(&self, vm: VmId, arg: &str) -> String {
        let Some(set) = self.per_vm.get(&vm.get()) else {
            return arg.to_string();
        };
        if set.contains_key(&arg.to_lowercase()) {
            return format!("{arg}{}", vm.suffix());
        }
        if let Some((idx, tag)) = find_vm_tag(arg) {
            if tag == vm && set.contains_key(&arg[..idx].to_lowercase()) {
                return arg.to_string();
            }
        }
        arg.to_string()
    }

    /// Registered original names for one VM, in display casing, sorted by
    /// case-folded key.
    pub fn originals(&self, vm: VmId) -> Vec<&str> {
        self.per_vm
            .get(&vm.get())
            .map(|set| set.values().map(String::as_str).collect())
            .unwrap_or_default()
    }
}

// ---------------------------------------------------------------------------
// Record duplication
// ---------------------------------------------------------------------------

/// The database half of duplication: the clone differs from the original in
/// the VM-tagged name, the VM-tagged dependency names, and a Manual start
/// type (the manager starts duplicates on request, never at boot) — plus,
/// for dll-hosted services, the VM-tagged hosting group. Everything else is
/// carried over byte for byte; exe image paths are remapped separately.
pub fn clone_record(record: &ServiceRecord, vm: VmId) -> ServiceRecord {
    let tag = |s: &str| format!("{s}{}", vm.suffix());
    let kind = match &record.kind {
        ServiceKind::ExeHosted { image, image_path, params } => ServiceKind::ExeHosted {
            image: image.clone(),
            image_path: image_path.clone(),
            params: params.clone(),
        },
        ServiceKind::DllHosted { group, image, image_path } => ServiceKind::DllHosted {
            group: tag(group),
            image: image.clone(),
            image_path: image_path.clone(),
        },
    };
    ServiceRecord {
        name: record.name.with_vm_suffix(vm),
        kind,
        start_type: StartType::Manual,
        depends_on_services: record
            .depends_on_services
            .iter()
            .map(|d| d.with_vm_suffix(vm))
            .collect(),
        depends_on_groups: record.depends_on_groups.iter().map(|g| tag(g)).collect(),
        owner_vm: Placement::Vm(vm),
    }
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualizeOutcome {
    /// Duplicates created by this call, dependency-first.
    pub created: Vec<ServiceName>,
}

/// Virtualizes `name` and its transitive dependencies into `vm`. Dependency
/// duplicates that already exist are reused; asking twice for the same root
/// is an error.
#[allow(clippy::too_many_arguments)]
pub fn virtualize_service(
    scm: &mut Scm,
    registry: &mut Registry,
    rewrites: &mut NameRewriteTable,
    vms: &VmTable,
    trace: &mut Trace,
    step: u64,
    manager_pid: Pid,
    name: &ServiceName,
    vm: VmId,
) -> Result<VirtualizeOutcome, VirtualizeError> {
    vms.require_live(vm)?;
    if name.vm_suffix().is_some() {
        return Err(VirtualizeError::NotAnOriginal { service: name.clone() });
    }
    // Walk the dependency closure in start order: dependencies come out
    // before their dependents, and unknown names and cycles are caught here.
    let order = scm.compute_start_order(std::slice::from_ref(name))?;

    let mut created = Vec::new();
    for svc in &order {
        let clone_name = svc.with_vm_suffix(vm);
        if scm.contains(&clone_name) {
            if svc.key() == name.key() {
                return Err(VirtualizeError::AlreadyVirtualized {
                    service: svc.clone(),
                    vm,
                });
            }
            continue;
        }
        let record = scm
            .record(svc)
            .ok_or_else(|| ScmError::UnknownService(svc.to_string()))?
            .clone();
        let mut emit = |op: Op, arg: String, xarg: String| {
            trace.push(TraceEvent {
                step,
                pid: manager_pid,
                vm: Placement::Host,
                op,
                arg,
                xarg,
                result: RESULT_OK.to_string(),
            });
        };

        // (a) duplicate the database entry: registry subtree, then the
        // managed record on top of it (extra copied values survive).
        let src = services_path().join(svc.as_str());
        let dst = services_path().join(clone_name.as_str());
        registry.copy_subtree(&src, &dst)?;
        scm.create_service(registry, clone_record(&record, vm))?;
        emit(Op::VirtA, svc.as_str().to_string(), clone_name.as_str().to_string());

        // (b) placement: the duplicate runs inside the VM.
        emit(Op::VirtB, clone_name.as_str().to_string(), vm.get().to_string());

        // (c) exe-hosted duplicates launch the VM workspace copy of the
        // binary; dll-hosted ones keep the shared host image.
        let (old_path, new_path) = match &record.kind {
            ServiceKind::ExeHosted { image_path, .. } => {
                let remapped = remap_file_path(image_path, vm)?;
                (image_path.clone(), remapped)
            }
            ServiceKind::DllHosted { image_path, .. } => {
                (image_path.clone(), image_path.clone())
            }
        };
        if new_path != old_path {
            scm.update_image_path(registry, &clone_name, &new_path)?;
        }
        emit(Op::VirtC, old_path, new_path);

        // (d) redirect hard-coded uses of the original name inside the VM.
        rewrites.add(vm, svc);
        emit(Op::VirtD, svc.as_str().to_string(), clone_name.as_str().to_string());

        created.push(clone_name);
    }
    Ok(VirtualizeOutcome { created })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ObjectName;

    fn vm(n: u32) -> VmId {
        VmId::new(n).unwrap()
    }

    fn exe_record(name: &str, deps: &[&str]) -> ServiceRecord {
        ServiceRecord {
            name: ServiceName::new(name).unwrap(),
            kind: ServiceKind::ExeHosted {
                image: format!("{}-image", name.to_lowercase()),
                image_path: format!(r"c:\WINNT\system32\{}.exe", name.to_lowercase()),
                params: vec!["-flag".into()],
            },
            start_type: StartType::Auto,
            depends_on_services: deps
                .iter()
                .map(|d| ServiceName::new(*d).unwrap())
                .collect(),
            depends_on_groups: Vec::new(),
            owner_vm: Placement::Host,
        }
    }

    fn dll_record(name: &str, group: &str) -> ServiceRecord {
        ServiceRecord {
            name: ServiceName::new(name).unwrap(),
            kind: ServiceKind::DllHosted {
                group: group.to_string(),
                image: format!("{}-image", name.to_lowercase()),
                image_path: format!(r"c:\WINNT\system32\{}.dll", name.to_lowercase()),
            },
            start_type: StartType::Auto,
            depends_on_services: Vec::new(),
            depends_on_groups: Vec::new(),
            owner_vm: Placement::Host,
        }
    }

    #[test]
    fn dll_clone_changes_name_deps_start_type_and_group_only() {
        let mut record = dll_record("RpcSs", "rpcss");
        record.depends_on_services = vec![ServiceName::new("DcomLaunch").unwrap()];
        record.depends_on_groups = vec!["COM Infrastructure".into()];
        let clone = clone_record(&record, vm(2));

        assert_eq!(clone.name.as_str(), "RpcSs-vm2");
        assert_eq!(clone.start_type, StartType::Manual);
        assert_eq!(clone.owner_vm, Placement::Vm(vm(2)));
        assert_eq!(clone.depends_on_services[0].as_str(), "DcomLaunch-vm2");
        assert_eq!(clone.depends_on_groups, vec!["COM Infrastructure-vm2".to_string()]);
        match (&record.kind, &clone.kind) {
            (
                ServiceKind::DllHosted { group: g0, image: i0, image_path: p0 },
                ServiceKind::DllHosted { group: g1, image: i1, image_path: p1 },
            ) => {
                assert_eq!(g1, &format!("{g0}-vm2"));
                assert_eq!(i0, i1);
                assert_eq!(p0, p1);
            }
            _ => panic!("kind changed shape"),
        }
    }

    #[test]
    fn exe_clone_keeps_image_fields_and_params_verbatim() {
        let record = exe_record("W3SVC", &["IISADMIN"]);
        let clone = clone_record(&record, vm(1));
        assert_eq!(clone.name.as_str(), "W3SVC-vm1");
        assert_eq!(clone.kind, record.kind);
        assert_eq!(clone.start_type, StartType::Manual);
        assert_eq!(clone.depends_on_services[0].as_str(), "IISADMIN-vm1");
    }

    #[test]
    fn rewrite_table_appends_suffix_preserving_caller_casing() {
        let mut table = NameRewriteTable::new();
        table.add(vm(1), &ServiceName::new("RpcSs").unwrap());

        assert_eq!(table.rewrite(vm(1), "RPCSS"), "RPCSS-vm1");
        assert_eq!(table.rewrite(vm(1), "rpcss"), "rpcss-vm1");
        // Unregistered names and other VMs pass through.
        assert_eq!(table.rewrite(vm(1), "EventLog"), "EventLog");
        assert_eq!(table.rewrite(vm(2), "RpcSs"), "RpcSs");
        // Idempotent: an already-tagged use of a registered original stays.
        assert_eq!(table.rewrite(vm(1), "RpcSs-vm1"), "RpcSs-vm1");
        // A tag for a different VM is not this VM's rewrite output.
        assert_eq!(table.rewrite(vm(1), "RpcSs-vm2"), "RpcSs-vm2");
    }

    struct Fixture {
        scm: Scm,
        registry: Registry,
        rewrites: NameRewriteTable,
        vms: VmTable,
        trace: Trace,
    }

    impl Fixture {
        fn new(records: &[ServiceRecord]) -> Fixture {
            let mut registry = Registry::new();
            let mut scm = Scm::new();
            for record in records {
                scm.create_service(&mut registry, record.clone()).unwrap();
            }
            let mut vms = VmTable::new();
            vms.create_vm();
            vms.create_vm();
            Fixture {
                scm,
                registry,
                rewrites: NameRewriteTable::new(),
                vms,
                trace: Trace::new(),
            }
        }

        fn virtualize(&mut self, name: &str, vm_n: u32) -> Result<VirtualizeOutcome, VirtualizeError> {
            virtualize_service(
                &mut self.scm,
                &mut self.registry,
                &mut self.rewrites,
                &self.vms,
                &mut self.trace,
                0,
                Pid(1),
                &ServiceName::new(name).unwrap(),
                vm(vm_n),
            )
        }
    }

    #[test]
    fn virtualize_clones_dependencies_first_and_traces_four_steps_each() {
        let mut fx = Fixture::new(&[
            exe_record("Web", &["Db"]),
            exe_record("Db", &[]),
        ]);
        let outcome = fx.virtualize("Web", 1).unwrap();
        let created: Vec<&str> = outcome.created.iter().map(|n| n.as_str()).collect();
        assert_eq!(created, vec!["Db-vm1", "Web-vm1"]);

        assert!(fx.scm.contains(&ServiceName::new("Db-vm1").unwrap()));
        let clone = fx.scm.record(&ServiceName::new("Web-vm1").unwrap()).unwrap();
        assert_eq!(
            clone.kind.image_path(),
            r"c:\fvms\VM-1\C\WINNT\system32\web.exe"
        );
        assert!(fx.rewrites.is_registered(vm(1), "web"));
        assert!(fx.rewrites.is_registered(vm(1), "db"));

        let ops: Vec<&str> = fx.trace.events().iter().map(|e| e.op.as_str()).collect();
        assert_eq!(
            ops,
            vec!["virt_a", "virt_b", "virt_c", "virt_d", "virt_a", "virt_b", "virt_c", "virt_d"]
        );
        let virt_c = &fx.trace.events()[2];
        assert_eq!(virt_c.arg, r"c:\WINNT\system32\db.exe");
        assert_eq!(virt_c.xarg, r"c:\fvms\VM-1\C\WINNT\system32\db.exe");
    }

    #[test]
    fn virtualize_preserves_extra_registry_content_and_updates_group_rolls() {
        let mut fx = Fixture::new(&[dll_record("EventLog", "netsvcs")]);
        // Unmanaged value under the original's key must survive duplication.
        let extra = fx
            .registry
            .create_key(&services_path().join("EventLog").join("Parameters"));
        fx.registry
            .set_value(extra, "CustomFlag", crate::registry::ValuePayload::Int(7))
            .unwrap();

        fx.virtualize("EventLog", 2).unwrap();

        let copied = fx
            .registry
            .value_at(
                &services_path().join("EventLog-vm2").join("Parameters"),
                "CustomFlag",
            )
            .unwrap();
        assert_eq!(copied, &crate::registry::ValuePayload::Int(7));
        // The tagged group now carries the duplicate.
        let members = fx.scm.group_members("netsvcs-vm2");
        assert_eq!(members, vec![ServiceName::new("EventLog-vm2").unwrap()]);
    }

    #[test]
    fn shared_dependencies_are_reused_not_recloned() {
        let mut fx = Fixture::new(&[
            exe_record("Web", &["Db"]),
            exe_record("Cache", &["Db"]),
            exe_record("Db", &[]),
        ]);
        fx.virtualize("Web", 1).unwrap();
        let second = fx.virtualize("Cache", 1).unwrap();
        let created: Vec<&str> = second.created.iter().map(|n| n.as_str()).collect();
        assert_eq!(created, vec!["Cache-vm1"]);
    }

    #[test]
    fn revirtualizing_the_same_root_is_refused() {
        let mut fx = Fixture::new(&[exe_record("Db", &[])]);
        fx.virtualize("Db", 1).unwrap();
        let err = fx.virtualize("Db", 1).unwrap_err();
        assert!(matches!(err, VirtualizeError::AlreadyVirtualized { vm: v, .. } if v == vm(1)));
        // A different VM is fine.
        fx.virtualize("Db", 2).unwrap();
    }

    #[test]
    fn tagged_names_and_dead_vms_are_refused() {
        let mut fx = Fixture::new(&[exe_record("Db", &[])]);
        let err = fx.virtualize("Db-vm1", 1).unwrap_err();
        assert!(matches!(err, VirtualizeError::NotAnOriginal { .. }));
        let err = fx.virtualize("Db", 9).unwrap_err();
        assert!(matches!(err, VirtualizeError::Vmm(VmmError::UnknownVm(_))));
    }

    #[test]
    fn object_names_are_untouched_by_the_service_rewrite_table() {
        // The table is service-name keyed; kernel object paths never match.
        let mut table = NameRewriteTable::new();
        table.add(vm(1), &ServiceName::new("RpcSs").unwrap());
        let obj = ObjectName::new(r"\RPC Control\ntsvcs").unwrap();
        assert_eq!(table.rewrite(vm(1), obj.as_str()), obj.as_str());
    }
}
