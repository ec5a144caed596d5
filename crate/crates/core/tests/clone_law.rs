//! Property tests for service-record cloning.
//!
//! The cloning rule is frozen as an exact whole-record diff: a clone differs
//! from its original in the tagged name, the tagged dependency lists, the
//! manual start type, the owning placement, and (for DLL-hosted services)
//! the tagged group — and in nothing else. The oracle below rebuilds the
//! expected clone field by field from the original and compares whole
//! records, so any extra or missing change fails the test.

use proptest::prelude::*;

use svcvirt_core::scm::{ServiceKind, ServiceRecord, StartType};
use svcvirt_core::types::{Placement, ServiceName, VmId};
use svcvirt_core::virtualizer::clone_record;

/// A plausible service-name fragment that carries no `-vm<digits>` tag.
fn base_name_strategy() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9_]{0,11}".prop_filter("must not already carry a vm tag", |s| {
        !ServiceName::new(s.as_str()).unwrap().is_virtualized()
    })
}

fn params_strategy() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec("[A-Za-z0-9/_.:-]{1,10}", 0..3)
}

fn kind_strategy() -> impl Strategy<Value = ServiceKind> {
    let exe = (
        "[a-z][a-z0-9]{0,8}",
        "[a-z][a-z0-9 \\\\.]{0,20}",
        params_strategy(),
    )
        .prop_map(|(image, tail, params)| ServiceKind::ExeHosted {
            image,
            image_path: format!("c:\\WINNT\\system32\\{tail}.exe"),
            params,
        });
    let dll = (
        base_name_strategy(),
        "[a-z][a-z0-9]{0,8}",
        "[a-z][a-z0-9 \\\\.]{0,20}",
    )
        .prop_map(|(group, image, tail)| ServiceKind::DllHosted {
            group,
            image,
            image_path: format!("c:\\WINNT\\system32\\{tail}.dll"),
        });
    prop_oneof![exe, dll]
}

fn record_strategy() -> impl Strategy<Value = ServiceRecord> {
    (
        base_name_strategy(),
        kind_strategy(),
        proptest::bool::ANY,
        proptest::collection::vec(base_name_strategy(), 0..4),
        proptest::collection::vec(base_name_strategy(), 0..3),
    )
        .prop_map(|(name, kind, auto, deps, groups)| ServiceRecord {
            name: ServiceName::new(name).unwrap(),
            kind,
            start_type: if auto { StartType::Auto } else { StartType::Manual },
            depends_on_services: deps
                .into_iter()
                .map(|d| ServiceName::new(d).unwrap())
                .collect(),
            depends_on_groups: groups,
            owner_vm: Placement::Host,
        })
}

/// Rebuilds the clone a correct implementation must produce, field by field.
fn expected_clone(original: &ServiceRecord, vm: VmId) -> ServiceRecord {
    ServiceRecord {
        name: original.name.with_vm_suffix(vm),
        kind: match &original.kind {
            ServiceKind::ExeHosted {
                image,
                image_path,
                params,
            } => ServiceKind::ExeHosted {
                image: image.clone(),
                image_path: image_path.clone(),
                params: params.clone(),
            },
            ServiceKind::DllHosted {
                group,
                image,
                image_path,
            } => ServiceKind::DllHosted {
                group: format!("{group}{}", vm.suffix()),
                image: image.clone(),
                image_path: image_path.clone(),
            },
        },
        start_type: StartType::Manual,
        depends_on_services: original
            .depends_on_services
            .iter()
            .map(|d| d.with_vm_suffix(vm))
            .collect(),
        depends_on_groups: original
            .depends_on_groups
            .iter()
            .map(|g| format!("{g}{}", vm.suffix()))
            .collect(),
        owner_vm: Placement::Vm(vm),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    /// Whole-record equality against the field-by-field oracle. `PartialEq`
    /// covers every field of the record, so this is an exhaustive diff: any
    /// unexpected change (or any change that fails to happen) is a mismatch.
    #[test]
    fn clone_diff_is_exactly_the_allowed_set(
        original in record_strategy(),
        vm_id in 1u32..=9,
    ) {
        let vm = VmId::new(vm_id).unwrap();
        let clone = clone_record(&original, vm);
        prop_assert_eq!(&clone, &expected_clone(&original, vm));

        // The clone is recognizably virtualized and projects back onto the
        // original name.
        prop_assert!(clone.name.is_virtualized());
        prop_assert_eq!(clone.name.vm_suffix(), Some(vm));
        prop_assert_eq!(clone.name.base_name(), original.name.clone());

        // The executable identity never changes at clone time: byte-equal
        // image id, image path, and parameters.
        prop_assert_eq!(clone.kind.image(), original.kind.image());
        prop_assert_eq!(clone.kind.image_path(), original.kind.image_path());
        if let (
            ServiceKind::ExeHosted { params: a, .. },
            ServiceKind::ExeHosted { params: b, .. },
        ) = (&original.kind, &clone.kind)
        {
            prop_assert_eq!(a, b);
        }
    }

    /// Cloning the same original for two different placements yields records
    /// that differ only where the placement id shows through.
    #[test]
    fn clones_for_distinct_placements_never_collide(
        original in record_strategy(),
        a in 1u32..=9,
        b in 1u32..=9,
    ) {
        prop_assume!(a != b);
        let ca = clone_record(&original, VmId::new(a).unwrap());
        let cb = clone_record(&original, VmId::new(b).unwrap());
        prop_assert_ne!(ca.name.key(), cb.name.key());
        prop_assert_eq!(ca.name.base_name(), cb.name.base_name());
    }
}
