//! Flat, case-insensitive store of named kernel objects (ports, pipes,
//! mutexes, sections, events, files) plus the exemption machinery that
//! decides which names are shared with the host instead of being renamed
//! per VM.
//!
//! Isolation comes entirely from naming: a VM's objects are stored under
//! their renamed form, so a lookup only hits objects whose effective name
//! matches. Exempt names are never renamed and therefore reach through to
//! whatever placement created them.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::types::{ObjectKind, ObjectName, Pid, Placement, VmId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NamespaceError {
    #[error("object already exists: {0}")]
    AlreadyExists(String),
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("object {name} is a {found}, not a {requested}")]
    KindMismatch {
        name: String,
        requested: ObjectKind,
        found: ObjectKind,
    },
    #[error("access to {0} refused across placements")]
    AccessRefused(String),
    #[error("stale object handle")]
    StaleHandle,
}

impl NamespaceError {
    /// Short code used in trace lines.
    pub fn code(&self) -> &'static str {
        match self {
            NamespaceError::AlreadyExists(_) => "already-exists",
            NamespaceError::NotFound(_) => "not-found",
            NamespaceError::KindMismatch { .. } => "kind-mismatch",
            NamespaceError::AccessRefused(_) => "access-refused",
            NamespaceError::StaleHandle => "stale-handle",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("exemption list line {line}: {reason}")]
pub struct ExemptionParseError {
    pub line: usize,
    pub reason: String,
}

// ---------------------------------------------------------------------------
// Exemption list
// ---------------------------------------------------------------------------

/// One entry of an exemption list: either an exact name or a prefix whose
/// remainder must be one or more decimal digits (written `prefix*` in the
/// file format).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExemptionPattern {
    Literal { display: String, key: String },
    NumericWildcard { display_prefix: String, key_prefix: String },
}

impl ExemptionPattern {
    pub fn literal(name: &str) -> ExemptionPattern {
        ExemptionPattern::Literal {
            display: name.to_string(),
            key: name.to_lowercase(),
        }
    }

    pub fn numeric_wildcard(prefix: &str) -> ExemptionPattern {
        ExemptionPattern::NumericWildcard {
            display_prefix: prefix.to_string(),
            key_prefix: prefix.to_lowercase(),
        }
    }

    /// Case-insensitive match. Wildcards require a non-empty all-digit tail.
    pub fn matches(&self, name_key: &str) -> bool {
        match self {
            ExemptionPattern::Literal { key, .. } => key == name_key,
            ExemptionPattern::NumericWildcard { key_prefix, .. } => {
                match name_key.strip_prefix(key_prefix.as_str()) {
                    Some(rest) => !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()),
                    None => false,
                }
            }
        }
    }

    /// Canonical (case-folded) form used for set comparisons.
    pub fn canonical(&self) -> String {
        match self {
            ExemptionPattern::Literal { key, .. } => key.clone(),
            ExemptionPattern::NumericWildcard { key_prefix, .. } => format!("{key_prefix}*"),
        }
    }
}

impl fmt::Display for ExemptionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExemptionPattern::Literal { display, .. } => f.write_str(display),
            ExemptionPattern::NumericWildcard { display_prefix, .. } => {
                write!(f, "{display_prefix}*")
            }
        }
    }
}

/// Shipped default list, one pattern per line.
pub const DEFAULT_EXEMPTIONS: &str = include_str!("../data/exemptions.txt");

/// An ordered list of exemption patterns. Matching is kind-agnostic: a name
/// on the list is exempt no matter what kind of object carries it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExemptionList {
    patterns: Vec<ExemptionPattern>,
}

impl ExemptionList {
    pub fn empty() -> ExemptionList {
        ExemptionList::default()
    }

    /// The shipped default list.
    pub fn shipped() -> ExemptionList {
        ExemptionList::parse(DEFAULT_EXEMPTIONS).expect("shipped exemption data parses")
    }

    /// Parses the file format: one pattern per line, `*` allowed only as a
    /// final character (trailing-number wildcard), blank lines and lines
    /// starting with `#` ignored.
    pub fn parse(text: &str) -> Result<ExemptionList, ExemptionParseError> {
        let mut patterns = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| ExemptionParseError {
                line: i + 1,
                reason: reason.to_string(),
            };
            if let Some(prefix) = line.strip_suffix('*') {
                if prefix.contains('*') {
                    return Err(err("'*' is only allowed as the final character"));
                }
                if prefix.is_empty() {
                    return Err(err("wildcard needs a non-empty prefix"));
                }
                patterns.push(ExemptionPattern::numeric_wildcard(prefix));
            } else {
                if line.contains('*') {
                    return Err(err("'*' is only allowed as the final character"));
                }
                patterns.push(ExemptionPattern::literal(line));
            }
        }
        Ok(ExemptionList { patterns })
    }

    pub fn patterns(&self) -> &[ExemptionPattern] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn is_exempt(&self, name: &ObjectName) -> bool {
        let key = name.key();
        self.patterns.iter().any(|p| p.matches(&key))
    }

    /// Adds a pattern unless an identical one (canonically) is present.
    pub fn add(&mut self, pattern: ExemptionPattern) {
        let canon = pattern.canonical();
        if !self.patterns.iter().any(|p| p.canonical() == canon) {
            self.patterns.push(pattern);
        }
    }

    /// Canonical forms of every pattern, sorted — for set comparisons.
    pub fn canonical_set(&self) -> Vec<String> {
        let mut v: Vec<String> = self.patterns.iter().map(|p| p.canonical()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Renders in the file format, one pattern per line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for p in &self.patterns {
            out.push_str(&p.to_string());
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Renaming
// ---------------------------------------------------------------------------

/// The per-VM name transform: exempt names pass through unchanged; every
/// other name gains `-vm<id>` on its final segment. Injective per VM over
/// non-exempt names, and distinct VMs can never produce the same output
/// (the suffix pins the id).
pub fn rename_for_vm(name: &ObjectName, vm: VmId, exemptions: &ExemptionList) -> ObjectName {
    if exemptions.is_exempt(name) {
        name.clone()
    } else {
        name.with_vm_suffix(vm)
    }
}

// ---------------------------------------------------------------------------
// Object store
// ---------------------------------------------------------------------------

/// Handle to a live object. Slots are never reused; deleting an object
/// leaves its handles permanently stale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Handle(usize);

/// A live named object.
#[derive(Debug, Clone)]
pub struct ObjectEntry {
    /// Effective (post-rename) name, original casing.
    pub name: ObjectName,
    pub kind: ObjectKind,
    pub creator: Pid,
    pub placement: Placement,
}

/// The object namespace: effective name -> entry, case-insensitive.
#[derive(Debug, Clone, Default)]
pub struct Namespace {
    objects: BTreeMap<String, ObjectEntry>,
    handles: Vec<Option<String>>,
}

impl Namespace {
    pub fn new() -> Namespace {
        Namespace::default()
    }

    fn issue_handle(&mut self, key: String) -> Handle {
        self.handles.push(Some(key));
        Handle(self.handles.len() - 1)
    }

    /// Inserts an object under its effective name. The caller has already
    /// applied any renaming.
    pub fn create(
        &mut self,
        kind: ObjectKind,
        effective: ObjectName,
        creator: Pid,
        placement: Placement,
    ) -> Result<Handle, NamespaceError> {
        let key = effective.key();
        if self.objects.contains_key(&key) {
            return Err(NamespaceError::AlreadyExists(effective.to_string()));
        }
        self.objects.insert(
            key.clone(),
            ObjectEntry {
                name: effective,
                kind,
                creator,
                placement,
            },
        );
        Ok(self.issue_handle(key))
    }

    /// Looks up an object by effective name; the found object must carry the
    /// requested kind.
    pub fn open(
        &mut self,
        kind: ObjectKind,
        effective: &ObjectName,
    ) -> Result<Handle, NamespaceError> {
        let key = effective.key();
        match self.objects.get(&key) {
            None => Err(NamespaceError::NotFound(effective.to_string())),
            Some(entry) if entry.kind != kind => Err(NamespaceError::KindMismatch {
                name: effective.to_string(),
                requested: kind,
                found: entry.kind,
            }),
            Some(_) => Ok(self.issue_handle(key)),
        }
    }

    /// The open path every simulated process goes through: looks up the
    /// effective name, then enforces the placement rule — the object is
    /// reachable only by callers in the placement that created it, unless
    /// its name is on the exemption list — and finally checks the kind.
    /// Error precedence: not-found, then access-refused, then kind-mismatch.
    pub fn open_isolated(
        &mut self,
        kind: ObjectKind,
        effective: &ObjectName,
        caller: Placement,
        exemptions: &ExemptionList,
    ) -> Result<Handle, NamespaceError> {
        let entry = self
            .lookup(effective)
            .ok_or_else(|| NamespaceError::NotFound(effective.to_string()))?;
        if entry.placement != caller && !exemptions.is_exempt(effective) {
            return Err(NamespaceError::AccessRefused(effective.to_string()));
        }
        self.open(kind, effective)
    }

    /// Removes the object a handle refers to. Other handles to the same
    /// object go stale with it.
    pub fn delete(&mut self, handle: Handle) -> Result<ObjectEntry, NamespaceError> {
        let key = self
            .handles
            .get(handle.0)
            .and_then(|slot| slot.clone())
            .ok_or(NamespaceError::StaleHandle)?;
        self.handles[handle.0] = None;
        self.objects
            .remove(&key)
            .ok_or(NamespaceError::StaleHandle)
    }

    pub fn entry(&self, handle: Handle) -> Option<&ObjectEntry> {
        let key = self.handles.get(handle.0)?.as_ref()?;
        self.objects.get(key)
    }

    pub fn lookup(&self, effective: &ObjectName) -> Option<&ObjectEntry> {
        self.objects.get(&effective.key())
    }

    pub fn contains(&self, effective: &ObjectName) -> bool {
        self.objects.contains_key(&effective.key())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ObjectEntry> {
        self.objects.values()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// One line per object: `<kind> <effective-name> creator=<pid> vm=<vm|host>`,
    /// sorted case-insensitively by effective name (the map order).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for entry in self.objects.values() {
            out.push_str(&format!(
                "{} {} creator={} vm={}\n",
                entry.kind, entry.name, entry.creator, entry.placement
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn name(s: &str) -> ObjectName {
        ObjectName::new(s).unwrap()
    }

    #[test]
    fn shipped_list_parses_with_one_wildcard() {
        let list = ExemptionList::shipped();
        assert_eq!(list.len(), 20);
        let wildcards: Vec<_> = list
            .patterns()
            .iter()
            .filter(|p| matches!(p, ExemptionPattern::NumericWildcard { .. }))
            .collect();
        assert_eq!(wildcards.len(), 1);
        assert_eq!(
            wildcards[0].canonical(),
            r"\device\namedpipe\net\ntcontrolpipe*"
        );
    }

    #[test]
    fn wildcard_requires_nonempty_digit_tail() {
        let list = ExemptionList::shipped();
        assert!(list.is_exempt(&name(r"\Device\NamedPipe\net\NtControlPipe1")));
        assert!(list.is_exempt(&name(r"\Device\NamedPipe\net\NtControlPipe42")));
        assert!(!list.is_exempt(&name(r"\Device\NamedPipe\net\NtControlPipe")));
        assert!(!list.is_exempt(&name(r"\Device\NamedPipe\net\NtControlPipe7x")));
        assert!(!list.is_exempt(&name(r"\Device\NamedPipe\net\NtControlPipe 7")));
    }

    #[test]
    fn matching_is_case_insensitive_and_kind_agnostic() {
        let list = ExemptionList::shipped();
        assert!(list.is_exempt(&name(r"\basenamedobjects\SCMCREATEDEVENT")));
        assert!(list.is_exempt(&name(r"\BaseNamedObjects\userenv: User Profile setup event")));
        assert!(!list.is_exempt(&name(r"\BaseNamedObjects\NotOnTheList")));
    }

    #[test]
    fn rename_appends_suffix_and_spares_exempt_names() {
        let list = ExemptionList::shipped();
        let vm = VmId::new(2).unwrap();
        assert_eq!(
            rename_for_vm(&name(r"\BaseNamedObjects\Work"), vm, &list).as_str(),
            r"\BaseNamedObjects\Work-vm2"
        );
        assert_eq!(
            rename_for_vm(&name(r"\RPC Control\ntsvcs"), vm, &list).as_str(),
            r"\RPC Control\ntsvcs"
        );
        // With an empty list nothing is spared.
        assert_eq!(
            rename_for_vm(&name(r"\RPC Control\ntsvcs"), vm, &ExemptionList::empty()).as_str(),
            r"\RPC Control\ntsvcs-vm2"
        );
    }

    #[test]
    fn create_open_delete_lifecycle() {
        let mut ns = Namespace::new();
        let pid = Pid(4);
        let n = name(r"\BaseNamedObjects\Probe");
        let h = ns
            .create(ObjectKind::Event, n.clone(), pid, Placement::Host)
            .unwrap();
        assert!(matches!(
            ns.create(ObjectKind::Event, n.clone(), pid, Placement::Host),
            Err(NamespaceError::AlreadyExists(_))
        ));
        assert!(matches!(
            ns.open(ObjectKind::Mutex, &n),
            Err(NamespaceError::KindMismatch { .. })
        ));
        let h2 = ns.open(ObjectKind::Event, &name(r"\basenamedobjects\PROBE")).unwrap();
        assert_ne!(h, h2);
        ns.delete(h).unwrap();
        assert!(matches!(ns.delete(h2), Err(NamespaceError::StaleHandle)));
        assert!(matches!(
            ns.open(ObjectKind::Event, &n),
            Err(NamespaceError::NotFound(_))
        ));
    }

    #[test]
    fn dump_sorts_by_name() {
        let mut ns = Namespace::new();
        ns.create(ObjectKind::Event, name(r"\Z\b"), Pid(1), Placement::Host)
            .unwrap();
        ns.create(
            ObjectKind::Mutex,
            name(r"\A\x"),
            Pid(2),
            Placement::Vm(VmId::new(1).unwrap()),
        )
        .unwrap();
        assert_eq!(ns.dump(), "mutex \\A\\x creator=2 vm=1\nevent \\Z\\b creator=1 vm=host\n");
    }
}
