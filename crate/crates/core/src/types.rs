//! Shared vocabulary: VM identifiers, process placement, kernel object names
//! and service names, plus the `-vm<id>` suffix conventions used throughout.

use std::fmt;

use thiserror::Error;

/// Separator for both kernel object paths and registry paths.
pub const PATH_SEP: char = '\\';

/// Identifier of a virtual machine. Ids are allocated monotonically from 1
/// and never reused; the host is not a VM (see [`Placement`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VmId(u32);

impl VmId {
    pub fn new(id: u32) -> Option<VmId> {
        if id == 0 {
            None
        } else {
            Some(VmId(id))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// The service/object name suffix that marks this VM, e.g. `-vm3`.
    pub fn suffix(self) -> String {
        format!("-vm{}", self.0)
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where a process (or service instance) lives: the real host or one VM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placement {
    Host,
    Vm(VmId),
}

impl Placement {
    pub fn vm(self) -> Option<VmId> {
        match self {
            Placement::Host => None,
            Placement::Vm(id) => Some(id),
        }
    }

    pub fn is_host(self) -> bool {
        matches!(self, Placement::Host)
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Host => write!(f, "host"),
            Placement::Vm(id) => write!(f, "{id}"),
        }
    }
}

/// Process identifier. Allocated monotonically from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The kinds of named kernel objects the namespace tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjectKind {
    Port,
    NamedPipe,
    Mutex,
    Section,
    Event,
    File,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 6] = [
        ObjectKind::Port,
        ObjectKind::NamedPipe,
        ObjectKind::Mutex,
        ObjectKind::Section,
        ObjectKind::Event,
        ObjectKind::File,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::Port => "port",
            ObjectKind::NamedPipe => "named-pipe",
            ObjectKind::Mutex => "mutex",
            ObjectKind::Section => "section",
            ObjectKind::Event => "event",
            ObjectKind::File => "file",
        }
    }

    pub fn parse(s: &str) -> Option<ObjectKind> {
        match s {
            "port" => Some(ObjectKind::Port),
            "named-pipe" => Some(ObjectKind::NamedPipe),
            "mutex" => Some(ObjectKind::Mutex),
            "section" => Some(ObjectKind::Section),
            "event" => Some(ObjectKind::Event),
            "file" => Some(ObjectKind::File),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NameError {
    #[error("object name must start with '\\': {0:?}")]
    MissingRoot(String),
    #[error("object name has an empty segment: {0:?}")]
    EmptySegment(String),
    #[error("object name must not end with '\\': {0:?}")]
    TrailingSeparator(String),
    #[error("service name must be non-empty and free of whitespace and '\\': {0:?}")]
    BadServiceName(String),
}

/// Absolute name of a kernel object, e.g. `\BaseNamedObjects\ScmCreatedEvent`.
///
/// Always begins with `\`, never ends with one, and has no empty segments.
/// Comparison is case-insensitive (see [`ObjectName::key`]); the original
/// casing is preserved for display.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectName(String);

impl ObjectName {
    pub fn new(s: impl Into<String>) -> Result<ObjectName, NameError> {
        let s = s.into();
        if !s.starts_with(PATH_SEP) {
            return Err(NameError::MissingRoot(s));
        }
        if s.ends_with(PATH_SEP) {
            return Err(NameError::TrailingSeparator(s));
        }
        // Skip the leading separator; any later doubled separator is an
        // empty segment.
        if s[1..].split(PATH_SEP).any(|seg| seg.is_empty()) {
            return Err(NameError::EmptySegment(s));
        }
        Ok(ObjectName(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Case-folded form used for lookups and sorting.
    pub fn key(&self) -> String {
        self.0.to_lowercase()
    }

    /// Appends `-vm<id>` to the final path segment. Since the final segment
    /// is the string tail, this is a plain suffix append.
    pub fn with_vm_suffix(&self, vm: VmId) -> ObjectName {
        ObjectName(format!("{}{}", self.0, vm.suffix()))
    }
}

impl fmt::Display for ObjectName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Name of a service as the SCM knows it, e.g. `RpcSs` or `RpcSs-vm2`.
///
/// An original name carries no `-vm<digits>` suffix; a virtualized clone
/// carries exactly one. Comparison is case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServiceName(String);

impl ServiceName {
    pub fn new(s: impl Into<String>) -> Result<ServiceName, NameError> {
        let s = s.into();
        if s.is_empty() || s.contains(char::is_whitespace) || s.contains(PATH_SEP) {
            return Err(NameError::BadServiceName(s));
        }
        Ok(ServiceName(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn key(&self) -> String {
        self.0.to_lowercase()
    }

    /// The VM this name is tagged for, if it ends in `-vm<digits>`.
    pub fn vm_suffix(&self) -> Option<VmId> {
        parse_vm_tag(&self.0)
    }

    pub fn is_virtualized(&self) -> bool {
        self.vm_suffix().is_some()
    }

    /// Strips one trailing `-vm<digits>` tag if present.
    pub fn base_name(&self) -> ServiceName {
        match find_vm_tag(&self.0) {
            Some((at, _)) => ServiceName(self.0[..at].to_string()),
            None => self.clone(),
        }
    }

    pub fn with_vm_suffix(&self, vm: VmId) -> ServiceName {
        ServiceName(format!("{}{}", self.0, vm.suffix()))
    }
}

impl fmt::Display for ServiceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Finds a trailing `-vm<digits>` tag: returns (byte offset of `-vm`, id).
///
/// The tag is parsed from the *last* `-vm` occurrence so that already-tagged
/// strings like `foo-vm2-vm5` resolve to the outermost tag (5).
pub fn find_vm_tag(s: &str) -> Option<(usize, VmId)> {
    let at = s.rfind("-vm")?;
    let digits = &s[at + 3..];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let id: u32 = digits.parse().ok()?;
    VmId::new(id).map(|vm| (at, vm))
}

/// The VM a string is tagged for, if it ends in `-vm<digits>`.
pub fn parse_vm_tag(s: &str) -> Option<VmId> {
    find_vm_tag(s).map(|(_, vm)| vm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_name_validation() {
        assert!(ObjectName::new(r"\BaseNamedObjects\Foo").is_ok());
        assert!(ObjectName::new(r"\RPC Control\ntsvcs").is_ok());
        // A single odd-looking segment is still one valid segment.
        assert!(ObjectName::new(r"\BaseNamedObjects__R_000000000da_SMem__").is_ok());
        assert!(matches!(
            ObjectName::new(r"BaseNamedObjects\Foo"),
            Err(NameError::MissingRoot(_))
        ));
        assert!(matches!(
            ObjectName::new(r"\BaseNamedObjects\Foo\"),
            Err(NameError::TrailingSeparator(_))
        ));
        assert!(matches!(
            ObjectName::new(r"\BaseNamedObjects\\Foo"),
            Err(NameError::EmptySegment(_))
        ));
    }

    #[test]
    fn object_suffix_appends_to_last_segment() {
        let n = ObjectName::new(r"\BaseNamedObjects\Work").unwrap();
        let vm = VmId::new(1).unwrap();
        assert_eq!(n.with_vm_suffix(vm).as_str(), r"\BaseNamedObjects\Work-vm1");
    }

    #[test]
    fn service_name_tags() {
        let orig = ServiceName::new("RpcSs").unwrap();
        assert!(!orig.is_virtualized());
        assert_eq!(orig.base_name(), orig);

        let vm2 = VmId::new(2).unwrap();
        let clone = orig.with_vm_suffix(vm2);
        assert_eq!(clone.as_str(), "RpcSs-vm2");
        assert_eq!(clone.vm_suffix(), Some(vm2));
        assert_eq!(clone.base_name().as_str(), "RpcSs");
    }

    #[test]
    fn vm_tag_parses_last_occurrence() {
        assert_eq!(parse_vm_tag("foo-vm2-vm5"), Some(VmId::new(5).unwrap()));
        assert_eq!(parse_vm_tag("rpcss-vm12"), Some(VmId::new(12).unwrap()));
        assert_eq!(parse_vm_tag("rpcss-vm"), None);
        assert_eq!(parse_vm_tag("rpcss-vm1x"), None);
        assert_eq!(parse_vm_tag("rpcss"), None);
        // vm ids start at 1; a zero tag is not a tag.
        assert_eq!(parse_vm_tag("svc-vm0"), None);
    }

    #[test]
    fn service_name_rejects_whitespace() {
        assert!(ServiceName::new("a b").is_err());
        assert!(ServiceName::new("").is_err());
        assert!(ServiceName::new(r"a\b").is_err());
    }
}
