//! Scenario files: the declarative TOML format describing a simulated
//! world (images, services, raw registry content, boot-time processes, an
//! exemption list), the command script to run against it, and the
//! expectations the run must satisfy. The full field reference lives in
//! `docs/scenario-format.md`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use svcvirt_core::namespace::ExemptionList;
use svcvirt_core::procsim::{scan_image_for_hardcoded_names, Action, ServiceImage};
use svcvirt_core::types::{parse_vm_tag, ServiceName};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Toml(String),
    #[error("scenario invalid: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Raw serde layer (field names are the file format)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Scenario {
    /// Display name used in reports; defaults to the file stem.
    #[serde(default)]
    pub name: Option<String>,
    /// Scheduler step budget for every `run` command without its own limit.
    #[serde(default = "default_step_limit")]
    pub step_limit: u64,
    /// `"default"` for the shipped list, `"none"` for an empty list, or an
    /// inline array of pattern lines.
    #[serde(default)]
    pub exemptions: ExemptionsSpec,
    #[serde(default, rename = "image")]
    pub images: Vec<ImageSpec>,
    #[serde(default, rename = "service")]
    pub services: Vec<ServiceSpec>,
    #[serde(default, rename = "registry")]
    pub registry: Vec<RegistrySpec>,
    #[serde(default, rename = "core-process")]
    pub core_processes: Vec<CoreProcessSpec>,
    #[serde(default, rename = "command")]
    pub commands: Vec<CommandSpec>,
    #[serde(default, rename = "expect")]
    pub expects: Vec<ExpectSpec>,
}

fn default_step_limit() -> u64 {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ExemptionsSpec {
    Named(String),
    Inline(Vec<String>),
}

impl Default for ExemptionsSpec {
    fn default() -> Self {
        ExemptionsSpec::Named("default".to_string())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ImageSpec {
    pub id: String,
    /// One action per line; see the action grammar in the docs.
    pub script: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ServiceSpec {
    pub name: String,
    /// `"exe"` or `"dll"`.
    pub kind: String,
    pub image: String,
    pub image_path: String,
    /// Exe services only.
    #[serde(default)]
    pub params: Vec<String>,
    /// Dll services only: the hosting group.
    #[serde(default)]
    pub group: Option<String>,
    /// `"auto"` or `"manual"`; defaults to manual.
    #[serde(default = "default_start")]
    pub start: String,
    #[serde(default)]
    pub depends_on_services: Vec<String>,
    #[serde(default)]
    pub depends_on_groups: Vec<String>,
}

fn default_start() -> String {
    "manual".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RegistrySpec {
    pub path: String,
    #[serde(default)]
    pub values: Vec<RegistryValueSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RegistryValueSpec {
    pub name: String,
    #[serde(default)]
    pub int: Option<i64>,
    #[serde(default)]
    pub str: Option<String>,
    #[serde(default)]
    pub list: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CoreProcessSpec {
    pub image: String,
    #[serde(default)]
    pub params: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "op")]
pub enum CommandSpec {
    /// Creates the next VM; ids are sequential from 1.
    CreateVm,
    /// Duplicates a service (and its dependency closure) into a VM.
    Virtualize { service: String, vm: u32 },
    /// Begins a dependency-ordered start.
    Start { service: String },
    /// Stops a running or starting service.
    Stop { service: String },
    /// Drives the scheduler until quiescence or the step budget runs out.
    Run {
        #[serde(default)]
        max_steps: Option<u64>,
    },
}

/// Which flag configuration an expectation applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectWhen {
    /// Neither mechanism disabled (the plain run).
    #[default]
    Default,
    /// Only under `--disable-name-rewrite`.
    NameRewriteDisabled,
    /// Only under `--disable-exemptions`.
    ExemptionsDisabled,
    /// Every configuration.
    Always,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExpectSpec {
    #[serde(default)]
    pub when: ExpectWhen,
    /// Status expectation: this service...
    #[serde(default)]
    pub service: Option<String>,
    /// ...must end in this status (the status-report spelling).
    #[serde(default)]
    pub status: Option<String>,
    /// Trace expectation: at least one matching event (or none, with
    /// `absent = true`).
    #[serde(default)]
    pub trace: Option<TraceMatchSpec>,
    /// Ordering expectation: the first match of `first` precedes the first
    /// match of `then`.
    #[serde(default)]
    pub first: Option<TraceMatchSpec>,
    #[serde(default)]
    pub then: Option<TraceMatchSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TraceMatchSpec {
    pub op: String,
    #[serde(default)]
    pub arg: Option<String>,
    /// Case-insensitive comparison against the original argument.
    #[serde(default)]
    pub arg_fold: Option<String>,
    #[serde(default)]
    pub xarg: Option<String>,
    #[serde(default)]
    pub result: Option<String>,
    /// `"host"` or a VM number.
    #[serde(default)]
    pub vm: Option<String>,
    /// Inverts the expectation: no event may match.
    #[serde(default)]
    pub absent: bool,
}

// ---------------------------------------------------------------------------
// Loading and validation
// ---------------------------------------------------------------------------

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut scenario = Scenario::parse_str(&text)?;
        if scenario.name.is_none() {
            scenario.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned());
        }
        Ok(scenario)
    }

    pub fn parse_str(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| ScenarioError::Toml(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// The effective exemption list the scenario declares.
    pub fn exemption_list(&self) -> Result<ExemptionList, ScenarioError> {
        match &self.exemptions {
            ExemptionsSpec::Named(tag) if tag == "default" => Ok(ExemptionList::shipped()),
            ExemptionsSpec::Named(tag) if tag == "none" => Ok(ExemptionList::empty()),
            ExemptionsSpec::Named(tag) => Err(ScenarioError::Invalid(format!(
                "exemptions must be \"default\", \"none\", or an inline array, not {tag:?}"
            ))),
            ExemptionsSpec::Inline(lines) => ExemptionList::parse(&lines.join("\n"))
                .map_err(|e| ScenarioError::Invalid(format!("inline exemption list: {e}"))),
        }
    }

    /// Parsed behavior scripts, in declaration order.
    pub fn parsed_images(&self) -> Result<Vec<ServiceImage>, ScenarioError> {
        let mut out = Vec::new();
        for spec in &self.images {
            let mut script = Vec::new();
            for (i, line) in spec.script.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let action = Action::parse(line).map_err(|e| {
                    ScenarioError::Invalid(format!(
                        "image {:?} script line {}: {}",
                        spec.id,
                        i + 1,
                        e.reason
                    ))
                })?;
                script.push(action);
            }
            out.push(ServiceImage {
                id: spec.id.clone(),
                script,
            });
        }
        Ok(out)
    }

    /// Static whole-file validation: every cross-reference resolves, every
    /// enumerated field carries a known value, the step budget is sane.
    fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |msg: String| Err(ScenarioError::Invalid(msg));

        if self.step_limit == 0 {
            return invalid("step-limit must be at least 1".into());
        }
        self.exemption_list()?;
        let images = self.parsed_images()?;
        let mut image_ids = BTreeSet::new();
        for img in &images {
            if !image_ids.insert(img.id.to_lowercase()) {
                return invalid(format!("duplicate image id {:?}", img.id));
            }
        }

        let mut service_names = BTreeSet::new();
        for svc in &self.services {
            let name = ServiceName::new(svc.name.as_str())
                .map_err(|e| ScenarioError::Invalid(format!("service name: {e}")))?;
            if !service_names.insert(name.key()) {
                return invalid(format!("duplicate service {:?}", svc.name));
            }
            if parse_vm_tag(&svc.name).is_some() {
                return invalid(format!(
                    "service {:?} carries a VM tag; scenarios declare originals only",
                    svc.name
                ));
            }
            match svc.kind.as_str() {
                "exe" => {
                    if svc.group.is_some() {
                        return invalid(format!("exe service {:?} cannot have a group", svc.name));
                    }
                }
                "dll" => {
                    if svc.group.is_none() {
                        return invalid(format!("dll service {:?} needs a group", svc.name));
                    }
                    if !svc.params.is_empty() {
                        return invalid(format!("dll service {:?} cannot have params", svc.name));
                    }
                }
                other => {
                    return invalid(format!(
                        "service {:?}: kind must be \"exe\" or \"dll\", not {other:?}",
                        svc.name
                    ))
                }
            }
            if !matches!(svc.start.as_str(), "auto" | "manual") {
                return invalid(format!(
                    "service {:?}: start must be \"auto\" or \"manual\"",
                    svc.name
                ));
            }
            if !image_ids.contains(&svc.image.to_lowercase()) {
                return invalid(format!(
                    "service {:?} references unknown image {:?}",
                    svc.name, svc.image
                ));
            }
        }

        // Dependencies must name declared services (groups are free-form).
        for svc in &self.services {
            for dep in &svc.depends_on_services {
                if !service_names.contains(&dep.to_lowercase()) {
                    return invalid(format!(
                        "service {:?} depends on undeclared service {:?}",
                        svc.name, dep
                    ));
                }
            }
        }

        for proc in &self.core_processes {
            if !image_ids.contains(&proc.image.to_lowercase()) {
                return invalid(format!(
                    "core process references unknown image {:?}",
                    proc.image
                ));
            }
        }

        for reg in &self.registry {
            for value in &reg.values {
                let set = [
                    value.int.is_some(),
                    value.str.is_some(),
                    value.list.is_some(),
                ];
                if set.iter().filter(|&&b| b).count() != 1 {
                    return invalid(format!(
                        "registry value {:?} under {:?} must set exactly one of int/str/list",
                        value.name, reg.path
                    ));
                }
            }
        }

        // Commands: VM references must be creatable, service references must
        // resolve to a declared original or to a duplicate a prior command
        // can have produced.
        let mut vms_created: u32 = 0;
        for cmd in &self.commands {
            match cmd {
                CommandSpec::CreateVm => vms_created += 1,
                CommandSpec::Virtualize { service, vm } => {
                    if !service_names.contains(&service.to_lowercase()) {
                        return invalid(format!(
                            "virtualize names undeclared service {service:?}"
                        ));
                    }
                    if *vm == 0 || *vm > vms_created {
                        return invalid(format!(
                            "virtualize {service:?} into vm {vm} before create-vm makes it live"
                        ));
                    }
                }
                CommandSpec::Start { service } | CommandSpec::Stop { service } => {
                    let name = ServiceName::new(service.as_str())
                        .map_err(|e| ScenarioError::Invalid(format!("command service: {e}")))?;
                    let base_ok = service_names.contains(&name.base_name().key());
                    let vm_ok = match name.vm_suffix() {
                        None => true,
                        Some(vm) => vm.get() <= vms_created,
                    };
                    if !base_ok || !vm_ok {
                        return invalid(format!(
                            "command names unresolvable service {service:?}"
                        ));
                    }
                }
                CommandSpec::Run { max_steps } => {
                    if max_steps == &Some(0) {
                        return invalid("run: max-steps must be at least 1".into());
                    }
                }
            }
        }

        for (i, expect) in self.expects.iter().enumerate() {
            let kinds = [
                expect.service.is_some() || expect.status.is_some(),
                expect.trace.is_some(),
                expect.first.is_some() || expect.then.is_some(),
            ];
            if kinds.iter().filter(|&&b| b).count() != 1 {
                return invalid(format!(
                    "expect #{}: set exactly one of service+status, trace, or first+then",
                    i + 1
                ));
            }
            if expect.service.is_some() != expect.status.is_some() {
                return invalid(format!("expect #{}: service and status go together", i + 1));
            }
            if expect.first.is_some() != expect.then.is_some() {
                return invalid(format!("expect #{}: first and then go together", i + 1));
            }
            for m in [&expect.trace, &expect.first, &expect.then]
                .into_iter()
                .flatten()
            {
                if svcvirt_core::trace::Op::parse(&m.op).is_none() {
                    return invalid(format!("expect #{}: unknown op {:?}", i + 1, m.op));
                }
                if let Some(vm) = &m.vm {
                    if vm != "host" && vm.parse::<u32>().map_or(true, |n| n == 0) {
                        return invalid(format!(
                            "expect #{}: vm must be \"host\" or a positive number",
                            i + 1
                        ));
                    }
                }
            }
        }

        Ok(())
    }

    /// Hard-coded service-name findings across all images, for author
    /// warnings: literal (non-self) names passed to service-control or
    /// string APIs keep their spelling when duplicated, which is exactly
    /// what the rewrite step exists to fix.
    pub fn hardcoded_name_report(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Ok(images) = self.parsed_images() {
            for img in &images {
                for finding in scan_image_for_hardcoded_names(img) {
                    out.push(format!(
                        "image {:?} action #{} passes hard-coded name {:?} to a {} call",
                        img.id,
                        finding.index + 1,
                        finding.literal,
                        match finding.api_class {
                            svcvirt_core::procsim::ApiClass::ServiceApi => "service-control",
                            svcvirt_core::procsim::ApiClass::StringApi => "string",
                        }
                    ));
                }
            }
        }
        out
    }
}
