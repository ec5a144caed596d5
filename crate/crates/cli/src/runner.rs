//! Executes a loaded scenario against a fresh kernel: installs images,
//! services, and raw registry content, boots the world, walks the command
//! script, collects the report artifacts, and evaluates the scenario's
//! expectations for the active flag configuration.

use std::collections::BTreeMap;

use thiserror::Error;

use svcvirt_core::analyzer::{diff_traces, merge_proposals};
use svcvirt_core::namespace::ExemptionList;
use svcvirt_core::registry::{RegistryError, RegistryPath, ValuePayload};
use svcvirt_core::scm::{ServiceKind, ServiceRecord, StartType};
use svcvirt_core::trace::{Op, Trace, TraceEvent};
use svcvirt_core::types::{Placement, ServiceName};
use svcvirt_core::{Kernel, KernelError};

use crate::scenario::{
    CommandSpec, ExpectSpec, ExpectWhen, Scenario, ScenarioError, TraceMatchSpec,
};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("command {index} ({command}): {source}")]
    Command {
        index: usize,
        command: String,
        #[source]
        source: KernelError,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("registry content: {0}")]
    Registry(#[from] RegistryError),
}

/// Flag configuration for one run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replace the scenario's exemption list with an empty one.
    pub disable_exemptions: bool,
    /// Turn off hard-coded service-name argument rewriting.
    pub disable_name_rewrite: bool,
    /// Replace the scenario's exemption list with this one (wins over
    /// `disable_exemptions`); used by iterative analysis.
    pub exemption_override: Option<ExemptionList>,
}

/// One evaluated expectation.
#[derive(Debug, Clone)]
pub struct ExpectOutcome {
    pub description: String,
    pub passed: bool,
}

/// Everything a run produces.
pub struct RunArtifacts {
    pub kernel: Kernel,
    pub status_text: String,
    pub trace_text: String,
    pub registry_text: String,
    pub namespace_text: String,
    pub expectations: Vec<ExpectOutcome>,
}

impl RunArtifacts {
    pub fn all_passed(&self) -> bool {
        self.expectations.iter().all(|e| e.passed)
    }
}

/// Builds the kernel a scenario describes, without running any commands.
pub fn build_kernel(scenario: &Scenario, options: &RunOptions) -> Result<Kernel, RunnerError> {
    let exemptions = match (&options.exemption_override, options.disable_exemptions) {
        (Some(list), _) => list.clone(),
        (None, true) => ExemptionList::empty(),
        (None, false) => scenario.exemption_list()?,
    };
    let mut kernel = Kernel::new(exemptions);
    if options.disable_name_rewrite {
        kernel.set_name_rewrite(false);
    }

    for image in scenario.parsed_images()? {
        kernel.register_image(image)?;
    }
    for spec in &scenario.services {
        let name = ServiceName::new(spec.name.as_str()).expect("validated");
        let kind = match spec.kind.as_str() {
            "exe" => ServiceKind::ExeHosted {
                image: spec.image.clone(),
                image_path: spec.image_path.clone(),
                params: spec.params.clone(),
            },
            _ => ServiceKind::DllHosted {
                group: spec.group.clone().expect("validated"),
                image: spec.image.clone(),
                image_path: spec.image_path.clone(),
            },
        };
        kernel.install_service(ServiceRecord {
            name,
            kind,
            start_type: if spec.start == "auto" {
                StartType::Auto
            } else {
                StartType::Manual
            },
            depends_on_services: spec
                .depends_on_services
                .iter()
                .map(|d| ServiceName::new(d.as_str()).expect("validated"))
                .collect(),
            depends_on_groups: spec.depends_on_groups.clone(),
            owner_vm: Placement::Host,
        })?;
    }
    for reg in &scenario.registry {
        let path = RegistryPath::parse(&reg.path)?;
        let key = kernel.registry_mut().create_key(&path);
        for value in &reg.values {
            let payload = if let Some(i) = value.int {
                ValuePayload::Int(i)
            } else if let Some(s) = &value.str {
                ValuePayload::Str(s.clone())
            } else {
                ValuePayload::List(value.list.clone().expect("validated"))
            };
            kernel.registry_mut().set_value(key, &value.name, payload)?;
        }
    }

    Ok(kernel)
}

/// Runs a scenario end to end under the given flags.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<RunArtifacts, RunnerError> {
    let mut kernel = build_kernel(scenario, options)?;

    let core: Vec<(String, Vec<String>)> = scenario
        .core_processes
        .iter()
        .map(|p| (p.image.clone(), p.params.clone()))
        .collect();
    kernel.boot(&core)?;

    for (index, command) in scenario.commands.iter().enumerate() {
        let fail = |source: KernelError| RunnerError::Command {
            index: index + 1,
            command: describe_command(command),
            source,
        };
        match command {
            CommandSpec::CreateVm => {
                kernel.create_vm();
            }
            CommandSpec::Virtualize { service, vm } => {
                kernel.virtualize(service, *vm).map_err(fail)?;
            }
            CommandSpec::Start { service } => {
                kernel.start_service(service).map_err(fail)?;
            }
            CommandSpec::Stop { service } => {
                kernel.stop_service(service).map_err(fail)?;
            }
            CommandSpec::Run { max_steps } => {
                kernel.run(max_steps.unwrap_or(scenario.step_limit));
            }
        }
    }

    let status_text = kernel.status_report();
    let trace_text = kernel.trace().to_log_string();
    let registry_text = kernel.registry_dump();
    let namespace_text = kernel.namespace_dump();
    let expectations = evaluate_expectations(&kernel, &scenario.expects, options);

    Ok(RunArtifacts {
        kernel,
        status_text,
        trace_text,
        registry_text,
        namespace_text,
        expectations,
    })
}

fn describe_command(command: &CommandSpec) -> String {
    match command {
        CommandSpec::CreateVm => "create-vm".to_string(),
        CommandSpec::Virtualize { service, vm } => format!("virtualize {service} vm={vm}"),
        CommandSpec::Start { service } => format!("start {service}"),
        CommandSpec::Stop { service } => format!("stop {service}"),
        CommandSpec::Run { max_steps } => match max_steps {
            Some(n) => format!("run max-steps={n}"),
            None => "run".to_string(),
        },
    }
}

// ---------------------------------------------------------------------------
// Expectations
// ---------------------------------------------------------------------------

fn expect_applies(when: ExpectWhen, options: &RunOptions) -> bool {
    match when {
        ExpectWhen::Always => true,
        ExpectWhen::Default => !options.disable_exemptions && !options.disable_name_rewrite,
        ExpectWhen::NameRewriteDisabled => options.disable_name_rewrite,
        ExpectWhen::ExemptionsDisabled => options.disable_exemptions,
    }
}

fn matches_event(spec: &TraceMatchSpec, event: &TraceEvent) -> bool {
    let op = Op::parse(&spec.op).expect("validated");
    if event.op != op {
        return false;
    }
    if let Some(arg) = &spec.arg {
        if &event.arg != arg {
            return false;
        }
    }
    if let Some(fold) = &spec.arg_fold {
        if !event.arg.eq_ignore_ascii_case(fold) {
            return false;
        }
    }
    if let Some(xarg) = &spec.xarg {
        if &event.xarg != xarg {
            return false;
        }
    }
    if let Some(result) = &spec.result {
        if &event.result != result {
            return false;
        }
    }
    if let Some(vm) = &spec.vm {
        if &event.vm.to_string() != vm {
            return false;
        }
    }
    true
}

fn describe_match(spec: &TraceMatchSpec) -> String {
    let mut parts = vec![format!("op={}", spec.op)];
    if let Some(v) = &spec.arg {
        parts.push(format!("arg={v}"));
    }
    if let Some(v) = &spec.arg_fold {
        parts.push(format!("arg~={v}"));
    }
    if let Some(v) = &spec.xarg {
        parts.push(format!("xarg={v}"));
    }
    if let Some(v) = &spec.result {
        parts.push(format!("result={v}"));
    }
    if let Some(v) = &spec.vm {
        parts.push(format!("vm={v}"));
    }
    parts.join(" ")
}

fn evaluate_expectations(
    kernel: &Kernel,
    expects: &[ExpectSpec],
    options: &RunOptions,
) -> Vec<ExpectOutcome> {
    let events = kernel.trace().events();
    let mut out = Vec::new();
    for spec in expects {
        if !expect_applies(spec.when, options) {
            continue;
        }
        let (description, passed) = if let (Some(service), Some(status)) =
            (&spec.service, &spec.status)
        {
            let actual = kernel
                .service_status(service)
                .map(|s| s.to_string())
                .unwrap_or_else(|| "<unknown service>".to_string());
            (
                format!("service {service} ends {status} (actual: {actual})"),
                &actual == status,
            )
        } else if let Some(m) = &spec.trace {
            let hit = events.iter().any(|e| matches_event(m, e));
            if m.absent {
                (format!("no trace event [{}]", describe_match(m)), !hit)
            } else {
                (format!("trace has [{}]", describe_match(m)), hit)
            }
        } else {
            let (first, then) = (
                spec.first.as_ref().expect("validated"),
                spec.then.as_ref().expect("validated"),
            );
            let a = events.iter().find(|e| matches_event(first, e));
            let b = events.iter().find(|e| matches_event(then, e));
            let passed = match (a, b) {
                (Some(a), Some(b)) => a.step < b.step,
                _ => false,
            };
            (
                format!(
                    "[{}] precedes [{}]",
                    describe_match(first),
                    describe_match(then)
                ),
                passed,
            )
        };
        out.push(ExpectOutcome {
            description,
            passed,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Iterative trace analysis
// ---------------------------------------------------------------------------

/// Result of driving the diff-and-extend loop to a fixed point.
pub struct FixedPointReport {
    /// Exemption list at the fixed point.
    pub list: ExemptionList,
    /// Loop passes executed, including the final pass that added nothing.
    pub iterations: usize,
    /// Patterns added per pass.
    pub additions: Vec<Vec<String>>,
}

/// Repeatedly runs `vm_scenario` with a growing exemption list, diffing its
/// trace against a fixed host-run trace and folding the proposals back in,
/// until a pass proposes nothing new.
pub fn exemption_fixed_point(
    host_trace: &Trace,
    vm_scenario: &Scenario,
    start: ExemptionList,
    max_iterations: usize,
) -> Result<FixedPointReport, RunnerError> {
    let mut list = start;
    let mut additions = Vec::new();
    for pass in 1..=max_iterations {
        let artifacts = run_scenario(
            vm_scenario,
            &RunOptions {
                exemption_override: Some(list.clone()),
                ..RunOptions::default()
            },
        )?;
        let proposals = diff_traces(host_trace, artifacts.kernel.trace());
        let merged = merge_proposals(&list, &proposals);
        let added = merged.added;
        let done = added.is_empty();
        list = merged.list;
        additions.push(added);
        if done {
            return Ok(FixedPointReport {
                list,
                iterations: pass,
                additions,
            });
        }
    }
    Ok(FixedPointReport {
        list,
        iterations: max_iterations,
        additions,
    })
}

/// Distinct service statuses counted by spelling, for quick summaries.
pub fn status_census(status_text: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for line in status_text.lines() {
        if let Some(status) = line.split(' ').nth(3) {
            *counts.entry(status.to_string()).or_insert(0) += 1;
        }
    }
    counts
}
