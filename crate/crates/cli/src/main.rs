//! `svcvirt` — batch front end for the service-virtualization simulator.
//!
//! Subcommands:
//! * `run <scenario.toml>` executes a scenario and checks its expectations;
//!   exit 0 if they all hold, 1 if any fails, 2 on load/run errors.
//! * `analyze <host.log> <vm.log>` diffs two trace logs and prints the
//!   exemption patterns the divergence suggests.
//! * `dump-defaults` prints the shipped exemption list.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use svcvirt_cli::runner::{run_scenario, RunOptions};
use svcvirt_cli::scenario::Scenario;
use svcvirt_core::analyzer::{diff_traces, merge_proposals};
use svcvirt_core::namespace::ExemptionList;
use svcvirt_core::trace::Trace;

#[derive(Parser)]
#[command(
    name = "svcvirt",
    about = "Deterministic simulator for OS-level service virtualization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario file and check its expectations.
    Run {
        /// Path to the scenario TOML file.
        scenario: PathBuf,
        /// Run with an empty exemption list (full renaming, no shared names).
        #[arg(long)]
        disable_exemptions: bool,
        /// Run without rewriting hard-coded service-name arguments.
        #[arg(long)]
        disable_name_rewrite: bool,
        /// Directory for the report artifacts (status.txt, trace.log,
        /// registry.txt, namespace.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diff a reference trace against a virtualized trace and propose
    /// exemption patterns for the names that diverged.
    Analyze {
        /// Trace log from the plain (host) run.
        host: PathBuf,
        /// Trace log from the virtualized run.
        vm: PathBuf,
    },
    /// Print the shipped exemption list.
    DumpDefaults,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            scenario,
            disable_exemptions,
            disable_name_rewrite,
            out,
        } => cmd_run(&scenario, disable_exemptions, disable_name_rewrite, out),
        Command::Analyze { host, vm } => cmd_analyze(&host, &vm),
        Command::DumpDefaults => {
            print!("{}", ExemptionList::shipped().to_file_string());
            ExitCode::SUCCESS
        }
    }
}

fn cmd_run(
    path: &PathBuf,
    disable_exemptions: bool,
    disable_name_rewrite: bool,
    out: Option<PathBuf>,
) -> ExitCode {
    let scenario = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    for warning in scenario.hardcoded_name_report() {
        eprintln!("warning: {warning}");
    }
    let options = RunOptions {
        disable_exemptions,
        disable_name_rewrite,
        exemption_override: None,
    };
    let artifacts = match run_scenario(&scenario, &options) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    if let Some(dir) = out {
        if let Err(e) = write_artifacts(&dir, &artifacts) {
            eprintln!("error: cannot write outputs to {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    }

    let name = scenario.name.as_deref().unwrap_or("scenario");
    for outcome in &artifacts.expectations {
        let mark = if outcome.passed { "pass" } else { "FAIL" };
        println!("{mark}: {}", outcome.description);
    }
    if artifacts.expectations.is_empty() {
        println!("{name}: no expectations declared; run completed");
    }
    if artifacts.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn write_artifacts(
    dir: &PathBuf,
    artifacts: &svcvirt_cli::runner::RunArtifacts,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("status.txt"), &artifacts.status_text)?;
    std::fs::write(dir.join("trace.log"), &artifacts.trace_text)?;
    std::fs::write(dir.join("registry.txt"), &artifacts.registry_text)?;
    std::fs::write(dir.join("namespace.txt"), &artifacts.namespace_text)?;
    Ok(())
}

fn cmd_analyze(host_path: &PathBuf, vm_path: &PathBuf) -> ExitCode {
    let load = |path: &PathBuf| -> Result<Trace, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Trace::parse_log(&text).map_err(|e| format!("{}: {e}", path.display()))
    };
    let (host, vm) = match (load(host_path), load(vm_path)) {
        (Ok(h), Ok(v)) => (h, v),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let proposals = diff_traces(&host, &vm);
    let merged = merge_proposals(&ExemptionList::empty(), &proposals);
    if merged.added.is_empty() {
        println!("no divergence: the virtualized trace needs no new exemptions");
    } else {
        println!("proposed exemption patterns:");
        for pattern in &merged.added {
            println!("  {pattern}");
        }
    }
    ExitCode::SUCCESS
}
