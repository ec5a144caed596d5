//! Library half of the `svcvirt` command-line tool: scenario file loading
//! and validation, plus the runner that executes a scenario against the
//! simulated kernel and evaluates its expectations.

pub mod runner;
pub mod scenario;

pub use runner::{
    build_kernel, exemption_fixed_point, run_scenario, status_census, ExpectOutcome,
    FixedPointReport, RunArtifacts, RunOptions, RunnerError,
};
pub use scenario::{Scenario, ScenarioError};
