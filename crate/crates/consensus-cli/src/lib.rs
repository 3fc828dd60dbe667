//! Front end for the consensus simulator: JSON run configs, builtin
//! scenarios, condition reports, and file outputs.
//!
//! The binary (`consensus-sim`) is a thin wrapper over this library so that
//! integration tests can drive the same code paths in process.

pub mod builtins;
pub mod config;
pub mod output;
pub mod report;

pub use config::{resolve, Overrides, ResolvedRun, RunConfig};
pub use output::write_outputs;
pub use report::{check_run, execute_run, Outcome, RunOutcome, SummaryDoc};
