//! Experiment manifests, persistence and the run driver behind the
//! `nettwin` command.

pub mod experiments;
pub mod manifest;
pub mod output;
pub mod persist;
pub mod report;

pub use experiments::{run, Command, RunError};
pub use manifest::{ConfigError, ExperimentKind, ExperimentManifest};
pub use report::RunReport;
