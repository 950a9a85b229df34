//! One runner per command. Each takes a validated manifest and an output
//! directory, writes its files there and returns the run report.

mod msgtwin;
mod policy;
mod sim;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nettwin_core::msgcodec::CodecError;
use nettwin_core::msgtwin::MsgTwinError;
use nettwin_core::netsim::SimError;
use nettwin_core::policytwin::PolicyTwinError;
use thiserror::Error;

use crate::manifest::{ConfigError, ExperimentKind, ExperimentManifest};
use crate::output::OutputDir;
use crate::persist::PersistError;
use crate::report::RunReport;

pub use sim::{load_trajectory, trajectory_text};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    MsgTwin(#[from] MsgTwinError),
    #[error(transparent)]
    Policy(#[from] PolicyTwinError),
    #[error("{0}")]
    Failed(String),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for everything
    /// that goes wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    BuildDatasets,
    TrainMsgtwin,
    EvalMsgtwin,
    Fig4,
    TrainGan,
    ClonePolicy,
    Fig5,
    Finetune,
    Report,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Simulate,
        Command::BuildDatasets,
        Command::TrainMsgtwin,
        Command::EvalMsgtwin,
        Command::Fig4,
        Command::TrainGan,
        Command::ClonePolicy,
        Command::Fig5,
        Command::Finetune,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::BuildDatasets => "build-datasets",
            Command::TrainMsgtwin => "train-msgtwin",
            Command::EvalMsgtwin => "eval-msgtwin",
            Command::Fig4 => "fig4",
            Command::TrainGan => "train-gan",
            Command::ClonePolicy => "clone-policy",
            Command::Fig5 => "fig5",
            Command::Finetune => "finetune",
            Command::Report => "report",
        }
    }

    /// Manifest kinds the command accepts; `None` means any kind.
    fn kinds(self) -> Option<&'static [ExperimentKind]> {
        use ExperimentKind::*;
        match self {
            Command::Simulate | Command::BuildDatasets | Command::Report => None,
            Command::TrainMsgtwin | Command::EvalMsgtwin | Command::Fig4 => Some(&[MsgtwinSweep]),
            Command::TrainGan => Some(&[GanAblation]),
            Command::ClonePolicy => Some(&[PolicyClone, DrlCompare]),
            Command::Fig5 => Some(&[DrlCompare]),
            Command::Finetune => Some(&[Finetune]),
        }
    }

    /// The command that produces a manifest kind's headline outputs.
    pub fn for_kind(kind: ExperimentKind) -> Command {
        match kind {
            ExperimentKind::TraceGen => Command::Simulate,
            ExperimentKind::MsgtwinSweep => Command::Fig4,
            ExperimentKind::PolicyClone => Command::ClonePolicy,
            ExperimentKind::GanAblation => Command::TrainGan,
            ExperimentKind::DrlCompare => Command::Fig5,
            ExperimentKind::Finetune => Command::Finetune,
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown command {s}"))
    }
}

/// Runs `command` for `manifest`, writing under `out_root`.
pub fn run(command: Command, manifest: &ExperimentManifest, out_root: &Path) -> Result<RunReport, RunError> {
    if let Some(kinds) = command.kinds() {
        if !kinds.contains(&manifest.kind) {
            let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
            return Err(ConfigError::new(format!(
                "command {command} needs a manifest of kind {}, found \"{}\"",
                names.join(" or "),
                manifest.kind
            ))
            .into());
        }
    }
    let started = Instant::now();
    let digest = manifest.digest();
    if command == Command::Report {
        return verify_reports(out_root, &digest);
    }
    let mut out = OutputDir::create(out_root, &digest)?;
    let mut report = RunReport::new(command.name(), manifest.kind.name(), &digest);
    log::info!("{command}: {} manifest {} -> {}", manifest.kind, &digest[..12], out_root.display());
    match command {
        Command::Simulate => sim::simulate(manifest, &mut out, &mut report)?,
        Command::BuildDatasets => sim::build_datasets(manifest, &mut out, &mut report)?,
        Command::TrainMsgtwin => msgtwin::train(manifest, &mut out, &mut report)?,
        Command::EvalMsgtwin => msgtwin::eval(manifest, &mut out, &mut report)?,
        Command::Fig4 => msgtwin::fig4(manifest, &mut out, &mut report)?,
        Command::Finetune => msgtwin::finetune(manifest, &mut out, &mut report)?,
        Command::ClonePolicy => policy::clone_policy(manifest, &mut out, &mut report)?,
        Command::TrainGan => policy::gan_ablation(manifest, &mut out, &mut report)?,
        Command::Fig5 => policy::fig5(manifest, &mut out, &mut report)?,
        Command::Report => unreachable!("handled above"),
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(report.finish(&mut out)?)
}

/// Checks every run report in `root` written for this manifest.
fn verify_reports(root: &Path, digest: &str) -> Result<RunReport, RunError> {
    let entries = std::fs::read_dir(root).map_err(|e| PersistError::io(root, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("run_report_") && n.ends_with(".json") && n != "run_report_report.json")
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(RunError::Failed(format!("no run reports in {}", root.display())));
    }
    let mut summary = RunReport::new("report", "report", digest);
    let mut table = crate::report::MetricTable::new(&["report", "command", "files", "problems"]);
    let mut problems = Vec::new();
    for name in names {
        let r = RunReport::load(&root.join(&name))?;
        let mut found = if r.manifest_digest == digest {
            r.verify(root)
        } else {
            vec![format!("written for manifest {}", r.manifest_digest)]
        };
        table.push(vec![name.clone().into(), r.command.clone().into(), r.files.len().into(), found.len().into()]);
        for p in found.iter_mut() {
            *p = format!("{name}: {p}");
        }
        problems.extend(found);
    }
    summary.tables.insert("reports".into(), table);
    if !problems.is_empty() {
        return Err(RunError::Failed(problems.join("\n")));
    }
    Ok(summary)
}

/// Median of a non-empty list; the mean of the middle pair for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn seeds_comment(seeds: &[u64]) -> (&'static str, String) {
    ("seeds", seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn command_names_parse_back() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
    }

    #[test]
    fn wrong_kind_is_a_config_error() {
        let m = ExperimentManifest::parse("schema_version = 1\nkind = \"trace-gen\"\nseeds = [0]\noutput_dir = \"x\"\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let e = run(Command::Fig5, &m, dir.path()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
