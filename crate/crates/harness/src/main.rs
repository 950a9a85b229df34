use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nettwin::{run, Command, ExperimentManifest, RunError};

#[derive(Parser)]
#[command(name = "nettwin", version, about = "Run network digital-twin experiments from a manifest")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Experiment manifest (TOML).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory; defaults to the manifest's output_dir.
    #[arg(long, global = true, env = "NETTWIN_OUT")]
    out: Option<PathBuf>,
    /// Replace the manifest's seed list with this single seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "NETTWIN_LOG", default_value = "info")]
    log_level: log::LevelFilter,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Greedy episodes: signaling traces and trajectories.
    Simulate,
    /// Message and policy datasets from the simulated episodes.
    BuildDatasets,
    /// Train the message-level twins of a sweep and save checkpoints.
    TrainMsgtwin,
    /// Score saved message-level twins on held-out traces.
    EvalMsgtwin,
    /// Full concurrency sweep: train, score and aggregate.
    Fig4,
    /// GAN equilibrium checks and the scarce-data augmentation comparison.
    TrainGan,
    /// Behavior cloning of the greedy admission policy.
    ClonePolicy,
    /// A2C from the policy twin against A2C from scratch.
    Fig5,
    /// Adapt a pretrained message-level twin to a shifted setting.
    Finetune,
    /// Verify the run reports and files in the output directory.
    Report,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Command {
        match s {
            Sub::Simulate => Command::Simulate,
            Sub::BuildDatasets => Command::BuildDatasets,
            Sub::TrainMsgtwin => Command::TrainMsgtwin,
            Sub::EvalMsgtwin => Command::EvalMsgtwin,
            Sub::Fig4 => Command::Fig4,
            Sub::TrainGan => Command::TrainGan,
            Sub::ClonePolicy => Command::ClonePolicy,
            Sub::Fig5 => Command::Fig5,
            Sub::Finetune => Command::Finetune,
            Sub::Report => Command::Report,
        }
    }
}

fn execute(cli: &Cli) -> Result<(), RunError> {
    let path = cli.manifest.as_ref().ok_or_else(|| nettwin::ConfigError::new("--manifest is required"))?;
    let mut manifest = ExperimentManifest::load(path)?;
    if let Some(seed) = cli.seed_override {
        manifest = manifest.with_seed_override(seed);
    }
    let out = cli.out.clone().unwrap_or_else(|| manifest.output_dir.clone());
    let report = run(cli.command.into(), &manifest, &out)?;
    for (name, table) in &report.tables {
        println!("[{name}]");
        println!("{}", table.columns.join(","));
        for row in &table.rows {
            let cells: Vec<String> = row.iter().map(|v| v.as_str().map_or_else(|| v.to_string(), str::to_string)).collect();
            println!("{}", cells.join(","));
        }
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
