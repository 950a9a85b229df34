//! Episodes, traces and the datasets built from them.

use std::path::Path;

use nettwin_core::msgcodec::{build_policy_dataset, MessageDataset, MessageTrace, Vocabulary, DEFAULT_CONTEXT_LENGTH};
use nettwin_core::netsim::{
    generate_signaling_trace, run_episode, Decision, GreedyPolicy, RequestLifecycle, SimConfig, SliceTally, Trajectory, SLICE_COUNT,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::RunError;
use crate::manifest::ExperimentManifest;
use crate::output::OutputDir;
use crate::persist::{message_dataset_text, policy_dataset_text, split_digest, PersistError};
use crate::report::{MetricTable, RunReport};

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum TrajectoryRecord {
    Summary { arrivals: u64, admitted: u64, expired: u64, cumulative_reward: f64, per_slice: [SliceTally; SLICE_COUNT] },
    Decision(Decision),
    Lifecycle(RequestLifecycle),
}

/// Line-delimited JSON: a summary record, then one record per decision,
/// then one per request lifecycle.
pub fn trajectory_text(t: &Trajectory) -> String {
    let mut out = String::new();
    let mut push = |r: &TrajectoryRecord| {
        out.push_str(&serde_json::to_string(r).expect("trajectory serializes"));
        out.push('\n');
    };
    push(&TrajectoryRecord::Summary {
        arrivals: t.arrivals,
        admitted: t.admitted,
        expired: t.expired,
        cumulative_reward: t.cumulative_reward,
        per_slice: t.per_slice,
    });
    for d in &t.decisions {
        push(&TrajectoryRecord::Decision(d.clone()));
    }
    for l in &t.lifecycles {
        push(&TrajectoryRecord::Lifecycle(l.clone()));
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<(Trajectory, Option<String>), PersistError> {
    let (digest, body) = split_digest(text);
    let corrupt = |reason: String| PersistError::CorruptFile { what: "trajectory".into(), reason };
    let mut lines = body.lines().enumerate();
    let first = lines.next().ok_or_else(|| corrupt("empty file".into()))?.1;
    let TrajectoryRecord::Summary { arrivals, admitted, expired, cumulative_reward, per_slice } =
        serde_json::from_str(first).map_err(|e| corrupt(format!("line 1: {e}")))?
    else {
        return Err(corrupt("first record is not the summary".into()));
    };
    let mut t = Trajectory { decisions: Vec::new(), arrivals, admitted, expired, cumulative_reward, per_slice, lifecycles: Vec::new() };
    for (i, line) in lines {
        match serde_json::from_str(line).map_err(|e| corrupt(format!("line {}: {e}", i + 1)))? {
            TrajectoryRecord::Decision(d) if t.lifecycles.is_empty() => t.decisions.push(d),
            TrajectoryRecord::Lifecycle(l) => t.lifecycles.push(l),
            _ => return Err(corrupt(format!("line {}: record out of order", i + 1))),
        }
    }
    if t.lifecycles.len() as u64 != t.arrivals {
        return Err(corrupt(format!("summary lists {} arrivals, file has {} lifecycles", t.arrivals, t.lifecycles.len())));
    }
    Ok((t, digest.map(str::to_string)))
}

pub fn load_trajectory(path: &Path) -> Result<(Trajectory, Option<String>), PersistError> {
    parse_trajectory(&std::fs::read_to_string(path).map_err(|e| PersistError::io(path, e))?)
}

fn episode_seed(cfg: &SimConfig, seed: u64) -> u64 {
    cfg.seed.wrapping_add(seed)
}

/// The greedy episode for one manifest seed, as a trace and as a
/// trajectory. Both come from the same random stream, so they describe
/// the same episode.
fn episode(cfg: &SimConfig, seed: u64) -> Result<(MessageTrace, Trajectory), RunError> {
    let s = episode_seed(cfg, seed);
    let trace = generate_signaling_trace(cfg, &mut GreedyPolicy::new(cfg), &mut ChaCha8Rng::seed_from_u64(s))?;
    let traj = run_episode(cfg, &mut GreedyPolicy::new(cfg), &mut ChaCha8Rng::seed_from_u64(s))?;
    Ok((trace, traj))
}

fn trace_path(seed: u64) -> String {
    format!("traces/seed_{seed}.trace")
}

fn trajectory_path(seed: u64) -> String {
    format!("trajectories/seed_{seed}.jsonl")
}

pub fn simulate(m: &ExperimentManifest, out: &mut OutputDir, report: &mut RunReport) -> Result<(), RunError> {
    let cfg = m.sim_config();
    let mut table = MetricTable::new(&["seed", "messages", "arrivals", "admitted", "expired", "cumulative_reward"]);
    #[derive(Serialize)]
    struct Row {
        seed: u64,
        messages: usize,
        arrivals: u64,
        admitted: u64,
        expired: u64,
        cumulative_reward: f64,
    }
    let mut rows = Vec::new();
    for &seed in &m.seeds {
        let (trace, traj) = episode(&cfg, seed)?;
        out.write_text(&trace_path(seed), &trace.to_text())?;
        out.write_text(&trajectory_path(seed), &trajectory_text(&traj))?;
        log::info!("seed {seed}: {} messages, {} arrivals", trace.messages.len(), traj.arrivals);
        let row = Row {
            seed,
            messages: trace.messages.len(),
            arrivals: traj.arrivals,
            admitted: traj.admitted,
            expired: traj.expired,
            cumulative_reward: traj.cumulative_reward,
        };
        table.push(vec![
            json!(row.seed),
            json!(row.messages),
            json!(row.arrivals),
            json!(row.admitted),
            json!(row.expired),
            json!(row.cumulative_reward),
        ]);
        rows.push(row);
    }
    out.write_csv("episodes.csv", &[], &rows)?;
    report.tables.insert("episodes".into(), table);
    Ok(())
}

/// Reads the episode that `simulate` wrote for `seed`, or regenerates it
/// when the files are missing or belong to another manifest.
fn load_or_generate(cfg: &SimConfig, out: &OutputDir, seed: u64) -> Result<(MessageTrace, Trajectory), RunError> {
    let tp = out.path(&trace_path(seed))?;
    let jp = out.path(&trajectory_path(seed))?;
    if tp.exists() && jp.exists() {
        let text = std::fs::read_to_string(&tp).map_err(|e| PersistError::io(&tp, e))?;
        let (trace_digest, _) = split_digest(&text);
        let (traj, traj_digest) = load_trajectory(&jp)?;
        if trace_digest == Some(out.digest()) && traj_digest.as_deref() == Some(out.digest()) {
            log::info!("seed {seed}: reusing {}", tp.display());
            return Ok((MessageTrace::from_text(&text)?, traj));
        }
    }
    episode(cfg, seed)
}

pub fn build_datasets(m: &ExperimentManifest, out: &mut OutputDir, report: &mut RunReport) -> Result<(), RunError> {
    let cfg = m.sim_config();
    let ctx = m.traces.as_ref().map_or(DEFAULT_CONTEXT_LENGTH, |t| t.context_length);
    let vocab = Vocabulary::default();
    #[derive(Serialize)]
    struct Row {
        seed: u64,
        message_samples: usize,
        policy_samples: usize,
        unrepresentable: usize,
    }
    let mut rows = Vec::new();
    let mut table = MetricTable::new(&["seed", "message_samples", "policy_samples", "unrepresentable"]);
    for &seed in &m.seeds {
        let (trace, traj) = load_or_generate(&cfg, out, seed)?;
        let msg = MessageDataset::from_traces(std::slice::from_ref(&trace), ctx, &vocab)?;
        let pol = build_policy_dataset(&traj, &cfg);
        out.write_text(&format!("datasets/seed_{seed}.msgds"), &message_dataset_text(&msg))?;
        out.write_text(&format!("datasets/seed_{seed}.policyds"), &policy_dataset_text(&pol))?;
        table.push(vec![json!(seed), json!(msg.len()), json!(pol.samples.len()), json!(pol.unrepresentable)]);
        rows.push(Row { seed, message_samples: msg.len(), policy_samples: pol.samples.len(), unrepresentable: pol.unrepresentable });
    }
    out.write_csv("datasets.csv", &[], &rows)?;
    report.tables.insert("datasets".into(), table);
    Ok(())
}
