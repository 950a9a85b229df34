use std::fs;
use std::path::Path;

use nettwin::{run, Command, ExperimentManifest};

const TINY_SWEEP: &str = r#"schema_version = 1
kind = "msgtwin-sweep"
seeds = [3]
output_dir = "unused"

[sim]

[sweep]
ue_levels = [2, 6]
train_episodes = 2
test_episodes = 1
horizon = 20.0
max_eval_samples = 20
max_param_gap = 0.5

[[models]]
[models.model]
kind = "transformer"
num_layers = 1
num_heads = 2
model_dim = 8
ff_dim = 16
context_length = 32

[models.train]
total_steps = 4
batch_size = 2

[[models]]
[models.model]
kind = "lstm"
num_layers = 1
hidden_dim = 8
embed_dim = 8
context_length = 32

[models.train]
total_steps = 4
batch_size = 2
"#;

const TINY_DRL: &str = r#"schema_version = 1
kind = "drl-compare"
seeds = [0]
output_dir = "unused"

[sim]
horizon = 10.0

[clone]
samples = 50
test_states = 20

[clone.train]
hidden = [8]
steps = 5

[a2c]
total_iterations = 10
eval_stride = 1
eval_episodes = 1
rollout_length = 4
actor_hidden = [8]
critic_hidden = [8]
"#;

/// Data rows of a harness CSV: digest and comment lines dropped, header
/// returned separately.
fn csv_rows(path: &Path) -> (String, Vec<String>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().to_string();
    (header, lines.map(str::to_string).collect())
}

#[test]
fn fig4_has_one_row_per_model_and_level_with_pinned_columns() {
    let m = ExperimentManifest::parse(TINY_SWEEP).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run(Command::Fig4, &m, dir.path()).unwrap();
    let (header, rows) = csv_rows(&dir.path().join("fig4.csv"));
    assert_eq!(header, "model,max_concurrent_ues,message_accuracy,token_accuracy,ie_recall,ie_precision,decode_failure_rate");
    assert_eq!(rows.len(), 4);
    let keys: Vec<(String, String)> = rows.iter().map(|r| {
        let mut f = r.split(',');
        (f.next().unwrap().to_string(), f.next().unwrap().to_string())
    }).collect();
    assert_eq!(keys, [("transformer", "2"), ("lstm", "2"), ("transformer", "6"), ("lstm", "6")].map(|(a, b)| (a.into(), b.into())));
    let plot = fs::read_to_string(dir.path().join("fig4.dat")).unwrap();
    assert_eq!(plot.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).count(), 4);
}

#[test]
fn split_train_and_eval_match_the_one_shot_sweep() {
    let m = ExperimentManifest::parse(TINY_SWEEP).unwrap();
    let one = tempfile::tempdir().unwrap();
    run(Command::Fig4, &m, one.path()).unwrap();
    let split = tempfile::tempdir().unwrap();
    assert!(run(Command::EvalMsgtwin, &m, split.path()).is_err(), "eval without checkpoints must fail");
    run(Command::TrainMsgtwin, &m, split.path()).unwrap();
    run(Command::EvalMsgtwin, &m, split.path()).unwrap();
    for f in ["fig4.csv", "fig4_per_seed.csv", "fig4.dat"] {
        assert_eq!(fs::read(one.path().join(f)).unwrap(), fs::read(split.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fig5_writes_two_curves_of_the_requested_length() {
    let m = ExperimentManifest::parse(TINY_DRL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run(Command::Fig5, &m, dir.path()).unwrap();
    for label in ["twin", "scratch"] {
        let path = dir.path().join(format!("fig5_{label}.csv"));
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().any(|l| l == "# seeds=0"), "{label} curve lacks its seed list");
        let (header, rows) = csv_rows(&path);
        assert_eq!(header, "iteration,mean_reward,stddev,series_label");
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.ends_with(&format!(",{label}"))));
    }
    assert_eq!(report.tables["fig5"].rows.len(), 10);
    assert!(report.files.iter().any(|f| f.path == "checkpoints/policy_twin.ckpt"));
}

#[test]
fn run_report_lists_every_file_with_the_manifest_digest() {
    let m = ExperimentManifest::parse(TINY_DRL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run(Command::Fig5, &m, dir.path()).unwrap();
    assert_eq!(report.manifest_digest, m.digest());
    assert!(report.verify(dir.path()).is_empty());
    let on_disk = nettwin::RunReport::load(&dir.path().join("run_report_fig5.json")).unwrap();
    assert_eq!(on_disk, report);
}
