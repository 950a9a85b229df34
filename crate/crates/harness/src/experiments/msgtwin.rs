//! Message-level twin runs: the concurrency sweep and fine-tuning.

use nettwin_core::msgcodec::Vocabulary;
use nettwin_core::msgtwin::{
    check_matched_budgets, concurrency_sweep_with, corpus_loss, evaluate, fine_tune, generate_traces, level_data, train_message_twin,
    EvalRow, LossPoint, MessageModel, ModelConfig, SweepConfig, TokenCorpus, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use super::{median, seeds_comment, RunError};
use crate::manifest::ExperimentManifest;
use crate::output::OutputDir;
use crate::persist::{load_checkpoint, stamped_checkpoint, PersistError};
use crate::report::{MetricTable, RunReport};

/// Pinned column order of the per-seed and median tables.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig4Row {
    pub model: String,
    pub max_concurrent_ues: usize,
    pub message_accuracy: f64,
    pub token_accuracy: f64,
    pub ie_recall: f64,
    pub ie_precision: f64,
    pub decode_failure_rate: f64,
}

#[derive(Serialize)]
struct SeedRow {
    model: String,
    max_concurrent_ues: usize,
    seed: u64,
    parameters: usize,
    message_accuracy: f64,
    token_accuracy: f64,
    ie_recall: f64,
    ie_precision: f64,
    decode_failure_rate: f64,
    samples: usize,
}

impl From<&EvalRow> for SeedRow {
    fn from(r: &EvalRow) -> Self {
        let m = &r.metrics;
        SeedRow {
            model: r.model.clone(),
            max_concurrent_ues: r.max_concurrent_ues,
            seed: r.seed,
            parameters: r.parameters,
            message_accuracy: m.message_accuracy,
            token_accuracy: m.token_accuracy,
            ie_recall: m.ie_recall,
            ie_precision: m.ie_precision,
            decode_failure_rate: m.decode_failure_rate,
            samples: m.samples,
        }
    }
}

#[derive(Serialize)]
struct LossRow<'a> {
    model: &'a str,
    max_concurrent_ues: usize,
    seed: u64,
    step: usize,
    loss: f64,
}

fn sweep_parts(m: &ExperimentManifest) -> SweepConfig {
    m.sweep.clone().unwrap_or_default().to_config(&m.seeds)
}

fn checkpoint_path(model: &ModelConfig, level: usize, seed: u64) -> String {
    format!("checkpoints/{}_ue{level}_seed{seed}.ckpt", model.label())
}

/// Medians over seeds per (model, level), in manifest order.
pub fn median_rows(rows: &[EvalRow], models: &[String], levels: &[usize]) -> Vec<Fig4Row> {
    let mut out = Vec::new();
    for &level in levels {
        for model in models {
            let group: Vec<&EvalRow> = rows.iter().filter(|r| &r.model == model && r.max_concurrent_ues == level).collect();
            if group.is_empty() {
                continue;
            }
            let med = |f: fn(&EvalRow) -> f64| median(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            out.push(Fig4Row {
                model: model.clone(),
                max_concurrent_ues: level,
                message_accuracy: med(|r| r.metrics.message_accuracy),
                token_accuracy: med(|r| r.metrics.token_accuracy),
                ie_recall: med(|r| r.metrics.ie_recall),
                ie_precision: med(|r| r.metrics.ie_precision),
                decode_failure_rate: med(|r| r.metrics.decode_failure_rate),
            });
        }
    }
    out
}

/// Whitespace-separated blocks, one per model, two blank lines apart so
/// gnuplot can address them with `index`.
fn fig4_plot_data(rows: &[Fig4Row], models: &[String]) -> String {
    let mut s = String::new();
    for (i, model) in models.iter().enumerate() {
        if i > 0 {
            s.push_str("\n\n");
        }
        s.push_str(&format!("# model={model}\n"));
        s.push_str("# max_concurrent_ues message_accuracy token_accuracy ie_recall ie_precision decode_failure_rate\n");
        for r in rows.iter().filter(|r| &r.model == model) {
            s.push_str(&format!(
                "{} {} {} {} {} {}\n",
                r.max_concurrent_ues, r.message_accuracy, r.token_accuracy, r.ie_recall, r.ie_precision, r.decode_failure_rate
            ));
        }
    }
    s
}

fn fig4_script(models: &[String]) -> String {
    let mut s = String::from(
        "# gnuplot -p fig4.gp\nset key bottom left\nset logscale x 2\nset xlabel \"concurrent UEs\"\nset multiplot layout 1,3\n",
    );
    for (col, title) in [(2, "message accuracy"), (4, "IE recall"), (5, "IE precision")] {
        s.push_str(&format!("set title \"{title}\"\nplot "));
        let series: Vec<String> =
            models.iter().enumerate().map(|(i, m)| format!("\"fig4.dat\" index {i} using 1:{col} with linespoints title \"{m}\"")).collect();
        s.push_str(&series.join(", \\\n     "));
        s.push('\n');
    }
    s.push_str("unset multiplot\n");
    s
}

fn model_labels(m: &ExperimentManifest) -> Vec<String> {
    m.models.iter().map(|sm| sm.model.label().to_string()).collect()
}

fn write_fig4(m: &ExperimentManifest, rows: &[EvalRow], out: &mut OutputDir, report: &mut RunReport) -> Result<Vec<Fig4Row>, RunError> {
    let sweep = sweep_parts(m);
    let models = model_labels(m);
    let seed_rows: Vec<SeedRow> = rows.iter().map(SeedRow::from).collect();
    out.write_csv("fig4_per_seed.csv", &[seeds_comment(&m.seeds)], &seed_rows)?;
    let med = median_rows(rows, &models, &sweep.ue_levels);
    out.write_csv("fig4.csv", &[seeds_comment(&m.seeds), ("aggregate", "median".into())], &med)?;
    out.write_text("fig4.dat", &fig4_plot_data(&med, &models))?;
    out.write_text("fig4.gp", &fig4_script(&models))?;
    let mut table =
        MetricTable::new(&["model", "max_concurrent_ues", "message_accuracy", "token_accuracy", "ie_recall", "ie_precision", "decode_failure_rate"]);
    for r in &med {
        table.push(vec![
            json!(r.model),
            json!(r.max_concurrent_ues),
            json!(r.message_accuracy),
            json!(r.token_accuracy),
            json!(r.ie_recall),
            json!(r.ie_precision),
            json!(r.decode_failure_rate),
        ]);
    }
    report.tables.insert("fig4_median".into(), table);
    Ok(med)
}

fn loss_rows<'a>(label: &'a str, level: usize, seed: u64, history: &[LossPoint], into: &mut Vec<LossRow<'a>>) {
    into.extend(history.iter().map(|p| LossRow { model: label, max_concurrent_ues: level, seed, step: p.step, loss: p.loss }));
}

pub fn fig4(m: &ExperimentManifest, out: &mut OutputDir, report: &mut RunReport) -> Result<(), RunError> {
    let sweep = sweep_parts(m);
    let result = concurrency_sweep_with(&m.models, &m.sim_config(), &sweep, |r| {
        log::info!(
            "{} ue={} seed={}: message {:.3} recall {:.3} precision {:.3}",
            r.model,
            r.max_concurrent_ues,
            r.seed,
            r.metrics.message_accuracy,
            r.metrics.ie_recall,
            r.metrics.ie_precision
        )
    })?;
    let mut losses = Vec::new();
    for ((_, history), row) in result.loss_curves.iter().zip(&result.rows) {
        loss_rows(&row.model, row.max_concurrent_ues, row.seed, history, &mut losses);
    }
    out.write_csv("fig4_loss.csv", &[], &losses)?;
    write_fig4(m, &result.rows, out, report)?;
    Ok(())
}

/// Trains every (level, seed, model) and saves the checkpoints.
pub fn train(m: &ExperimentManifest, out: &mut OutputDir, report: &mut RunReport) -> Result<(), RunError> {
    let sweep = sweep_parts(m);
    let cfgs: Vec<ModelConfig> = m.models.iter().map(|sm| sm.model.clone()).collect();
    let counts = check_matched_budgets(&cfgs, sweep.max_param_gap)?;
    let vocab = Vocabulary::default();
    let ctx = cfgs[0].context_length();
    let base = m.sim_config();
    let labels = model_labels(m);
    let mut losses = Vec::new();
    let mut table = MetricTable::new(&["model", "max_concurrent_ues", "seed", "final_loss"]);
    for &level in &sweep.ue_levels {
        let (corpus, _) = level_data(&base, level, &sweep, ctx, &vocab)?;
        for &seed in &m.seeds {
            for (sm, label) in m.models.iter().zip(&labels) {
                let mut model = MessageModel::new(&sm.model, seed)?;
                let tr = train_message_twin(&mut model, &corpus, &TrainConfig { seed, ..sm.train.clone() })?;
                out.write_bytes(&checkpoint_path(&sm.model, level, seed), &stamped_checkpoint(model.to_checkpoint(), out.digest()))?;
                let last = tr.loss_history.last().map_or(f64::NAN, |p| p.loss);
                log::info!("{label} ue={level} seed={seed}: final loss {last:.4}");
                table.push(vec![json!(label), json!(level), json!(seed), json!(last)]);
                loss_rows(label, level, seed, &tr.loss_history, &mut losses);
            }
        }
    }
    out.write_csv("msgtwin_loss.csv", &[], &losses)?;
    report.tables.insert("training".into(), table);
    let mut params = MetricTable::new(&["model", "parameters"]);
    for (l, c) in labels.iter().zip(counts) {
        params.push(vec![json!(l), json!(c)]);
    }
    report.tables.insert("parameters".into(), params);
    Ok(())
}

/// Scores the checkpoints written by [`train`] on fresh held-out traces.
pub fn eval(m: &ExperimentManifest, out: &mut OutputDir, report: &mut RunReport) -> Result<(), RunError> {
    let sweep = sweep_parts(m);
    let vocab = Vocabulary::default();
    let ctx = m.models[0].model.context_length();
    let base = m.sim_config();
    let mut rows = Vec::new();
    for &level in &sweep.ue_levels {
        let (_, held_out) = level_data(&base, level, &sweep, ctx, &vocab)?;
        for &seed in &m.seeds {
            for sm in &m.models {
                let path = out.path(&checkpoint_path(&sm.model, level, seed))?;
                let ckpt = load_checkpoint(&path).map_err(|e| match e {
                    PersistError::Io { .. } => RunError::Failed(format!("{}: missing; run train-msgtwin first", path.display())),
                    other => other.into(),
                })?;
                if ckpt.metadata.get(crate::persist::DIGEST_KEY).map(String::as_str) != Some(out.digest()) {
                    return Err(RunError::Failed(format!("{} was trained for a different manifest", path.display())));
                }
                let model = MessageModel::from_checkpoint(&ckpt)?;
                let metrics = evaluate(&model, &held_out, &vocab, sweep.max_eval_samples)?;
                rows.push(EvalRow {
                    model: sm.model.label().to_string(),
                    max_concurrent_ues: level,
                    seed,
                    parameters: model.num_parameters(),
                    metrics,
                });
            }
        }
    }
    write_fig4(m, &rows, out, report)?;
    Ok(())
}

#[derive(Serialize)]
struct PhaseLossRow<'a> {
    phase: &'a str,
    seed: u64,
    step: usize,
    loss: f64,
}

fn phase_losses<'a>(phase: &'a str, seed: u64, history: &[LossPoint], into: &mut Vec<PhaseLossRow<'a>>) {
    into.extend(history.iter().map(|p| PhaseLossRow { phase, seed, step: p.step, loss: p.loss }));
}

#[derive(Serialize)]
struct FinetuneRow {
    seed: u64,
    pretrained_loss: f64,
    finetuned_loss: f64,
    scratch_loss: f64,
    adopted: bool,
}

pub fn finetune(m: &ExperimentManifest, out: &mut OutputDir, report: &mut RunReport) -> Result<(), RunError> {
    let ft = m.finetune.as_ref().expect("validated manifest has [finetune]");
    let base = m.sim_config();
    let shifted = ft.shift.apply(&base);
    let vocab = Vocabulary::default();
    let corpus = |cfg, first: u64, n| -> Result<TokenCorpus, RunError> { Ok(TokenCorpus::from_traces(&generate_traces(cfg, first, n)?, &vocab)?) };
    let pre = corpus(&base, base.seed, ft.pretrain_episodes)?;
    let new_train = corpus(&shifted, base.seed.wrapping_add(100_000), ft.new_train_episodes)?;
    let new_test = corpus(&shifted, base.seed.wrapping_add(200_000), ft.new_test_episodes)?;
    let mut pretrained = MessageModel::new(&ft.model, ft.pretrain.seed)?;
    let pre_report = train_message_twin(&mut pretrained, &pre, &ft.pretrain)?;
    out.write_bytes("checkpoints/pretrained.ckpt", &stamped_checkpoint(pretrained.to_checkpoint(), out.digest()))?;
    let ckpt = pretrained.to_checkpoint();
    const EVAL_SEED: u64 = 7;
    let pretrained_loss = corpus_loss(&pretrained, &new_test, ft.loss_windows, EVAL_SEED)?;
    let mut rows = Vec::new();
    let mut losses = Vec::new();
    phase_losses("pretrain", ft.pretrain.seed, &pre_report.loss_history, &mut losses);
    let mut table = MetricTable::new(&["seed", "pretrained_loss", "finetuned_loss", "scratch_loss", "adopted"]);
    for &seed in &m.seeds {
        let cfg = TrainConfig { seed, ..ft.adapt.clone() };
        let mut tuned = MessageModel::from_checkpoint(&ckpt)?;
        let fr = fine_tune(&mut tuned, &new_train, &cfg, ft.loss_windows)?;
        let mut scratch = MessageModel::new(&ft.model, ft.pretrain.seed.wrapping_add(100).wrapping_add(seed))?;
        let sr = train_message_twin(&mut scratch, &new_train, &TrainConfig { freeze_prefix_layers: 0, ..cfg.clone() })?;
        out.write_bytes(&format!("checkpoints/finetuned_seed{seed}.ckpt"), &stamped_checkpoint(tuned.to_checkpoint(), out.digest()))?;
        let row = FinetuneRow {
            seed,
            pretrained_loss,
            finetuned_loss: corpus_loss(&tuned, &new_test, ft.loss_windows, EVAL_SEED)?,
            scratch_loss: corpus_loss(&scratch, &new_test, ft.loss_windows, EVAL_SEED)?,
            adopted: fr.adopted,
        };
        log::info!("seed {seed}: fine-tuned {:.4} scratch {:.4}", row.finetuned_loss, row.scratch_loss);
        table.push(vec![json!(seed), json!(row.pretrained_loss), json!(row.finetuned_loss), json!(row.scratch_loss), json!(row.adopted)]);
        phase_losses("finetuned", seed, &fr.train.loss_history, &mut losses);
        phase_losses("scratch", seed, &sr.loss_history, &mut losses);
        rows.push(row);
    }
    out.write_csv("finetune.csv", &[seeds_comment(&m.seeds)], &rows)?;
    out.write_csv("finetune_loss.csv", &[], &losses)?;
    report.tables.insert("finetune".into(), table);
    Ok(())
}
