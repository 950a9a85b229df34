//! Policy-level twin runs: behavior cloning, the GAN ablation and the
//! twin-versus-scratch A2C comparison.

use nettwin_core::msgcodec::StateActionSample;
use nettwin_core::netsim::{AdmissionState, GreedyPolicy, SimConfig};
use nettwin_core::policytwin::{
    a2c_run, action_agreement, action_count, action_marginal_tv, action_mask, augment, collect_samples, curve_from_runs,
    discriminator_accuracy, masked_action_agreement, train_gan, train_policy_twin, train_policy_twin_masked, CloneReport, LearningCurve,
    PolicyNet, GAN_VARIANT,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::{median, seeds_comment, RunError};
use crate::manifest::{CloneSection, ExperimentManifest};
use crate::output::OutputDir;
use crate::persist::stamped_checkpoint;
use crate::report::{MetricTable, RunReport};

/// Greedy samples, their states and the held-out test states for a clone
/// section.
fn clone_data(cfg: &SimConfig, c: &CloneSection) -> Result<(Vec<StateActionSample>, Vec<AdmissionState>, Vec<AdmissionState>), RunError> {
    let mut greedy = GreedyPolicy::new(cfg);
    let (samples, states) = collect_samples(cfg, &mut greedy, c.samples, c.sample_seed)?;
    let (_, test) = collect_samples(cfg, &mut greedy, c.test_states, c.test_seed)?;
    Ok((samples, states, test))
}

fn clone_once(
    cfg: &SimConfig,
    c: &CloneSection,
    samples: &[StateActionSample],
    states: &[AdmissionState],
    seed: u64,
) -> Result<(PolicyNet, CloneReport), RunError> {
    let actions = action_count(cfg.queue_slots);
    let train = nettwin_core::policytwin::CloneConfig { seed, ..c.train.clone() };
    Ok(if c.masked {
        let masks: Vec<Vec<bool>> = states.iter().map(|s| action_mask(s, cfg.queue_slots)).collect();
        train_policy_twin_masked(samples, Some(&masks), actions, &train)?
    } else {
        train_policy_twin(samples, actions, &train)?
    })
}

#[derive(Serialize)]
struct CloneRow {
    seed: u64,
    samples: usize,
    test_states: usize,
    validation_accuracy: f64,
    agreement: f64,
    masked_agreement: f64,
    final_loss: f64,
}

#[derive(Serialize)]
struct StepLossRow {
    seed: u64,
    step: usize,
    loss: f64,
}

/// Clones the greedy policy once per manifest seed. The data are fixed by
/// the clone section; the seeds vary initialization and batch order.
pub fn clone_policy(m: &ExperimentManifest, out: &mut OutputDir, report: &mut RunReport) -> Result<(), RunError> {
    let cfg = m.sim_config();
    let c = m.clone.clone().unwrap_or_default();
    let (samples, states, test) = clone_data(&cfg, &c)?;
    let mut greedy = GreedyPolicy::new(&cfg);
    let mut rows = Vec::new();
    let mut losses = Vec::new();
    let mut table = MetricTable::new(&["seed", "validation_accuracy", "agreement", "masked_agreement"]);
    for &seed in &m.seeds {
        let (net, r) = clone_once(&cfg, &c, &samples, &states, seed)?;
        let row = CloneRow {
            seed,
            samples: samples.len(),
            test_states: test.len(),
            validation_accuracy: r.validation_accuracy,
            agreement: action_agreement(&net, &mut greedy, &test, &cfg)?,
            masked_agreement: masked_action_agreement(&net, &mut greedy, &test, &cfg)?,
            final_loss: r.final_loss,
        };
        log::info!("seed {seed}: masked agreement {:.4}", row.masked_agreement);
        out.write_bytes(&format!("checkpoints/policy_twin_seed{seed}.ckpt"), &stamped_checkpoint(net.to_checkpoint(), out.digest()))?;
        losses.extend(r.loss_history.iter().enumerate().map(|(step, &loss)| StepLossRow { seed, step, loss }));
        table.push(vec![json!(seed), json!(row.validation_accuracy), json!(row.agreement), json!(row.masked_agreement)]);
        rows.push(row);
    }
    out.write_csv("clone.csv", &[], &rows)?;
    out.write_csv("clone_loss.csv", &[], &losses)?;
    report.tables.insert("clone".into(), table);
    Ok(())
}

#[derive(Serialize)]
struct CheckRow {
    check: &'static str,
    value: f64,
}

#[derive(Serialize)]
struct AblationRow {
    seed: u64,
    real_samples: usize,
    synthetic_samples: usize,
    real_only: f64,
    augmented: f64,
    generator: f64,
    marginal_tv: f64,
    diverged: bool,
}

#[derive(Serialize)]
struct GanStepRow {
    run: String,
    step: usize,
    discriminator_loss: f64,
    generator_loss: f64,
    real_accuracy: f64,
    fake_accuracy: f64,
}

/// Equilibrium and marginal checks on a GAN trained with plenty of real
/// data, then the scarce-data comparison: a clone trained on a few real
/// samples against one trained on the same samples plus synthetic ones.
pub fn gan_ablation(m: &ExperimentManifest, out: &mut OutputDir, report: &mut RunReport) -> Result<(), RunError> {
    let cfg = m.sim_config();
    let gan = m.gan.clone().expect("validated manifest has [gan]");
    let ab = m.ablation.clone().unwrap_or_default();
    let c = m.clone.clone().unwrap_or(CloneSection { masked: false, ..CloneSection::default() });
    let actions = action_count(cfg.queue_slots);
    let mut greedy = GreedyPolicy::new(&cfg);
    let mut diag_rows = Vec::new();
    let push_diag = |run: String, d: &nettwin_core::policytwin::GanDiagnostics, rows: &mut Vec<GanStepRow>| {
        rows.extend(d.history.iter().map(|h| GanStepRow {
            run: run.clone(),
            step: h.step,
            discriminator_loss: h.discriminator_loss,
            generator_loss: h.generator_loss,
            real_accuracy: h.real_accuracy,
            fake_accuracy: h.fake_accuracy,
        }));
    };

    let (real, _) = collect_samples(&cfg, &mut greedy, ab.equilibrium_samples, ab.sample_seed)?;
    let real = &real[..ab.equilibrium_samples];
    let (held, _) = collect_samples(&cfg, &mut greedy, ab.held_out_samples, ab.held_out_seed)?;
    let held = &held[..ab.held_out_samples];
    let (g, d) = train_gan(real, actions, &gan)?;
    push_diag("equilibrium".into(), &d, &mut diag_rows);
    if d.diverged {
        report.warnings.push("equilibrium GAN: discriminator loss collapsed (diverged)".into());
    }
    let disc = discriminator_accuracy(&g, real, held, &ab.discriminator_check_hidden, ab.discriminator_check_steps, ab.discriminator_check_seed)?;
    let syn = augment(&g, ab.synthetic_samples, &mut ChaCha8Rng::seed_from_u64(ab.synthetic_seed));
    let tv = action_marginal_tv(real, &syn, actions);
    log::info!("equilibrium: discriminator accuracy {disc:.3}, marginal TV {tv:.3}");
    out.write_bytes("checkpoints/generator.ckpt", &stamped_checkpoint(g.net.to_checkpoint(), out.digest()))?;
    let checks = vec![
        CheckRow { check: "discriminator_accuracy", value: disc },
        CheckRow { check: "marginal_tv", value: tv },
        CheckRow { check: "diverged", value: f64::from(u8::from(d.diverged)) },
    ];
    out.write_csv("gan_checks.csv", &[("variant", GAN_VARIANT.into())], &checks)?;
    let mut ct = MetricTable::new(&["check", "value"]);
    for c in &checks {
        ct.push(vec![json!(c.check), json!(c.value)]);
    }
    report.tables.insert("gan_checks".into(), ct);

    let (_, test) = collect_samples(&cfg, &mut greedy, ab.test_states, ab.test_seed)?;
    let mut rows = Vec::new();
    for &seed in &m.seeds {
        let pool_seed = ab.pool_seed.wrapping_add(seed.wrapping_mul(ab.pool_stride));
        let (pool, pool_states) = collect_samples(&cfg, &mut greedy, ab.real_samples, pool_seed)?;
        let few = &pool[..ab.real_samples];
        let few_states = &pool_states[..ab.real_samples];
        let (p0, _) = clone_once(&cfg, &c, few, few_states, seed)?;
        let (gs, ds) = train_gan(few, actions, &nettwin_core::policytwin::GanConfig { seed, ..gan.clone() })?;
        push_diag(format!("scarce_seed{seed}"), &ds, &mut diag_rows);
        if ds.diverged {
            report.warnings.push(format!("scarce GAN seed {seed}: discriminator loss collapsed (diverged)"));
        }
        let synthetic = augment(&gs, ab.synthetic_samples, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut aug = few.to_vec();
        aug.extend(synthetic.iter().cloned());
        // Synthetic samples come without simulator states; a masked clone
        // would need them, so the augmented arm always trains unmasked.
        let (p1, _) = train_policy_twin(&aug, actions, &nettwin_core::policytwin::CloneConfig { seed, ..c.train.clone() })?;
        let row = AblationRow {
            seed,
            real_samples: few.len(),
            synthetic_samples: synthetic.len(),
            real_only: masked_action_agreement(&p0, &mut greedy, &test, &cfg)?,
            augmented: masked_action_agreement(&p1, &mut greedy, &test, &cfg)?,
            generator: masked_action_agreement(&gs.net, &mut greedy, &test, &cfg)?,
            marginal_tv: action_marginal_tv(few, &synthetic, actions),
            diverged: ds.diverged,
        };
        log::info!("seed {seed}: real-only {:.4} augmented {:.4}", row.real_only, row.augmented);
        rows.push(row);
    }
    out.write_csv("gan_ablation.csv", &[seeds_comment(&m.seeds)], &rows)?;
    out.write_csv("gan_diagnostics.csv", &[("variant", GAN_VARIANT.into())], &diag_rows)?;
    let mut t = MetricTable::new(&["arm", "median_masked_agreement"]);
    t.push(vec![json!("real_only"), json!(median(&rows.iter().map(|r| r.real_only).collect::<Vec<_>>()))]);
    t.push(vec![json!("augmented"), json!(median(&rows.iter().map(|r| r.augmented).collect::<Vec<_>>()))]);
    report.tables.insert("ablation".into(), t);
    Ok(())
}

#[derive(Serialize)]
struct CurveRow<'a> {
    iteration: usize,
    mean_reward: f64,
    stddev: f64,
    series_label: &'a str,
}

#[derive(Serialize)]
struct RunRow<'a> {
    series_label: &'a str,
    seed: u64,
    iteration: usize,
    reward: f64,
}

fn curve_rows(c: &LearningCurve) -> Vec<CurveRow<'_>> {
    c.points.iter().map(|p| CurveRow { iteration: p.iteration, mean_reward: p.mean_reward, stddev: p.stddev, series_label: &c.label }).collect()
}

fn fig5_plot_data(curves: &[&LearningCurve]) -> String {
    let mut s = String::new();
    for (i, c) in curves.iter().enumerate() {
        if i > 0 {
            s.push_str("\n\n");
        }
        s.push_str(&format!("# series={}\n# iteration mean_reward stddev\n", c.label));
        for p in &c.points {
            s.push_str(&format!("{} {} {}\n", p.iteration, p.mean_reward, p.stddev));
        }
    }
    s
}

const FIG5_SCRIPT: &str = "# gnuplot -p fig5.gp
set key bottom right
set xlabel \"A2C iteration\"
set ylabel \"mean episodic reward\"
plot \"fig5.dat\" index 0 using 1:2:3 with yerrorlines title \"twin-initialized\", \\
     \"fig5.dat\" index 1 using 1:2:3 with yerrorlines title \"scratch\"
";

/// Clones the greedy policy, then runs A2C per manifest seed from the
/// clone and from a fresh actor. Both variants see the same evaluation
/// episodes.
pub fn fig5(m: &ExperimentManifest, out: &mut OutputDir, report: &mut RunReport) -> Result<(), RunError> {
    let cfg = m.sim_config();
    let a2c = m.a2c.clone().expect("validated manifest has [a2c]");
    let c = m.clone.clone().unwrap_or_default();
    let (samples, states, test) = clone_data(&cfg, &c)?;
    let (twin, r) = clone_once(&cfg, &c, &samples, &states, c.train.seed)?;
    let mut greedy = GreedyPolicy::new(&cfg);
    let agreement = masked_action_agreement(&twin, &mut greedy, &test, &cfg)?;
    log::info!("policy twin: validation {:.4}, masked agreement {agreement:.4}", r.validation_accuracy);
    out.write_bytes("checkpoints/policy_twin.ckpt", &stamped_checkpoint(twin.to_checkpoint(), out.digest()))?;
    let mut ct = MetricTable::new(&["validation_accuracy", "masked_agreement"]);
    ct.push(vec![json!(r.validation_accuracy), json!(agreement)]);
    report.tables.insert("policy_twin".into(), ct);

    let mut twin_runs = Vec::new();
    let mut scratch_runs = Vec::new();
    for &seed in &m.seeds {
        let (tr, ta) = a2c_run(&cfg, Some(&twin), &a2c, seed)?;
        let (sr, sa) = a2c_run(&cfg, None, &a2c, seed)?;
        log::info!(
            "seed {seed}: final reward twin {:.1} scratch {:.1}",
            tr.last().copied().unwrap_or(f64::NAN),
            sr.last().copied().unwrap_or(f64::NAN)
        );
        out.write_bytes(&format!("checkpoints/actor_twin_seed{seed}.ckpt"), &stamped_checkpoint(ta.to_checkpoint(), out.digest()))?;
        out.write_bytes(&format!("checkpoints/actor_scratch_seed{seed}.ckpt"), &stamped_checkpoint(sa.to_checkpoint(), out.digest()))?;
        twin_runs.push(tr);
        scratch_runs.push(sr);
    }
    let twin_curve = curve_from_runs("twin", &m.seeds, &twin_runs, a2c.eval_stride);
    let scratch_curve = curve_from_runs("scratch", &m.seeds, &scratch_runs, a2c.eval_stride);
    for curve in [&twin_curve, &scratch_curve] {
        out.write_csv(&format!("fig5_{}.csv", curve.label), &[seeds_comment(&m.seeds)], &curve_rows(curve))?;
    }
    let mut runs = Vec::new();
    for (label, all) in [("twin", &twin_runs), ("scratch", &scratch_runs)] {
        for (&seed, rewards) in m.seeds.iter().zip(all.iter()) {
            runs.extend(rewards.iter().enumerate().map(|(i, &reward)| RunRow { series_label: label, seed, iteration: i * a2c.eval_stride, reward }));
        }
    }
    out.write_csv("fig5_runs.csv", &[], &runs)?;
    out.write_text("fig5.dat", &fig5_plot_data(&[&twin_curve, &scratch_curve]))?;
    out.write_text("fig5.gp", FIG5_SCRIPT)?;
    let mut t = MetricTable::new(&["iteration", "twin", "scratch"]);
    for (p, q) in twin_curve.points.iter().zip(&scratch_curve.points) {
        t.push(vec![json!(p.iteration), json!(p.mean_reward), json!(q.mean_reward)]);
    }
    report.tables.insert("fig5".into(), t);
    Ok(())
}
