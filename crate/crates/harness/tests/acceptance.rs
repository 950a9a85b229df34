//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criterion ids given after `--` select a subset:
//! `cargo test --release --test acceptance -- A1 A2`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nettwin::{run, Command, ExperimentManifest};
use nettwin_core::msgcodec::TokenId;
use nettwin_core::msgtwin::{LstmConfig, MessageModel, ModelConfig, TransformerConfig};
use nettwin_core::netsim::{
    feasible, ActiveSession, AdmissionAction, AdmissionState, GreedyCriterion, GreedyPolicy, ResourceVector, ServiceRequest, SimConfig,
    SliceKind, Simulator,
};
use nettwin_core::nncore::layers::{softmax_backward, softmax_rows};
use nettwin_core::nncore::params::normal_matrix;
use nettwin_core::nncore::{
    cross_entropy, grad_check, Activation, CausalSelfAttention, Dense, Embedding, GradCheckReport, LayerNorm, Lstm, Mlp, ParamId,
    ParameterSet, Tensor,
};
use nettwin_core::policytwin::{a2c_optimize, action_count, admit_probability, collect_samples, masked_action_agreement, A2cConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

/// Commands each shipped manifest is run with.
const SHIPPED: [(&str, &[Command]); 6] = [
    ("trace_gen", &[Command::Simulate, Command::BuildDatasets]),
    ("fig4", &[Command::Fig4]),
    ("policy_clone", &[Command::ClonePolicy]),
    ("gan_ablation", &[Command::TrainGan]),
    ("drl_compare", &[Command::Fig5]),
    ("finetune", &[Command::Finetune]),
];

/// Runs each shipped manifest at most once, into a temporary directory.
struct Runs {
    root: PathBuf,
    done: BTreeMap<&'static str, (ExperimentManifest, TempDir)>,
}

impl Runs {
    fn get(&mut self, name: &'static str) -> Result<(&ExperimentManifest, &Path), String> {
        if !self.done.contains_key(name) {
            let (_, commands) = SHIPPED.iter().find(|(n, _)| *n == name).expect("shipped manifest");
            let path = self.root.join("manifests").join(format!("{name}.toml"));
            let m = ExperimentManifest::load(&path).map_err(|e| e.to_string())?;
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            for &c in commands.iter() {
                run(c, &m, dir.path()).map_err(|e| format!("{name}: {e}"))?;
            }
            self.done.insert(name, (m, dir));
        }
        let (m, dir) = &self.done[name];
        Ok((m, dir.path()))
    }
}

/// Rows of a harness CSV keyed by column name; `#` lines are comments.
fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("column {key} is not numeric: {}", row[key]))
}

fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

// ---------------------------------------------------------------------------
// A1

fn random_request(rng: &mut ChaCha8Rng, id: u64, clock: f64) -> ServiceRequest {
    let kind = SliceKind::ALL[rng.random_range(0..4)];
    ServiceRequest {
        request_id: id,
        tenant_id: kind.index() as u32,
        kind,
        demand: ResourceVector::new(rng.random_range(0..=4), rng.random_range(0..=4), rng.random_range(0..=4)),
        arrival_time: clock - rng.random_range(0.0..1.0),
        service_time: 1.0,
        deadline: clock + 1.0,
    }
}

fn random_small_state(rng: &mut ChaCha8Rng) -> AdmissionState {
    let capacity = ResourceVector::new(rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let mut s = AdmissionState::idle(capacity, rng.random_range(1..=3));
    s.available =
        ResourceVector::new(rng.random_range(0..=capacity.radio), rng.random_range(0..=capacity.compute), rng.random_range(0..=capacity.storage));
    s.clock = 10.0;
    let n = rng.random_range(0..=3);
    s.pending = (0..n)
        .map(|i| {
            let id = rng.random_range(0..5) * 10 + i;
            random_request(rng, id, 10.0)
        })
        .collect();
    if n >= 2 && rng.random_bool(0.3) {
        s.pending[1].arrival_time = s.pending[0].arrival_time;
    }
    s.pending.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    s.active = (0..rng.random_range(0..=s.max_concurrent_ues))
        .map(|i| ActiveSession { request_id: 100 + i as u64, kind: SliceKind::Hrllc, demand: ResourceVector::ZERO, departure_time: 20.0 })
        .collect();
    s
}

/// Highest revenue per normalized demand among feasible requests, ties to
/// the earlier arrival and then the smaller id. Enumerates every request.
fn oracle_greedy(s: &AdmissionState, revenue: &[f64; 4]) -> AdmissionAction {
    let cap = s.capacity.components();
    let free = s.available.components();
    let mut best: Option<(f64, f64, u64, usize)> = None;
    for (i, r) in s.pending.iter().enumerate() {
        let d = r.demand.components();
        if (0..3).any(|k| d[k] > free[k]) || s.active.len() >= s.max_concurrent_ues {
            continue;
        }
        let norm: f64 = (0..3).map(|k| d[k] as f64 / cap[k] as f64).sum();
        let rev = revenue[r.kind.index()];
        let score = if norm > 0.0 {
            rev / norm
        } else if rev > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let c = (score, r.arrival_time, r.request_id, i);
        let better = match best {
            None => true,
            Some(b) => c.0 > b.0 || (c.0 == b.0 && (c.1 < b.1 || (c.1 == b.1 && c.2 < b.2))),
        };
        if better {
            best = Some(c);
        }
    }
    best.map_or(AdmissionAction::Defer, |b| AdmissionAction::Admit(b.3))
}

fn a1() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut steps = 0usize;
    let mut episodes = 0usize;
    while steps < 100_000 {
        let mut cfg = SimConfig::default().with_arrival_scale(rng.random_range(0.5..3.0));
        cfg.capacity = ResourceVector::new(rng.random_range(8..40), rng.random_range(8..40), rng.random_range(8..40));
        cfg.max_concurrent_ues = rng.random_range(1..12);
        cfg.horizon = 60.0;
        let seed: u64 = rng.random();
        let mut sim = Simulator::from_seed(&cfg, seed).map_err(|e| e.to_string())?;
        let mut log = Vec::new();
        let mut total = 0.0;
        while !sim.is_done() {
            let s = sim.state().clone();
            s.check_invariants().map_err(|e| format!("step {steps}: {e}"))?;
            let mut options = vec![AdmissionAction::Defer];
            options.extend(s.pending.iter().enumerate().filter(|(_, r)| feasible(&s, r)).map(|(i, _)| AdmissionAction::Admit(i)));
            let a = options[rng.random_range(0..options.len())];
            let out = sim.step(a).map_err(|e| e.to_string())?;
            ensure(a != AdmissionAction::Defer || out.reward == 0.0, || format!("step {steps}: deferring earned {}", out.reward))?;
            ensure(out.reward >= 0.0, || format!("step {steps}: negative reward {}", out.reward))?;
            total += out.reward;
            log.push(a);
            steps += 1;
        }
        ensure(total == sim.cumulative_reward(), || "cumulative reward differs from the sum of step rewards".into())?;
        ensure(sim.state().active.len() <= cfg.max_concurrent_ues, || "concurrency cap exceeded".into())?;
        for life in sim.lifecycles() {
            let r = &life.request;
            let ok = match (life.admitted_at, life.expired_at) {
                (Some(t), None) => t >= r.arrival_time && t < r.deadline,
                (None, Some(t)) => t == r.deadline,
                (None, None) => r.deadline > cfg.horizon,
                (Some(_), Some(_)) => false,
            };
            ensure(ok, || format!("request {} violates timeout semantics: {life:?}", r.request_id))?;
        }
        // Replaying the same actions from the same seed reproduces the episode.
        let mut again = Simulator::from_seed(&cfg, seed).map_err(|e| e.to_string())?;
        for &a in &log {
            again.step(a).map_err(|e| e.to_string())?;
        }
        ensure(again.lifecycles() == sim.lifecycles() && again.cumulative_reward() == total, || "replay diverged".into())?;
        episodes += 1;
    }
    let mut oracle_states = 0;
    for _ in 0..10_000 {
        let revenue = [0, 1, 2, 3].map(|_| rng.random_range(0..4) as f64);
        let mut cfg = SimConfig::default();
        for (p, r) in cfg.profiles.iter_mut().zip(revenue) {
            p.revenue = r;
        }
        let s = random_small_state(&mut rng);
        let got = GreedyPolicy::new(&cfg).choose(&s);
        let want = oracle_greedy(&s, &revenue);
        ensure(got == want, || format!("greedy chose {got:?}, enumeration {want:?} on {s:?}"))?;
        oracle_states += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.0} s"))?;
    Ok(format!("{steps} random steps over {episodes} episodes, {oracle_states} oracle states, {secs:.1} s"))
}

// ---------------------------------------------------------------------------
// A2

fn readout(y: &Tensor, r: &Tensor) -> (f64, Tensor) {
    (y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(), r.clone())
}

fn input(p: &mut ParameterSet, g: &mut ChaCha8Rng, rows: usize, cols: usize) -> ParamId {
    p.add("input", normal_matrix(g, rows, cols, 1.0))
}

fn message_model_check(cfg: &ModelConfig) -> GradCheckReport {
    let mut model = MessageModel::new(cfg, 4).expect("model builds");
    let inputs: Vec<TokenId> = vec![1, 5, 9, 20, 3, 40, 41, 7, 3];
    let targets: Vec<TokenId> = vec![5, 9, 20, 3, 40, 41, 7, 3, 6];
    let mask = [false, true, true, false, true, true, true, true, false];
    let mut params = std::mem::replace(&mut model.params, ParameterSet::new());
    grad_check(&mut params, |p| {
        std::mem::swap(&mut model.params, p);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let loss = model.accumulate_window(&inputs, &targets, &mask, 1.0, &mut rng).expect("window");
        std::mem::swap(&mut model.params, p);
        loss
    })
}

fn a2() -> Verdict {
    let started = Instant::now();
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    let mut g = ChaCha8Rng::seed_from_u64(31);

    let mut p = ParameterSet::new();
    let d = Dense::new(&mut p, "d", 4, 3, &mut g);
    let x = input(&mut p, &mut g, 5, 4);
    let r = normal_matrix(&mut g, 5, 3, 1.0);
    let dense = |p: &mut ParameterSet, flip: f64| {
        let xin = p.value(x).clone();
        let (l, dy) = readout(&d.forward(p, &xin).unwrap(), &r);
        let mut dx = d.backward(p, &xin, &dy);
        dx.scale(flip);
        p.grad_mut(x).add_assign(&dx);
        l
    };
    reports.push(("dense".into(), grad_check(&mut p.clone(), |p| dense(p, 1.0))));
    let control = grad_check(&mut p, |p| dense(p, -1.0));

    let mut p = ParameterSet::new();
    let e = Embedding::new(&mut p, "e", 6, 3, 0.5, &mut g);
    let ids = [0usize, 5, 2, 2, 4];
    let r = normal_matrix(&mut g, ids.len(), 3, 1.0);
    reports.push((
        "embedding".into(),
        grad_check(&mut p, |p| {
            let (l, dy) = readout(&e.forward(p, &ids).unwrap(), &r);
            e.backward(p, &ids, &dy);
            l
        }),
    ));

    let mut p = ParameterSet::new();
    let ln = LayerNorm::new(&mut p, "ln", 5);
    for id in p.ids().collect::<Vec<_>>() {
        let noise = normal_matrix(&mut g, 1, p.value(id).len(), 0.3);
        for (v, n) in p.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let x = input(&mut p, &mut g, 3, 5);
    let r = normal_matrix(&mut g, 3, 5, 1.0);
    reports.push((
        "layer norm".into(),
        grad_check(&mut p, |p| {
            let xin = p.value(x).clone();
            let (y, cache) = ln.forward(p, &xin).unwrap();
            let (l, dy) = readout(&y, &r);
            let dx = ln.backward(p, &cache, &dy);
            p.grad_mut(x).add_assign(&dx);
            l
        }),
    ));

    for act in [Activation::Gelu, Activation::Relu, Activation::Tanh, Activation::Identity] {
        let mut p = ParameterSet::new();
        let x = input(&mut p, &mut g, 3, 4);
        for v in p.value_mut(x).data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.1;
            }
        }
        let r = normal_matrix(&mut g, 3, 4, 1.0);
        reports.push((
            format!("{act:?}"),
            grad_check(&mut p, |p| {
                let xin = p.value(x).clone();
                let (l, dy) = readout(&act.forward(&xin), &r);
                let dx = act.backward(&xin, &dy);
                p.grad_mut(x).add_assign(&dx);
                l
            }),
        ));
    }

    let mut p = ParameterSet::new();
    let x = input(&mut p, &mut g, 3, 6);
    let r = normal_matrix(&mut g, 3, 6, 1.0);
    reports.push((
        "softmax".into(),
        grad_check(&mut p, |p| {
            let y = softmax_rows(p.value(x));
            let (l, dy) = readout(&y, &r);
            let dx = softmax_backward(&y, &dy);
            p.grad_mut(x).add_assign(&dx);
            l
        }),
    ));

    let mut p = ParameterSet::new();
    let att = CausalSelfAttention::new(&mut p, "att", 6, 2, &mut g).unwrap();
    let x = input(&mut p, &mut g, 5, 6);
    let r = normal_matrix(&mut g, 5, 6, 1.0);
    reports.push((
        "attention".into(),
        grad_check(&mut p, |p| {
            let xin = p.value(x).clone();
            let (y, cache) = att.forward(p, &xin).unwrap();
            let (l, dy) = readout(&y, &r);
            let dx = att.backward(p, &cache, &dy);
            p.grad_mut(x).add_assign(&dx);
            l
        }),
    ));

    let mut p = ParameterSet::new();
    let lstm = Lstm::new(&mut p, "lstm", 3, 4, true, &mut g);
    let x = input(&mut p, &mut g, 6, 3);
    let r = normal_matrix(&mut g, 6, 4, 1.0);
    reports.push((
        "lstm".into(),
        grad_check(&mut p, |p| {
            let xin = p.value(x).clone();
            let (y, cache) = lstm.forward(p, &xin).unwrap();
            let (l, dy) = readout(&y, &r);
            let dx = lstm.backward(p, &cache, &dy);
            p.grad_mut(x).add_assign(&dx);
            l
        }),
    ));

    let mut p = ParameterSet::new();
    let mlp = Mlp::new(&mut p, "mlp", &[4, 7, 5, 3], Activation::Tanh, &mut g);
    let x = input(&mut p, &mut g, 3, 4);
    let targets = [2usize, 0, 1];
    let mask = [true, false, true];
    reports.push((
        "mlp + cross entropy".into(),
        grad_check(&mut p, |p| {
            let xin = p.value(x).clone();
            let (y, cache) = mlp.forward(p, &xin).unwrap();
            let (l, dl) = cross_entropy(&y, &targets, &mask).unwrap();
            let dx = mlp.backward(p, &cache, &dl);
            p.grad_mut(x).add_assign(&dx);
            l
        }),
    ));

    let transformer = |dropout_rate| {
        ModelConfig::Transformer(TransformerConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            context_length: 24,
            dropout_rate,
            ..Default::default()
        })
    };
    reports.push(("transformer model".into(), message_model_check(&transformer(0.0))));
    reports.push(("transformer model with dropout".into(), message_model_check(&transformer(0.2))));
    let lstm_model = ModelConfig::Lstm(LstmConfig { num_layers: 2, hidden_dim: 8, embed_dim: 8, context_length: 24, ..Default::default() });
    reports.push(("lstm model".into(), message_model_check(&lstm_model)));

    let mut worst = (String::new(), 0.0f64);
    for (label, rep) in &reports {
        ensure(rep.checked > 0, || format!("{label}: nothing checked"))?;
        ensure(rep.max_rel_error < 1e-4, || format!("{label}: max relative error {:.2e}", rep.max_rel_error))?;
        if rep.max_rel_error >= worst.1 {
            worst = (label.clone(), rep.max_rel_error);
        }
    }
    ensure(control.max_rel_error > 0.1, || format!("corrupted backward went unnoticed: {:.2e}", control.max_rel_error))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "{} checks, worst {:.1e} ({}), corrupted control {:.2}, {secs:.1} s",
        reports.len(),
        worst.1,
        worst.0,
        control.max_rel_error
    ))
}

// ---------------------------------------------------------------------------
// A3

fn a3(runs: &mut Runs) -> Verdict {
    let started = Instant::now();
    let (m, dir) = runs.get("fig4")?;
    let sweep = m.sweep.as_ref().ok_or("fig4 manifest has no sweep")?;
    let mut levels = sweep.ue_levels.clone();
    levels.sort_unstable();
    ensure(levels == [4, 8, 16, 32], || format!("ue_levels {levels:?}"))?;
    ensure(m.seeds.len() >= 5, || format!("{} seeds", m.seeds.len()))?;
    let episodes = sweep.train_episodes + sweep.test_episodes;
    ensure(episodes >= 200, || format!("traces from {episodes} episodes"))?;
    let label = |want_lstm: bool| {
        m.models.iter().find(|s| matches!(s.model, ModelConfig::Lstm(_)) == want_lstm).map(|s| s.model.label().to_string())
    };
    let (t, l) = (label(false).ok_or("no transformer")?, label(true).ok_or("no lstm")?);
    let min_acc = m.thresholds.min_low_level_message_accuracy.ok_or("threshold min_low_level_message_accuracy not pinned")?;

    let rows = read_csv(&dir.join("fig4_per_seed.csv"))?;
    let med = |model: &str, level: usize, col: &str| {
        median(rows.iter().filter(|r| r["model"] == model && r["max_concurrent_ues"] == level.to_string()).map(|r| num(r, col)).collect())
    };
    // The published medians must be the medians of the per-seed rows.
    for r in read_csv(&dir.join("fig4.csv"))? {
        let level: usize = r["max_concurrent_ues"].parse().map_err(|_| "bad level")?;
        for col in ["message_accuracy", "ie_recall", "ie_precision"] {
            let want = med(&r["model"], level, col);
            ensure((num(&r, col) - want).abs() < 1e-12, || format!("fig4.csv {} {level} {col} is not the per-seed median", r["model"]))?;
        }
    }
    let (lo, hi) = (levels[0], levels[levels.len() - 1]);
    let acc = med(&t, lo, "message_accuracy");
    ensure(acc >= min_acc, || format!("{t} message accuracy {acc:.3} at {lo} UEs < {min_acc}"))?;
    let mut detail = format!("{t} message accuracy {acc:.3} at {lo} UEs");
    for col in ["ie_recall", "ie_precision"] {
        let (t_hi, l_hi) = (med(&t, hi, col), med(&l, hi, col));
        ensure(t_hi > l_hi, || format!("{col} at {hi} UEs: {t} {t_hi:.3} <= {l} {l_hi:.3}"))?;
        let gap_lo = med(&t, lo, col) - med(&l, lo, col);
        let gap_hi = t_hi - l_hi;
        ensure(gap_hi >= gap_lo, || format!("{col} gap shrinks from {gap_lo:.3} at {lo} UEs to {gap_hi:.3} at {hi}"))?;
        detail += &format!("; {col} gap {gap_lo:.3} -> {gap_hi:.3}");
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs <= 7200.0, || format!("took {secs:.0} s"))?;
    Ok(format!("{detail}; {secs:.0} s"))
}

// ---------------------------------------------------------------------------
// A4

fn a4(runs: &mut Runs) -> Verdict {
    let started = Instant::now();
    let (m, dir) = runs.get("policy_clone")?;
    let samples = m.clone.as_ref().ok_or("no clone section")?.samples;
    let min_agree = m.thresholds.min_agreement.ok_or("threshold min_agreement not pinned")?;
    ensure(samples >= 5000, || format!("cloning from {samples} samples"))?;
    let clone_rows = read_csv(&dir.join("clone.csv"))?;
    ensure(!clone_rows.is_empty(), || "clone.csv is empty".into())?;
    let mut worst = 1.0f64;
    for r in &clone_rows {
        let a = num(r, "masked_agreement");
        ensure(num(r, "samples") >= 5000.0, || format!("seed {}: {} samples", r["seed"], r["samples"]))?;
        ensure(a >= min_agree, || format!("seed {}: agreement {a:.3} < {min_agree}", r["seed"]))?;
        worst = worst.min(a);
    }

    let (m, dir) = runs.get("gan_ablation")?;
    let th = &m.thresholds;
    let (lo, hi, max_tv) = (
        th.equilibrium_min.ok_or("equilibrium_min not pinned")?,
        th.equilibrium_max.ok_or("equilibrium_max not pinned")?,
        th.max_marginal_tv.ok_or("max_marginal_tv not pinned")?,
    );
    let checks: BTreeMap<String, f64> = read_csv(&dir.join("gan_checks.csv"))?.iter().map(|r| (r["check"].clone(), num(r, "value"))).collect();
    let acc = *checks.get("discriminator_accuracy").ok_or("no discriminator_accuracy")?;
    let tv = *checks.get("marginal_tv").ok_or("no marginal_tv")?;
    ensure((lo..=hi).contains(&acc), || format!("discriminator accuracy {acc:.3} outside [{lo}, {hi}]"))?;
    ensure(tv < max_tv, || format!("marginal TV {tv:.3} >= {max_tv}"))?;
    ensure(checks.get("diverged") == Some(&0.0), || "equilibrium GAN diverged".into())?;
    let ablation = read_csv(&dir.join("gan_ablation.csv"))?;
    ensure(ablation.len() >= 5, || format!("{} ablation seeds", ablation.len()))?;
    ensure(ablation.iter().all(|r| r["real_samples"] == "100"), || "ablation does not use 100 real samples".into())?;
    let real = median(ablation.iter().map(|r| num(r, "real_only")).collect());
    let aug = median(ablation.iter().map(|r| num(r, "augmented")).collect());
    ensure(aug >= real, || format!("median augmented {aug:.3} < real-only {real:.3}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 1800.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "cloning agreement >= {worst:.3} over {} seeds; discriminator {acc:.3}, TV {tv:.3}; scarce median {real:.3} -> {aug:.3} augmented; {secs:.0} s",
        clone_rows.len()
    ))
}

// ---------------------------------------------------------------------------
// A5

fn a5(runs: &mut Runs) -> Verdict {
    let started = Instant::now();
    let (m, dir) = runs.get("drl_compare")?;
    let a2c = m.a2c.as_ref().ok_or("no a2c section")?;
    let th = &m.thresholds;
    let early = th.early_iterations.ok_or("early_iterations not pinned")?;
    let reach = th.reach_fraction.ok_or("reach_fraction not pinned")?;
    let ratio = th.max_reach_ratio.ok_or("max_reach_ratio not pinned")?;
    let final_points = th.final_points.ok_or("final_points not pinned")?;
    ensure(m.seeds.len() >= 5, || format!("{} seeds", m.seeds.len()))?;
    ensure(a2c.total_iterations >= 5000, || format!("{} iterations", a2c.total_iterations))?;
    ensure(format!("{:?}", a2c.reward) == "Revenue", || format!("reward {:?}", a2c.reward))?;

    // Curves recomputed from the per-seed runs.
    let runs_csv = read_csv(&dir.join("fig5_runs.csv"))?;
    let curve = |label: &str| -> Result<Vec<(usize, f64)>, String> {
        let mut by_iter: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in runs_csv.iter().filter(|r| r["series_label"] == label) {
            by_iter.entry(r["iteration"].parse().map_err(|_| "bad iteration")?).or_default().push(num(r, "reward"));
        }
        let points: Vec<(usize, f64)> = by_iter.into_iter().map(|(i, v)| (i, v.iter().sum::<f64>() / v.len() as f64)).collect();
        let published = read_csv(&dir.join(format!("fig5_{label}.csv")))?;
        ensure(published.len() == points.len(), || format!("fig5_{label}.csv has {} points", published.len()))?;
        for (p, (i, v)) in published.iter().zip(&points) {
            ensure(num(p, "iteration") as usize == *i && (num(p, "mean_reward") - v).abs() < 1e-9, || {
                format!("fig5_{label}.csv at iteration {i} is not the mean over seeds")
            })?;
        }
        Ok(points)
    };
    let twin = curve("twin")?;
    let scratch = curve("scratch")?;
    ensure(twin.len() == scratch.len() && !twin.is_empty(), || "curves differ in length".into())?;
    for ((i, t), (_, s)) in twin.iter().zip(&scratch).filter(|((i, _), _)| *i < early) {
        ensure(t >= s, || format!("iteration {i}: twin {t:.1} < scratch {s:.1}"))?;
    }
    let k = final_points.min(scratch.len());
    let scratch_final = scratch[scratch.len() - k..].iter().map(|p| p.1).sum::<f64>() / k as f64;
    let target = reach * scratch_final;
    let first = |c: &[(usize, f64)]| c.iter().find(|p| p.1 >= target).map(|p| p.0);
    let s_reach = first(&scratch).ok_or_else(|| format!("scratch never reaches {target:.1}"))?;
    let t_reach = first(&twin).ok_or_else(|| format!("twin never reaches {target:.1}"))?;
    ensure(t_reach as f64 <= ratio * s_reach as f64, || format!("twin reaches {target:.1} at {t_reach}, scratch at {s_reach}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs <= 3600.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "twin >= scratch at every point before {early}; {reach} x scratch final {scratch_final:.1} reached at {t_reach} (twin) vs {s_reach} (scratch); {secs:.0} s"
    ))
}

// ---------------------------------------------------------------------------
// A6

fn a6() -> Verdict {
    let started = Instant::now();
    // Only massive requests, never contended, expiring almost at once: the
    // best policy admits whenever it can.
    let mut single = SimConfig::default();
    for p in single.profiles.iter_mut() {
        if p.kind == SliceKind::MassiveCommunication {
            p.timeout = 0.01;
        } else {
            p.arrival_rate = 0.0;
        }
    }
    single.capacity = ResourceVector::new(10_000, 10_000, 10_000);
    single.max_concurrent_ues = 10_000;
    let cfg = A2cConfig { total_iterations: 3000, num_seeds: 1, actor_lr: 1e-3, eval_stride: 3000, eval_episodes: 1, ..A2cConfig::default() };
    let (_, actor) = a2c_optimize(&single, None, &cfg, "uncontended").map_err(|e| e.to_string())?;
    let (_, states) = collect_samples(&single, &mut GreedyPolicy::new(&single), 500, 77).map_err(|e| e.to_string())?;
    let admit = admit_probability(&actor, &states, &single).ok_or("no state with a feasible admit")?;
    ensure(admit >= 0.99, || format!("admit probability {admit:.4}"))?;

    // With gamma = 0 the critic learns the immediate reward, so the actor
    // should pick the highest-revenue feasible request.
    let env = SimConfig::default();
    let cfg = A2cConfig { gamma: 0.0, total_iterations: 2000, num_seeds: 1, actor_lr: 1e-3, eval_stride: 2000, eval_episodes: 1, ..A2cConfig::default() };
    let (_, actor) = a2c_optimize(&env, None, &cfg, "myopic").map_err(|e| e.to_string())?;
    let mut by_revenue = GreedyPolicy::with_criterion(&env, GreedyCriterion::Revenue);
    let (_, states) = collect_samples(&env, &mut by_revenue, 2000, 77).map_err(|e| e.to_string())?;
    assert_eq!(actor.actions(), action_count(env.queue_slots));
    let agree = masked_action_agreement(&actor, &mut by_revenue, &states, &env).map_err(|e| e.to_string())?;
    ensure(agree >= 0.8, || format!("myopic agreement {agree:.3}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 600.0, || format!("took {secs:.0} s"))?;
    Ok(format!("uncontended admit probability {admit:.4}; myopic agreement {agree:.3}; {secs:.0} s"))
}

// ---------------------------------------------------------------------------
// A7

fn plot_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    for e in entries {
        let p = e.map_err(|e| e.to_string())?.path();
        let keep = p.is_file() && p.extension().is_some_and(|x| x == "csv" || x == "dat" || x == "gp");
        if keep {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            files.insert(name, fs::read(&p).map_err(|e| e.to_string())?);
        }
    }
    Ok(files)
}

fn a7(runs: &mut Runs) -> Verdict {
    let mut compared = 0;
    for (name, _) in SHIPPED {
        let golden_dir = runs.root.join("results").join(name);
        let golden = plot_files(&golden_dir)?;
        ensure(!golden.is_empty(), || format!("no reference outputs in {}", golden_dir.display()))?;
        let (_, dir) = runs.get(name)?;
        let fresh = plot_files(dir)?;
        let names = |m: &BTreeMap<String, Vec<u8>>| m.keys().cloned().collect::<Vec<_>>();
        ensure(names(&golden) == names(&fresh), || format!("{name}: files {:?} vs reference {:?}", names(&fresh), names(&golden)))?;
        for (file, bytes) in &golden {
            ensure(&fresh[file] == bytes, || format!("{name}/{file} differs from the reference"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} files across {} manifests identical", SHIPPED.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_uppercase()).collect();
    let selected = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut runs = Runs { root: workspace_root(), done: BTreeMap::new() };
    type Criterion = fn(&mut Runs) -> Verdict;
    let criteria: [(&str, Criterion); 7] =
        [("A1", |_| a1()), ("A2", |_| a2()), ("A3", a3), ("A4", a4), ("A5", a5), ("A6", |_| a6()), ("A7", a7)];
    let mut failed = 0;
    for (id, check) in criteria {
        if !selected(id) {
            continue;
        }
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| check(&mut runs))).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = Duration::from_secs_f64(started.elapsed().as_secs_f64().round());
        match verdict {
            Ok(detail) => println!("{id} PASS [{took:?}] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL [{took:?}] {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
