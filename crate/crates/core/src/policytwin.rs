//! Policy-level twin: a GAN that synthesizes state-action pairs, behavior
//! cloning of the network's admission policy, and advantage actor-critic
//! optimization that can start from the clone.
//!
//! Actions are ids in `0..=queue_slots`: `i < queue_slots` admits pending
//! slot `i`, `queue_slots` defers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgcodec::{action_to_id, id_to_action, state_to_vector, StateActionSample, STATE_DIM};
use crate::netsim::{
    feasible, run_episode, AdmissionAction, AdmissionPolicy, AdmissionState, SimConfig, SimError, Simulator, SLICE_COUNT,
};
use crate::nncore::layers::{log_softmax, sigmoid, softmax_backward, softmax_in_place};
use crate::nncore::{cross_entropy, Activation, AdamConfig, AdamState, Checkpoint, Mlp, NnError, ParameterSet, Tensor};

#[derive(Debug, Error)]
pub enum PolicyTwinError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub fn action_count(queue_slots: usize) -> usize {
    queue_slots + 1
}

/// Feasibility mask over action ids. Defer is always allowed.
pub fn action_mask(state: &AdmissionState, queue_slots: usize) -> Vec<bool> {
    let mut mask = vec![false; action_count(queue_slots)];
    for (i, r) in state.pending.iter().take(queue_slots).enumerate() {
        mask[i] = feasible(state, r);
    }
    mask[queue_slots] = true;
    mask
}

/// Index of the largest entry, smallest index on ties. Entries where
/// `mask` is false are skipped.
pub fn argmax_masked(values: &[f64], mask: Option<&[bool]>) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(values.len().saturating_sub(1))
}

/// Multilayer perceptron from a state vector to action logits. Also used
/// as the GAN generator.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub params: ParameterSet,
    pub net: Mlp,
}

impl PolicyNet {
    pub fn new(hidden: &[usize], actions: usize, seed: u64) -> Self {
        Self::with_dims(STATE_DIM, hidden, actions, seed)
    }

    fn with_dims(inputs: usize, hidden: &[usize], outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut widths = vec![inputs];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        let net = Mlp::new(&mut params, "policy", &widths, Activation::Tanh, &mut rng);
        PolicyNet { params, net }
    }

    pub fn actions(&self) -> usize {
        self.net.output_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.net.input_dim()];
        w.extend(self.net.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn logits(&self, state_vec: &[f64]) -> Vec<f64> {
        let x = Tensor::from_matrix(1, state_vec.len(), state_vec.to_vec());
        self.net.infer(&self.params, &x).expect("state width matches").into_data()
    }

    pub fn logits_batch(&self, states: &Tensor) -> Result<Tensor, NnError> {
        self.net.infer(&self.params, states)
    }

    /// Masked argmax action for a simulator state.
    pub fn act(&self, state: &AdmissionState, config: &SimConfig) -> AdmissionAction {
        let logits = self.logits(&state_to_vector(state, config));
        let mask = action_mask(state, config.queue_slots);
        id_to_action(argmax_masked(&logits, Some(&mask)), config.queue_slots).expect("in range")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let widths = self.widths().iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        let meta = BTreeMap::from([("kind".to_string(), "policy_net".to_string()), ("widths".to_string(), widths)]);
        Checkpoint::from_params(&self.params, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NnError> {
        let bad = |what: &str| NnError::CorruptFile(format!("policy checkpoint metadata: {what}"));
        if ckpt.metadata.get("kind").map(String::as_str) != Some("policy_net") {
            return Err(bad("kind is not policy_net"));
        }
        let widths: Vec<usize> = ckpt
            .metadata
            .get("widths")
            .ok_or_else(|| bad("missing widths"))?
            .split(',')
            .map(|w| w.parse().map_err(|_| bad("widths")))
            .collect::<Result<_, _>>()?;
        if widths.len() < 2 {
            return Err(bad("widths"));
        }
        let mut net = Self::with_dims(widths[0], &widths[1..widths.len() - 1], widths[widths.len() - 1], 0);
        ckpt.restore_into(&mut net.params)?;
        Ok(net)
    }
}

impl AdmissionPolicy for (&PolicyNet, &SimConfig) {
    fn decide(&mut self, state: &AdmissionState) -> AdmissionAction {
        self.0.act(state, self.1)
    }
}

/// Runs greedy-policy episodes from consecutive seeds until at least
/// `min_samples` representable decisions are collected. Returns the
/// samples and the matching states.
pub fn collect_samples<P: AdmissionPolicy>(
    config: &SimConfig,
    policy: &mut P,
    min_samples: usize,
    seed: u64,
) -> Result<(Vec<StateActionSample>, Vec<AdmissionState>), PolicyTwinError> {
    let mut samples = Vec::new();
    let mut states = Vec::new();
    let mut episode = 0u64;
    while samples.len() < min_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(episode));
        let t = run_episode(config, policy, &mut rng)?;
        for d in t.decisions {
            if let Some(action_id) = action_to_id(d.action, config.queue_slots) {
                samples.push(StateActionSample { state_vec: state_to_vector(&d.state, config).to_vec(), action_id });
                states.push(d.state);
            }
        }
        episode += 1;
        if episode > 10_000 && samples.is_empty() {
            return Err(PolicyTwinError::EmptyInput("episodes produce no decisions".into()));
        }
    }
    Ok((samples, states))
}

/// Fraction of `states` where the argmax of `logits_of` equals the
/// oracle's action. Ties go to the smallest id on both sides. Oracle
/// actions beyond the visible queue count as disagreements.
pub fn agreement_with<L, P>(
    mut logits_of: L,
    oracle: &mut P,
    states: &[AdmissionState],
    config: &SimConfig,
    masked: bool,
) -> Result<f64, PolicyTwinError>
where
    L: FnMut(&[f64]) -> Vec<f64>,
    P: AdmissionPolicy + ?Sized,
{
    if states.is_empty() {
        return Err(PolicyTwinError::EmptyInput("action_agreement needs at least one state".into()));
    }
    let mut hits = 0usize;
    for s in states {
        let logits = logits_of(&state_to_vector(s, config));
        let mask = action_mask(s, config.queue_slots);
        let chosen = argmax_masked(&logits, masked.then_some(mask.as_slice()));
        if action_to_id(oracle.decide(s), config.queue_slots) == Some(chosen) {
            hits += 1;
        }
    }
    Ok(hits as f64 / states.len() as f64)
}

/// Agreement of the policy's raw argmax with the oracle.
pub fn action_agreement<P: AdmissionPolicy + ?Sized>(
    policy: &PolicyNet,
    oracle: &mut P,
    states: &[AdmissionState],
    config: &SimConfig,
) -> Result<f64, PolicyTwinError> {
    agreement_with(|v| policy.logits(v), oracle, states, config, false)
}

/// Agreement of the policy's feasibility-masked argmax with the oracle;
/// this is the action the policy takes when deployed.
pub fn masked_action_agreement<P: AdmissionPolicy + ?Sized>(
    policy: &PolicyNet,
    oracle: &mut P,
    states: &[AdmissionState],
    config: &SimConfig,
) -> Result<f64, PolicyTwinError> {
    agreement_with(|v| policy.logits(v), oracle, states, config, true)
}

// ---------------------------------------------------------------------------
// Behavior cloning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloneConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of samples held out for validation accuracy.
    pub validation_fraction: f64,
}

impl Default for CloneConfig {
    fn default() -> Self {
        CloneConfig { hidden: vec![64, 64], learning_rate: 3e-3, steps: 3000, batch_size: 64, seed: 0, validation_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloneReport {
    pub validation_accuracy: f64,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

fn batch_tensor(samples: &[&StateActionSample]) -> (Tensor, Vec<usize>) {
    let dim = samples[0].state_vec.len();
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        data.extend_from_slice(&s.state_vec);
    }
    (Tensor::from_matrix(samples.len(), dim, data), samples.iter().map(|s| s.action_id).collect())
}

/// Supervised cross-entropy training of a fresh [`PolicyNet`].
pub fn train_policy_twin(
    samples: &[StateActionSample],
    actions: usize,
    cfg: &CloneConfig,
) -> Result<(PolicyNet, CloneReport), PolicyTwinError> {
    train_policy_twin_masked(samples, None, actions, cfg)
}

/// Behavior cloning where each sample may carry a feasibility mask. Masked
/// actions are removed from the softmax, as they are when the policy acts,
/// so the net only has to rank what the network could actually do.
/// Validation accuracy then uses the masked argmax.
pub fn train_policy_twin_masked(
    samples: &[StateActionSample],
    masks: Option<&[Vec<bool>]>,
    actions: usize,
    cfg: &CloneConfig,
) -> Result<(PolicyNet, CloneReport), PolicyTwinError> {
    if samples.is_empty() {
        return Err(PolicyTwinError::EmptyInput("behavior cloning needs samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.action_id >= actions || s.state_vec.len() != STATE_DIM) {
        return Err(PolicyTwinError::InvalidConfig(format!("sample with action {} outside {actions} actions", s.action_id)));
    }
    if let Some(m) = masks {
        if m.len() != samples.len() || m.iter().any(|row| row.len() != actions) {
            return Err(PolicyTwinError::InvalidConfig("one mask of width A per sample required".into()));
        }
        if samples.iter().zip(m).any(|(s, row)| !row[s.action_id]) {
            return Err(PolicyTwinError::InvalidConfig("a sample's action is masked out".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_val = n_val.min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut policy = PolicyNet::new(&cfg.hidden, actions, rng.random());
    let mut adam = AdamState::new(&policy.params, AdamConfig::with_lr(cfg.learning_rate));
    let mut loss_history = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.max(1).min(train_idx.len());
    let mut cursor = train_idx.len();
    let mut perm = train_idx.to_vec();
    for _ in 0..cfg.steps {
        if cursor + batch > perm.len() {
            perm.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &perm[cursor..cursor + batch];
        let chosen: Vec<&StateActionSample> = rows.iter().map(|&i| &samples[i]).collect();
        cursor += batch;
        let (x, y) = batch_tensor(&chosen);
        policy.params.zero_grads();
        let (mut logits, cache) = policy.net.forward(&policy.params, &x)?;
        if let Some(m) = masks {
            for (r, &i) in rows.iter().enumerate() {
                for (z, ok) in logits.row_mut(r).iter_mut().zip(&m[i]) {
                    if !ok {
                        *z = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let (loss, dl) = cross_entropy(&logits, &y, &vec![true; y.len()])?;
        policy.net.backward(&mut policy.params, &cache, &dl);
        adam.step(&mut policy.params);
        loss_history.push(loss);
    }
    let validation_accuracy = if val_idx.is_empty() {
        f64::NAN
    } else {
        let hits = val_idx
            .iter()
            .filter(|&&i| {
                let mask = masks.map(|m| m[i].as_slice());
                argmax_masked(&policy.logits(&samples[i].state_vec), mask) == samples[i].action_id
            })
            .count();
        hits as f64 / val_idx.len() as f64
    };
    let final_loss = loss_history.last().copied().unwrap_or(f64::NAN);
    Ok((policy, CloneReport { validation_accuracy, final_loss, loss_history }))
}

// ---------------------------------------------------------------------------
// GAN augmentation

/// Where generator input states come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum StateSampling {
    /// Uniform over the unit box of state vectors.
    UniformBox,
    /// States visited in the real samples, each feature perturbed by
    /// uniform noise of half-width `jitter` and clipped to `[0, 1]`.
    Visited { jitter: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub sampling: StateSampling,
    pub steps: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// A trailing-mean discriminator loss below this flags divergence.
    pub divergence_threshold: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            generator_hidden: vec![64, 64],
            discriminator_hidden: vec![64, 64],
            sampling: StateSampling::UniformBox,
            steps: 2000,
            generator_lr: 1e-3,
            discriminator_lr: 1e-3,
            batch_size: 64,
            seed: 0,
            divergence_threshold: 0.05,
        }
    }
}

pub const GAN_VARIANT: &str = "non-saturating loss, straight-through categorical actions";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanStepStats {
    pub step: usize,
    pub discriminator_loss: f64,
    pub generator_loss: f64,
    pub real_accuracy: f64,
    pub fake_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanDiagnostics {
    pub variant: String,
    pub history: Vec<GanStepStats>,
    pub diverged: bool,
}

/// Trained generator plus what it needs to draw input states.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub net: PolicyNet,
    pub sampling: StateSampling,
    pool: Vec<Vec<f64>>,
}

fn jittered<R: Rng + ?Sized>(base: &[f64], jitter: f64, rng: &mut R) -> Vec<f64> {
    if jitter > 0.0 {
        let d = Uniform::new_inclusive(-jitter, jitter).expect("valid jitter");
        base.iter().map(|v| (v + d.sample(rng)).clamp(0.0, 1.0)).collect()
    } else {
        base.to_vec()
    }
}

impl Generator {
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.sampling {
            StateSampling::UniformBox => (0..STATE_DIM).map(|_| rng.random::<f64>()).collect(),
            StateSampling::Visited { jitter } => jittered(&self.pool[rng.random_range(0..self.pool.len())], jitter, rng),
        }
    }

    /// Action probabilities for one state.
    pub fn probabilities(&self, state_vec: &[f64]) -> Vec<f64> {
        let mut p = self.net.logits(state_vec);
        softmax_in_place(&mut p);
        p
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state_vec: &[f64], rng: &mut R) -> usize {
        sample_categorical(&self.probabilities(state_vec), rng)
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

struct Discriminator {
    params: ParameterSet,
    net: Mlp,
}

impl Discriminator {
    fn new(hidden: &[usize], actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut widths = vec![STATE_DIM + actions];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let net = Mlp::new(&mut params, "disc", &widths, Activation::Relu, &mut rng);
        Discriminator { params, net }
    }
}

/// Binary cross-entropy on logits and its gradient.
fn bce_with_logits(z: f64, label: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - label)
}

fn pair_rows(states: &[Vec<f64>], actions: &Tensor) -> Tensor {
    let a = actions.cols();
    let mut data = Vec::with_capacity(states.len() * (STATE_DIM + a));
    for (i, s) in states.iter().enumerate() {
        data.extend_from_slice(s);
        data.extend_from_slice(actions.row(i));
    }
    Tensor::from_matrix(states.len(), STATE_DIM + a, data)
}

fn one_hot(ids: &[usize], actions: usize) -> Tensor {
    let mut t = Tensor::zeros(&[ids.len(), actions]);
    for (i, &a) in ids.iter().enumerate() {
        t.row_mut(i)[a] = 1.0;
    }
    t
}

/// Alternating discriminator and generator updates on real state-action
/// pairs. Zero steps return the seeded initial generator.
pub fn train_gan(
    real: &[StateActionSample],
    actions: usize,
    cfg: &GanConfig,
) -> Result<(Generator, GanDiagnostics), PolicyTwinError> {
    if real.is_empty() {
        return Err(PolicyTwinError::EmptyInput("GAN training needs real samples".into()));
    }
    if let StateSampling::Visited { jitter } = cfg.sampling {
        if !(0.0..=1.0).contains(&jitter) {
            return Err(PolicyTwinError::InvalidConfig(format!("jitter {jitter} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator {
        net: PolicyNet::new(&cfg.generator_hidden, actions, rng.random()),
        sampling: cfg.sampling,
        pool: real.iter().map(|s| s.state_vec.clone()).collect(),
    };
    let mut disc = Discriminator::new(&cfg.discriminator_hidden, actions, rng.random());
    let mut g_adam = AdamState::new(&gen.net.params, AdamConfig { beta1: 0.5, ..AdamConfig::with_lr(cfg.generator_lr) });
    let mut d_adam = AdamState::new(&disc.params, AdamConfig { beta1: 0.5, ..AdamConfig::with_lr(cfg.discriminator_lr) });
    let b = cfg.batch_size.max(1);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // Real batch.
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..real.len())).collect();
        // Visited-state fakes carry jitter, so real states get the same
        // noise; otherwise the discriminator could tell them apart by state
        // alone and would say nothing about the actions.
        let real_states: Vec<Vec<f64>> = match cfg.sampling {
            StateSampling::Visited { jitter } => idx.iter().map(|&i| jittered(&real[i].state_vec, jitter, &mut rng)).collect(),
            StateSampling::UniformBox => idx.iter().map(|&i| real[i].state_vec.clone()).collect(),
        };
        let real_actions = one_hot(&idx.iter().map(|&i| real[i].action_id).collect::<Vec<_>>(), actions);
        // Fake batch with straight-through one-hot actions.
        let fake_states: Vec<Vec<f64>> = (0..b).map(|_| gen.sample_state(&mut rng)).collect();
        let fs_tensor = Tensor::from_matrix(b, STATE_DIM, fake_states.concat());
        let (g_logits, g_cache) = gen.net.net.forward(&gen.net.params, &fs_tensor)?;
        let probs = crate::nncore::layers::softmax_rows(&g_logits);
        let sampled: Vec<usize> = (0..b).map(|i| sample_categorical(probs.row(i), &mut rng)).collect();
        let fake_actions = one_hot(&sampled, actions);

        // Discriminator update.
        disc.params.zero_grads();
        let mut d_loss = 0.0;
        let mut real_hits = 0usize;
        let mut fake_hits = 0usize;
        for (states, acts, label) in [(&real_states, &real_actions, 1.0), (&fake_states, &fake_actions, 0.0)] {
            let x = pair_rows(states, acts);
            let (z, cache) = disc.net.forward(&disc.params, &x)?;
            let mut dz = Tensor::zeros(&[b, 1]);
            for i in 0..b {
                let (l, g) = bce_with_logits(z.data()[i], label);
                d_loss += l / (2 * b) as f64;
                dz.data_mut()[i] = g / (2 * b) as f64;
                let says_real = z.data()[i] > 0.0;
                if label == 1.0 && says_real {
                    real_hits += 1;
                } else if label == 0.0 && !says_real {
                    fake_hits += 1;
                }
            }
            disc.net.backward(&mut disc.params, &cache, &dz);
        }
        d_adam.step(&mut disc.params);

        // Generator update with the non-saturating loss -log D(fake).
        let x = pair_rows(&fake_states, &fake_actions);
        let (z, cache) = disc.net.forward(&disc.params, &x)?;
        let mut dz = Tensor::zeros(&[b, 1]);
        let mut g_loss = 0.0;
        for i in 0..b {
            let (l, g) = bce_with_logits(z.data()[i], 1.0);
            g_loss += l / b as f64;
            dz.data_mut()[i] = g / b as f64;
        }
        disc.params.zero_grads();
        let dx = disc.net.backward(&mut disc.params, &cache, &dz);
        disc.params.zero_grads();
        let mut d_onehot = Tensor::zeros(&[b, actions]);
        for i in 0..b {
            d_onehot.row_mut(i).copy_from_slice(&dx.row(i)[STATE_DIM..]);
        }
        // Straight-through: the one-hot sample's gradient is passed to the
        // softmax probabilities.
        let d_logits = softmax_backward(&probs, &d_onehot);
        gen.net.params.zero_grads();
        gen.net.net.backward(&mut gen.net.params, &g_cache, &d_logits);
        g_adam.step(&mut gen.net.params);

        history.push(GanStepStats {
            step,
            discriminator_loss: d_loss,
            generator_loss: g_loss,
            real_accuracy: real_hits as f64 / b as f64,
            fake_accuracy: fake_hits as f64 / b as f64,
        });
    }
    let window = history.len().min(50);
    let diverged = window > 0
        && history[history.len() - window..].iter().map(|h| h.discriminator_loss).sum::<f64>() / (window as f64)
            < cfg.divergence_threshold;
    let diagnostics = GanDiagnostics { variant: GAN_VARIANT.to_string(), history, diverged };
    gen.net.params.zero_grads();
    Ok((gen, diagnostics))
}

/// Trains a fresh discriminator against a frozen generator and measures
/// its accuracy on balanced held-out real and generated pairs. Values near
/// 0.5 mean the generator's pairs are indistinguishable from real ones.
pub fn discriminator_accuracy(
    gen: &Generator,
    train_real: &[StateActionSample],
    held_out_real: &[StateActionSample],
    hidden: &[usize],
    steps: usize,
    seed: u64,
) -> Result<f64, PolicyTwinError> {
    if train_real.is_empty() || held_out_real.is_empty() {
        return Err(PolicyTwinError::EmptyInput("discriminator check needs real samples".into()));
    }
    let actions = gen.net.actions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = Discriminator::new(hidden, actions, rng.random());
    let mut adam = AdamState::new(&disc.params, AdamConfig::with_lr(1e-3));
    let b = 64;
    let fake = |rng: &mut ChaCha8Rng| {
        let s = gen.sample_state(rng);
        let a = gen.sample_action(&s, rng);
        (s, a)
    };
    for _ in 0..steps {
        disc.params.zero_grads();
        let real_idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..train_real.len())).collect();
        let real_states: Vec<Vec<f64>> = real_idx.iter().map(|&i| train_real[i].state_vec.clone()).collect();
        let real_actions = one_hot(&real_idx.iter().map(|&i| train_real[i].action_id).collect::<Vec<_>>(), actions);
        let (fs, fa): (Vec<Vec<f64>>, Vec<usize>) = (0..b).map(|_| fake(&mut rng)).unzip();
        let fake_actions = one_hot(&fa, actions);
        for (states, acts, label) in [(&real_states, &real_actions, 1.0), (&fs, &fake_actions, 0.0)] {
            let (z, cache) = disc.net.forward(&disc.params, &pair_rows(states, acts))?;
            let mut dz = Tensor::zeros(&[b, 1]);
            for i in 0..b {
                dz.data_mut()[i] = bce_with_logits(z.data()[i], label).1 / (2 * b) as f64;
            }
            disc.net.backward(&mut disc.params, &cache, &dz);
        }
        adam.step(&mut disc.params);
    }
    let n = held_out_real.len();
    let states: Vec<Vec<f64>> = held_out_real.iter().map(|s| s.state_vec.clone()).collect();
    let acts = one_hot(&held_out_real.iter().map(|s| s.action_id).collect::<Vec<_>>(), actions);
    let z_real = disc.net.infer(&disc.params, &pair_rows(&states, &acts))?;
    let (fs, fa): (Vec<Vec<f64>>, Vec<usize>) = (0..n).map(|_| fake(&mut rng)).unzip();
    let z_fake = disc.net.infer(&disc.params, &pair_rows(&fs, &one_hot(&fa, actions)))?;
    let hits = z_real.data().iter().filter(|z| **z > 0.0).count() + z_fake.data().iter().filter(|z| **z <= 0.0).count();
    Ok(hits as f64 / (2 * n) as f64)
}

/// `n` synthetic pairs of a sampled input state and the generator's
/// sampled action.
pub fn augment<R: Rng + ?Sized>(gen: &Generator, n: usize, rng: &mut R) -> Vec<StateActionSample> {
    (0..n)
        .map(|_| {
            let state_vec = gen.sample_state(rng);
            let action_id = gen.sample_action(&state_vec, rng);
            StateActionSample { state_vec, action_id }
        })
        .collect()
}

/// Total-variation distance between the action marginals of two sample
/// sets.
pub fn action_marginal_tv(a: &[StateActionSample], b: &[StateActionSample], actions: usize) -> f64 {
    let hist = |s: &[StateActionSample]| {
        let mut h = vec![0.0; actions];
        for x in s {
            h[x.action_id] += 1.0;
        }
        let n = s.len().max(1) as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Rewards

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSpec {
    Revenue,
    Fairness,
}

/// Jain's index over per-slice admission ratios. Slices without arrivals
/// count as fully admitted; an episode with no admissions scores 1.
pub fn jain_index(admitted: &[u64; SLICE_COUNT], arrived: &[u64; SLICE_COUNT]) -> f64 {
    if admitted.iter().all(|a| *a == 0) {
        return 1.0;
    }
    let x: Vec<f64> = (0..SLICE_COUNT)
        .map(|k| if arrived[k] == 0 { 1.0 } else { admitted[k] as f64 / arrived[k] as f64 })
        .collect();
    let sum: f64 = x.iter().sum();
    let sq: f64 = x.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        1.0
    } else {
        sum * sum / (SLICE_COUNT as f64 * sq)
    }
}

/// Jain's index of arbitrary per-slice values.
pub fn jain_of(x: &[f64; SLICE_COUNT]) -> f64 {
    let sum: f64 = x.iter().sum();
    let sq: f64 = x.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        1.0
    } else {
        sum * sum / (SLICE_COUNT as f64 * sq)
    }
}

/// Episode statistics used to turn simulator rewards into training rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub revenue: f64,
    pub admitted: [u64; SLICE_COUNT],
    pub arrived: [u64; SLICE_COUNT],
}

/// Reward for one step. `step_revenue` is the simulator's step reward.
/// Under `Fairness` the episode's final step also adds `(J - 1)` times the
/// episode revenue, so the episode total equals revenue times Jain's index.
pub fn reward_of(spec: RewardSpec, step_revenue: f64, terminal: Option<&EpisodeStats>) -> f64 {
    match (spec, terminal) {
        (RewardSpec::Revenue, _) | (RewardSpec::Fairness, None) => step_revenue,
        (RewardSpec::Fairness, Some(ep)) => step_revenue + (jain_index(&ep.admitted, &ep.arrived) - 1.0) * ep.revenue,
    }
}

// ---------------------------------------------------------------------------
// Advantage actor-critic

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A2cConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
    pub rollout_length: usize,
    pub total_iterations: usize,
    pub num_seeds: usize,
    pub reward: RewardSpec,
    /// Iterations between evaluation points.
    pub eval_stride: usize,
    /// Episodes per evaluation point.
    pub eval_episodes: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Iterations at the start of each run during which only the critic
    /// is updated.
    pub critic_warmup: usize,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for A2cConfig {
    fn default() -> Self {
        A2cConfig {
            gamma: 0.99,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            entropy_coef: 0.01,
            rollout_length: 32,
            total_iterations: 5000,
            num_seeds: 5,
            reward: RewardSpec::Revenue,
            eval_stride: 100,
            eval_episodes: 2,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            critic_warmup: 0,
            max_grad_norm: 5.0,
            seed: 0,
        }
    }
}

impl A2cConfig {
    pub fn validate(&self) -> Result<(), PolicyTwinError> {
        let bad = |m: &str| Err(PolicyTwinError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.total_iterations == 0 || self.rollout_length == 0 || self.num_seeds == 0 {
            return bad("total_iterations, rollout_length and num_seeds must be positive");
        }
        if self.eval_stride == 0 || self.eval_episodes == 0 {
            return bad("eval_stride and eval_episodes must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_reward: f64,
    pub stddev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub label: String,
    pub seeds: Vec<u64>,
    pub points: Vec<CurvePoint>,
}

/// Masked softmax policy-gradient loss for one state,
/// `-advantage · log π(a) - entropy_coef · H(π)`, and its gradient with
/// respect to the logits. Masked entries get probability and gradient 0.
pub fn actor_loss_and_grad(logits: &[f64], mask: &[bool], action: usize, advantage: f64, entropy_coef: f64) -> (f64, Vec<f64>) {
    let masked: Vec<f64> = logits.iter().zip(mask).map(|(&z, &m)| if m { z } else { f64::NEG_INFINITY }).collect();
    let lp = log_softmax(&masked);
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let entropy: f64 = -p.iter().zip(&lp).filter(|(pi, _)| **pi > 0.0).map(|(pi, l)| pi * l).sum::<f64>();
    let loss = -advantage * lp[action] - entropy_coef * entropy;
    let grad = (0..logits.len())
        .map(|j| {
            if !mask[j] {
                return 0.0;
            }
            let indicator = if j == action { 1.0 } else { 0.0 };
            advantage * (p[j] - indicator) + entropy_coef * p[j] * (lp[j] + entropy)
        })
        .collect();
    (loss, grad)
}

/// Squared-error critic loss `0.5 (v - target)²` and its gradient.
pub fn critic_loss_and_grad(value: f64, target: f64) -> (f64, f64) {
    let d = value - target;
    (0.5 * d * d, d)
}

struct ValueNet {
    params: ParameterSet,
    net: Mlp,
}

impl ValueNet {
    fn new(hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut widths = vec![STATE_DIM];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let net = Mlp::new(&mut params, "critic", &widths, Activation::Tanh, &mut rng);
        ValueNet { params, net }
    }
}

/// Episode driver that restarts the simulator with fresh seeds and tracks
/// the statistics the fairness reward needs.
struct Env {
    config: SimConfig,
    sim: Simulator,
    rng: ChaCha8Rng,
    stats: EpisodeStats,
}

impl Env {
    fn new(config: &SimConfig, seed: u64) -> Result<Self, PolicyTwinError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = Simulator::new(config, &mut rng)?;
        let mut env = Env { config: config.clone(), sim, rng, stats: EpisodeStats::default() };
        env.skip_empty()?;
        Ok(env)
    }

    fn reset(&mut self) -> Result<(), PolicyTwinError> {
        self.sim = Simulator::new(&self.config, &mut self.rng)?;
        self.stats = EpisodeStats::default();
        self.skip_empty()
    }

    /// Episodes without any decision epoch are skipped.
    fn skip_empty(&mut self) -> Result<(), PolicyTwinError> {
        for _ in 0..1000 {
            if !self.sim.is_done() {
                return Ok(());
            }
            self.sim = Simulator::new(&self.config, &mut self.rng)?;
        }
        Err(PolicyTwinError::EmptyInput("environment produces no decision epochs".into()))
    }

    /// Applies an action and returns `(reward, episode_ended)`; restarts
    /// the episode when it ends.
    fn step(&mut self, action_id: usize, spec: RewardSpec) -> Result<(f64, bool), PolicyTwinError> {
        let action = id_to_action(action_id, self.config.queue_slots).expect("valid action id");
        let kind = match action {
            AdmissionAction::Admit(i) => Some(self.sim.state().pending[i].kind),
            AdmissionAction::Defer => None,
        };
        let out = self.sim.step(action)?;
        if let Some(k) = kind {
            self.stats.admitted[k.index()] += 1;
        }
        self.stats.revenue += out.reward;
        let done = self.sim.is_done();
        let reward = if done {
            for (k, t) in self.sim.tallies().iter().enumerate() {
                self.stats.arrived[k] = t.arrived;
            }
            reward_of(spec, out.reward, Some(&self.stats))
        } else {
            reward_of(spec, out.reward, None)
        };
        if done {
            self.reset()?;
        }
        Ok((reward, done))
    }
}

/// Episodic reward of `actor` under sampled actions, averaged over
/// episodes whose simulator and action seeds depend only on `seed`.
pub fn evaluate_actor(
    actor: &PolicyNet,
    config: &SimConfig,
    spec: RewardSpec,
    episodes: usize,
    seed: u64,
) -> Result<f64, PolicyTwinError> {
    let mut total = 0.0;
    for e in 0..episodes {
        let mut sim_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(e as u64));
        let mut act_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(e as u64) ^ 0x5eed_ac7);
        let mut sim = Simulator::new(config, &mut sim_rng)?;
        let mut stats = EpisodeStats::default();
        let mut ep_reward = 0.0;
        while !sim.is_done() {
            let state = sim.state();
            let mask = action_mask(state, config.queue_slots);
            let mut p = actor.logits(&state_to_vector(state, config));
            for (z, m) in p.iter_mut().zip(&mask) {
                if !m {
                    *z = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(&mut p);
            let a = sample_categorical(&p, &mut act_rng);
            let action = id_to_action(a, config.queue_slots).expect("valid id");
            if let AdmissionAction::Admit(i) = action {
                stats.admitted[state.pending[i].kind.index()] += 1;
            }
            let out = sim.step(action)?;
            stats.revenue += out.reward;
            if sim.is_done() {
                for (k, t) in sim.tallies().iter().enumerate() {
                    stats.arrived[k] = t.arrived;
                }
                ep_reward += reward_of(spec, out.reward, Some(&stats));
            } else {
                ep_reward += reward_of(spec, out.reward, None);
            }
        }
        total += ep_reward;
    }
    Ok(total / episodes as f64)
}

/// One A2C run. Returns per-evaluation-point rewards and the final actor.
pub fn a2c_run(
    env_config: &SimConfig,
    actor_init: Option<&PolicyNet>,
    cfg: &A2cConfig,
    seed: u64,
) -> Result<(Vec<f64>, PolicyNet), PolicyTwinError> {
    cfg.validate()?;
    env_config.validate()?;
    let actions = action_count(env_config.queue_slots);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actor = match actor_init {
        Some(p) => {
            if p.actions() != actions {
                return Err(PolicyTwinError::InvalidConfig(format!(
                    "actor has {} actions, environment needs {actions}",
                    p.actions()
                )));
            }
            p.clone()
        }
        None => PolicyNet::new(&cfg.actor_hidden, actions, rng.random()),
    };
    let mut critic = ValueNet::new(&cfg.critic_hidden, rng.random());
    let mut actor_adam = AdamState::new(&actor.params, AdamConfig::with_lr(cfg.actor_lr));
    let mut critic_adam = AdamState::new(&critic.params, AdamConfig::with_lr(cfg.critic_lr));
    let mut env = Env::new(env_config, rng.random())?;
    let mut act_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let eval_base: u64 = 0xE7A1_0000 ^ cfg.seed;
    let mut rewards = Vec::with_capacity(cfg.total_iterations / cfg.eval_stride);
    let n = cfg.rollout_length;
    for it in 0..cfg.total_iterations {
        if it % cfg.eval_stride == 0 && rewards.len() < cfg.total_iterations / cfg.eval_stride {
            let point = (it / cfg.eval_stride) as u64;
            rewards.push(evaluate_actor(&actor, env_config, cfg.reward, cfg.eval_episodes, eval_base.wrapping_add(point * 1000))?);
        }
        let mut states = Vec::with_capacity(n * STATE_DIM);
        let mut masks = Vec::with_capacity(n);
        let mut taken = Vec::with_capacity(n);
        let mut step_rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        for _ in 0..n {
            let state = env.sim.state();
            let sv = state_to_vector(state, env_config);
            let mask = action_mask(state, env_config.queue_slots);
            let mut p = actor.logits(&sv);
            for (z, m) in p.iter_mut().zip(&mask) {
                if !m {
                    *z = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(&mut p);
            let a = sample_categorical(&p, &mut act_rng);
            assert!(mask[a], "sampled an infeasible admit");
            debug_assert!(p.iter().zip(&mask).all(|(pi, m)| *m || *pi == 0.0));
            let (r, done) = env.step(a, cfg.reward)?;
            states.extend_from_slice(&sv);
            masks.push(mask);
            taken.push(a);
            step_rewards.push(r);
            dones.push(done);
        }
        let x = Tensor::from_matrix(n, STATE_DIM, states);
        let (values, v_cache) = critic.net.forward(&critic.params, &x)?;
        let bootstrap = if *dones.last().expect("non-empty rollout") {
            0.0
        } else {
            let sv = state_to_vector(env.sim.state(), env_config);
            critic.net.infer(&critic.params, &Tensor::from_matrix(1, STATE_DIM, sv.to_vec()))?.data()[0]
        };
        let mut returns = vec![0.0; n];
        let mut running = bootstrap;
        for t in (0..n).rev() {
            if dones[t] {
                running = 0.0;
            }
            running = step_rewards[t] + cfg.gamma * running;
            returns[t] = running;
        }
        // Critic.
        critic.params.zero_grads();
        let mut dv = Tensor::zeros(&[n, 1]);
        for t in 0..n {
            dv.data_mut()[t] = critic_loss_and_grad(values.data()[t], returns[t]).1 / n as f64;
        }
        critic.net.backward(&mut critic.params, &v_cache, &dv);
        critic.params.clip_grad_norm(cfg.max_grad_norm);
        critic_adam.step(&mut critic.params);
        // Actor.
        if it >= cfg.critic_warmup {
            let (logits, a_cache) = actor.net.forward(&actor.params, &x)?;
            let mut dl = Tensor::zeros(&[n, actions]);
            for t in 0..n {
                let adv = returns[t] - values.data()[t];
                let (_, g) = actor_loss_and_grad(logits.row(t), &masks[t], taken[t], adv, cfg.entropy_coef);
                for (d, gi) in dl.row_mut(t).iter_mut().zip(g) {
                    *d = gi / n as f64;
                }
            }
            actor.params.zero_grads();
            actor.net.backward(&mut actor.params, &a_cache, &dl);
            actor.params.clip_grad_norm(cfg.max_grad_norm);
            actor_adam.step(&mut actor.params);
        }
    }
    actor.params.zero_grads();
    Ok((rewards, actor))
}

/// Runs `cfg.num_seeds` independent A2C runs and averages their curves.
/// Returns the curve and the first run's final actor.
pub fn a2c_optimize(
    env_config: &SimConfig,
    actor_init: Option<&PolicyNet>,
    cfg: &A2cConfig,
    label: &str,
) -> Result<(LearningCurve, PolicyNet), PolicyTwinError> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.num_seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let mut runs = Vec::with_capacity(seeds.len());
    let mut first_actor = None;
    for &s in &seeds {
        let (r, actor) = a2c_run(env_config, actor_init, cfg, s)?;
        runs.push(r);
        first_actor.get_or_insert(actor);
    }
    Ok((curve_from_runs(label, &seeds, &runs, cfg.eval_stride), first_actor.expect("at least one seed")))
}

/// Mean and population standard deviation across runs at each point.
pub fn curve_from_runs(label: &str, seeds: &[u64], runs: &[Vec<f64>], stride: usize) -> LearningCurve {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    let points = (0..len)
        .map(|i| {
            let vals: Vec<f64> = runs.iter().map(|r| r[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            CurvePoint { iteration: i * stride, mean_reward: mean, stddev: var.sqrt() }
        })
        .collect();
    LearningCurve { label: label.to_string(), seeds: seeds.to_vec(), points }
}

/// Probability the actor assigns to admitting, averaged over states where
/// at least one admission is feasible.
pub fn admit_probability(actor: &PolicyNet, states: &[AdmissionState], config: &SimConfig) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in states {
        let mask = action_mask(s, config.queue_slots);
        if !mask[..config.queue_slots].iter().any(|m| *m) {
            continue;
        }
        let mut p = actor.logits(&state_to_vector(s, config));
        for (z, m) in p.iter_mut().zip(&mask) {
            if !m {
                *z = f64::NEG_INFINITY;
            }
        }
        softmax_in_place(&mut p);
        total += 1.0 - p[config.queue_slots];
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}
