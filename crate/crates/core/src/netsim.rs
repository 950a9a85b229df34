//! Event-driven emulation of a sliced control plane.
//!
//! Service requests for four slice archetypes arrive as independent Poisson
//! streams, wait in an admission queue until they are admitted or time out,
//! and hold radio/compute/storage resources for an exponentially distributed
//! service time. An admission policy is consulted at every decision epoch;
//! epochs fire after each arrival and departure and repeat at the same
//! instant for as long as the policy keeps admitting.
//!
//! The engine is single-threaded and fully determined by `(SimConfig, policy,
//! seed)`. Separate episodes share no state and may run in parallel.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::msgcodec::{self, MessageTrace, SessionParams, SignalingMessage, TemplateKind};

pub const SLICE_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    ImmersiveCommunication,
    Hrllc,
    MassiveCommunication,
    UbiquitousConnectivity,
}

impl SliceKind {
    pub const ALL: [SliceKind; SLICE_COUNT] = [
        SliceKind::ImmersiveCommunication,
        SliceKind::Hrllc,
        SliceKind::MassiveCommunication,
        SliceKind::UbiquitousConnectivity,
    ];

    pub fn index(self) -> usize {
        match self {
            SliceKind::ImmersiveCommunication => 0,
            SliceKind::Hrllc => 1,
            SliceKind::MassiveCommunication => 2,
            SliceKind::UbiquitousConnectivity => 3,
        }
    }

    pub fn from_index(index: usize) -> Option<SliceKind> {
        Self::ALL.get(index).copied()
    }

    /// Short name used in configuration files and token strings.
    pub fn short_name(self) -> &'static str {
        match self {
            SliceKind::ImmersiveCommunication => "immersive",
            SliceKind::Hrllc => "hrllc",
            SliceKind::MassiveCommunication => "massive",
            SliceKind::UbiquitousConnectivity => "ubiquitous",
        }
    }

    pub fn from_short_name(name: &str) -> Option<SliceKind> {
        Self::ALL.into_iter().find(|k| k.short_name() == name)
    }
}

impl fmt::Display for SliceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Integer resource units. Unsigned storage makes negative components
/// unrepresentable; subtraction goes through [`ResourceVector::checked_sub`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceVector {
    pub radio: u32,
    pub compute: u32,
    pub storage: u32,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector { radio: 0, compute: 0, storage: 0 };

    pub const fn new(radio: u32, compute: u32, storage: u32) -> Self {
        Self { radio, compute, storage }
    }

    pub fn components(&self) -> [u32; 3] {
        [self.radio, self.compute, self.storage]
    }

    /// Component-wise `self <= other`.
    pub fn fits_within(&self, other: &ResourceVector) -> bool {
        self.radio <= other.radio && self.compute <= other.compute && self.storage <= other.storage
    }

    pub fn checked_sub(&self, other: &ResourceVector) -> Option<ResourceVector> {
        Some(ResourceVector {
            radio: self.radio.checked_sub(other.radio)?,
            compute: self.compute.checked_sub(other.compute)?,
            storage: self.storage.checked_sub(other.storage)?,
        })
    }

    pub fn checked_add(&self, other: &ResourceVector) -> Option<ResourceVector> {
        Some(ResourceVector {
            radio: self.radio.checked_add(other.radio)?,
            compute: self.compute.checked_add(other.compute)?,
            storage: self.storage.checked_add(other.storage)?,
        })
    }

    pub fn total(&self) -> u32 {
        self.radio + self.compute + self.storage
    }

    /// Sum of the per-resource fractions of `capacity` this vector occupies.
    /// Resources with zero capacity contribute nothing.
    pub fn normalized_l1(&self, capacity: &ResourceVector) -> f64 {
        self.components()
            .iter()
            .zip(capacity.components())
            .filter(|(_, cap)| *cap > 0)
            .map(|(d, cap)| *d as f64 / cap as f64)
            .sum()
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.radio, self.compute, self.storage)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceProfile {
    pub kind: SliceKind,
    pub demand: ResourceVector,
    /// Requests per second.
    pub arrival_rate: f64,
    /// Seconds.
    pub mean_service_time: f64,
    /// Seconds a request may wait in the queue before it expires.
    pub timeout: f64,
    /// Reward units per admitted request.
    pub revenue: f64,
}

impl SliceProfile {
    fn validate(&self) -> Result<(), SimError> {
        let name = self.kind.short_name();
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return Err(SimError::InvalidConfig(format!("{name}: arrival_rate must be >= 0")));
        }
        if !(self.mean_service_time > 0.0 && self.mean_service_time.is_finite()) {
            return Err(SimError::InvalidConfig(format!("{name}: mean_service_time must be > 0")));
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(SimError::InvalidConfig(format!("{name}: timeout must be > 0")));
        }
        if !self.revenue.is_finite() {
            return Err(SimError::InvalidConfig(format!("{name}: revenue must be finite")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub capacity: ResourceVector,
    /// Indexed by [`SliceKind::index`].
    pub profiles: [SliceProfile; SLICE_COUNT],
    pub max_concurrent_ues: usize,
    /// Seconds of simulated time per episode.
    pub horizon: f64,
    pub seed: u64,
    /// Reward added when a queued request expires. Zero by default; a
    /// negative value turns expiries into a penalty.
    pub expiry_penalty: f64,
    /// Number of pending positions visible to learned policies.
    pub queue_slots: usize,
    /// Mean one-hop latency of the non-control-plane entities (UE, RAN,
    /// UPF) when rendering signaling traces. Control-plane responses are
    /// emitted without delay.
    pub signaling_latency: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let profile = |kind, demand, arrival_rate, mean_service_time, timeout, revenue| SliceProfile {
            kind,
            demand,
            arrival_rate,
            mean_service_time,
            timeout,
            revenue,
        };
        SimConfig {
            capacity: ResourceVector::new(64, 64, 64),
            profiles: [
                profile(SliceKind::ImmersiveCommunication, ResourceVector::new(8, 2, 2), 0.6, 8.0, 5.0, 10.0),
                profile(SliceKind::Hrllc, ResourceVector::new(2, 8, 1), 0.4, 4.0, 2.0, 12.0),
                profile(SliceKind::MassiveCommunication, ResourceVector::new(1, 1, 1), 2.0, 10.0, 20.0, 2.0),
                profile(SliceKind::UbiquitousConnectivity, ResourceVector::new(2, 1, 4), 0.8, 12.0, 10.0, 5.0),
            ],
            max_concurrent_ues: 32,
            horizon: 100.0,
            seed: 0,
            expiry_penalty: 0.0,
            queue_slots: 8,
            signaling_latency: 0.05,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        for (i, p) in self.profiles.iter().enumerate() {
            if p.kind.index() != i {
                return Err(SimError::InvalidConfig(format!(
                    "profile at position {i} is for slice {}",
                    p.kind
                )));
            }
            p.validate()?;
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::InvalidConfig("horizon must be > 0".into()));
        }
        if self.max_concurrent_ues < 1 {
            return Err(SimError::InvalidConfig("max_concurrent_ues must be >= 1".into()));
        }
        if self.queue_slots < 1 {
            return Err(SimError::InvalidConfig("queue_slots must be >= 1".into()));
        }
        if !self.expiry_penalty.is_finite() {
            return Err(SimError::InvalidConfig("expiry_penalty must be finite".into()));
        }
        if !(self.signaling_latency >= 0.0 && self.signaling_latency.is_finite()) {
            return Err(SimError::InvalidConfig("signaling_latency must be >= 0".into()));
        }
        Ok(())
    }

    pub fn profile(&self, kind: SliceKind) -> &SliceProfile {
        &self.profiles[kind.index()]
    }

    /// Hex SHA-256 over a canonical rendering of every field.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{self:?}").as_bytes());
        hex::encode(hasher.finalize())
    }

    /// Mean number of sessions the arrival process would keep busy with no
    /// admission limit: `Σ rate · mean service time`.
    pub fn offered_load(&self) -> f64 {
        self.profiles.iter().map(|p| p.arrival_rate * p.mean_service_time).sum()
    }

    /// Copy with every arrival rate multiplied by `factor`.
    pub fn with_arrival_scale(&self, factor: f64) -> SimConfig {
        let mut out = self.clone();
        for p in out.profiles.iter_mut() {
            p.arrival_rate *= factor;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub request_id: u64,
    pub tenant_id: u32,
    pub kind: SliceKind,
    pub demand: ResourceVector,
    pub arrival_time: f64,
    pub service_time: f64,
    pub deadline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveSession {
    pub request_id: u64,
    pub kind: SliceKind,
    pub demand: ResourceVector,
    pub departure_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissionState {
    pub clock: f64,
    /// Arrival order.
    pub pending: Vec<ServiceRequest>,
    pub available: ResourceVector,
    pub active: Vec<ActiveSession>,
    pub capacity: ResourceVector,
    pub max_concurrent_ues: usize,
}

impl AdmissionState {
    pub fn idle(capacity: ResourceVector, max_concurrent_ues: usize) -> Self {
        AdmissionState {
            clock: 0.0,
            pending: Vec::new(),
            available: capacity,
            active: Vec::new(),
            capacity,
            max_concurrent_ues,
        }
    }

    pub fn feasible(&self, request: &ServiceRequest) -> bool {
        feasible(self, request)
    }

    /// Checks the structural invariants: resource conservation, the
    /// concurrency cap and that no pending request is already expired.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut committed = ResourceVector::ZERO;
        for s in &self.active {
            committed = committed
                .checked_add(&s.demand)
                .ok_or_else(|| "active demand overflow".to_string())?;
        }
        let total = self
            .available
            .checked_add(&committed)
            .ok_or_else(|| "available + committed overflow".to_string())?;
        if total != self.capacity {
            return Err(format!(
                "conservation violated: available {} + committed {} != capacity {}",
                self.available, committed, self.capacity
            ));
        }
        if self.active.len() > self.max_concurrent_ues {
            return Err(format!(
                "{} active sessions exceed cap {}",
                self.active.len(),
                self.max_concurrent_ues
            ));
        }
        if let Some(r) = self.pending.iter().find(|r| r.deadline <= self.clock) {
            return Err(format!("request {} pending past its deadline", r.request_id));
        }
        if self.pending.windows(2).any(|w| w[0].arrival_time > w[1].arrival_time) {
            return Err("pending queue out of arrival order".into());
        }
        Ok(())
    }
}

/// True iff `request` fits in the free resources and another session is
/// allowed under the concurrency cap.
pub fn feasible(state: &AdmissionState, request: &ServiceRequest) -> bool {
    request.demand.fits_within(&state.available) && state.active.len() < state.max_concurrent_ues
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdmissionAction {
    /// Admit the pending request at this index.
    Admit(usize),
    Defer,
}

impl fmt::Display for AdmissionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdmissionAction::Admit(i) => write!(f, "admit({i})"),
            AdmissionAction::Defer => f.write_str("defer"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid action {action} at t={clock}: {reason}")]
    InvalidAction {
        action: AdmissionAction,
        clock: f64,
        reason: String,
    },
    #[error("episode already finished")]
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Departure(u64),
    Timeout(u64),
    Arrival(ServiceRequest),
    DecisionEpoch,
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::Departure(_) => 0,
            EventKind::Timeout(_) => 1,
            EventKind::Arrival(_) => 2,
            EventKind::DecisionEpoch => 3,
        }
    }

    fn request_id(&self) -> u64 {
        match self {
            EventKind::Departure(id) | EventKind::Timeout(id) => *id,
            EventKind::Arrival(r) => r.request_id,
            EventKind::DecisionEpoch => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
}

/// Total order on events: time, then Departure < Timeout < Arrival <
/// DecisionEpoch, then request id.
pub fn event_order(a: &SimEvent, b: &SimEvent) -> Ordering {
    a.time
        .total_cmp(&b.time)
        .then(a.kind.rank().cmp(&b.kind.rank()))
        .then(a.kind.request_id().cmp(&b.kind.request_id()))
}

struct Queued(SimEvent);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        event_order(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // BinaryHeap is a max-heap; reverse so the earliest event pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        event_order(&other.0, &self.0)
    }
}

/// Draws one slice's requests over `[0, horizon]`: exponential inter-arrival
/// gaps with the profile's rate and exponential service times with the
/// profile's mean. Request ids are local to the returned list.
pub fn sample_arrivals<R: Rng + ?Sized>(profile: &SliceProfile, horizon: f64, rng: &mut R) -> Vec<ServiceRequest> {
    let mut out = Vec::new();
    if profile.arrival_rate <= 0.0 || horizon <= 0.0 {
        return out;
    }
    let gap = Exp::new(profile.arrival_rate).expect("positive arrival rate");
    let service = Exp::new(1.0 / profile.mean_service_time).expect("positive service mean");
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        if t > horizon {
            break;
        }
        let mut service_time: f64 = service.sample(rng);
        if service_time <= 0.0 {
            service_time = f64::MIN_POSITIVE;
        }
        out.push(ServiceRequest {
            request_id: out.len() as u64,
            tenant_id: profile.kind.index() as u32,
            kind: profile.kind,
            demand: profile.demand,
            arrival_time: t,
            service_time,
            deadline: t + profile.timeout,
        });
    }
    out
}

/// Ranking used by [`GreedyPolicy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyCriterion {
    /// Revenue per unit of capacity-normalized L1 demand.
    RevenueDensity,
    /// Raw revenue.
    Revenue,
}

pub trait AdmissionPolicy {
    fn decide(&mut self, state: &AdmissionState) -> AdmissionAction;
}

impl<F> AdmissionPolicy for F
where
    F: FnMut(&AdmissionState) -> AdmissionAction,
{
    fn decide(&mut self, state: &AdmissionState) -> AdmissionAction {
        self(state)
    }
}

/// The network's own admission rule: admit the feasible pending request
/// with the best score, earliest arrival then smallest id breaking ties.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyPolicy {
    pub criterion: GreedyCriterion,
    revenues: [f64; SLICE_COUNT],
}

impl GreedyPolicy {
    pub fn new(config: &SimConfig) -> Self {
        Self::with_criterion(config, GreedyCriterion::RevenueDensity)
    }

    pub fn with_criterion(config: &SimConfig, criterion: GreedyCriterion) -> Self {
        let mut revenues = [0.0; SLICE_COUNT];
        for p in &config.profiles {
            revenues[p.kind.index()] = p.revenue;
        }
        GreedyPolicy { criterion, revenues }
    }

    pub fn score(&self, state: &AdmissionState, request: &ServiceRequest) -> f64 {
        let revenue = self.revenues[request.kind.index()];
        match self.criterion {
            GreedyCriterion::Revenue => revenue,
            GreedyCriterion::RevenueDensity => {
                let norm = request.demand.normalized_l1(&state.capacity);
                if norm > 0.0 {
                    revenue / norm
                } else if revenue > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
        }
    }

    pub fn choose(&self, state: &AdmissionState) -> AdmissionAction {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in state.pending.iter().enumerate() {
            if !feasible(state, r) {
                continue;
            }
            let score = self.score(state, r);
            let better = match best {
                None => true,
                Some((j, s)) => {
                    let other = &state.pending[j];
                    score > s
                        || (score == s
                            && (r.arrival_time < other.arrival_time
                                || (r.arrival_time == other.arrival_time && r.request_id < other.request_id)))
                }
            };
            if better {
                best = Some((i, score));
            }
        }
        best.map_or(AdmissionAction::Defer, |(i, _)| AdmissionAction::Admit(i))
    }
}

impl AdmissionPolicy for GreedyPolicy {
    fn decide(&mut self, state: &AdmissionState) -> AdmissionAction {
        self.choose(state)
    }
}

/// What happened to one request over an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestLifecycle {
    pub request: ServiceRequest,
    pub admitted_at: Option<f64>,
    /// Position in the global admission order, used to order simultaneous
    /// admissions.
    pub admission_seq: Option<u64>,
    pub departed_at: Option<f64>,
    pub expired_at: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceTally {
    pub arrived: u64,
    pub admitted: u64,
    pub expired: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub events: Vec<SimEvent>,
}

/// A steppable episode. The simulator always rests at a decision epoch
/// (or is finished); [`Simulator::step`] applies the policy's action and
/// advances to the next epoch.
pub struct Simulator {
    config: SimConfig,
    state: AdmissionState,
    events: BinaryHeap<Queued>,
    epoch_scheduled_at: Option<f64>,
    lifecycles: Vec<RequestLifecycle>,
    tallies: [SliceTally; SLICE_COUNT],
    admitted: u64,
    expired: u64,
    cumulative_reward: f64,
    done: bool,
}

impl Simulator {
    pub fn new<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<Self, SimError> {
        config.validate()?;
        let mut arrivals: Vec<ServiceRequest> = Vec::new();
        for p in &config.profiles {
            arrivals.extend(sample_arrivals(p, config.horizon, rng));
        }
        // Stable sort keeps slice order for simultaneous arrivals.
        arrivals.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
        let mut sim = Simulator {
            config: config.clone(),
            state: AdmissionState::idle(config.capacity, config.max_concurrent_ues),
            events: BinaryHeap::with_capacity(arrivals.len() * 3),
            epoch_scheduled_at: None,
            lifecycles: Vec::with_capacity(arrivals.len()),
            tallies: [SliceTally::default(); SLICE_COUNT],
            admitted: 0,
            expired: 0,
            cumulative_reward: 0.0,
            done: false,
        };
        for (id, mut r) in arrivals.into_iter().enumerate() {
            r.request_id = id as u64;
            sim.lifecycles.push(RequestLifecycle {
                request: r.clone(),
                admitted_at: None,
                admission_seq: None,
                departed_at: None,
                expired_at: None,
            });
            sim.events.push(Queued(SimEvent { time: r.arrival_time, kind: EventKind::Arrival(r) }));
        }
        let mut startup = Vec::new();
        sim.advance(&mut startup);
        Ok(sim)
    }

    pub fn from_seed(config: &SimConfig, seed: u64) -> Result<Self, SimError> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> &AdmissionState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn lifecycles(&self) -> &[RequestLifecycle] {
        &self.lifecycles
    }

    pub fn tallies(&self) -> &[SliceTally; SLICE_COUNT] {
        &self.tallies
    }

    pub fn admitted(&self) -> u64 {
        self.admitted
    }

    pub fn expired(&self) -> u64 {
        self.expired
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.cumulative_reward
    }

    /// Applies `action` at the current epoch, then processes events up to
    /// and including the next decision epoch.
    pub fn step(&mut self, action: AdmissionAction) -> Result<StepOutcome, SimError> {
        if self.done {
            return Err(SimError::Finished);
        }
        let mut emitted = Vec::new();
        let mut reward = 0.0;
        match action {
            AdmissionAction::Admit(i) => {
                let clock = self.state.clock;
                let request = self.state.pending.get(i).ok_or_else(|| SimError::InvalidAction {
                    action,
                    clock,
                    reason: format!("index out of range for {} pending", self.state.pending.len()),
                })?;
                if !feasible(&self.state, request) {
                    return Err(SimError::InvalidAction {
                        action,
                        clock,
                        reason: format!(
                            "request {} demands {} with {} available and {}/{} sessions active",
                            request.request_id,
                            request.demand,
                            self.state.available,
                            self.state.active.len(),
                            self.state.max_concurrent_ues
                        ),
                    });
                }
                let request = self.state.pending.remove(i);
                self.state.available = self
                    .state
                    .available
                    .checked_sub(&request.demand)
                    .expect("feasibility checked");
                let departure_time = clock + request.service_time;
                self.state.active.push(ActiveSession {
                    request_id: request.request_id,
                    kind: request.kind,
                    demand: request.demand,
                    departure_time,
                });
                let life = &mut self.lifecycles[request.request_id as usize];
                life.admitted_at = Some(clock);
                life.admission_seq = Some(self.admitted);
                self.admitted += 1;
                self.tallies[request.kind.index()].admitted += 1;
                reward = self.config.profile(request.kind).revenue;
                self.push(SimEvent { time: departure_time, kind: EventKind::Departure(request.request_id) }, &mut emitted);
                // Admitting keeps the epoch open at the same instant.
                self.schedule_epoch(clock, &mut emitted);
            }
            AdmissionAction::Defer => {}
        }
        reward += self.advance(&mut emitted);
        self.cumulative_reward += reward;
        Ok(StepOutcome { reward, events: emitted })
    }

    fn push(&mut self, event: SimEvent, emitted: &mut Vec<SimEvent>) {
        emitted.push(event.clone());
        self.events.push(Queued(event));
    }

    fn schedule_epoch(&mut self, time: f64, emitted: &mut Vec<SimEvent>) {
        if self.epoch_scheduled_at != Some(time) {
            self.epoch_scheduled_at = Some(time);
            self.push(SimEvent { time, kind: EventKind::DecisionEpoch }, emitted);
        }
    }

    /// Processes events until a decision epoch is reached or the horizon is
    /// passed. Returns expiry rewards collected on the way.
    fn advance(&mut self, emitted: &mut Vec<SimEvent>) -> f64 {
        let mut reward = 0.0;
        loop {
            let Some(next) = self.events.peek() else {
                self.finish();
                return reward;
            };
            if next.0.time > self.config.horizon {
                self.finish();
                return reward;
            }
            let SimEvent { time, kind } = self.events.pop().expect("peeked").0;
            self.state.clock = time;
            match kind {
                EventKind::Departure(id) => {
                    if let Some(pos) = self.state.active.iter().position(|s| s.request_id == id) {
                        let session = self.state.active.remove(pos);
                        self.state.available = self
                            .state
                            .available
                            .checked_add(&session.demand)
                            .expect("released demand was committed");
                        self.lifecycles[id as usize].departed_at = Some(time);
                    }
                    self.schedule_epoch(time, emitted);
                }
                EventKind::Timeout(id) => {
                    if let Some(pos) = self.state.pending.iter().position(|r| r.request_id == id) {
                        let r = self.state.pending.remove(pos);
                        self.expired += 1;
                        self.tallies[r.kind.index()].expired += 1;
                        self.lifecycles[id as usize].expired_at = Some(time);
                        reward += self.config.expiry_penalty;
                    }
                }
                EventKind::Arrival(request) => {
                    self.tallies[request.kind.index()].arrived += 1;
                    let deadline = request.deadline;
                    let id = request.request_id;
                    self.state.pending.push(request);
                    self.push(SimEvent { time: deadline, kind: EventKind::Timeout(id) }, emitted);
                    self.schedule_epoch(time, emitted);
                }
                EventKind::DecisionEpoch => {
                    self.epoch_scheduled_at = None;
                    return reward;
                }
            }
        }
    }

    fn finish(&mut self) {
        self.done = true;
        self.state.clock = self.state.clock.max(0.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub state: AdmissionState,
    pub action: AdmissionAction,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub decisions: Vec<Decision>,
    pub arrivals: u64,
    pub admitted: u64,
    pub expired: u64,
    pub cumulative_reward: f64,
    pub per_slice: [SliceTally; SLICE_COUNT],
    pub lifecycles: Vec<RequestLifecycle>,
}

/// Runs one episode, recording `(state, action, reward)` at every decision
/// epoch.
pub fn run_episode<P, R>(config: &SimConfig, policy: &mut P, rng: &mut R) -> Result<Trajectory, SimError>
where
    P: AdmissionPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let mut sim = Simulator::new(config, rng)?;
    let mut decisions = Vec::new();
    while !sim.is_done() {
        let state = sim.state().clone();
        let action = policy.decide(&state);
        let outcome = sim.step(action)?;
        decisions.push(Decision { state, action, reward: outcome.reward });
    }
    Ok(Trajectory {
        decisions,
        arrivals: sim.lifecycles.len() as u64,
        admitted: sim.admitted,
        expired: sim.expired,
        cumulative_reward: sim.cumulative_reward,
        per_slice: sim.tallies,
        lifecycles: sim.lifecycles,
    })
}

/// Simulates an episode under `policy` and renders every request's
/// lifecycle as control-plane signaling, interleaved across UEs by
/// timestamp.
///
/// UE, RAN and UPF answer after an exponential delay with mean
/// `config.signaling_latency`; the control plane answers instantly, so each
/// control-plane response directly follows the message that triggered it.
/// Admissions and expiries are the exceptions: they are triggered by the
/// admission policy and the queue timer.
pub fn generate_signaling_trace<P, R>(config: &SimConfig, policy: &mut P, rng: &mut R) -> Result<MessageTrace, SimError>
where
    P: AdmissionPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let trajectory = run_episode(config, policy, rng)?;
    let mut detail_rng = ChaCha8Rng::seed_from_u64(rng.random());
    Ok(render_trace(config, &trajectory.lifecycles, &mut detail_rng))
}

// Sort phases for messages sharing a timestamp, mirroring the event order.
const PHASE_DEPARTURE: u8 = 0;
const PHASE_TIMEOUT: u8 = 1;
const PHASE_ARRIVAL: u8 = 2;
const PHASE_ADMISSION: u8 = 3;

/// Minimum spacing used when a release would otherwise precede the end of
/// the establishment exchange it tears down.
const RELEASE_GUARD: f64 = 1e-6;

pub(crate) fn render_trace(config: &SimConfig, lifecycles: &[RequestLifecycle], rng: &mut ChaCha8Rng) -> MessageTrace {
    struct Keyed {
        time: f64,
        phase: u8,
        order: u64,
        seq: u8,
        msg: SignalingMessage,
    }
    let hop = |rng: &mut ChaCha8Rng| -> f64 {
        if config.signaling_latency > 0.0 {
            Exp::new(1.0 / config.signaling_latency).expect("positive latency").sample(rng)
        } else {
            0.0
        }
    };
    let mut keyed: Vec<Keyed> = Vec::new();
    for life in lifecycles {
        let r = &life.request;
        let session = SessionParams::draw(r, rng);
        let registration_lead = hop(rng);
        let kind = if life.admitted_at.is_some() { TemplateKind::Accept } else { TemplateKind::RejectTimeout };
        let template = msgcodec::procedure_template(kind, r, session);
        let a = r.arrival_time;
        let reg_time = (a - registration_lead).max(0.0);
        let arrival_key = |seq: u8, time: f64| (time, PHASE_ARRIVAL, r.request_id, seq);
        let mut times: Vec<(f64, u8, u64, u8)> = vec![arrival_key(0, reg_time), arrival_key(1, reg_time), arrival_key(2, a)];
        match (life.admitted_at, life.expired_at) {
            (Some(t_adm), _) => {
                let order = life.admission_seq.unwrap_or(r.request_id);
                let n4_resp = t_adm + hop(rng);
                let n2_resp = n4_resp + hop(rng);
                times.push((t_adm, PHASE_ADMISSION, order, 3));
                times.push((n4_resp, PHASE_ADMISSION, order, 4));
                times.push((n4_resp, PHASE_ADMISSION, order, 5));
                times.push((n2_resp, PHASE_ADMISSION, order, 6));
                times.push((n2_resp, PHASE_ADMISSION, order, 7));
                if let Some(t_dep) = life.departed_at {
                    let release = if t_dep > n2_resp { t_dep } else { n2_resp + RELEASE_GUARD };
                    let phase = if t_dep > n2_resp { PHASE_DEPARTURE } else { PHASE_ADMISSION };
                    times.push((release, phase, order, 8));
                    times.push((release, phase, order, 9));
                }
            }
            (None, Some(t_exp)) => times.push((t_exp, PHASE_TIMEOUT, r.request_id, 3)),
            // Still queued when the horizon closed.
            (None, None) => {}
        }
        for ((time, phase, order, seq), mut msg) in times.into_iter().zip(template) {
            msg.timestamp = time;
            keyed.push(Keyed { time, phase, order, seq, msg });
        }
    }
    keyed.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.phase.cmp(&b.phase))
            .then(a.order.cmp(&b.order))
            .then(a.seq.cmp(&b.seq))
    });
    MessageTrace {
        messages: keyed.into_iter().map(|k| k.msg).collect(),
        config_digest: config.digest(),
    }
}
