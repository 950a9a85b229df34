//! Experiment manifests: a TOML file that fully determines one run.
//!
//! A manifest names its experiment kind, the simulator settings (as
//! overrides of the built-in defaults), the model and training settings the
//! kind needs, the seed list, and the output directory. Unknown keys are
//! rejected with the line they appear on.
//!
//! ```toml
//! schema_version = 1
//! kind = "trace-gen"
//! seeds = [0, 1]
//! output_dir = "results/traces"
//!
//! [sim]
//! horizon = 10.0
//!
//! [sim.slices.hrllc]
//! arrival_rate = 0.8
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use nettwin_core::msgcodec::DEFAULT_CONTEXT_LENGTH;
use nettwin_core::msgtwin::{ModelConfig, SweepConfig, SweepModel, TrainConfig, TransformerConfig};
use nettwin_core::netsim::{ResourceVector, SimConfig, SliceKind};
use nettwin_core::policytwin::{A2cConfig, CloneConfig, GanConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Invalid manifest, with the 1-based position of the offending text when
/// it can be located.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        ConfigError { path: None, line: None, column: None, message: message.into() }
    }

    fn at(mut self, pos: Option<(usize, usize)>) -> Self {
        if let Some((line, column)) = pos {
            self.line = Some(line);
            self.column = Some(column);
        }
        self
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.path {
            write!(f, "{}:", p.display())?;
        }
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "{l}:{c}: ")?,
            (Some(l), None) => write!(f, "{l}: ")?,
            _ if self.path.is_some() => f.write_str(" ")?,
            _ => {}
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TraceGen,
    MsgtwinSweep,
    PolicyClone,
    GanAblation,
    DrlCompare,
    Finetune,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TraceGen => "trace-gen",
            ExperimentKind::MsgtwinSweep => "msgtwin-sweep",
            ExperimentKind::PolicyClone => "policy-clone",
            ExperimentKind::GanAblation => "gan-ablation",
            ExperimentKind::DrlCompare => "drl-compare",
            ExperimentKind::Finetune => "finetune",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-slice overrides; absent fields keep the default profile.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceOverride {
    pub demand: Option<ResourceVector>,
    pub arrival_rate: Option<f64>,
    pub mean_service_time: Option<f64>,
    pub timeout: Option<f64>,
    pub revenue: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceTables {
    pub immersive: Option<SliceOverride>,
    pub hrllc: Option<SliceOverride>,
    pub massive: Option<SliceOverride>,
    pub ubiquitous: Option<SliceOverride>,
}

impl SliceTables {
    fn get(&self, kind: SliceKind) -> Option<&SliceOverride> {
        match kind {
            SliceKind::ImmersiveCommunication => self.immersive.as_ref(),
            SliceKind::Hrllc => self.hrllc.as_ref(),
            SliceKind::MassiveCommunication => self.massive.as_ref(),
            SliceKind::UbiquitousConnectivity => self.ubiquitous.as_ref(),
        }
    }
}

/// Simulator settings as overrides of [`SimConfig::default`].
/// `arrival_scale` multiplies every slice's arrival rate after the
/// per-slice overrides are applied.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub horizon: Option<f64>,
    pub max_concurrent_ues: Option<usize>,
    pub capacity: Option<ResourceVector>,
    pub queue_slots: Option<usize>,
    pub expiry_penalty: Option<f64>,
    pub signaling_latency: Option<f64>,
    pub seed: Option<u64>,
    pub arrival_scale: Option<f64>,
    #[serde(default)]
    pub slices: SliceTables,
}

impl SimSection {
    /// Applies the overrides on top of `base`.
    pub fn apply(&self, base: &SimConfig) -> SimConfig {
        let mut c = base.clone();
        if let Some(v) = self.horizon {
            c.horizon = v;
        }
        if let Some(v) = self.max_concurrent_ues {
            c.max_concurrent_ues = v;
        }
        if let Some(v) = self.capacity {
            c.capacity = v;
        }
        if let Some(v) = self.queue_slots {
            c.queue_slots = v;
        }
        if let Some(v) = self.expiry_penalty {
            c.expiry_penalty = v;
        }
        if let Some(v) = self.signaling_latency {
            c.signaling_latency = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        for kind in SliceKind::ALL {
            let Some(o) = self.slices.get(kind) else { continue };
            let p = &mut c.profiles[kind.index()];
            if let Some(v) = o.demand {
                p.demand = v;
            }
            if let Some(v) = o.arrival_rate {
                p.arrival_rate = v;
            }
            if let Some(v) = o.mean_service_time {
                p.mean_service_time = v;
            }
            if let Some(v) = o.timeout {
                p.timeout = v;
            }
            if let Some(v) = o.revenue {
                p.revenue = v;
            }
        }
        if let Some(s) = self.arrival_scale {
            c = c.with_arrival_scale(s);
        }
        c
    }

    pub fn resolve(&self) -> SimConfig {
        self.apply(&SimConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    /// Context length of the message dataset built from the traces.
    pub context_length: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        TraceSection { context_length: DEFAULT_CONTEXT_LENGTH }
    }
}

/// Sweep settings; seeds come from the manifest's seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub ue_levels: Vec<usize>,
    pub load_factor: f64,
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub horizon: f64,
    pub max_eval_samples: usize,
    pub max_param_gap: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        SweepSection {
            ue_levels: d.ue_levels,
            load_factor: d.load_factor,
            train_episodes: d.train_episodes,
            test_episodes: d.test_episodes,
            horizon: d.horizon,
            max_eval_samples: d.max_eval_samples,
            max_param_gap: d.max_param_gap,
        }
    }
}

impl SweepSection {
    pub fn to_config(&self, seeds: &[u64]) -> SweepConfig {
        SweepConfig {
            ue_levels: self.ue_levels.clone(),
            load_factor: self.load_factor,
            train_episodes: self.train_episodes,
            test_episodes: self.test_episodes,
            horizon: self.horizon,
            max_eval_samples: self.max_eval_samples,
            seeds: seeds.to_vec(),
            max_param_gap: self.max_param_gap,
        }
    }
}

/// Behavior cloning of the greedy policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloneSection {
    /// Minimum number of greedy state-action samples.
    pub samples: usize,
    /// Held-out states, from fresh episodes, for agreement.
    pub test_states: usize,
    /// Remove infeasible actions from the training softmax.
    pub masked: bool,
    /// First episode seed of the training samples.
    pub sample_seed: u64,
    /// First episode seed of the held-out states.
    pub test_seed: u64,
    pub train: CloneConfig,
}

impl Default for CloneSection {
    fn default() -> Self {
        CloneSection {
            samples: 20_000,
            test_states: 3_000,
            masked: true,
            sample_seed: 1,
            test_seed: 50_000,
            train: CloneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Real samples the equilibrium and marginal checks train on.
    pub equilibrium_samples: usize,
    pub held_out_samples: usize,
    pub discriminator_check_steps: usize,
    pub discriminator_check_hidden: Vec<usize>,
    /// Real samples per seed in the scarce-data comparison.
    pub real_samples: usize,
    pub synthetic_samples: usize,
    pub test_states: usize,
    /// Episode seeds: real samples, held-out real samples, test states,
    /// and the per-seed scarce pools at `pool_seed + seed * pool_stride`.
    pub sample_seed: u64,
    pub held_out_seed: u64,
    pub test_seed: u64,
    pub pool_seed: u64,
    pub pool_stride: u64,
    pub discriminator_check_seed: u64,
    /// Seeds the synthetic draw for the marginal check.
    pub synthetic_seed: u64,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            equilibrium_samples: 2000,
            held_out_samples: 1000,
            discriminator_check_steps: 1000,
            discriminator_check_hidden: vec![64, 64],
            real_samples: 100,
            synthetic_samples: 2000,
            test_states: 3000,
            sample_seed: 1,
            held_out_seed: 9000,
            test_seed: 50_000,
            pool_seed: 100_000,
            pool_stride: 1000,
            discriminator_check_seed: 5,
            synthetic_seed: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// Changes that turn the base simulator into the new setting.
    pub shift: SimSection,
    pub pretrain_episodes: usize,
    pub new_train_episodes: usize,
    pub new_test_episodes: usize,
    /// Windows used for the before/after and test losses.
    pub loss_windows: usize,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// Used both for adapting the pretrained model and for the
    /// from-scratch baseline; `freeze_prefix_layers` only applies to the
    /// former.
    pub adapt: TrainConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            shift: SimSection::default(),
            pretrain_episodes: 10,
            new_train_episodes: 4,
            new_test_episodes: 4,
            loss_windows: 64,
            model: ModelConfig::Transformer(TransformerConfig::default()),
            pretrain: TrainConfig::default(),
            adapt: TrainConfig { freeze_prefix_layers: 1, ..TrainConfig::default() },
        }
    }
}

/// Pass marks used by the acceptance checks. Absent entries are not
/// checked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Transformer median message accuracy at the lowest UE level.
    pub min_low_level_message_accuracy: Option<f64>,
    pub min_agreement: Option<f64>,
    pub equilibrium_min: Option<f64>,
    pub equilibrium_max: Option<f64>,
    pub max_marginal_tv: Option<f64>,
    /// The twin curve must not fall below the scratch curve before this
    /// iteration.
    pub early_iterations: Option<usize>,
    /// Fraction of the scratch final reward the twin has to reach.
    pub reach_fraction: Option<f64>,
    /// Largest allowed ratio of twin to scratch iterations to get there.
    pub max_reach_ratio: Option<f64>,
    /// Evaluation points averaged into a curve's final reward.
    pub final_points: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sim: SimSection,
    pub traces: Option<TraceSection>,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub models: Vec<SweepModel>,
    pub clone: Option<CloneSection>,
    pub gan: Option<GanConfig>,
    pub ablation: Option<AblationSection>,
    pub a2c: Option<A2cConfig>,
    pub finetune: Option<FinetuneSection>,
    #[serde(default)]
    pub thresholds: Thresholds,
}

/// 1-based line and column of byte `offset` in `src`.
fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Position of `key` inside table `table` (dotted, "" for the root), or of
/// the table header itself when `key` is empty.
fn locate(src: &str, table: &str, key: &str) -> Option<(usize, usize)> {
    let mut current = String::new();
    let mut offset = 0;
    for line in src.split_inclusive('\n') {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[') {
            let h = h.trim_start_matches('[');
            let name = h.split(']').next().unwrap_or("").trim();
            current = name.to_string();
            if key.is_empty() && current == table {
                return Some(line_col(src, offset + line.find('[').unwrap_or(0)));
            }
        } else if current == table && !key.is_empty() {
            let k = t.split('=').next().unwrap_or("").trim();
            if k == key {
                return Some(line_col(src, offset + line.find(key).unwrap_or(0)));
            }
        }
        offset += line.len();
    }
    None
}

impl ExperimentManifest {
    /// Parses and validates manifest text. Errors carry the line of the
    /// offending key when it can be found.
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let m: ExperimentManifest = toml::from_str(src).map_err(|e| {
            let pos = e.span().map(|s| line_col(src, s.start));
            ConfigError::new(e.message().trim().to_string()).at(pos)
        })?;
        m.validate(src)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { path: Some(path.to_path_buf()), ..ConfigError::new(format!("cannot read manifest: {e}")) })?;
        Self::parse(&src).map_err(|e| ConfigError { path: Some(path.to_path_buf()), ..e })
    }

    fn validate(&self, src: &str) -> Result<(), ConfigError> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(ConfigError::new(format!(
                "schema_version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            ))
            .at(locate(src, "", "schema_version")));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds must list at least one seed").at(locate(src, "", "seeds")));
        }
        self.sim.resolve().validate().map_err(|e| ConfigError::new(format!("[sim]: {e}")).at(locate(src, "sim", "")))?;

        use ExperimentKind::*;
        let present = [
            ("traces", self.traces.is_some()),
            ("sweep", self.sweep.is_some()),
            ("models", !self.models.is_empty()),
            ("clone", self.clone.is_some()),
            ("gan", self.gan.is_some()),
            ("ablation", self.ablation.is_some()),
            ("a2c", self.a2c.is_some()),
            ("finetune", self.finetune.is_some()),
        ];
        let allowed: &[&str] = match self.kind {
            TraceGen => &["traces"],
            MsgtwinSweep => &["sweep", "models"],
            PolicyClone => &["clone"],
            GanAblation => &["gan", "ablation", "clone"],
            DrlCompare => &["clone", "a2c"],
            Finetune => &["finetune"],
        };
        let required: &[&str] = match self.kind {
            TraceGen | PolicyClone => &[],
            MsgtwinSweep => &["models"],
            GanAblation => &["gan"],
            DrlCompare => &["a2c"],
            Finetune => &["finetune"],
        };
        for (name, is_set) in present {
            if is_set && !allowed.contains(&name) {
                return Err(ConfigError::new(format!("section [{name}] is not used by kind \"{}\"", self.kind))
                    .at(locate(src, name, "").or_else(|| locate(src, &format!("{name}.model"), ""))));
            }
            if !is_set && required.contains(&name) {
                return Err(ConfigError::new(format!("kind \"{}\" needs a [{name}] section", self.kind)).at(locate(src, "", "kind")));
            }
        }

        let vocab = nettwin_core::msgcodec::Vocabulary::default().len();
        let check_model = |m: &ModelConfig, train: &TrainConfig, table: &str| -> Result<(), ConfigError> {
            if m.vocab_size() != vocab {
                return Err(ConfigError::new(format!("vocab_size must be {vocab}, the codec's vocabulary size")).at(locate(src, table, "vocab_size")));
            }
            m.validate().map_err(|e| ConfigError::new(e.to_string()).at(locate(src, table, "")))?;
            train.validate(m).map_err(|e| ConfigError::new(e.to_string()).at(locate(src, table, "")))?;
            if train.checkpoint_dir.is_some() {
                return Err(ConfigError::new("checkpoint_dir is chosen by the harness inside output_dir").at(locate(src, table, "checkpoint_dir")));
            }
            Ok(())
        };
        for m in &self.models {
            check_model(&m.model, &m.train, "models.train")?;
        }
        if let Some(sweep) = &self.sweep {
            if sweep.ue_levels.is_empty() || sweep.ue_levels.contains(&0) {
                return Err(ConfigError::new("ue_levels must be non-empty and positive").at(locate(src, "sweep", "ue_levels")));
            }
            if sweep.train_episodes == 0 || sweep.test_episodes == 0 {
                return Err(ConfigError::new("train_episodes and test_episodes must be positive").at(locate(src, "sweep", "")));
            }
        }
        if self.kind == MsgtwinSweep {
            let ctx = self.models[0].model.context_length();
            if self.models.iter().any(|m| m.model.context_length() != ctx) {
                return Err(ConfigError::new("swept models must share one context_length").at(locate(src, "models.model", "")));
            }
        }
        if let Some(a2c) = &self.a2c {
            a2c.validate().map_err(|e| ConfigError::new(e.to_string()).at(locate(src, "a2c", "")))?;
            for key in ["num_seeds", "seed"] {
                if let Some(pos) = locate(src, "a2c", key) {
                    return Err(ConfigError::new(format!("a2c.{key} is set by the top-level seeds list")).at(Some(pos)));
                }
            }
            if let Some(c) = &self.clone {
                if c.train.hidden != a2c.actor_hidden {
                    return Err(ConfigError::new("clone.train.hidden must equal a2c.actor_hidden so the twin can seed the actor")
                        .at(locate(src, "clone.train", "hidden")));
                }
            }
        }
        if let Some(ft) = &self.finetune {
            check_model(&ft.model, &ft.pretrain, "finetune.pretrain")?;
            check_model(&ft.model, &ft.adapt, "finetune.adapt")?;
            ft.shift.apply(&self.sim.resolve()).validate().map_err(|e| ConfigError::new(format!("[finetune.shift]: {e}")).at(locate(src, "finetune.shift", "")))?;
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        self.sim.resolve()
    }

    /// Hex SHA-256 of the manifest's canonical JSON form. The output
    /// directory is left out so a run reproduces the same files wherever
    /// they are written.
    pub fn digest(&self) -> String {
        let mut m = self.clone();
        m.output_dir = PathBuf::new();
        let json = serde_json::to_string(&m).expect("manifest serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn with_seed_override(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }
}
