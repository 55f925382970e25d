//! Experiment configuration: a versioned TOML schema with path-addressed
//! validation errors and generic `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ccq_core::ensemble::UpdateRatio;
use ccq_core::ordering::AlphaMode;
use ccq_core::qlearning::{AlphaSchedule, EpsilonSchedule, LearningSchedule};
use ccq_core::wireless::{MimoParams, MisoParams};
use ccq_core::TabularMdp;

use crate::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

/// Root configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub family: FamilySection,
    #[serde(default)]
    pub algorithm: AlgorithmSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub tracking: TrackingSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            model: ModelSection::default(),
            family: FamilySection::default(),
            algorithm: AlgorithmSection::default(),
            schedule: ScheduleSection::default(),
            tracking: TrackingSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Miso,
    Mimo,
    File,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_model_kind")]
    pub kind: ModelKind,
    /// Path to a serialized model (kind = "file").
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub miso: Option<MisoParams>,
    #[serde(default)]
    pub mimo: Option<MimoParams>,
}

fn default_model_kind() -> ModelKind {
    ModelKind::Miso
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: default_model_kind(),
            path: None,
            miso: None,
            mimo: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySection {
    #[serde(default = "default_k_total")]
    pub k_total: usize,
}

fn default_k_total() -> usize {
    10
}

impl Default for FamilySection {
    fn default() -> Self {
        FamilySection {
            k_total: default_k_total(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    Ccq,
    NeqlFixedMembers,
    SingleQ,
    DoubleQ,
}

impl AlgorithmKind {
    pub fn label(&self) -> &'static str {
        match self {
            AlgorithmKind::Ccq => "ccq",
            AlgorithmKind::NeqlFixedMembers => "neql-fixed-members",
            AlgorithmKind::SingleQ => "single-q",
            AlgorithmKind::DoubleQ => "double-q",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    #[serde(default = "default_algorithm_kind")]
    pub kind: AlgorithmKind,
    /// Ensemble size (ccq).
    #[serde(default = "default_k")]
    pub k: usize,
    /// Explicit member orders (neql-fixed-members); defaults to `1..=k`.
    #[serde(default)]
    pub members: Option<Vec<usize>>,
    /// Fixed update ratio; ignored when `u_schedule` is set.
    #[serde(default = "default_u")]
    pub u: f64,
    #[serde(default)]
    pub u_schedule: Option<UpdateRatio>,
    #[serde(default = "default_alpha_mode")]
    pub alpha: AlphaMode,
    #[serde(default = "default_fusion_period")]
    pub fusion_period: u64,
    /// Evaluate exact bounds (runs value iteration on the base model).
    #[serde(default = "default_true")]
    pub compute_bounds: bool,
    /// Write the full ensemble checkpoint per run.
    #[serde(default)]
    pub write_checkpoint: bool,
}

fn default_algorithm_kind() -> AlgorithmKind {
    AlgorithmKind::Ccq
}

fn default_k() -> usize {
    5
}

fn default_u() -> f64 {
    0.5
}

fn default_fusion_period() -> u64 {
    64
}

fn default_true() -> bool {
    true
}

fn default_alpha_mode() -> AlphaMode {
    AlphaMode::PerRun
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        AlgorithmSection {
            kind: default_algorithm_kind(),
            k: default_k(),
            members: None,
            u: default_u(),
            u_schedule: None,
            alpha: default_alpha_mode(),
            fusion_period: default_fusion_period(),
            compute_bounds: true,
            write_checkpoint: false,
        }
    }
}

impl AlgorithmSection {
    pub fn update_ratio(&self) -> UpdateRatio {
        self.u_schedule
            .unwrap_or(UpdateRatio::Fixed { value: self.u })
    }

    pub fn resolved_members(&self) -> Vec<usize> {
        self.members
            .clone()
            .unwrap_or_else(|| (1..=self.k).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_schedule_alpha")]
    pub alpha: AlphaSchedule,
    #[serde(default = "default_schedule_epsilon")]
    pub epsilon: EpsilonSchedule,
    #[serde(default = "default_trajectory_len")]
    pub trajectory_len: usize,
    #[serde(default = "default_min_visits")]
    pub min_visits: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
}

fn default_schedule_alpha() -> AlphaSchedule {
    LearningSchedule::default().alpha
}

fn default_schedule_epsilon() -> EpsilonSchedule {
    LearningSchedule::default().epsilon
}

fn default_trajectory_len() -> usize {
    LearningSchedule::default().trajectory_len
}

fn default_min_visits() -> u64 {
    LearningSchedule::default().min_visits
}

fn default_max_steps() -> u64 {
    50_000
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            alpha: default_schedule_alpha(),
            epsilon: default_schedule_epsilon(),
            trajectory_len: default_trajectory_len(),
            min_visits: default_min_visits(),
            max_steps: default_max_steps(),
        }
    }
}

impl ScheduleSection {
    pub fn to_schedule(&self) -> LearningSchedule {
        LearningSchedule {
            alpha: self.alpha,
            epsilon: self.epsilon,
            trajectory_len: self.trajectory_len,
            min_visits: self.min_visits,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingSection {
    /// Tracked (state, action) pairs.
    #[serde(default = "default_pairs")]
    pub pairs: Vec<(usize, usize)>,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
}

fn default_pairs() -> Vec<(usize, usize)> {
    vec![(6, 1)]
}

fn default_record_every() -> u64 {
    16
}

fn default_burn_in() -> f64 {
    0.5
}

impl Default for TrackingSection {
    fn default() -> Self {
        TrackingSection {
            pairs: default_pairs(),
            record_every: default_record_every(),
            burn_in: default_burn_in(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Target state counts (the level parameters are scaled to approach each).
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub k_values: Vec<usize>,
    #[serde(default)]
    pub u_values: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Load a config file, apply `--set path=value` overrides, then apply the
    /// `CCQ_SEED` environment override if present.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut value: toml::Value = if text.trim().is_empty() {
            toml::Value::Table(Default::default())
        } else {
            text.parse()
                .map_err(|e| HarnessError::Config(format!("config parse: {e}")))?
        };
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let mut cfg = ExperimentConfig::from_toml(&toml::to_string(&value).unwrap_or_default())?;
        if let Ok(seed_text) = std::env::var("CCQ_SEED") {
            let seed: u64 = seed_text
                .parse()
                .map_err(|_| HarnessError::Config(format!("CCQ_SEED: bad seed `{seed_text}`")))?;
            cfg.seeds = vec![seed];
        }
        Ok(cfg)
    }

    /// Canonical serialized form (used for the manifest digest).
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Miso parameters with the configured overrides applied.
    pub fn miso_params(&self) -> MisoParams {
        self.model.miso.clone().unwrap_or_default()
    }

    pub fn mimo_params(&self) -> MimoParams {
        self.model.mimo.clone().unwrap_or_default()
    }

    /// State count a sweep point would have, without building the tensor.
    pub fn state_count_for(&self, size: Option<usize>) -> Result<usize, HarnessError> {
        match self.model.kind {
            ModelKind::Miso => {
                let p = scale_miso(&self.miso_params(), size)?;
                Ok(p.n_states().map_err(HarnessError::Core)?)
            }
            ModelKind::Mimo => {
                let p = scale_mimo(&self.mimo_params(), size)?;
                Ok(p.n_states().map_err(HarnessError::Core)?)
            }
            ModelKind::File => {
                let mdp = self.load_model_file()?;
                Ok(mdp.n_states())
            }
        }
    }

    /// Build the model for a sweep point.
    pub fn build_model(&self, size: Option<usize>) -> Result<TabularMdp, HarnessError> {
        match self.model.kind {
            ModelKind::Miso => {
                let p = scale_miso(&self.miso_params(), size)?;
                ccq_core::wireless::build_miso(&p).map_err(HarnessError::Core)
            }
            ModelKind::Mimo => {
                let p = scale_mimo(&self.mimo_params(), size)?;
                ccq_core::wireless::build_mimo(&p).map_err(HarnessError::Core)
            }
            ModelKind::File => self.load_model_file(),
        }
    }

    fn load_model_file(&self) -> Result<TabularMdp, HarnessError> {
        let path = self.model.path.as_ref().ok_or_else(|| {
            HarnessError::Config("model.path: required when model.kind = \"file\"".into())
        })?;
        TabularMdp::load(path).map_err(HarnessError::Core)
    }

    /// Validate everything checkable before any run starts. Every error names
    /// the offending config path.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds: must be non-empty".into()));
        }
        if self.family.k_total == 0 {
            return Err(HarnessError::Config("family.k_total: must be >= 1".into()));
        }
        if self.algorithm.k == 0 || self.algorithm.k > self.family.k_total {
            return Err(HarnessError::Config(format!(
                "algorithm.k: {} must satisfy 1 <= k <= family.k_total = {}",
                self.algorithm.k, self.family.k_total
            )));
        }
        if !(0.0..=1.0).contains(&self.algorithm.u) {
            return Err(HarnessError::Config(format!(
                "algorithm.u: {} not in [0, 1]",
                self.algorithm.u
            )));
        }
        if let AlphaMode::Fixed { value } = self.algorithm.alpha {
            if !(value > 0.0 && value < 1.0) {
                return Err(HarnessError::Config(format!(
                    "algorithm.alpha: fixed value {value} not strictly inside (0, 1)"
                )));
            }
        }
        if let Some(members) = &self.algorithm.members {
            if members.is_empty() {
                return Err(HarnessError::Config(
                    "algorithm.members: must be non-empty when set".into(),
                ));
            }
            for &m in members {
                if m == 0 {
                    return Err(HarnessError::Config(
                        "algorithm.members: orders start at 1".into(),
                    ));
                }
            }
        }
        self.schedule
            .to_schedule()
            .validate()
            .map_err(|e| HarnessError::Config(format!("schedule: {e}")))?;
        if !(0.0..1.0).contains(&self.tracking.burn_in) {
            return Err(HarnessError::Config(format!(
                "tracking.burn_in: {} not in [0, 1)",
                self.tracking.burn_in
            )));
        }
        if self.tracking.pairs.is_empty() {
            return Err(HarnessError::Config(
                "tracking.pairs: must track at least one (s, a) pair".into(),
            ));
        }

        // Tracked pairs must be in range for every sweep point.
        let mut counts = Vec::new();
        for size in self.sweep_sizes() {
            counts.push(self.state_count_for(size)?);
        }
        for (i, &(s, a)) in self.tracking.pairs.iter().enumerate() {
            if a >= 2 {
                return Err(HarnessError::Config(format!(
                    "tracking.pairs[{i}]: action {a} out of range (models have 2 actions)"
                )));
            }
            for &n in &counts {
                if s >= n {
                    return Err(HarnessError::Config(format!(
                        "tracking.pairs[{i}]: state {s} out of range for sweep point (|S| = {n})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sweep sizes, or a single unscaled point when none are configured.
    pub fn sweep_sizes(&self) -> Vec<Option<usize>> {
        if self.sweep.sizes.is_empty() {
            vec![None]
        } else {
            self.sweep.sizes.iter().map(|&s| Some(s)).collect()
        }
    }
}

/// Apply one `--set path.to.key=value` override onto the parsed TOML tree.
pub fn apply_override(root: &mut toml::Value, item: &str) -> Result<(), HarnessError> {
    let (path, raw_value) = item
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("--set `{item}`: expected key=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(HarnessError::Config(format!(
            "--set `{item}`: empty key path"
        )));
    }
    // Parse the value as a TOML literal; fall back to a string.
    let parsed: toml::Value = match format!("x = {raw_value}").parse::<toml::Value>() {
        Ok(toml::Value::Table(t)) => t.get("x").cloned().unwrap(),
        _ => toml::Value::String(raw_value.to_string()),
    };
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = cursor.as_table_mut().ok_or_else(|| {
            HarnessError::Config(format!("--set `{path}`: `{seg}` is not a table"))
        })?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("path has at least one segment");
}

/// Scale the buffer dimension of the MISO parameters toward a target state
/// count (the other level counts stay fixed).
pub fn scale_miso(base: &MisoParams, target: Option<usize>) -> Result<MisoParams, HarnessError> {
    let mut p = base.clone();
    if let Some(target) = target {
        let fixed = p.battery_levels * p.relay_levels.pow(p.relay_count as u32);
        if fixed == 0 {
            return Err(HarnessError::Config(
                "model.miso: level counts must be positive".into(),
            ));
        }
        p.buffer_levels = ((target + fixed / 2) / fixed).max(2);
    }
    Ok(p)
}

/// Scale the queue dimension of the MIMO parameters toward a target state count.
pub fn scale_mimo(base: &MimoParams, target: Option<usize>) -> Result<MimoParams, HarnessError> {
    let mut p = base.clone();
    if let Some(target) = target {
        let fixed = p.channel_states.pow(p.antenna_count as u32);
        if fixed == 0 {
            return Err(HarnessError::Config(
                "model.mimo: channel counts must be positive".into(),
            ));
        }
        p.queue_levels = ((target + fixed / 2) / fixed).max(2);
    }
    Ok(p)
}
