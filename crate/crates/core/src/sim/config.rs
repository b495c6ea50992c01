//! Scenario configuration, read from TOML.
//!
//! ```toml
//! users = 243
//! rounds = 60
//! eta = 1.0
//! seed = 7
//! protocol = "tree"          # or "baseline"
//!
//! [tree]
//! height = 3
//! degree = 3
//! kappa_intra = 2
//! kappa_inter = 1
//!
//! [detection]
//! rho = 1.2
//! window = 5
//! epsilon = 32.0
//!
//! [dropout]
//! rate = 0.15
//! timing = "before-upload"
//!
//! [workload]
//! mode = "task"
//!
//! [attack]
//! attackers = [3, 17]
//! start_round = 40
//! strategy = { kind = "one-shot" }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AttackError, AttackPlan, SyntheticConfig, ToyTaskConfig};
use crate::crypto::GroupKind;
use crate::detection::{spec_for_budget, DetectionError, HistoryMode};
use crate::numeric::{NumericError, SegmentSpec};
use crate::orgtree::{OrgError, TreeConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tree(#[from] OrgError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Segment(#[from] NumericError),
    #[error(transparent)]
    Budget(#[from] DetectionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[serde(alias = "safelearning")]
    Tree,
    Baseline,
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tree" | "safelearning" => Ok(Protocol::Tree),
            "baseline" => Ok(Protocol::Baseline),
            _ => Err(format!("unknown protocol {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropTiming {
    /// After sharing, before upload.
    BeforeUpload,
    /// Uniform over before-share, before-upload and before-unmask.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutConfig {
    pub rate: f64,
    pub timing: DropTiming,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            rate: 0.0,
            timing: DropTiming::BeforeUpload,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub word_bits: u32,
    pub frac_bits: u32,
    /// Width of the masked low segment; derived from `epsilon` when absent.
    pub low_bits: Option<u32>,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            word_bits: 32,
            frac_bits: 8,
            low_bits: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub enabled: bool,
    pub rho: f64,
    pub window: usize,
    /// Disclosure radius in model units.
    pub epsilon: f64,
    pub history: HistoryMode,
    /// Threshold used while the history window is filling; `None` disables
    /// detection during warm-up.
    pub warmup_threshold: Option<f64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rho: 1.2,
            window: 5,
            epsilon: 32.0,
            history: HistoryMode::PostReplacement,
            warmup_threshold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadMode {
    Synthetic,
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub mode: WorkloadMode,
    pub synthetic: SyntheticConfig,
    pub task: ToyTaskConfig,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            mode: WorkloadMode::Synthetic,
            synthetic: SyntheticConfig::default(),
            task: ToyTaskConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Include wall-clock timings; reports are then no longer reproducible.
    pub timings: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            timings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub users: usize,
    pub rounds: u32,
    pub eta: f64,
    pub seed: u64,
    pub protocol: Protocol,
    pub group: GroupKind,
    pub tree: TreeConfig,
    /// Share threshold of the baseline; strict majority of `users` if absent.
    pub baseline_threshold: Option<usize>,
    pub segment: SegmentConfig,
    pub detection: DetectionConfig,
    pub dropout: DropoutConfig,
    pub workload: WorkloadConfig,
    pub attack: Option<AttackPlan>,
    /// Replace excluded subgroups by the current model so the update keeps
    /// `N` contributions; otherwise they leave the denominator.
    pub substitute_excluded: bool,
    /// Stop the run on the first unrecoverable round instead of skipping it.
    pub abort_on_failure: bool,
    pub output: OutputConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            users: 243,
            rounds: 60,
            eta: 1.0,
            seed: 0,
            protocol: Protocol::Tree,
            group: GroupKind::Sim64,
            tree: TreeConfig::default(),
            baseline_threshold: None,
            segment: SegmentConfig::default(),
            detection: DetectionConfig::default(),
            dropout: DropoutConfig::default(),
            workload: WorkloadConfig::default(),
            attack: None,
            substitute_excluded: true,
            abort_on_failure: true,
            output: OutputConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn groups(&self) -> usize {
        match self.protocol {
            Protocol::Tree => self.tree.leaf_count(),
            Protocol::Baseline => 1,
        }
    }

    pub fn model_len(&self) -> usize {
        match self.workload.mode {
            WorkloadMode::Synthetic => self.workload.synthetic.dim,
            WorkloadMode::Task => self.workload.task.param_count(),
        }
    }

    /// Segment spec; the low width follows the disclosure budget of the
    /// smallest subgroup unless set explicitly.
    pub fn segment_spec(&self) -> Result<SegmentSpec, ConfigError> {
        let s = &self.segment;
        match (s.low_bits, self.protocol) {
            (Some(k), _) => Ok(SegmentSpec::new(s.word_bits, s.frac_bits, k)?),
            (None, Protocol::Baseline) => Ok(SegmentSpec::new(s.word_bits, s.frac_bits, s.word_bits / 2)?),
            (None, Protocol::Tree) => Ok(spec_for_budget(
                self.tree.min_subgroup_size(self.users),
                self.detection.epsilon,
                s.word_bits,
                s.frac_bits,
            )?),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.users < 2 {
            return bad(format!("need at least 2 users, got {}", self.users));
        }
        if self.rounds == 0 {
            return bad("rounds must be positive".into());
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad(format!("learning rate {} invalid", self.eta));
        }
        if !(0.0..1.0).contains(&self.dropout.rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout.rate));
        }
        if self.model_len() == 0 {
            return bad("model dimension must be positive".into());
        }
        let d = &self.detection;
        if !(d.rho > 0.0) || d.window == 0 || !(d.epsilon > 0.0) {
            return bad("detection needs rho > 0, window > 0, epsilon > 0".into());
        }
        match self.protocol {
            Protocol::Tree => self.tree.validate(self.users)?,
            Protocol::Baseline => {
                let t = self
                    .baseline_threshold
                    .unwrap_or_else(|| crate::baseline::default_threshold(self.users));
                if t < 2 || t >= self.users {
                    return bad(format!("baseline threshold {t} must lie in [2, {})", self.users));
                }
            }
        }
        self.segment_spec()?;
        if let Some(plan) = &self.attack {
            plan.validate(self.users, self.rounds)?;
        }
        Ok(())
    }
}
