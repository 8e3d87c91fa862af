use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boost::MixtureMode;
use crate::error::{Error, Result};

/// Complete run configuration, read from a TOML file with sections
/// `[run]`, `[data]`, `[flow]`, `[boost]` and `[train]`. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub run: RunSection,
    pub data: DataSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub boost: BoostSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Output subdirectory name; defaults to the first 12 hex digits of the config hash.
    pub id: Option<String>,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { id: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Toy,
    Energy,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Toy generator or energy name.
    #[serde(default)]
    pub name: Option<String>,
    /// CSV path for tabular data, relative to the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Toy sample sizes.
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_val: usize,
    #[serde(default = "default_n_eval")]
    pub n_test: usize,
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn yes() -> bool {
    true
}
fn default_n_train() -> usize {
    20_000
}
fn default_n_eval() -> usize {
    2_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    /// Flow steps `K`.
    pub steps: usize,
    pub hidden: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self { steps: 1, hidden: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Additive,
    Multiplicative,
}

impl From<ModeName> for MixtureMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Additive => MixtureMode::Additive,
            ModeName::Multiplicative => MixtureMode::Multiplicative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoStrategy {
    Grid,
    Sgd,
}

/// Loss for boosted density-estimation stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeObjective {
    /// Likelihood on data resampled with weights `∝ G^{−β}`.
    Resample,
    /// Entropy-regularized functional objective (additive mode only).
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedTermName {
    Exact,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostSection {
    pub mode: ModeName,
    /// Number of components `C`.
    pub components: usize,
    /// Entropy weight `λ`; defaults to 0.8 for density matching and 1.0 otherwise.
    pub lambda: Option<f64>,
    /// Defaults to `grid` for density estimation and `sgd` for density matching.
    pub rho: Option<RhoStrategy>,
    pub grid_size: usize,
    pub sgd_step: f64,
    pub sgd_tolerance: f64,
    pub sgd_max_iters: usize,
    pub sgd_decay: f64,
    pub sgd_batch: usize,
    /// Resampling exponent `β`.
    pub beta: f64,
    /// Defaults to `additive` in additive mode; multiplicative mode supports only `resample`.
    pub de_objective: Option<DeObjective>,
    pub fixed_term: FixedTermName,
    pub fine_tune_passes: usize,
    pub fine_tune_epochs: usize,
    pub partition_samples: usize,
}

impl Default for BoostSection {
    fn default() -> Self {
        Self {
            mode: ModeName::Additive,
            components: 1,
            lambda: None,
            rho: None,
            grid_size: 26,
            sgd_step: 0.05,
            sgd_tolerance: 1e-4,
            sgd_max_iters: 500,
            sgd_decay: 0.05,
            sgd_batch: 256,
            beta: 1.0,
            de_objective: None,
            fixed_term: FixedTermName::Exact,
            fine_tune_passes: 0,
            fine_tune_epochs: 0,
            partition_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Optimizer steps per stage.
    pub max_steps: usize,
    /// Epochs without validation improvement before a stage stops.
    pub patience: usize,
    /// Steps per epoch; defaults to one pass over the training rows
    /// (density estimation) or 100 (density matching).
    pub steps_per_epoch: Option<usize>,
    /// Monte Carlo draws per density-matching step.
    pub n_mc: usize,
    /// Fixed base draws used for density-matching validation.
    pub val_mc: usize,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            schedule: Schedule::Cosine,
            batch_size: 512,
            max_steps: 25_000,
            patience: 50,
            steps_per_epoch: None,
            n_mc: 256,
            val_mc: 2048,
            clip_norm: 10.0,
        }
    }
}

/// Whether the run fits samples or an unnormalized target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    DensityEstimation,
    DensityMatching,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map_or_else(|| "config".to_string(), |s| format!("bytes {}..{}", s.start, s.end));
            Error::config(key, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        self.run.id.clone().unwrap_or_else(|| self.hash()[..12].to_string())
    }

    pub fn task(&self) -> Task {
        match self.data.kind {
            DataKind::Energy => Task::DensityMatching,
            DataKind::Toy | DataKind::Tabular => Task::DensityEstimation,
        }
    }

    pub fn mode(&self) -> MixtureMode {
        self.boost.mode.into()
    }

    pub fn lambda(&self) -> f64 {
        self.boost.lambda.unwrap_or(match self.task() {
            Task::DensityMatching => 0.8,
            Task::DensityEstimation => 1.0,
        })
    }

    pub fn rho_strategy(&self) -> RhoStrategy {
        self.boost.rho.unwrap_or(match self.task() {
            Task::DensityMatching => RhoStrategy::Sgd,
            Task::DensityEstimation => RhoStrategy::Grid,
        })
    }

    pub fn de_objective(&self) -> DeObjective {
        self.boost.de_objective.unwrap_or(match self.mode() {
            MixtureMode::Additive => DeObjective::Additive,
            MixtureMode::Multiplicative => DeObjective::Resample,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.boost;
        let t = &self.train;
        let checks: [(bool, &str, &str); 16] = [
            (b.components >= 1, "boost.components", "must be >= 1"),
            (self.flow.steps >= 1, "flow.steps", "must be >= 1"),
            (self.lambda() > 0.0 && self.lambda().is_finite(), "boost.lambda", "must be > 0"),
            (t.batch_size >= 1, "train.batch_size", "must be >= 1"),
            (t.learning_rate > 0.0 && t.learning_rate.is_finite(), "train.learning_rate", "must be > 0"),
            (t.n_mc >= 1, "train.n_mc", "must be >= 1"),
            (t.val_mc >= 2, "train.val_mc", "must be >= 2"),
            (t.clip_norm > 0.0, "train.clip_norm", "must be > 0"),
            (t.steps_per_epoch != Some(0), "train.steps_per_epoch", "must be >= 1"),
            (b.grid_size >= 2, "boost.grid_size", "must be >= 2"),
            (b.sgd_step > 0.0 && b.sgd_tolerance > 0.0, "boost.sgd_step", "step and tolerance must be > 0"),
            (b.sgd_decay >= 0.0 && b.sgd_batch >= 1, "boost.sgd_decay", "decay must be >= 0 and batch >= 1"),
            (b.beta >= 0.0 && b.beta.is_finite(), "boost.beta", "must be finite and >= 0"),
            (b.partition_samples >= 1000, "boost.partition_samples", "must be >= 1000"),
            (self.data.n_train >= 1 && self.data.n_val >= 1 && self.data.n_test >= 1, "data.n_train", "toy split sizes must be >= 1"),
            (self.run.id.as_deref().is_none_or(valid_id), "run.id", "must be non-empty and use only letters, digits, '-', '_' or '.'"),
        ];
        for (ok, key, msg) in checks {
            if !ok {
                return Err(Error::config(key, msg));
            }
        }
        match self.data.kind {
            DataKind::Toy | DataKind::Energy if self.data.name.is_none() => {
                return Err(Error::config("data.name", "required for toy and energy data"));
            }
            DataKind::Tabular if self.data.path.is_none() => {
                return Err(Error::config("data.path", "required for tabular data"));
            }
            _ => {}
        }
        if self.task() == Task::DensityMatching && self.mode() == MixtureMode::Multiplicative {
            return Err(Error::config("boost.mode", "density matching supports only the additive mode"));
        }
        if self.task() == Task::DensityEstimation && self.rho_strategy() == RhoStrategy::Sgd {
            return Err(Error::config("boost.rho", "sgd needs an unnormalized target; use grid for density estimation"));
        }
        if self.mode() == MixtureMode::Multiplicative {
            if b.de_objective == Some(DeObjective::Additive) {
                return Err(Error::config("boost.de_objective", "the additive objective requires the additive mode"));
            }
            if b.fine_tune_passes > 0 {
                return Err(Error::config("boost.fine_tune_passes", "fine-tuning requires the additive mode"));
            }
        }
        Ok(())
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && id != "." && id != ".."
}
