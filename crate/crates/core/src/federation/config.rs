use serde::{Deserialize, Serialize};

use crate::client::{TaskPolicy, TrainParams};
use crate::data::{DataConfig, StreamMode, TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::eval::InferenceRule;
use crate::matching::NegativeSynthesisSpec;
use crate::nn::ArchSpec;

/// The method under test or one of the reference baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Knowledge matching, migration and ensemble inference.
    #[default]
    Pfeddil,
    /// One global model trained through every task.
    Fedavg,
    /// Trained on the first task, then frozen.
    SourceOnly,
    /// A separate model per task, selected by task id at evaluation.
    Disjoint,
    /// One shared trunk with a classification head per task.
    Sharing,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Pfeddil, Mode::Fedavg, Mode::SourceOnly, Mode::Disjoint, Mode::Sharing];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pfeddil => "pfeddil",
            Mode::Fedavg => "fedavg",
            Mode::SourceOnly => "source_only",
            Mode::Disjoint => "disjoint",
            Mode::Sharing => "sharing",
        }
    }

    pub fn inference_rule(self) -> InferenceRule {
        match self {
            Mode::Pfeddil => InferenceRule::Ensemble,
            Mode::Fedavg | Mode::SourceOnly => InferenceRule::Single,
            Mode::Disjoint | Mode::Sharing => InferenceRule::OracleTask,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

/// Everything needed to reproduce one experiment.
///
/// Missing keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub mode: Mode,
    pub seed: u64,
    /// `K`.
    pub num_clients: usize,
    /// `C`, the fraction of clients sampled per round.
    pub active_fraction: f64,
    /// `T`.
    pub rounds_per_task: usize,
    /// `E`.
    pub local_epochs: usize,
    pub lambda: f64,
    /// Dirichlet concentration of the label skew across clients.
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_pool_size: usize,
    /// Also anchor the bound model to its own task-start copy.
    pub km_include_self: bool,
    pub stream_mode: StreamMode,
    pub negatives: NegativeSynthesisSpec,
    pub hidden_dims: Vec<usize>,
    pub data: DataConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            mode: Mode::Pfeddil,
            seed: 0,
            num_clients: 20,
            active_fraction: 0.4,
            rounds_per_task: 180,
            local_epochs: 20,
            lambda: 0.5,
            alpha: 1.0,
            batch_size: 32,
            lr: 0.001,
            weight_decay: 1e-3,
            max_pool_size: 10,
            km_include_self: false,
            stream_mode: StreamMode::Synchronized,
            negatives: NegativeSynthesisSpec::default(),
            hidden_dims: vec![64, 32],
            data: DataConfig::default(),
        }
    }
}

fn positive_finite(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(field, "must be at least 1"))
    }
}

impl FederationConfig {
    /// The desk-scale benchmark: eight clients, 30 rounds per task, the
    /// default four rotated domains.
    ///
    /// Plain SGD at the default rate of 0.001 leaves the small network's
    /// auxiliary head close to 0.5 everywhere at this scale, so the benchmark
    /// steps at 0.05.
    pub fn benchmark() -> Self {
        FederationConfig {
            num_clients: 8,
            rounds_per_task: 30,
            lr: 0.05,
            ..FederationConfig::default()
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        at_least_one("num_clients", self.num_clients)?;
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(Error::config("active_fraction", "must lie in (0, 1]"));
        }
        at_least_one("rounds_per_task", self.rounds_per_task)?;
        at_least_one("local_epochs", self.local_epochs)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("must lie in [0, 1], got {}", self.lambda)));
        }
        positive_finite("alpha", self.alpha)?;
        at_least_one("batch_size", self.batch_size)?;
        positive_finite("lr", self.lr)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and non-negative"));
        }
        at_least_one("max_pool_size", self.max_pool_size)?;
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "every layer needs at least one unit"));
        }
        self.negatives.validate()?;

        let base = &self.data.base;
        if base.num_classes < 2 {
            return Err(Error::config("data.base.num_classes", "must be at least 2"));
        }
        if base.input_dim < 2 {
            return Err(Error::config("data.base.input_dim", "must be at least 2"));
        }
        let n_train = (base.samples_per_class as f64 * TRAIN_FRACTION).round() as usize;
        if n_train == 0 || n_train >= base.samples_per_class {
            return Err(Error::config(
                "data.base.samples_per_class",
                "too small to give every class both train and test samples",
            ));
        }
        if !(base.sigma >= 0.0 && base.sigma.is_finite()) {
            return Err(Error::config("data.base.sigma", "must be finite and non-negative"));
        }
        if !(base.class_separation >= 0.0 && base.class_separation.is_finite()) {
            return Err(Error::config("data.base.class_separation", "must be finite and non-negative"));
        }
        self.data.validate()
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        ArchSpec::new(
            self.data.base.input_dim,
            self.hidden_dims.clone(),
            self.data.base.num_classes,
        )
    }

    pub fn num_tasks(&self) -> usize {
        self.data.domains.len()
    }

    /// `max(1, ⌊C·K⌋)`.
    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.num_clients, self.active_fraction)
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.local_epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            negatives: self.negatives,
        }
    }

    pub fn policy(&self) -> TaskPolicy {
        match self.mode {
            Mode::Pfeddil => TaskPolicy::Matching {
                lambda: self.lambda,
                max_pool_size: self.max_pool_size,
                include_self: self.km_include_self,
            },
            Mode::Fedavg | Mode::SourceOnly => TaskPolicy::SingleModel,
            Mode::Disjoint => TaskPolicy::AlwaysNew,
            Mode::Sharing => TaskPolicy::SharedTrunk,
        }
    }
}

/// `max(1, ⌊C·K⌋)`, never more than `K`.
pub fn clients_per_round(num_clients: usize, active_fraction: f64) -> usize {
    // The epsilon keeps products like 0.1·30 from flooring to 2.
    let m = (active_fraction * num_clients as f64 + 1e-9).floor() as usize;
    m.clamp(1, num_clients.max(1))
}
