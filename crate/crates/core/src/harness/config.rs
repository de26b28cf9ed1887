use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::AreaWeighting;
use crate::nnet::TrainConfig;
use crate::rng::Rng;
use crate::synth::GeneratorConfig;
use crate::xai::OptimalInputConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(GeneratorConfig),
    /// Directory holding `data.*` and `region.json`.
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(GeneratorConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ga,
    Iinn,
    #[serde(rename = "scatnet")]
    ScatNet,
    #[serde(rename = "scatnet_coarse")]
    ScatNetCoarse,
    Cnn,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Ga => "ga",
            ModelKind::Iinn => "iinn",
            ModelKind::ScatNet => "scatnet",
            ModelKind::ScatNetCoarse => "scatnet_coarse",
            ModelKind::Cnn => "cnn",
        }
    }
}

/// Sampling distribution of one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamSpace {
    LogUniform { low: f64, high: f64 },
    Uniform { low: f64, high: f64 },
    Choice { values: Vec<f64> },
}

impl ParamSpace {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            ParamSpace::LogUniform { low, high } => *low > 0.0 && low <= high,
            ParamSpace::Uniform { low, high } => low <= high,
            ParamSpace::Choice { values } => !values.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid search space for `{name}`")))
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            ParamSpace::LogUniform { low, high } => (low.ln() + rng.random::<f64>() * (high.ln() - low.ln())).exp(),
            ParamSpace::Uniform { low, high } => low + rng.random::<f64>() * (high - low),
            ParamSpace::Choice { values } => values[rng.random_range(0..values.len())],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Label used in tables; defaults to the kind.
    #[serde(default)]
    pub name: Option<String>,
    /// Number of random-search trials.
    #[serde(default = "one")]
    pub budget: usize,
    #[serde(default)]
    pub space: BTreeMap<String, ParamSpace>,
    /// Fixed hyperparameters; searched ones take precedence.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Penalty grid swept after the search (GA and IINN). Empty keeps the
    /// searched or fixed `epsilon`.
    #[serde(default)]
    pub epsilons: Vec<f64>,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            name: None,
            budget: 1,
            space: BTreeMap::new(),
            params: BTreeMap::new(),
            epsilons: Vec::new(),
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.as_str().to_string())
    }

    fn allowed(&self) -> &'static [&'static str] {
        match self.kind {
            ModelKind::Ga => &["epsilon"],
            ModelKind::Iinn => &[
                "learning_rate",
                "batch_size",
                "max_epochs",
                "patience",
                "epsilon",
                "hidden",
                "affine",
            ],
            ModelKind::ScatNet | ModelKind::ScatNetCoarse => &[
                "learning_rate",
                "batch_size",
                "max_epochs",
                "patience",
                "scales",
                "orientations",
            ],
            ModelKind::Cnn => &[
                "learning_rate",
                "batch_size",
                "max_epochs",
                "patience",
                "width",
                "dense",
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config(format!("model `{}`: budget must be >= 1", self.label())));
        }
        for name in self.space.keys().chain(self.params.keys()) {
            if !self.allowed().contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "model `{}`: unknown hyperparameter `{name}` (allowed: {})",
                    self.label(),
                    self.allowed().join(", ")
                )));
            }
        }
        for (name, space) in &self.space {
            space.validate(name)?;
        }
        if self.epsilons.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Config(format!(
                "model `{}`: epsilons must be >= 0",
                self.label()
            )));
        }
        Ok(())
    }
}

/// Which interpretability products to emit after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Number of test inputs explained per model.
    pub n_inputs: usize,
    pub eg_samples: usize,
    /// Gaussian display smoothing in pixels (0 disables).
    pub smoothing: f64,
    pub optimal_input: OptimalInputConfig,
    /// Replace `n0`/`r0` by the mean norm and roughness of the test inputs.
    pub calibrate_targets: bool,
    pub n_optimal_inputs: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            n_inputs: 8,
            eg_samples: 256,
            smoothing: 0.0,
            optimal_input: OptimalInputConfig::reference(),
            calibrate_targets: true,
            n_optimal_inputs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Trailing fraction of years held out for testing.
    pub test_fraction: f64,
    pub n_folds: usize,
    /// Heatwave window length; defaults to the data source's value.
    pub heatwave_days: Option<u32>,
    pub quantile: f64,
    pub area_weighting: AreaWeighting,
    /// Use only the first `n` non-test years for training and validation.
    pub reduced_years: Option<usize>,
    /// Give every fold its own disjoint block of years instead of sharing
    /// the training data between folds.
    pub disjoint_folds: bool,
    /// Keep every `k`-th window start.
    pub sample_stride: u32,
    pub models: Vec<ModelSpec>,
    pub train: TrainConfig,
    pub seed: u64,
    pub explain: Option<ExplainConfig>,
    pub heatmaps: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            test_fraction: 0.2,
            n_folds: 5,
            heatwave_days: None,
            quantile: 0.95,
            area_weighting: AreaWeighting::CosLat,
            reduced_years: None,
            disjoint_folds: false,
            sample_stride: 1,
            models: vec![ModelSpec::new(ModelKind::Ga)],
            train: TrainConfig::default(),
            seed: 0,
            explain: None,
            heatmaps: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be >= 2".into()));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config("quantile must lie in (0, 1)".into()));
        }
        if self.sample_stride == 0 {
            return Err(Error::Config("sample_stride must be >= 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("model list is empty".into()));
        }
        let mut labels: Vec<String> = self.models.iter().map(ModelSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("model names must be unique".into()));
        }
        for m in &self.models {
            m.validate()?;
        }
        if let DataSource::Synthetic(g) = &self.data {
            g.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}
