//! Experiment configuration, read from JSON. Every field has a default, so
//! `{}` is a complete two-moons configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniunc_core::network::{EuMethod, ModelSpec, Task, DEFAULT_HIDDEN};
use uniunc_core::training::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TwoMoons,
    ToyRegression,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::TwoMoons => "two-moons",
            TaskKind::ToyRegression => "toy-regression",
        }
    }

    pub fn task(self) -> Task {
        match self {
            TaskKind::TwoMoons => Task::Classification { classes: 2 },
            TaskKind::ToyRegression => Task::Regression,
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            TaskKind::TwoMoons => 2,
            TaskKind::ToyRegression => 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "two-moons" => Ok(TaskKind::TwoMoons),
            "toy-regression" => Ok(TaskKind::ToyRegression),
            _ => Err(format!("unknown task `{s}` (expected two-moons or toy-regression)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EuName {
    None,
    McDropout,
    McDropconnect,
    Ensemble,
    Flipout,
}

impl EuName {
    pub const ALL: [EuName; 5] = [
        EuName::None,
        EuName::McDropout,
        EuName::McDropconnect,
        EuName::Ensemble,
        EuName::Flipout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EuName::None => "none",
            EuName::McDropout => "mc-dropout",
            EuName::McDropconnect => "mc-dropconnect",
            EuName::Ensemble => "ensemble",
            EuName::Flipout => "flipout",
        }
    }

    /// Stable index used to derive per-method random streams.
    pub fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IuName {
    Taylor,
    Mc,
}

impl IuName {
    pub fn name(self) -> &'static str {
        match self {
            IuName::Taylor => "taylor",
            IuName::Mc => "mc",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

/// Axis-aligned evaluation grid: one `[lo, hi]` pair and one resolution per
/// input feature. The first axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bounds: Vec<[f64; 2]>,
    pub resolution: Vec<usize>,
}

impl GridSpec {
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::TwoMoons => GridSpec {
                bounds: vec![[-2.0, 3.0], [-1.5, 2.0]],
                resolution: vec![100, 100],
            },
            TaskKind::ToyRegression => GridSpec {
                bounds: vec![[0.0, 12.0]],
                resolution: vec![241],
            },
        }
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of point `idx`, first axis fastest.
    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        self.bounds
            .iter()
            .zip(&self.resolution)
            .map(|(b, &r)| {
                let i = idx % r;
                idx /= r;
                b[0] + (b[1] - b[0]) * i as f64 / (r - 1) as f64
            })
            .collect()
    }

    fn problems(&self, dim: usize, out: &mut Vec<String>) {
        if self.bounds.len() != dim || self.resolution.len() != dim {
            out.push(format!(
                "grid: expected {dim} axis/axes, got {} bounds and {} resolutions",
                self.bounds.len(),
                self.resolution.len()
            ));
        }
        for (i, b) in self.bounds.iter().enumerate() {
            if !(b[0].is_finite() && b[1].is_finite() && b[0] < b[1]) {
                out.push(format!("grid.bounds[{i}]: need finite lo < hi, got {b:?}"));
            }
        }
        for (i, r) in self.resolution.iter().enumerate() {
            if *r < 2 {
                out.push(format!("grid.resolution[{i}]: must be >= 2, got {r}"));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub eu_methods: Vec<EuName>,
    pub iu_methods: Vec<IuName>,
    pub sigma_levels: Vec<f64>,
    /// Realizations per evaluation (ensembles always use every member).
    pub m_passes: usize,
    /// Input samples per evaluation on the Monte Carlo path.
    pub n_iu_samples: usize,
    /// Draws per sampling softmax.
    pub softmax_samples: usize,
    pub dropout_p: f64,
    pub dropconnect_p: f64,
    pub ensemble_members: usize,
    pub flipout_prior_variance: f64,
    pub hidden: Vec<usize>,
    /// Defaults depend on the task, see [`GridSpec::default_for`].
    pub grid: Option<GridSpec>,
    /// Defaults depend on the task, see [`ExperimentConfig::train_config`].
    /// `train.seed` is replaced by a stream derived from `seed`.
    pub train: Option<TrainConfig>,
    pub n_train: usize,
    /// Input noise std of the two-moons training and test sets.
    pub train_noise: f64,
    pub n_test: usize,
    /// Out-of-distribution points for toy regression.
    pub n_ood: usize,
    /// Perturb the held-out test inputs with the cell's σ before scoring.
    pub corrupt_test: bool,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::TwoMoons,
            eu_methods: EuName::ALL.to_vec(),
            iu_methods: vec![IuName::Taylor, IuName::Mc],
            sigma_levels: vec![0.25, 0.5, 1.0],
            m_passes: 20,
            n_iu_samples: 50,
            softmax_samples: uniunc_core::uncertainty::DEFAULT_SOFTMAX_SAMPLES,
            dropout_p: 0.2,
            dropconnect_p: 0.05,
            ensemble_members: 5,
            flipout_prior_variance: 1.0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            grid: None,
            train: None,
            n_train: 1000,
            train_noise: 0.1,
            n_test: 500,
            n_ood: 200,
            corrupt_test: true,
            output_dir: PathBuf::from("results"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid.clone().unwrap_or_else(|| GridSpec::default_for(self.task))
    }

    /// The configured training settings, or the task default: plain Adam for
    /// two moons; more epochs and gradient clipping for toy regression, whose
    /// log-variance head otherwise diverges under dropout masks.
    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| match self.task {
            TaskKind::TwoMoons => TrainConfig::default(),
            TaskKind::ToyRegression => TrainConfig {
                epochs: 500,
                max_grad_norm: Some(1.0),
                ..TrainConfig::default()
            },
        })
    }

    pub fn eu_method(&self, name: EuName) -> EuMethod {
        match name {
            EuName::None => EuMethod::None,
            EuName::McDropout => EuMethod::McDropout { p: self.dropout_p },
            EuName::McDropconnect => EuMethod::McDropconnect { p: self.dropconnect_p },
            EuName::Ensemble => EuMethod::Ensemble {
                members: self.ensemble_members,
            },
            EuName::Flipout => EuMethod::Flipout {
                prior_variance: self.flipout_prior_variance,
            },
        }
    }

    pub fn model_spec(&self, name: EuName) -> Result<ModelSpec> {
        Ok(ModelSpec::mlp(
            self.task.input_dim(),
            &self.hidden,
            self.task.task(),
            self.eu_method(name),
        )?)
    }

    /// σ levels sorted ascending with duplicates removed.
    pub fn sorted_sigmas(&self) -> Vec<f64> {
        let mut s = self.sigma_levels.clone();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.eu_methods.is_empty() {
            p.push("eu_methods: must not be empty".to_string());
        }
        if has_duplicates(&self.eu_methods) {
            p.push("eu_methods: duplicate entries".to_string());
        }
        if self.iu_methods.is_empty() {
            p.push("iu_methods: must not be empty".to_string());
        }
        if has_duplicates(&self.iu_methods) {
            p.push("iu_methods: duplicate entries".to_string());
        }
        if self.sigma_levels.is_empty() {
            p.push("sigma_levels: must not be empty".to_string());
        }
        for (i, s) in self.sigma_levels.iter().enumerate() {
            if !(s.is_finite() && *s >= 0.0) {
                p.push(format!("sigma_levels[{i}]: must be finite and >= 0, got {s}"));
            }
        }
        if self.m_passes < 2 {
            p.push(format!("m_passes: must be >= 2, got {}", self.m_passes));
        }
        if self.n_iu_samples < 2 {
            p.push(format!("n_iu_samples: must be >= 2, got {}", self.n_iu_samples));
        }
        if self.softmax_samples < 1 {
            p.push("softmax_samples: must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            p.push(format!("dropout_p: must be in [0, 1), got {}", self.dropout_p));
        }
        if !(0.0..1.0).contains(&self.dropconnect_p) {
            p.push(format!("dropconnect_p: must be in [0, 1), got {}", self.dropconnect_p));
        }
        if self.ensemble_members < 2 {
            p.push(format!("ensemble_members: must be >= 2, got {}", self.ensemble_members));
        }
        if !(self.flipout_prior_variance > 0.0 && self.flipout_prior_variance.is_finite()) {
            p.push(format!(
                "flipout_prior_variance: must be finite and > 0, got {}",
                self.flipout_prior_variance
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            p.push("hidden: need at least one layer, all widths > 0".to_string());
        }
        self.grid().problems(self.task.input_dim(), &mut p);
        if let Err(e) = self.train_config().validate() {
            p.push(format!("train: {e}"));
        }
        if self.n_train < 2 {
            p.push(format!("n_train: must be >= 2, got {}", self.n_train));
        }
        if !(self.train_noise.is_finite() && self.train_noise >= 0.0) {
            p.push(format!("train_noise: must be finite and >= 0, got {}", self.train_noise));
        }
        if self.n_test < 1 {
            p.push("n_test: must be >= 1".to_string());
        }
        if self.task == TaskKind::ToyRegression && self.n_ood < 1 {
            p.push("n_ood: must be >= 1".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p))
        }
    }
}

fn has_duplicates<T: Ord + Clone>(items: &[T]) -> bool {
    let mut v = items.to_vec();
    v.sort();
    v.windows(2).any(|w| w[0] == w[1])
}
