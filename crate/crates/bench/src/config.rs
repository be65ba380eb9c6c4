//! Declarative run configuration, read from TOML.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use covbench_core::estimators::{EstimatorConfig, EstimatorKind};
use covbench_core::inference::DEFAULT_NORMALIZATION_DRAWS;
use covbench_core::metrics::CoverageConfig;
use covbench_core::optim::{AdamWConfig, TrainConfig};
use covbench_core::sampling::McmcConfig;
use covbench_core::tasks::{GammaConvention, OracleSettings, TaskName};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

/// Training-set sizes a cell may use.
pub const N_TRAIN_LEVELS: [usize; 3] = [1_000, 10_000, 100_000];

/// Epoch cap applied when the configuration does not set one.
pub const EPOCH_SAFETY_CAP: usize = 5000;

/// Environment variable that overrides the worker count.
pub const WORKERS_ENV: &str = "COVBENCH_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "NPE")]
    Npe,
    #[serde(rename = "NLE")]
    Nle,
    #[serde(rename = "NRE")]
    Nre,
    #[serde(rename = "ABC")]
    Abc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Npe, Algorithm::Nle, Algorithm::Nre, Algorithm::Abc];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Npe => "NPE",
            Algorithm::Nle => "NLE",
            Algorithm::Nre => "NRE",
            Algorithm::Abc => "ABC",
        }
    }

    /// The network this algorithm trains, if any.
    pub fn estimator(self) -> Option<EstimatorKind> {
        match self {
            Algorithm::Npe => Some(EstimatorKind::Npe),
            Algorithm::Nle => Some(EstimatorKind::Nle),
            Algorithm::Nre => Some(EstimatorKind::Nre),
            Algorithm::Abc => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| BenchError::config(format!("unknown algorithm `{s}`")))
    }
}

/// How a curve's posterior was obtained. `Ensemble` marks the mixture of a
/// plain cell's seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Sam,
    Ensemble,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Sam => "sam",
            Variant::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Variant::Plain),
            "sam" => Ok(Variant::Sam),
            "ensemble" => Ok(Variant::Ensemble),
            _ => Err(BenchError::config(format!("unknown variant `{s}`"))),
        }
    }
}

/// An algorithm with its training variant, written `NPE` or `NPE:sam`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AlgorithmSpec {
    pub algorithm: Algorithm,
    pub sam: bool,
}

impl AlgorithmSpec {
    pub fn plain(algorithm: Algorithm) -> Self {
        Self { algorithm, sam: false }
    }

    pub fn sam(algorithm: Algorithm) -> Self {
        Self { algorithm, sam: true }
    }

    pub fn variant(self) -> Variant {
        if self.sam {
            Variant::Sam
        } else {
            Variant::Plain
        }
    }
}

impl fmt::Display for AlgorithmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.sam {
            write!(f, "{}:sam", self.algorithm)
        } else {
            write!(f, "{}", self.algorithm)
        }
    }
}

impl FromStr for AlgorithmSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let (alg, variant) = match s.split_once(':') {
            Some((a, v)) => (a, v.parse()?),
            None => (s, Variant::Plain),
        };
        let algorithm = alg.parse()?;
        match variant {
            Variant::Plain => Ok(Self::plain(algorithm)),
            Variant::Sam => Ok(Self::sam(algorithm)),
            Variant::Ensemble => Err(BenchError::config(
                "ensembles are built from every plain cell and cannot be requested directly",
            )),
        }
    }
}

impl TryFrom<String> for AlgorithmSpec {
    type Error = BenchError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AlgorithmSpec> for String {
    fn from(a: AlgorithmSpec) -> Self {
        a.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub max_epochs: Option<usize>,
    pub sam_radius: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            validation_fraction: t.validation_fraction,
            patience: t.patience,
            max_epochs: Some(EPOCH_SAFETY_CAP),
            sam_radius: t.sam_radius,
            optimizer: t.optimizer,
        }
    }
}

impl TrainingSettings {
    pub fn train_config(&self, sam: bool, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            validation_fraction: self.validation_fraction,
            patience: self.patience,
            max_epochs: self.max_epochs,
            sam_enabled: sam,
            sam_radius: self.sam_radius,
            seed,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbcSettings {
    pub n_total: usize,
    pub acceptance_rate: f64,
}

impl Default for AbcSettings {
    fn default() -> Self {
        Self {
            n_total: 100_000,
            acceptance_rate: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub master_seed: u64,
    pub tasks: Vec<TaskName>,
    pub algorithms: Vec<AlgorithmSpec>,
    pub n_train: Vec<usize>,
    pub sigmas: Vec<u8>,
    pub n_obs: usize,
    /// Seeds per cell; also the ensemble size.
    pub n_seeds: usize,
    pub sv_gamma: GammaConvention,
    pub metrics: CoverageConfig,
    pub training: TrainingSettings,
    pub estimator: EstimatorConfig,
    pub abc: AbcSettings,
    /// Sampler for NLE and NRE posteriors.
    pub mcmc: McmcConfig,
    pub oracle: OracleSettings,
    pub ensemble_normalization_draws: usize,
    /// Write every approximate-posterior sample set next to its curve.
    pub persist_samples: bool,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            tasks: vec![TaskName::TgSs],
            algorithms: vec![AlgorithmSpec::plain(Algorithm::Npe)],
            n_train: vec![10_000],
            sigmas: vec![0, 1, 2, 3, 4],
            n_obs: 20,
            n_seeds: 5,
            sv_gamma: GammaConvention::default(),
            metrics: CoverageConfig::default(),
            training: TrainingSettings::default(),
            estimator: EstimatorConfig::default(),
            abc: AbcSettings::default(),
            mcmc: McmcConfig {
                thin: 5,
                ..McmcConfig::default()
            },
            oracle: OracleSettings::default(),
            ensemble_normalization_draws: DEFAULT_NORMALIZATION_DRAWS,
            persist_samples: true,
            output_dir: None,
            workers: None,
        }
    }
}

fn check_subset<T: Ord + Clone + fmt::Debug>(name: &str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(BenchError::config(format!("`{name}` must not be empty")));
    }
    let unique: BTreeSet<T> = items.iter().cloned().collect();
    if unique.len() != items.len() {
        return Err(BenchError::config(format!("`{name}` lists an entry twice: {items:?}")));
    }
    Ok(())
}

impl BenchConfig {
    /// Parses and validates.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(BenchError::io(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        check_subset("tasks", &self.tasks)?;
        check_subset("algorithms", &self.algorithms)?;
        check_subset("n_train", &self.n_train)?;
        check_subset("sigmas", &self.sigmas)?;
        if let Some(a) = self.algorithms.iter().find(|a| a.sam && a.algorithm == Algorithm::Abc) {
            return Err(BenchError::config(format!("`{a}`: ABC trains nothing, so it has no SAM variant")));
        }
        if let Some(n) = self.n_train.iter().find(|n| !N_TRAIN_LEVELS.contains(n)) {
            return Err(BenchError::config(format!("n_train {n} is not one of {N_TRAIN_LEVELS:?}")));
        }
        if let Some(s) = self.sigmas.iter().find(|&&s| s > 4) {
            return Err(BenchError::config(format!("σ level {s} outside 0..=4")));
        }
        if self.n_obs == 0 || self.n_seeds == 0 {
            return Err(BenchError::config("n_obs and n_seeds must be at least 1"));
        }
        self.metrics
            .validate()
            .map_err(|e| BenchError::config(format!("metrics: {e}")))?;
        self.training
            .train_config(false, 0)
            .validate()
            .map_err(|e| BenchError::config(format!("training: {e}")))?;
        if !(self.training.sam_radius >= 0.0 && self.training.sam_radius.is_finite()) {
            return Err(BenchError::config("training.sam_radius must be a finite non-negative number"));
        }
        if self.abc.n_total < 100 || !(self.abc.acceptance_rate > 0.0 && self.abc.acceptance_rate <= 1.0) {
            return Err(BenchError::config("abc needs n_total ≥ 100 and acceptance_rate in (0, 1]"));
        }
        if self.mcmc.chains < 2 || self.mcmc.thin == 0 {
            return Err(BenchError::config("mcmc needs at least 2 chains and thin ≥ 1"));
        }
        if self.oracle.chains < 2 || self.oracle.min_per_chain == 0 {
            return Err(BenchError::config("oracle needs at least 2 chains and min_per_chain ≥ 1"));
        }
        if self.ensemble_normalization_draws == 0 {
            return Err(BenchError::config("ensemble_normalization_draws must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(BenchError::config("workers must be at least 1"));
        }
        Ok(())
    }

    /// Knobs that change results, as canonical JSON (sorted keys). Output
    /// location, worker count and sample persistence are left out.
    fn result_knobs(&self) -> serde_json::Map<String, serde_json::Value> {
        let serde_json::Value::Object(mut map) = serde_json::to_value(self).expect("configuration serializes")
        else {
            unreachable!("a struct serializes to an object")
        };
        for k in ["output_dir", "workers", "persist_samples"] {
            map.remove(k);
        }
        map
    }

    /// Hex SHA-256 of every knob that affects results.
    pub fn config_hash(&self) -> String {
        hex_digest(&serde_json::Value::Object(self.result_knobs()))
    }

    /// Hash of the knobs one cell depends on plus its coordinates, so
    /// adding cells to a configuration does not invalidate finished ones.
    pub fn cell_hash(&self, cell: &Cell) -> String {
        let mut knobs = self.result_knobs();
        for k in ["tasks", "algorithms", "n_train"] {
            knobs.remove(k);
        }
        knobs.insert(
            "cell".into(),
            serde_json::to_value(cell).expect("cell coordinates serialize"),
        );
        hex_digest(&serde_json::Value::Object(knobs))
    }

    /// Every (task, algorithm, n_train) combination in configuration order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &task in &self.tasks {
            for &n_train in &self.n_train {
                for &spec in &self.algorithms {
                    out.push(Cell { task, spec, n_train });
                }
            }
        }
        out
    }

    /// Configured count, then the environment override, then the number of
    /// available cores.
    pub fn resolve_workers(&self) -> Result<usize> {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            return match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(BenchError::config(format!("{WORKERS_ENV}=`{v}` is not a positive integer"))),
            };
        }
        Ok(self
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
    }
}

fn hex_digest(v: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(v).expect("JSON value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The unit of scheduling: one algorithm at one training size on one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub task: TaskName,
    pub spec: AlgorithmSpec,
    pub n_train: usize,
}

impl Cell {
    /// Directory-safe identifier, e.g. `TG_SS/n10000/NPE-plain`.
    pub fn rel_dir(&self) -> PathBuf {
        PathBuf::from(self.task.as_str())
            .join(format!("n{}", self.n_train))
            .join(format!("{}-{}", self.spec.algorithm, self.spec.variant()))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} n_train={}", self.task, self.spec, self.n_train)
    }
}
