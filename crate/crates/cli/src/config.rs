//! Run configuration: one JSON document covering data generation, the
//! network, training and benchmarking, plus dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use csmud_core::bench::{ExperimentConfig, Method, SweepAxis};
use csmud_core::neural::{ArchConfig, Precision};
use csmud_core::sysmodel::Calibration;
use csmud_core::{Architecture, SystemConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Test samples draw `1..=test_n_max` active users; 0 means a fixed
    /// `system.n` like the other splits.
    #[serde(default)]
    pub test_n_max: usize,
    #[serde(default)]
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    #[serde(flatten)]
    pub layers: ArchConfig,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(flatten)]
    pub optimizer: TrainConfig,
    /// Continue from the saved model of the same architecture if present.
    #[serde(default)]
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub noiseless: bool,
    #[serde(default = "default_true")]
    pub normalized_mse: bool,
    /// System used by the timing table; defaults to `system`.
    #[serde(default)]
    pub timing_system: Option<SystemConfig>,
    pub timing_samples: usize,
}

fn default_true() -> bool {
    true
}

fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub bench: BenchConfig,
    pub out: PathBuf,
}

impl RunConfig {
    /// Desk-scale preset.
    pub fn desk() -> Self {
        let system = SystemConfig::desk();
        RunConfig {
            system,
            data: DataConfig {
                train: 200_000,
                val: 10_000,
                test: 10_000,
                test_n_max: 0,
                calibration: Calibration::Empirical,
            },
            model: ModelConfig {
                arch: Architecture::Brnn,
                layers: ArchConfig::default(),
                precision: Precision::F32,
            },
            train: TrainSection {
                optimizer: TrainConfig { epochs: 150, seed: system.seed, ..TrainConfig::default() },
                resume: false,
            },
            bench: BenchConfig {
                methods: vec![
                    Method::Omp,
                    Method::Bomp,
                    Method::Iht,
                    Method::Biht,
                    Method::Dnn,
                    Method::Brnn,
                ],
                sweep_axis: SweepAxis::Active,
                sweep_values: vec![1, 2, 3, 4],
                trials: 2000,
                seed: 7,
                noiseless: false,
                normalized_mse: true,
                timing_system: None,
                timing_samples: 1000,
            },
            out: PathBuf::from("runs/desk"),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `key=value` overrides. A key is either a dotted path
    /// (`system.K`) or a leaf name that occurs exactly once (`K`). Values
    /// are parsed as JSON and fall back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = serde_json::to_value(self).expect("config serialises");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            let path = resolve_key(&tree, key.trim())?;
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
            *pointer_mut(&mut tree, &path) = value;
        }
        serde_json::from_value(tree).map_err(|e| CliError::Config(format!("after overrides: {e}")))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.system.seed = seed;
        self.train.optimizer.seed = seed;
        self.bench.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.system.validate()?;
        self.train.optimizer.validate()?;
        if self.data.test_n_max > self.system.users {
            return Err(CliError::Config("data.test_n_max exceeds K".into()));
        }
        if self.bench.timing_samples == 0 {
            return Err(CliError::Config("bench.timing_samples must be at least 1".into()));
        }
        self.experiment().validate()?;
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            system: self.system,
            methods: self.bench.methods.clone(),
            sweep_axis: self.bench.sweep_axis,
            sweep_values: self.bench.sweep_values.clone(),
            trials: self.bench.trials,
            output_dir: self.reports_dir(),
            seed: self.bench.seed,
            noiseless: self.bench.noiseless,
            normalized_mse: self.bench.normalized_mse,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn model_path(&self, arch: Architecture) -> PathBuf {
        self.models_dir().join(format!("{}.model", arch_slug(arch)))
    }

    pub fn trace_path(&self, arch: Architecture) -> PathBuf {
        self.models_dir().join(format!("{}_trace.csv", arch_slug(arch)))
    }
}

pub fn arch_slug(arch: Architecture) -> &'static str {
    match arch {
        Architecture::Brnn => "brnn",
        Architecture::Dnn => "dnn",
    }
}

fn leaf_paths(value: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = value {
        for (k, v) in map {
            prefix.push(k.clone());
            leaf_paths(v, prefix, out);
            prefix.pop();
        }
    } else {
        out.push(prefix.clone());
    }
}

fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>, CliError> {
    let mut all = Vec::new();
    leaf_paths(tree, &mut Vec::new(), &mut all);
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    if all.contains(&parts) {
        return Ok(parts);
    }
    if parts.len() == 1 {
        let matches: Vec<_> = all.iter().filter(|p| p.last() == Some(&parts[0])).collect();
        match matches.len() {
            1 => return Ok(matches[0].clone()),
            0 => {}
            _ => {
                let names: Vec<_> = matches.iter().map(|p| p.join(".")).collect();
                return Err(CliError::Config(format!(
                    "override key `{key}` is ambiguous: {}",
                    names.join(", ")
                )));
            }
        }
    }
    Err(CliError::Config(format!("unknown config key `{key}`")))
}

fn pointer_mut<'a>(tree: &'a mut Value, path: &[String]) -> &'a mut Value {
    path.iter().fold(tree, |node, k| node.get_mut(k).expect("resolved path exists"))
}
