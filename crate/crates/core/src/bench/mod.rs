//! Evaluation harness: timing tables, detection and channel-MSE sweeps,
//! convergence traces, and CSV/manifest reports.

mod report;
mod sweep;

pub use report::{config_hash, emit_report, emit_timing_report, git_blob_hash, Manifest, ManifestInput};
pub use sweep::{
    initial_loss, run_convergence, run_detection_sweep, run_mse_sweep, run_timing, ConvergenceReport,
    Models, TimingRow,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recovery::ORACLE_LIMIT;
use crate::sysmodel::SystemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "OMP")]
    Omp,
    #[serde(rename = "BOMP")]
    Bomp,
    #[serde(rename = "IHT")]
    Iht,
    #[serde(rename = "BIHT")]
    Biht,
    #[serde(rename = "DNN")]
    Dnn,
    #[serde(rename = "BRNN")]
    Brnn,
    #[serde(rename = "ORACLE")]
    Oracle,
    /// The true support; a lower bound for the channel-MSE sweep.
    #[serde(rename = "GENIE")]
    Genie,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Omp,
        Method::Bomp,
        Method::Iht,
        Method::Biht,
        Method::Dnn,
        Method::Brnn,
        Method::Oracle,
        Method::Genie,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Omp => "OMP",
            Method::Bomp => "BOMP",
            Method::Iht => "IHT",
            Method::Biht => "BIHT",
            Method::Dnn => "DNN",
            Method::Brnn => "BRNN",
            Method::Oracle => "ORACLE",
            Method::Genie => "GENIE",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn is_network(self) -> bool {
        matches!(self, Method::Dnn | Method::Brnn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Number of active users.
    #[serde(rename = "n")]
    Active,
    /// Pilot length.
    #[serde(rename = "Ns")]
    PilotLen,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Active => "n",
            SweepAxis::PilotLen => "Ns",
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub methods: Vec<Method>,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<usize>,
    pub trials: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Drop the noise term from every test measurement.
    #[serde(default)]
    pub noiseless: bool,
    /// Report `‖x̂ − x‖² / ‖x‖²` (otherwise the raw squared error).
    #[serde(default = "default_true")]
    pub normalized_mse: bool,
}

impl ExperimentConfig {
    /// The system configuration at one sweep point. Pilots follow
    /// `system.seed`; `seed` only keys the test-sample streams.
    pub fn point(&self, value: usize) -> SystemConfig {
        let mut system = self.system;
        match self.sweep_axis {
            SweepAxis::Active => system.active = value,
            SweepAxis::PilotLen => system.pilot_len = value,
        }
        system
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.sweep_values.is_empty() {
            return Err(Error::config("sweep values must be non-empty"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("at least one method is required"));
        }
        for &v in &self.sweep_values {
            let point = self.point(v);
            point.validate()?;
            if self.methods.contains(&Method::Oracle) {
                let candidates = crate::recovery::binomial(point.users, point.active);
                if candidates > ORACLE_LIMIT {
                    return Err(Error::CombinatorialBudget { candidates, limit: ORACLE_LIMIT });
                }
            }
        }
        Ok(())
    }
}

/// One method at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub sweep_value: usize,
    pub trials: usize,
    pub exact_set_success_rate: f64,
    pub user_hit_ratio: f64,
    /// `1.96·√(p(1−p)/T)` for the exact-set success rate.
    pub ci_halfwidth: f64,
    /// Mean channel error after MMSE refinement; only set by the MSE sweep.
    pub channel_mse: Option<f64>,
    /// Trials where the detector returned no support (x̂ = 0 was used).
    pub empty_supports: usize,
    pub mean_time_s: f64,
}

/// Normal-approximation 95% halfwidth of a Bernoulli mean.
pub fn bernoulli_halfwidth(p: f64, trials: usize) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    1.96 * (p * (1.0 - p) / trials as f64).sqrt()
}
