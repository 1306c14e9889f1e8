use std::sync::atomic::AtomicBool;
use std::time::Instant;

use nalgebra::DVector;
use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bernoulli_halfwidth, ExperimentConfig, Method, MetricsRow};
use crate::error::{Error, Result};
use crate::neural::{featurize_batch, train, ArchConfig, Architecture, Network, TrainConfig, TrainOutcome};
use crate::recovery::{
    biht, bomp, brute_force_oracle, default_step_size, detect_support, iht, mmse_estimate, omp, SolverParams,
};
use crate::rng::{derive_seed, stream};
use crate::sysmodel::{
    dictionary_for, generate_samples, ActivityPolicy, Calibration, Dictionary, Sample, Split, SystemConfig,
};

/// Trained detectors available to the harness, looked up by architecture
/// and system dimensions.
#[derive(Debug, Clone, Default)]
pub struct Models {
    nets: Vec<Network<f32>>,
}

impl Models {
    pub fn new() -> Self {
        Models::default()
    }

    pub fn insert(&mut self, net: Network<f32>) {
        self.nets.push(net);
    }

    pub fn with(mut self, net: Network<f32>) -> Self {
        self.insert(net);
        self
    }

    pub fn find(&self, arch: Architecture, system: &SystemConfig) -> Result<&Network<f32>> {
        self.nets
            .iter()
            .find(|n| {
                n.arch == arch
                    && n.users == system.users
                    && n.block == system.taps
                    && n.measurement_len() == system.measurement_len()
            })
            .ok_or_else(|| {
                Error::MissingArtifact(format!(
                    "no {} model for K={}, Ns={}, L={}",
                    arch.name(),
                    system.users,
                    system.pilot_len,
                    system.taps
                ))
            })
    }
}

struct Detector<'a> {
    method: Method,
    dictionary: &'a Dictionary,
    params: SolverParams,
    net: Option<&'a Network<f32>>,
}

impl Detector<'_> {
    fn detect(&self, sample: &Sample) -> Result<Vec<usize>> {
        let n = sample.active_set.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let l = self.dictionary.block_size();
        let y = &sample.y;
        match self.method {
            Method::Omp => detect_support(omp(self.dictionary, y, n * l, &self.params)?.x_hat.as_slice(), l, n),
            Method::Bomp => detect_support(bomp(self.dictionary, y, n, &self.params)?.x_hat.as_slice(), l, n),
            Method::Iht => detect_support(iht(self.dictionary, y, n * l, &self.params)?.x_hat.as_slice(), l, n),
            Method::Biht => detect_support(biht(self.dictionary, y, n, &self.params)?.x_hat.as_slice(), l, n),
            Method::Oracle => Ok(brute_force_oracle(self.dictionary, y, n)?.support_users),
            Method::Dnn | Method::Brnn => {
                let net = self.net.expect("network detector without a model");
                Ok(net.infer_active_users(y.as_slice(), n)?.0)
            }
            Method::Genie => Ok(sample.active_set.clone()),
        }
    }
}

fn detector<'a>(
    method: Method,
    system: &SystemConfig,
    dictionary: &'a Dictionary,
    step: Option<f64>,
    models: &'a Models,
) -> Result<Detector<'a>> {
    let params = match method {
        Method::Iht | Method::Biht => {
            SolverParams::thresholding().with_step_size(step.unwrap_or_else(|| default_step_size(dictionary)))
        }
        _ => SolverParams::greedy(),
    };
    let net = match method {
        Method::Dnn => Some(models.find(Architecture::Dnn, system)?),
        Method::Brnn => Some(models.find(Architecture::Brnn, system)?),
        _ => None,
    };
    Ok(Detector { method, dictionary, params, net })
}

struct Point {
    system: SystemConfig,
    dictionary: Dictionary,
    samples: Vec<Sample>,
    noise_var: f64,
    step: Option<f64>,
}

fn prepare(exp: &ExperimentConfig, value: usize, count: usize) -> Result<Point> {
    let system = exp.point(value);
    let (_, dictionary) = dictionary_for(&system)?;
    let sample_seed = derive_seed(exp.seed, stream::SWEEP, value as u64);
    let (mut samples, mut noise_var) = generate_samples(
        &system,
        &dictionary,
        sample_seed,
        Split::Test,
        ActivityPolicy::Fixed(system.active),
        count,
        Calibration::Empirical,
    )?;
    if exp.noiseless {
        for s in &mut samples {
            s.y = dictionary.apply(&s.x)?;
        }
        noise_var = 0.0;
    }
    let step = exp
        .methods
        .iter()
        .any(|m| matches!(m, Method::Iht | Method::Biht))
        .then(|| default_step_size(&dictionary));
    Ok(Point { system, dictionary, samples, noise_var, step })
}

struct Outcome {
    exact: bool,
    hit: f64,
    empty: bool,
    error: f64,
    seconds: f64,
}

fn squared_error(a: &DVector<Complex64>, b: &DVector<Complex64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q).norm_sqr()).sum()
}

fn sweep(exp: &ExperimentConfig, models: &Models, with_mse: bool) -> Result<Vec<MetricsRow>> {
    exp.validate()?;
    let mut rows = Vec::new();
    for &value in &exp.sweep_values {
        let point = prepare(exp, value, exp.trials)?;
        let prior_var = 1.0 / point.system.taps as f64;
        for &method in &exp.methods {
            let det = detector(method, &point.system, &point.dictionary, point.step, models)?;
            let outcomes: Vec<Outcome> = point
                .samples
                .par_iter()
                .map(|s| {
                    let start = Instant::now();
                    let detected = det.detect(s)?;
                    let seconds = start.elapsed().as_secs_f64();
                    let n = s.active_set.len();
                    let found = detected.iter().filter(|k| s.active_set.binary_search(k).is_ok()).count();
                    let hit = if n == 0 { 1.0 } else { found as f64 / n as f64 };
                    let empty = n > 0 && detected.is_empty();
                    let error = if with_mse {
                        let x_hat = if detected.is_empty() {
                            DVector::zeros(s.x.len())
                        } else {
                            mmse_estimate(&point.dictionary, &s.y, &detected, point.noise_var, prior_var)?.x_hat
                        };
                        let err = squared_error(&x_hat, &s.x);
                        let energy = s.x.norm_squared();
                        match (exp.normalized_mse, energy > 0.0) {
                            (true, true) => err / energy,
                            (true, false) => err,
                            (false, _) => err,
                        }
                    } else {
                        0.0
                    };
                    Ok(Outcome { exact: detected == s.active_set, hit, empty, error, seconds })
                })
                .collect::<Result<_>>()?;
            let t = outcomes.len() as f64;
            let exact = outcomes.iter().filter(|o| o.exact).count() as f64 / t;
            rows.push(MetricsRow {
                method,
                sweep_value: value,
                trials: outcomes.len(),
                exact_set_success_rate: exact,
                user_hit_ratio: outcomes.iter().map(|o| o.hit).sum::<f64>() / t,
                ci_halfwidth: bernoulli_halfwidth(exact, outcomes.len()),
                channel_mse: with_mse.then(|| outcomes.iter().map(|o| o.error).sum::<f64>() / t),
                empty_supports: outcomes.iter().filter(|o| o.empty).count(),
                mean_time_s: outcomes.iter().map(|o| o.seconds).sum::<f64>() / t,
            });
        }
    }
    Ok(rows)
}

/// Exact-set success and per-user hit ratio for every method at every
/// sweep point; each method is told the true number of active users.
pub fn run_detection_sweep(exp: &ExperimentConfig, models: &Models) -> Result<Vec<MetricsRow>> {
    sweep(exp, models, false)
}

/// As [`run_detection_sweep`], additionally refining each detected support
/// with the MMSE estimator (prior variance `1/L`) and reporting the mean
/// channel error.
pub fn run_mse_sweep(exp: &ExperimentConfig, models: &Models) -> Result<Vec<MetricsRow>> {
    sweep(exp, models, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub sweep_value: usize,
    pub samples: usize,
    pub mean_time_s: f64,
    /// `1.96·s/√T` over the timed samples.
    pub ci_halfwidth_s: f64,
}

/// Samples run before timing starts and then discarded.
pub const WARMUP_SAMPLES: usize = 50;

/// Mean single-sample detection time per method, measured sequentially on
/// the calling thread over `trials` samples after the warm-up.
pub fn run_timing(exp: &ExperimentConfig, models: &Models) -> Result<Vec<TimingRow>> {
    exp.validate()?;
    let mut rows = Vec::new();
    for &value in &exp.sweep_values {
        let point = prepare(exp, value, exp.trials + WARMUP_SAMPLES)?;
        for &method in &exp.methods {
            let det = detector(method, &point.system, &point.dictionary, point.step, models)?;
            let mut times = Vec::with_capacity(exp.trials);
            for (i, s) in point.samples.iter().enumerate() {
                let start = Instant::now();
                let detected = det.detect(s)?;
                let elapsed = start.elapsed().as_secs_f64();
                std::hint::black_box(detected);
                if i >= WARMUP_SAMPLES {
                    times.push(elapsed);
                }
            }
            let t = times.len() as f64;
            let mean = times.iter().sum::<f64>() / t;
            let var = if times.len() > 1 {
                times.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1.0)
            } else {
                0.0
            };
            rows.push(TimingRow {
                method,
                sweep_value: value,
                samples: times.len(),
                mean_time_s: mean,
                ci_halfwidth_s: 1.96 * (var / t).sqrt(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub dnn: TrainOutcome<f32>,
    pub brnn: TrainOutcome<f32>,
    /// Training-mode loss of each freshly initialised network on the first
    /// batch, before any update.
    pub initial_loss_dnn: f64,
    pub initial_loss_brnn: f64,
}

/// Training-mode loss of `network` on the first `batch` samples, leaving
/// the network itself untouched.
pub fn initial_loss(network: &Network<f32>, samples: &[Sample], batch: usize) -> Result<f64> {
    let batch = &samples[..samples.len().min(batch)];
    if batch.len() < 2 {
        return Err(Error::config("initial loss needs at least two samples"));
    }
    let x: Array2<f32> = featurize_batch(batch.iter().map(|s| s.y.as_slice()), network.measurement_len());
    let mut t = Array2::zeros((batch.len(), network.users));
    for (mut row, s) in t.rows_mut().into_iter().zip(batch) {
        row.assign(&network.head.target::<f32>(network.users, &s.active_set));
    }
    let mut probe = network.clone();
    let (loss, _) = probe.loss_and_grads(x.view(), t.view())?;
    Ok(loss as f64)
}

/// Trains a DNN and a BRNN from the same seed on the same data with the
/// same optimiser settings.
pub fn run_convergence(
    system: &SystemConfig,
    arch: &ArchConfig,
    config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    stop: Option<&AtomicBool>,
) -> Result<ConvergenceReport> {
    let m = system.measurement_len();
    let dnn = Network::<f32>::build(Architecture::Dnn, system.users, system.taps, m, arch, config.seed)?;
    let brnn = Network::<f32>::build(Architecture::Brnn, system.users, system.taps, m, arch, config.seed)?;
    let initial_loss_dnn = initial_loss(&dnn, train_set, config.batch_size)?;
    let initial_loss_brnn = initial_loss(&brnn, train_set, config.batch_size)?;
    let dnn = train(dnn, train_set, val_set, config, stop, |_| {})?;
    let brnn = train(brnn, train_set, val_set, config, stop, |_| {})?;
    Ok(ConvergenceReport { dnn, brnn, initial_loss_dnn, initial_loss_brnn })
}
