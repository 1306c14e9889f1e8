use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use csmud_core::bench::{
    emit_report, emit_timing_report, run_detection_sweep, run_mse_sweep, run_timing, Method, Models,
};
use csmud_core::neural::{
    evaluate, load_model, read_trace_csv, save_model, train, write_trace_csv, Float, Precision, StopReason,
    TrainingTrace,
};
use csmud_core::recovery::binomial;
use csmud_core::sysmodel::{generate_dataset, load_dataset, save_dataset, ActivityPolicy, Dataset, Split};
use csmud_core::{Architecture, Network};
use log::info;
use serde::Serialize;

use crate::config::{arch_slug, RunConfig};
use crate::CliError;

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

pub fn dataset_path(config: &RunConfig, split: Split) -> PathBuf {
    config.data_dir().join(format!("{}.csmud", split.name()))
}

fn policy(config: &RunConfig, split: Split) -> ActivityPolicy {
    match split {
        Split::Test if config.data.test_n_max > 0 => ActivityPolicy::UpTo(config.data.test_n_max),
        _ => ActivityPolicy::Fixed(config.system.active),
    }
}

fn count(config: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => config.data.train,
        Split::Val => config.data.val,
        Split::Test => config.data.test,
    }
}

/// Writes `train`, `val` and `test` datasets under `<out>/data`.
pub fn generate(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    // validate every split before touching the disk
    let mut sets = Vec::new();
    for split in SPLITS {
        let ds = generate_dataset(&config.system, split, policy(config, split), count(config, split), config.data.calibration)?;
        info!("{}: {} samples, noise variance {:.4e}", split.name(), ds.len(), ds.noise_var);
        sets.push(ds);
    }
    fs::create_dir_all(config.data_dir())?;
    let mut paths = Vec::new();
    for ds in &sets {
        let path = dataset_path(config, ds.split);
        save_dataset(ds, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

fn load_split(config: &RunConfig, split: Split) -> Result<Dataset, CliError> {
    let path = dataset_path(config, split);
    let ds = load_dataset(&path).map_err(|e| match e {
        csmud_core::Error::MissingArtifact(p) => CliError::Missing(format!("dataset {p} not found; run `csmud generate` first")),
        other => other.into(),
    })?;
    if ds.config != config.system {
        return Err(CliError::Config(format!(
            "{} was generated for a different system configuration; regenerate it",
            path.display()
        )));
    }
    Ok(ds)
}

fn load_net<T: Float>(path: &Path) -> Result<Network<T>, CliError> {
    load_model::<T>(path).map_err(|e| match e {
        csmud_core::Error::MissingArtifact(p) => CliError::Missing(format!("model {p} not found; run `csmud train` first")),
        other => other.into(),
    })
}

fn check_model_system<T: Float>(net: &Network<T>, config: &RunConfig, arch: Architecture) -> Result<(), CliError> {
    let s = &config.system;
    if net.arch != arch || net.users != s.users || net.block != s.taps || net.measurement_len() != s.measurement_len() {
        return Err(CliError::Config(format!(
            "stored model is a {} for K={}, L={}, M={}; the configuration asks for a {} with K={}, L={}, M={}",
            net.arch.name(),
            net.users,
            net.block,
            net.measurement_len(),
            arch.name(),
            s.users,
            s.taps,
            s.measurement_len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model: PathBuf,
    pub trace: PathBuf,
    pub batches_seen: u64,
    pub checkpoints: usize,
}

/// Trains the configured architecture on `<out>/data` and writes the best
/// validation model plus its trace under `<out>/models`.
pub fn train_model(config: &RunConfig, stop: Option<&AtomicBool>) -> Result<TrainSummary, CliError> {
    match config.model.precision {
        Precision::F32 => train_typed::<f32>(config, stop),
        Precision::F64 => train_typed::<f64>(config, stop),
    }
}

fn train_typed<T: Float>(config: &RunConfig, stop: Option<&AtomicBool>) -> Result<TrainSummary, CliError> {
    let arch = config.model.arch;
    let opt = &config.train.optimizer;
    opt.validate()?;
    let train_set = load_split(config, Split::Train)?;
    let val_set = load_split(config, Split::Val)?;
    let model_path = config.model_path(arch);
    let trace_path = config.trace_path(arch);

    let (network, mut trace) = if config.train.resume {
        let net = load_net::<T>(&model_path)?;
        check_model_system(&net, config, arch)?;
        let trace = match File::open(&trace_path) {
            Ok(f) => read_trace_csv(BufReader::new(f))?,
            Err(_) => TrainingTrace::default(),
        };
        info!("resuming {} from batch {}", arch.name(), net.batches_seen);
        (net, trace)
    } else {
        let s = &config.system;
        let net = Network::<T>::build(arch, s.users, s.taps, s.measurement_len(), &config.model.layers, opt.seed)?;
        (net, TrainingTrace::default())
    };
    info!("{}: {} parameters, {} training samples", arch.name(), network.param_count(), train_set.len());

    let outcome = train(network, &train_set.samples, &val_set.samples, opt, stop, |cp| {
        info!(
            "batch {:>7}  loss {:.4}  hit {:.4}  exact {:.4}",
            cp.batch, cp.loss, cp.user_hit_ratio, cp.exact_set_rate
        );
    })?;
    trace.checkpoints.extend(outcome.trace.checkpoints.iter().copied());

    fs::create_dir_all(config.models_dir())?;
    let mut w = BufWriter::new(File::create(&trace_path)?);
    write_trace_csv(&trace, &mut w)?;
    w.flush()?;
    let summary = TrainSummary {
        model: model_path.clone(),
        trace: trace_path.clone(),
        batches_seen: outcome.network.batches_seen,
        checkpoints: trace.checkpoints.len(),
    };
    match outcome.stop {
        StopReason::Completed => {
            save_model(&outcome.network, &model_path)?;
            Ok(summary)
        }
        StopReason::Interrupted => {
            save_model(&outcome.network, &model_path)?;
            Err(CliError::Interrupted(model_path.display().to_string()))
        }
        StopReason::Diverged { batch, loss } => Err(CliError::Core(csmud_core::Error::Divergence { batch, loss })),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub arch: &'static str,
    pub samples: usize,
    pub user_hit_ratio: f64,
    pub exact_set_success_rate: f64,
    pub ci_halfwidth: f64,
    /// Rates of a detector that guesses the active set uniformly at random.
    pub chance_user_hit_ratio: f64,
    pub chance_exact_set_rate: f64,
}

/// Scores the stored model of `arch` on the test split and writes
/// `<out>/reports/eval_<arch>.csv`.
pub fn eval(config: &RunConfig, arch: Architecture) -> Result<(EvalRow, PathBuf), CliError> {
    let test = load_split(config, Split::Test)?;
    let path = config.model_path(arch);
    let (hit, exact) = match config.model.precision {
        Precision::F32 => {
            let net = load_net::<f32>(&path)?;
            check_model_system(&net, config, arch)?;
            evaluate(&net, &test.samples)?
        }
        Precision::F64 => {
            let net = load_net::<f64>(&path)?;
            check_model_system(&net, config, arch)?;
            evaluate(&net, &test.samples)?
        }
    };
    let k = config.system.users;
    let t = test.len().max(1) as f64;
    let chance_hit = test.samples.iter().map(|s| s.active_set.len() as f64 / k as f64).sum::<f64>() / t;
    let chance_exact = test.samples.iter().map(|s| 1.0 / binomial(k, s.active_set.len()) as f64).sum::<f64>() / t;
    let row = EvalRow {
        arch: arch.name(),
        samples: test.len(),
        user_hit_ratio: hit,
        exact_set_success_rate: exact,
        ci_halfwidth: csmud_core::bench::bernoulli_halfwidth(exact, test.len()),
        chance_user_hit_ratio: chance_hit,
        chance_exact_set_rate: chance_exact,
    };
    fs::create_dir_all(config.reports_dir())?;
    let out = config.reports_dir().join(format!("eval_{}.csv", arch_slug(arch)));
    let mut w = csv::Writer::from_path(&out).map_err(csmud_core::Error::from)?;
    w.serialize(&row).map_err(csmud_core::Error::from)?;
    w.flush()?;
    Ok((row, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Detection,
    Mse,
    Timing,
    Convergence,
    All,
}

fn load_models(config: &RunConfig, methods: &[Method]) -> Result<(Models, Vec<PathBuf>), CliError> {
    let mut models = Models::new();
    let mut inputs = Vec::new();
    for (method, arch) in [(Method::Dnn, Architecture::Dnn), (Method::Brnn, Architecture::Brnn)] {
        if !methods.contains(&method) {
            continue;
        }
        let path = config.model_path(arch);
        if config.model.precision != Precision::F32 {
            return Err(CliError::Config("the benchmark harness runs f32 models only".into()));
        }
        let net = load_net::<f32>(&path)?;
        check_model_system(&net, config, arch)?;
        models.insert(net);
        inputs.push(path);
    }
    Ok((models, inputs))
}

/// Runs the selected benchmark suites and returns the report paths.
pub fn bench(config: &RunConfig, suite: Suite) -> Result<Vec<PathBuf>, CliError> {
    let exp = config.experiment();
    exp.validate()?;
    let want = |s: Suite| suite == s || (suite == Suite::All && s != Suite::Convergence);
    let (models, inputs) = if want(Suite::Detection) || want(Suite::Mse) || want(Suite::Timing) {
        load_models(config, &exp.methods)?
    } else {
        (Models::new(), Vec::new())
    };
    let dir = config.reports_dir();
    let mut written = Vec::new();

    if want(Suite::Detection) && !want(Suite::Mse) {
        let rows = run_detection_sweep(&exp, &models)?;
        let (csv, manifest) = emit_report(&rows, &exp, &dir, "detection", &inputs)?;
        written.extend([csv, manifest]);
    }
    if want(Suite::Mse) {
        // the MSE sweep carries the detection columns as well
        let rows = run_mse_sweep(&exp, &models)?;
        let (csv, manifest) = emit_report(&rows, &exp, &dir, "detection_mse", &inputs)?;
        written.extend([csv, manifest]);
    }
    if want(Suite::Timing) {
        let mut timing = exp.clone();
        timing.system = config.bench.timing_system.unwrap_or(config.system);
        timing.sweep_values = vec![timing.system.active];
        timing.trials = config.bench.timing_samples;
        timing.methods.retain(|m| *m != Method::Oracle && *m != Method::Genie);
        let rows = single_threaded(|| run_timing(&timing, &models))??;
        let (csv, manifest) = emit_timing_report(&rows, &timing, &dir, "timing", &inputs)?;
        written.extend([csv, manifest]);
    }
    if want(Suite::Convergence) {
        written.push(convergence(config)?);
    }
    Ok(written)
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Serialize)]
struct ConvergenceRow {
    batch: u64,
    dnn_loss: Option<f64>,
    brnn_loss: Option<f64>,
    dnn_exact_set_rate: Option<f64>,
    brnn_exact_set_rate: Option<f64>,
}

/// Joins the DNN and BRNN training traces on the batch index into
/// `<out>/reports/convergence.csv`.
fn convergence(config: &RunConfig) -> Result<PathBuf, CliError> {
    let mut traces = Vec::new();
    for arch in [Architecture::Dnn, Architecture::Brnn] {
        let path = config.trace_path(arch);
        let f = File::open(&path)
            .map_err(|_| CliError::Missing(format!("trace {} not found; train the {} first", path.display(), arch.name())))?;
        traces.push(read_trace_csv(BufReader::new(f))?);
    }
    let mut batches: Vec<u64> = traces.iter().flat_map(|t| t.checkpoints.iter().map(|c| c.batch)).collect();
    batches.sort_unstable();
    batches.dedup();
    let at = |t: &TrainingTrace, b: u64| t.checkpoints.iter().find(|c| c.batch == b).copied();
    fs::create_dir_all(config.reports_dir())?;
    let out = config.reports_dir().join("convergence.csv");
    let mut w = csv::Writer::from_path(&out).map_err(csmud_core::Error::from)?;
    for b in batches {
        let (d, r) = (at(&traces[0], b), at(&traces[1], b));
        w.serialize(ConvergenceRow {
            batch: b,
            dnn_loss: d.map(|c| c.loss),
            brnn_loss: r.map(|c| c.loss),
            dnn_exact_set_rate: d.map(|c| c.exact_set_rate),
            brnn_exact_set_rate: r.map(|c| c.exact_set_rate),
        })
        .map_err(csmud_core::Error::from)?;
    }
    w.flush()?;
    for (arch, t) in [("DNN", &traces[0]), ("BRNN", &traces[1])] {
        if let (Some(smoothed), Some(last)) = (t.smoothed_final_loss(10), t.last()) {
            info!("{arch}: smoothed final loss {smoothed:.4}, final exact-set {:.4}", last.exact_set_rate);
        }
    }
    Ok(out)
}
