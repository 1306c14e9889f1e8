use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha1::Sha1;
use sha2::{Digest, Sha256};

use super::sweep::TimingRow;
use super::{ExperimentConfig, MetricsRow};
use crate::error::Result;

const METRICS_HEADER: [&str; 9] = [
    "method",
    "sweep_value",
    "trials",
    "exact_set_success_rate",
    "user_hit_ratio",
    "ci_halfwidth",
    "channel_mse",
    "empty_supports",
    "mean_time_s",
];

const TIMING_HEADER: [&str; 5] = ["method", "sweep_value", "samples", "mean_time_s", "ci_halfwidth_s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub path: PathBuf,
    /// SHA-1 of `"blob <len>\0" ++ content`, as `git hash-object` prints it.
    pub git_blob_sha1: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<ManifestInput>,
    pub threads: usize,
    pub environment: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

/// SHA-256 of the compact JSON form of the configuration.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(config)?)))
}

fn manifest(config: &ExperimentConfig, inputs: &[PathBuf]) -> Result<Manifest> {
    let inputs = inputs
        .iter()
        .map(|p| Ok(ManifestInput { path: p.clone(), git_blob_sha1: git_blob_hash(&fs::read(p)?) }))
        .collect::<Result<_>>()?;
    Ok(Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        config_sha256: config_hash(config)?,
        seed: config.seed,
        inputs,
        threads: rayon::current_num_threads(),
        environment: format!(
            "{}-{}; timing columns are wall-clock on this host and excluded from reproducibility",
            std::env::consts::ARCH,
            std::env::consts::OS
        ),
    })
}

fn write_manifest(config: &ExperimentConfig, inputs: &[PathBuf], path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &manifest(config, inputs)?)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Writes `<dir>/<name>.csv` and `<dir>/<name>.manifest.json`, returning
/// both paths. `inputs` are the dataset and model files the run read.
pub fn emit_report(
    rows: &[MetricsRow],
    config: &ExperimentConfig,
    dir: &Path,
    name: &str,
    inputs: &[PathBuf],
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let manifest_path = dir.join(format!("{name}.manifest.json"));
    write_manifest(config, inputs, &manifest_path)?;
    Ok((csv_path, manifest_path))
}

pub fn emit_timing_report(
    rows: &[TimingRow],
    config: &ExperimentConfig,
    dir: &Path,
    name: &str,
    inputs: &[PathBuf],
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path)?;
    w.write_record(TIMING_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let manifest_path = dir.join(format!("{name}.manifest.json"));
    write_manifest(config, inputs, &manifest_path)?;
    Ok((csv_path, manifest_path))
}
