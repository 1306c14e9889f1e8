//! Labelled datasets and their binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "CSMUDDS\0"
//! version      u8
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (DatasetHeader)
//! per sample:
//!   y          M  × (re f64, im f64)
//!   x          KL × (re f64, im f64)
//!   active     LEB128 count, then LEB128 user indices
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    analytic_signal_power, complex_gaussian, dictionary_for, noise_variance_for, Dictionary,
    GroundTruth, SystemConfig,
};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const DATASET_MAGIC: [u8; 8] = *b"CSMUDDS\0";
pub const DATASET_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => stream::TRAIN,
            Split::Val => stream::VAL,
            Split::Test => stream::TEST,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// How many users each sample activates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "snake_case")]
pub enum ActivityPolicy {
    /// Exactly `n` active users.
    Fixed(usize),
    /// Uniform over `1..=n_max` active users.
    UpTo(usize),
}

impl ActivityPolicy {
    pub fn admits(&self, active: usize) -> bool {
        match *self {
            ActivityPolicy::Fixed(n) => active == n,
            ActivityPolicy::UpTo(n_max) => (1..=n_max).contains(&active),
        }
    }

    fn mean_active(&self) -> f64 {
        match *self {
            ActivityPolicy::Fixed(n) => n as f64,
            ActivityPolicy::UpTo(n_max) => (n_max as f64 + 1.0) / 2.0,
        }
    }

    fn validate(&self, split: Split, users: usize) -> Result<()> {
        match (split, *self) {
            (Split::Train | Split::Val, ActivityPolicy::UpTo(_)) => {
                Err(Error::config("train and val splits require a fixed active count"))
            }
            (Split::Train | Split::Val, ActivityPolicy::Fixed(0)) => Err(Error::config(format!(
                "{} split with n = 0 has no label to learn",
                split.name()
            ))),
            (_, ActivityPolicy::UpTo(0)) => Err(Error::config("n_max must be at least 1")),
            (_, ActivityPolicy::Fixed(n) | ActivityPolicy::UpTo(n)) if n > users => {
                Err(Error::config(format!("active count {n} exceeds K = {users}")))
            }
            _ => Ok(()),
        }
    }
}

/// How the noise variance of a dataset is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calibration {
    /// Average `‖Ŝx‖²` over the generated samples themselves.
    #[default]
    Empirical,
    /// Closed form from the tap variance and the mean active count.
    Analytic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub y: DVector<Complex64>,
    pub active_set: Vec<usize>,
    pub x: DVector<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SystemConfig,
    pub split: Split,
    pub policy: ActivityPolicy,
    pub noise_var: f64,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    config: SystemConfig,
    split: Split,
    policy: ActivityPolicy,
    count: u64,
    noise_var: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dictionary(&self) -> Result<Dictionary> {
        Ok(dictionary_for(&self.config)?.1)
    }

    /// Realised `mean ‖Ŝx‖² / mean ‖y − Ŝx‖²` in dB.
    pub fn empirical_snr_db(&self, dictionary: &Dictionary) -> Result<f64> {
        let (mut signal, mut noise) = (0.0, 0.0);
        for s in &self.samples {
            let clean = dictionary.apply(&s.x)?;
            noise += (&s.y - &clean).norm_squared();
            signal += clean.norm_squared();
        }
        Ok(10.0 * (signal / noise).log10())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.config.measurement_len();
        let kl = self.config.signal_len();
        for (i, s) in self.samples.iter().enumerate() {
            if s.y.len() != m || s.x.len() != kl {
                return Err(Error::dim(format!("sample {i} has the wrong length")));
            }
            if !self.policy.admits(s.active_set.len()) {
                return Err(Error::config(format!(
                    "sample {i} has {} active users, policy {:?}",
                    s.active_set.len(),
                    self.policy
                )));
            }
        }
        Ok(())
    }
}

struct Draft {
    truth: GroundTruth,
    clean: DVector<Complex64>,
    unit_noise: DVector<Complex64>,
}

fn draft(
    config: &SystemConfig,
    dictionary: &Dictionary,
    sample_seed: u64,
    split: Split,
    policy: ActivityPolicy,
    index: u64,
) -> Result<Draft> {
    let mut rng = rng::derived_rng(sample_seed, split.stream(), index);
    let active = match policy {
        ActivityPolicy::Fixed(n) => n,
        ActivityPolicy::UpTo(n_max) => rng.gen_range(1..=n_max),
    };
    let truth = GroundTruth::sample(config, active, &mut rng)?;
    let clean = dictionary.apply(&truth.x)?;
    let unit_noise = DVector::from_fn(clean.len(), |_, _| complex_gaussian(&mut rng, 1.0));
    Ok(Draft { truth, clean, unit_noise })
}

/// Generates `count` samples for `split`.
///
/// Sample `i` draws from its own stream seeded by
/// `derive_seed(config.seed, split, i)`, and the noise is drawn at unit
/// variance and scaled once the dataset-wide variance is known, so the
/// output does not depend on the rayon thread count.
pub fn generate_dataset(
    config: &SystemConfig,
    split: Split,
    policy: ActivityPolicy,
    count: usize,
    calibration: Calibration,
) -> Result<Dataset> {
    config.validate()?;
    let (_, dictionary) = dictionary_for(config)?;
    let (samples, noise_var) =
        generate_samples(config, &dictionary, config.seed, split, policy, count, calibration)?;
    Ok(Dataset { config: *config, split, policy, noise_var, samples })
}

/// Like [`generate_dataset`] but over a given dictionary, with the sample
/// streams keyed by `sample_seed` instead of the configuration seed.
/// Returns the samples and the calibrated noise variance.
pub fn generate_samples(
    config: &SystemConfig,
    dictionary: &Dictionary,
    sample_seed: u64,
    split: Split,
    policy: ActivityPolicy,
    count: usize,
    calibration: Calibration,
) -> Result<(Vec<Sample>, f64)> {
    config.validate()?;
    if count == 0 {
        return Err(Error::config("dataset count must be at least 1"));
    }
    policy.validate(split, config.users)?;
    if dictionary.rows() != config.measurement_len() || dictionary.cols() != config.signal_len() {
        return Err(Error::dim(format!(
            "dictionary is {}x{}, configuration needs {}x{}",
            dictionary.rows(),
            dictionary.cols(),
            config.measurement_len(),
            config.signal_len()
        )));
    }

    let drafts: Vec<Draft> = (0..count as u64)
        .into_par_iter()
        .map(|i| draft(config, dictionary, sample_seed, split, policy, i))
        .collect::<Result<_>>()?;

    let signal_power = match calibration {
        Calibration::Empirical => {
            // sequential sum keeps the reduction order fixed
            let total: f64 = drafts.iter().map(|d| d.clean.norm_squared()).sum();
            total / (count as f64 * dictionary.rows() as f64)
        }
        Calibration::Analytic => {
            analytic_signal_power(dictionary, policy.mean_active(), 1.0 / config.taps as f64)
        }
    };
    let noise_var = noise_variance_for(signal_power, config.snr_db)?;
    let scale = noise_var.sqrt();

    let samples = drafts
        .into_par_iter()
        .map(|d| Sample {
            y: d.clean + d.unit_noise * Complex64::new(scale, 0.0),
            active_set: d.truth.active_set,
            x: d.truth.x,
        })
        .collect();
    Ok((samples, noise_var))
}

fn write_varint(out: &mut impl Write, mut v: u64) -> std::io::Result<()> {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            return out.write_all(&[byte]);
        }
        out.write_all(&[byte | 0x80])?;
    }
}

fn read_varint(input: &mut impl Read) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let mut b = [0u8];
        read_exact(input, &mut b)?;
        v |= u64::from(b[0] & 0x7f) << shift;
        if b[0] & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Integrity("varint longer than 64 bits".into()))
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Integrity("truncated payload".into()),
        _ => Error::Io(e),
    })
}

fn write_complex(out: &mut impl Write, v: &DVector<Complex64>) -> std::io::Result<()> {
    for c in v.iter() {
        out.write_all(&c.re.to_le_bytes())?;
        out.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

fn read_complex(input: &mut impl Read, len: usize) -> Result<DVector<Complex64>> {
    let mut buf = vec![0u8; len * 16];
    read_exact(input, &mut buf)?;
    Ok(DVector::from_iterator(
        len,
        buf.chunks_exact(16).map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        }),
    ))
}

pub fn write_dataset(dataset: &Dataset, out: &mut impl Write) -> Result<()> {
    let header = serde_json::to_vec(&DatasetHeader {
        config: dataset.config,
        split: dataset.split,
        policy: dataset.policy,
        count: dataset.samples.len() as u64,
        noise_var: dataset.noise_var,
    })?;
    out.write_all(&DATASET_MAGIC)?;
    out.write_all(&[DATASET_VERSION])?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for s in &dataset.samples {
        write_complex(out, &s.y)?;
        write_complex(out, &s.x)?;
        write_varint(out, s.active_set.len() as u64)?;
        for &k in &s.active_set {
            write_varint(out, k as u64)?;
        }
    }
    Ok(())
}

pub fn read_dataset(input: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    read_exact(input, &mut magic).map_err(|_| Error::Header("file too short for a header".into()))?;
    if magic != DATASET_MAGIC {
        return Err(Error::Header("not a dataset file (bad magic)".into()));
    }
    let mut version = [0u8];
    read_exact(input, &mut version)?;
    if version[0] != DATASET_VERSION {
        return Err(Error::Header(format!(
            "dataset version {} is not supported (expected {DATASET_VERSION})",
            version[0]
        )));
    }
    let mut len = [0u8; 4];
    read_exact(input, &mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(input, &mut header)?;
    let header: DatasetHeader =
        serde_json::from_slice(&header).map_err(|e| Error::Header(format!("bad JSON header: {e}")))?;
    header.config.validate()?;

    let m = header.config.measurement_len();
    let kl = header.config.signal_len();
    let mut samples = Vec::with_capacity(header.count.min(1 << 20) as usize);
    for _ in 0..header.count {
        let y = read_complex(input, m)?;
        let x = read_complex(input, kl)?;
        let n = read_varint(input)? as usize;
        if n > header.config.users {
            return Err(Error::Integrity(format!("active set of size {n} exceeds K")));
        }
        let active_set = (0..n)
            .map(|_| read_varint(input).map(|k| k as usize))
            .collect::<Result<Vec<_>>>()?;
        if active_set.iter().any(|&k| k >= header.config.users) {
            return Err(Error::Integrity("active user index out of range".into()));
        }
        samples.push(Sample { y, active_set, x });
    }
    let mut trailing = [0u8];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Integrity("trailing bytes after the last sample".into()));
    }
    Ok(Dataset {
        config: header.config,
        split: header.split,
        policy: header.policy,
        noise_var: header.noise_var,
        samples,
    })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    read_dataset(&mut BufReader::new(file))
}
