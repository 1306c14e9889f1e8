//! Synthetic uplink model: BPSK pilots, the stacked pilot-convolution
//! dictionary, block Rayleigh channels, sporadic activity and measurements
//! `y = Ŝx + n`.

mod dataset;

pub use dataset::{
    generate_dataset, generate_samples, load_dataset, read_dataset, save_dataset, write_dataset, ActivityPolicy,
    Calibration, Dataset, Sample, Split, DATASET_MAGIC, DATASET_VERSION,
};

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Dimensions of one access frame plus the master seed.
///
/// Field names on the wire follow the usual symbols: `K` users, `Ns` pilot
/// symbols, `L` channel taps, `n` active users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    #[serde(rename = "K")]
    pub users: usize,
    #[serde(rename = "Ns")]
    pub pilot_len: usize,
    #[serde(rename = "L")]
    pub taps: usize,
    #[serde(rename = "n")]
    pub active: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl SystemConfig {
    /// Desk-scale default: 20 users, 16 pilot symbols, 3 taps, 2 active.
    pub fn desk() -> Self {
        SystemConfig { users: 20, pilot_len: 16, taps: 3, active: 2, snr_db: 10.0, seed: 2018 }
    }

    /// The full-size setting: 100 users, 40 pilot symbols, 6 taps, 6 active.
    pub fn paper_scale() -> Self {
        SystemConfig { users: 100, pilot_len: 40, taps: 6, active: 6, snr_db: 10.0, seed: 2018 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.pilot_len == 0 || self.taps == 0 {
            return Err(Error::config("K, Ns and L must all be at least 1"));
        }
        if self.active > self.users {
            return Err(Error::config(format!(
                "n = {} exceeds K = {}",
                self.active, self.users
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("snr_db must be finite"));
        }
        Ok(())
    }

    /// Number of received samples `Ns + L − 1`.
    pub fn measurement_len(&self) -> usize {
        self.pilot_len + self.taps - 1
    }

    /// Length `K·L` of the stacked channel vector.
    pub fn signal_len(&self) -> usize {
        self.users * self.taps
    }

    /// `K > M / L`: fewer measurements than unknowns.
    pub fn is_underdetermined(&self) -> bool {
        self.users * self.taps > self.measurement_len()
    }

    pub fn with_active(mut self, active: usize) -> Self {
        self.active = active;
        self
    }

    pub fn with_pilot_len(mut self, pilot_len: usize) -> Self {
        self.pilot_len = pilot_len;
        self
    }
}

/// One BPSK pilot row per user.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotSet {
    users: usize,
    pilot_len: usize,
    symbols: Vec<f64>,
}

impl PilotSet {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let users = rows.len();
        let pilot_len = rows.first().map_or(0, Vec::len);
        if users == 0 || pilot_len == 0 {
            return Err(Error::dim("pilot set must be non-empty"));
        }
        let mut symbols = Vec::with_capacity(users * pilot_len);
        for row in &rows {
            if row.len() != pilot_len {
                return Err(Error::dim("ragged pilot rows"));
            }
            if row.iter().any(|&s| s != 1.0 && s != -1.0) {
                return Err(Error::config("pilot symbols must be +1 or -1"));
            }
            symbols.extend_from_slice(row);
        }
        let distinct: HashSet<Vec<i8>> =
            rows.iter().map(|r| r.iter().map(|&s| s as i8).collect()).collect();
        if distinct.len() != users {
            return Err(Error::config("pilot rows must be pairwise distinct"));
        }
        Ok(PilotSet { users, pilot_len, symbols })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn pilot_len(&self) -> usize {
        self.pilot_len
    }

    pub fn row(&self, user: usize) -> &[f64] {
        &self.symbols[user * self.pilot_len..(user + 1) * self.pilot_len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.symbols.chunks(self.pilot_len)
    }
}

/// Draws `users` distinct rows of iid uniform ±1 symbols, rejecting repeats.
pub fn generate_pilots(users: usize, pilot_len: usize, rng: &mut Rng) -> Result<PilotSet> {
    let feasible = pilot_len >= usize::BITS as usize - 1 || users <= 1usize << pilot_len;
    if users == 0 || pilot_len == 0 || !feasible {
        return Err(Error::InfeasiblePilots { users, pilot_len });
    }
    let mut seen = HashSet::with_capacity(users);
    let mut rows = Vec::with_capacity(users);
    while rows.len() < users {
        let row: Vec<f64> =
            (0..pilot_len).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let key: Vec<bool> = row.iter().map(|&s| s > 0.0).collect();
        if seen.insert(key) {
            rows.push(row);
        }
    }
    PilotSet::from_rows(rows)
}

/// Toeplitz matrix of the linear convolution of `pilot` with an `taps`-tap
/// channel: entry `(i, j)` is `pilot[i − j]` when that index exists.
pub fn build_conv_matrix(pilot: &[f64], taps: usize) -> DMatrix<Complex64> {
    let rows = pilot.len() + taps - 1;
    DMatrix::from_fn(rows, taps, |i, j| match i.checked_sub(j) {
        Some(d) if d < pilot.len() => Complex64::new(pilot[d], 0.0),
        _ => Complex64::new(0.0, 0.0),
    })
}

/// The stacked dictionary `Ŝ = [Ŝ_1, …, Ŝ_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    matrix: DMatrix<Complex64>,
    block_size: usize,
    user_count: usize,
}

impl Dictionary {
    pub fn from_matrix(matrix: DMatrix<Complex64>, block_size: usize) -> Result<Self> {
        if block_size == 0 || matrix.ncols() % block_size != 0 || matrix.ncols() == 0 {
            return Err(Error::dim(format!(
                "{} columns do not split into blocks of {}",
                matrix.ncols(),
                block_size
            )));
        }
        let user_count = matrix.ncols() / block_size;
        Ok(Dictionary { matrix, block_size, user_count })
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn block(&self, user: usize) -> nalgebra::DMatrixView<'_, Complex64> {
        self.matrix.columns(user * self.block_size, self.block_size)
    }

    /// Columns of the given users' blocks, in order.
    pub fn block_columns(&self, users: &[usize]) -> Vec<usize> {
        users
            .iter()
            .flat_map(|&u| u * self.block_size..(u + 1) * self.block_size)
            .collect()
    }

    pub fn apply(&self, x: &DVector<Complex64>) -> Result<DVector<Complex64>> {
        if x.len() != self.cols() {
            return Err(Error::dim(format!("x has {} entries, Ŝ has {} columns", x.len(), self.cols())));
        }
        Ok(&self.matrix * x)
    }
}

pub fn assemble_dictionary(pilots: &PilotSet, taps: usize) -> Result<Dictionary> {
    if taps == 0 {
        return Err(Error::config("L must be at least 1"));
    }
    let rows = pilots.pilot_len() + taps - 1;
    let mut matrix = DMatrix::zeros(rows, pilots.users() * taps);
    for (user, pilot) in pilots.rows().enumerate() {
        matrix.columns_mut(user * taps, taps).copy_from(&build_conv_matrix(pilot, taps));
    }
    Dictionary::from_matrix(matrix, taps)
}

/// Pilots and dictionary for a configuration; pilots depend only on
/// `(K, Ns, seed)`.
pub fn dictionary_for(config: &SystemConfig) -> Result<(PilotSet, Dictionary)> {
    config.validate()?;
    let mut rng = rng::derived_rng(config.seed, rng::stream::PILOTS, 0);
    let pilots = generate_pilots(config.users, config.pilot_len, &mut rng)?;
    let dictionary = assemble_dictionary(&pilots, config.taps)?;
    Ok((pilots, dictionary))
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
pub fn complex_gaussian(rng: &mut Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Rayleigh block-fading taps, per-tap variance `1/L`.
pub fn sample_channel(users: usize, taps: usize, rng: &mut Rng) -> DVector<Complex64> {
    let var = 1.0 / taps as f64;
    DVector::from_fn(users * taps, |_, _| complex_gaussian(rng, var))
}

/// Uniformly random `n`-subset of `0..K`, sorted.
pub fn sample_activity(users: usize, active: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if active > users {
        return Err(Error::config(format!("n = {active} exceeds K = {users}")));
    }
    let mut set = index::sample(rng, users, active).into_vec();
    set.sort_unstable();
    Ok(set)
}

/// Activity set, channel and the block-sparse `x = A·h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub active_set: Vec<usize>,
    pub h: DVector<Complex64>,
    pub x: DVector<Complex64>,
}

impl GroundTruth {
    pub fn new(active_set: Vec<usize>, h: DVector<Complex64>, taps: usize) -> Self {
        let mut x = DVector::zeros(h.len());
        for &k in &active_set {
            x.rows_mut(k * taps, taps).copy_from(&h.rows(k * taps, taps));
        }
        GroundTruth { active_set, h, x }
    }

    pub fn sample(config: &SystemConfig, active: usize, rng: &mut Rng) -> Result<Self> {
        let active_set = sample_activity(config.users, active, rng)?;
        let h = sample_channel(config.users, config.taps, rng);
        Ok(GroundTruth::new(active_set, h, config.taps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: DVector<Complex64>,
    pub noise_var: f64,
    pub snr_db: f64,
}

/// `σ²` such that `signal_power / σ² = 10^(snr_db/10)`.
pub fn noise_variance_for(signal_power_per_entry: f64, snr_db: f64) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::config("snr_db must be finite"));
    }
    Ok(signal_power_per_entry / 10f64.powf(snr_db / 10.0))
}

/// Ensemble-average `‖Ŝx‖² / M`.
pub fn empirical_signal_power(dictionary: &Dictionary, ensemble: &[GroundTruth]) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::config("noise calibration needs a non-empty ensemble"));
    }
    let mut total = 0.0;
    for truth in ensemble {
        total += dictionary.apply(&truth.x)?.norm_squared();
    }
    Ok(total / (ensemble.len() as f64 * dictionary.rows() as f64))
}

/// `E‖Ŝx‖² / M` for uniformly random activity of mean size `mean_active`
/// and iid taps of variance `tap_var`.
pub fn analytic_signal_power(dictionary: &Dictionary, mean_active: f64, tap_var: f64) -> f64 {
    let frob: f64 = dictionary.matrix().iter().map(|c| c.norm_sqr()).sum();
    let per_user = frob / dictionary.user_count() as f64;
    mean_active * tap_var * per_user / dictionary.rows() as f64
}

/// Empirical noise calibration over the given ensemble.
pub fn calibrate_noise_variance(
    dictionary: &Dictionary,
    ensemble: &[GroundTruth],
    snr_db: f64,
) -> Result<f64> {
    noise_variance_for(empirical_signal_power(dictionary, ensemble)?, snr_db)
}

pub fn synthesize_measurement(
    dictionary: &Dictionary,
    x: &DVector<Complex64>,
    noise_var: f64,
    snr_db: f64,
    rng: &mut Rng,
) -> Result<Measurement> {
    let mut y = dictionary.apply(x)?;
    if noise_var > 0.0 {
        for v in y.iter_mut() {
            *v += complex_gaussian(rng, noise_var);
        }
    }
    Ok(Measurement { y, noise_var, snr_db })
}

/// Direct linear convolution, used to cross-check the Toeplitz blocks.
pub fn convolve(pilot: &[f64], channel: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); pilot.len() + channel.len() - 1];
    for (i, &s) in pilot.iter().enumerate() {
        for (j, &h) in channel.iter().enumerate() {
            out[i + j] += h * s;
        }
    }
    out
}
