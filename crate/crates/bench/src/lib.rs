//! Fixtures shared by the criterion benches.

use csmud_core::neural::{featurize_batch, ArchConfig};
use csmud_core::sysmodel::{dictionary_for, generate_dataset, ActivityPolicy, Calibration, Dictionary, Sample, Split};
use csmud_core::{Architecture, Network, Result, SystemConfig};
use ndarray::Array2;

/// The large system used for timing: 100 users, 40-chip pilots, 6 taps.
pub fn large_system(active: usize) -> SystemConfig {
    SystemConfig { users: 100, pilot_len: 40, taps: 6, active, snr_db: 10.0, seed: 11 }
}

pub struct Fixture {
    pub config: SystemConfig,
    pub dictionary: Dictionary,
    pub samples: Vec<Sample>,
    pub features: Array2<f32>,
}

impl Fixture {
    pub fn new(config: SystemConfig, count: usize) -> Result<Self> {
        let (_, dictionary) = dictionary_for(&config)?;
        let data = generate_dataset(&config, Split::Test, ActivityPolicy::Fixed(config.active), count, Calibration::Empirical)?;
        let m = config.measurement_len();
        let features = featurize_batch(data.samples.iter().map(|s| s.y.as_slice()), m);
        Ok(Fixture { config, dictionary, samples: data.samples, features })
    }

    /// Untrained weights; inference cost does not depend on their values.
    pub fn network(&self, arch: Architecture) -> Result<Network<f32>> {
        let c = &self.config;
        Network::build(arch, c.users, c.taps, c.measurement_len(), &ArchConfig::default(), 5)
    }
}
