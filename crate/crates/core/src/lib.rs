//! Compressive-sensing multiuser detection for grant-free massive
//! machine-type access.
//!
//! The crate is split into four layers:
//!
//! * [`sysmodel`] generates BPSK pilots, the stacked pilot-convolution
//!   dictionary, Rayleigh block channels, sporadic activity patterns and
//!   noise-calibrated measurements, and persists labelled datasets.
//! * [`recovery`] holds the iterative baselines (OMP, BOMP, IHT, BIHT), an
//!   exhaustive support oracle and the MMSE channel refinement.
//! * [`neural`] is a small feed-forward engine with exact backpropagation
//!   implementing the block-restrictive network (BRNN) and a plain DNN.
//! * [`bench`] drives timing, detection, channel-MSE and convergence
//!   experiments and writes CSV reports.

pub mod bench;
pub mod error;
pub mod neural;
pub mod recovery;
pub mod rng;
pub mod sysmodel;

pub use error::{Error, Result};
pub use num_complex::Complex64;

pub use neural::{Architecture, Network, TrainConfig, TrainingTrace};
pub use recovery::{RecoveryResult, SolverParams};
pub use sysmodel::{
    ActivityPolicy, Dataset, Dictionary, GroundTruth, Measurement, PilotSet, Split, SystemConfig,
};
