//! Sparse and block-sparse recovery of `x` from `y = Ŝx + n`.
//!
//! All solvers break ties toward the smallest index and never see the true
//! support; only the budget (elements or blocks) is supplied.

mod greedy;
mod linalg;
mod oracle;
mod thresholding;

pub use greedy::{bomp, omp};
pub use linalg::{least_squares, mmse_estimate, LeastSquares, MmseEstimate};
pub use oracle::{binomial, brute_force_oracle, ORACLE_LIMIT};
pub use thresholding::{biht, block_hard_threshold, default_step_size, hard_threshold, iht, spectral_norm_sq};

use std::time::Duration;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysmodel::Dictionary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub max_iterations: usize,
    /// Gradient step for IHT/BIHT; `None` means `1/σ_max(Ŝ)²`.
    pub step_size: Option<f64>,
    /// Residual-norm stop for OMP/BOMP, relative-change stop for IHT/BIHT.
    pub residual_tol: f64,
}

impl SolverParams {
    pub fn greedy() -> Self {
        SolverParams { max_iterations: usize::MAX, step_size: None, residual_tol: 1e-8 }
    }

    pub fn thresholding() -> Self {
        SolverParams { max_iterations: 100, step_size: None, residual_tol: 1e-6 }
    }

    pub fn with_step_size(mut self, step: f64) -> Self {
        self.step_size = Some(step);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        if let Some(step) = self.step_size {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::config("step_size must be positive"));
            }
        }
        if !(self.residual_tol >= 0.0) {
            return Err(Error::config("residual_tol must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryResult {
    pub support_users: Vec<usize>,
    pub x_hat: DVector<Complex64>,
    /// `‖y − Ŝ·x_hat‖₂`, recomputed from `x_hat`.
    pub residual_norm: f64,
    /// The residual norm the solver loop itself tracked.
    pub loop_residual: f64,
    pub iterations: usize,
    pub elapsed: Duration,
    /// A least-squares fit hit a rank-deficient system and fell back to
    /// the pseudo-inverse.
    pub rank_deficient: bool,
    /// IHT/BIHT residual grew for ten consecutive iterations.
    pub diverged: bool,
}

impl RecoveryResult {
    pub(crate) fn finish(
        dictionary: &Dictionary,
        y: &DVector<Complex64>,
        x_hat: DVector<Complex64>,
        loop_residual: f64,
        iterations: usize,
        elapsed: Duration,
    ) -> Self {
        let residual_norm = (y - dictionary.matrix() * &x_hat).norm();
        let support_users = nonzero_blocks(&x_hat, dictionary.block_size());
        RecoveryResult {
            support_users,
            x_hat,
            residual_norm,
            loop_residual,
            iterations,
            elapsed,
            rank_deficient: false,
            diverged: false,
        }
    }
}

pub(crate) fn check_measurement(dictionary: &Dictionary, y: &DVector<Complex64>) -> Result<()> {
    if y.len() != dictionary.rows() {
        return Err(Error::dim(format!(
            "y has {} entries, Ŝ has {} rows",
            y.len(),
            dictionary.rows()
        )));
    }
    Ok(())
}

fn nonzero_blocks(x: &DVector<Complex64>, block: usize) -> Vec<usize> {
    x.as_slice()
        .chunks(block)
        .enumerate()
        .filter(|(_, b)| b.iter().any(|v| *v != Complex64::new(0.0, 0.0)))
        .map(|(k, _)| k)
        .collect()
}

/// `‖x_k‖²` for every length-`block` block of `x`.
pub fn block_energies(x: &[Complex64], block: usize) -> Result<Vec<f64>> {
    if block == 0 || x.len() % block != 0 {
        return Err(Error::dim(format!("length {} is not a multiple of {block}", x.len())));
    }
    Ok(x.chunks(block).map(|b| b.iter().map(|v| v.norm_sqr()).sum()).collect())
}

/// Indices of the `n` largest scores, ascending; ties go to the smaller
/// index. NaN scores rank last.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a], scores[b]);
        match (sa.is_nan(), sb.is_nan()) {
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)),
        }
    });
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Users owning the `n` most energetic blocks of `x_hat`.
pub fn detect_support(x_hat: &[Complex64], block: usize, n: usize) -> Result<Vec<usize>> {
    let energies = block_energies(x_hat, block)?;
    if n > energies.len() {
        return Err(Error::config(format!("n = {n} exceeds K = {}", energies.len())));
    }
    Ok(top_n(&energies, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn block_energy_examples() {
        assert_eq!(block_energies(&[c(0.0); 6], 2).unwrap(), vec![0.0; 3]);
        let mut x = vec![c(0.0); 8];
        x[7] = Complex64::new(3.0, 4.0);
        assert_eq!(block_energies(&x, 2).unwrap(), vec![0.0, 0.0, 0.0, 25.0]);
        let x: Vec<_> = (0..9).map(|i| Complex64::new(i as f64, -(i as f64) / 2.0)).collect();
        let total: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        assert!((block_energies(&x, 3).unwrap().iter().sum::<f64>() - total).abs() < 1e-12);
        assert!(block_energies(&x, 2).is_err());
    }

    #[test]
    fn detect_support_examples() {
        let from_energies = |e: &[f64]| -> Vec<Complex64> { e.iter().map(|v| c(v.sqrt())).collect() };
        let x = from_energies(&[0.0, 5.0, 0.0, 2.0]);
        assert_eq!(detect_support(&x, 1, 1).unwrap(), vec![1]);
        assert_eq!(detect_support(&x, 1, 2).unwrap(), vec![1, 3]);
        let flat = from_energies(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(detect_support(&flat, 1, 2).unwrap(), vec![0, 1]);
        assert!(detect_support(&flat, 1, 5).is_err());
    }

    #[test]
    fn top_n_orders_nan_last() {
        assert_eq!(top_n(&[f64::NAN, 0.1, 0.9], 2), vec![1, 2]);
        assert_eq!(top_n(&[0.1, 0.9, 0.05, 0.7], 2), vec![1, 3]);
    }

    #[test]
    fn params_validation() {
        assert!(SolverParams::greedy().validate().is_ok());
        assert!(SolverParams { max_iterations: 0, ..SolverParams::thresholding() }.validate().is_err());
        assert!(SolverParams::thresholding().with_step_size(-1.0).validate().is_err());
    }
}
