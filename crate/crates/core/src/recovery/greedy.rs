use std::time::Instant;

use nalgebra::DVector;
use num_complex::Complex64;

use super::linalg::{least_squares, select_columns};
use super::{check_measurement, RecoveryResult, SolverParams};
use crate::error::{Error, Result};
use crate::sysmodel::Dictionary;

/// Selection state shared by OMP and BOMP: chosen columns, their fit and
/// the residual.
struct Fit {
    cols: Vec<usize>,
    coefficients: DVector<Complex64>,
    residual: DVector<Complex64>,
    rank_deficient: bool,
}

impl Fit {
    fn new(y: &DVector<Complex64>) -> Self {
        Fit { cols: Vec::new(), coefficients: DVector::zeros(0), residual: y.clone(), rank_deficient: false }
    }

    fn refit(&mut self, dictionary: &Dictionary, y: &DVector<Complex64>) -> Result<()> {
        let a = select_columns(dictionary, &self.cols);
        let ls = least_squares(&a, y)?;
        self.residual = y - &a * &ls.coefficients;
        self.coefficients = ls.coefficients;
        self.rank_deficient |= ls.rank_deficient;
        Ok(())
    }

    fn into_result(
        self,
        dictionary: &Dictionary,
        y: &DVector<Complex64>,
        iterations: usize,
        start: Instant,
    ) -> RecoveryResult {
        let mut x_hat = DVector::zeros(dictionary.cols());
        for (&col, &v) in self.cols.iter().zip(self.coefficients.iter()) {
            x_hat[col] = v;
        }
        let loop_residual = self.residual.norm();
        let mut result = RecoveryResult::finish(dictionary, y, x_hat, loop_residual, iterations, start.elapsed());
        // a zero coefficient on a chosen block still counts as selected
        let mut users: Vec<usize> = self.cols.iter().map(|&c| c / dictionary.block_size()).collect();
        users.dedup();
        users.sort_unstable();
        users.dedup();
        result.support_users = users;
        result.rank_deficient = self.rank_deficient;
        result
    }
}

/// Orthogonal matching pursuit over single columns.
///
/// Each step picks the unselected column maximising `|a_jᴴ r| / ‖a_j‖`
/// and re-fits all selected columns by least squares. Stops after
/// `element_budget` selections or once `‖r‖ ≤ residual_tol`.
pub fn omp(
    dictionary: &Dictionary,
    y: &DVector<Complex64>,
    element_budget: usize,
    params: &SolverParams,
) -> Result<RecoveryResult> {
    let start = Instant::now();
    check_measurement(dictionary, y)?;
    params.validate()?;
    if element_budget == 0 || element_budget > dictionary.cols() {
        return Err(Error::config(format!(
            "element budget {element_budget} outside 1..={}",
            dictionary.cols()
        )));
    }
    let a = dictionary.matrix();
    let inv_norms: Vec<f64> = a
        .column_iter()
        .map(|c| {
            let n = c.norm();
            if n > 0.0 { 1.0 / n } else { 0.0 }
        })
        .collect();
    let mut selected = vec![false; a.ncols()];
    let mut fit = Fit::new(y);
    let mut iterations = 0;

    while fit.cols.len() < element_budget && iterations < params.max_iterations {
        if fit.residual.norm() <= params.residual_tol {
            break;
        }
        let corr = a.ad_mul(&fit.residual);
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in corr.iter().enumerate() {
            if selected[j] || inv_norms[j] == 0.0 {
                continue;
            }
            let score = c.norm() * inv_norms[j];
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        let Some((j, _)) = best else { break };
        selected[j] = true;
        fit.cols.push(j);
        fit.refit(dictionary, y)?;
        iterations += 1;
    }
    let mut order: Vec<(usize, Complex64)> = fit.cols.iter().copied().zip(fit.coefficients.iter().copied()).collect();
    order.sort_by_key(|&(c, _)| c);
    fit.cols = order.iter().map(|&(c, _)| c).collect();
    fit.coefficients = DVector::from_iterator(order.len(), order.iter().map(|&(_, v)| v));
    Ok(fit.into_result(dictionary, y, iterations, start))
}

/// Block OMP: selects whole user blocks by `‖Ŝ_kᴴ r‖₂ / ‖Ŝ_k‖_F` and
/// re-fits all selected blocks jointly.
pub fn bomp(
    dictionary: &Dictionary,
    y: &DVector<Complex64>,
    block_budget: usize,
    params: &SolverParams,
) -> Result<RecoveryResult> {
    let start = Instant::now();
    check_measurement(dictionary, y)?;
    params.validate()?;
    let users = dictionary.user_count();
    if block_budget == 0 || block_budget > users {
        return Err(Error::config(format!("block budget {block_budget} outside 1..={users}")));
    }
    let l = dictionary.block_size();
    let a = dictionary.matrix();
    let inv_block_norms: Vec<f64> = (0..users)
        .map(|k| {
            let n = dictionary.block(k).norm();
            if n > 0.0 { 1.0 / n } else { 0.0 }
        })
        .collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut fit = Fit::new(y);
    let mut iterations = 0;

    while chosen.len() < block_budget && iterations < params.max_iterations {
        if fit.residual.norm() <= params.residual_tol {
            break;
        }
        let corr = a.ad_mul(&fit.residual);
        let mut best: Option<(usize, f64)> = None;
        for k in 0..users {
            if chosen.contains(&k) || inv_block_norms[k] == 0.0 {
                continue;
            }
            let energy: f64 = corr.rows(k * l, l).iter().map(|c| c.norm_sqr()).sum();
            let score = energy.sqrt() * inv_block_norms[k];
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((k, score));
            }
        }
        let Some((k, _)) = best else { break };
        chosen.push(k);
        chosen.sort_unstable();
        fit.cols = dictionary.block_columns(&chosen);
        fit.refit(dictionary, y)?;
        iterations += 1;
    }
    Ok(fit.into_result(dictionary, y, iterations, start))
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;
    use crate::rng::rng_from;
    use crate::sysmodel::{dictionary_for, GroundTruth, SystemConfig};

    fn identity_dictionary(n: usize) -> Dictionary {
        Dictionary::from_matrix(DMatrix::identity(n, n), 1).unwrap()
    }

    #[test]
    fn omp_identity() {
        let d = identity_dictionary(5);
        let mut y = DVector::zeros(5);
        y[3] = Complex64::new(1.0, 0.0);
        let r = omp(&d, &y, 1, &SolverParams::greedy()).unwrap();
        assert_eq!(r.support_users, vec![3]);
        assert!((&r.x_hat - &y).norm() < 1e-15);
        assert!(r.residual_norm < 1e-15);
    }

    #[test]
    fn zero_measurement_selects_nothing() {
        let (_, d) = dictionary_for(&SystemConfig::desk()).unwrap();
        let y = DVector::zeros(d.rows());
        for r in [
            omp(&d, &y, 6, &SolverParams::greedy()).unwrap(),
            bomp(&d, &y, 2, &SolverParams::greedy()).unwrap(),
        ] {
            assert!(r.support_users.is_empty());
            assert_eq!(r.residual_norm, 0.0);
            assert_eq!(r.iterations, 0);
        }
    }

    #[test]
    fn budgets_are_checked() {
        let (_, d) = dictionary_for(&SystemConfig::desk()).unwrap();
        let y = DVector::zeros(d.rows());
        assert!(omp(&d, &y, 0, &SolverParams::greedy()).is_err());
        assert!(omp(&d, &y, d.cols() + 1, &SolverParams::greedy()).is_err());
        assert!(bomp(&d, &y, 21, &SolverParams::greedy()).is_err());
        assert!(bomp(&d, &DVector::zeros(3), 1, &SolverParams::greedy()).is_err());
    }

    #[test]
    fn bomp_single_user_is_found_first() {
        let config = SystemConfig::paper_scale();
        let (_, d) = dictionary_for(&config).unwrap();
        let mut rng = rng_from(10);
        let mut hits = 0;
        for _ in 0..200 {
            let truth = GroundTruth::sample(&config, 1, &mut rng).unwrap();
            let y = d.apply(&truth.x).unwrap();
            let r = bomp(&d, &y, 1, &SolverParams::greedy()).unwrap();
            if r.support_users == truth.active_set {
                hits += 1;
                assert!(r.residual_norm < 1e-9 * y.norm().max(1.0));
            }
        }
        assert!(hits >= 198, "{hits}");
    }

    #[test]
    fn structure_and_residual_bookkeeping() {
        let config = SystemConfig::desk();
        let (_, d) = dictionary_for(&config).unwrap();
        let mut rng = rng_from(12);
        for _ in 0..50 {
            let truth = GroundTruth::sample(&config, 2, &mut rng).unwrap();
            let y = d.apply(&truth.x).unwrap() + DVector::from_fn(d.rows(), |_, _| crate::sysmodel::complex_gaussian(&mut rng, 0.1));
            let r = omp(&d, &y, 6, &SolverParams::greedy()).unwrap();
            assert!(r.x_hat.iter().filter(|v| v.norm() > 0.0).count() <= 6);
            assert!((r.residual_norm - r.loop_residual).abs() <= 1e-10 * r.residual_norm.max(1e-300));
            let r = bomp(&d, &y, 2, &SolverParams::greedy()).unwrap();
            assert!(r.support_users.len() <= 2);
            assert!((r.residual_norm - r.loop_residual).abs() <= 1e-10 * r.residual_norm.max(1e-300));
        }
    }
}
