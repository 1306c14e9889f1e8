use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::sysmodel::Dictionary;

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub coefficients: DVector<Complex64>,
    pub rank_deficient: bool,
}

/// Minimum-norm least-squares solution through the SVD. Singular values
/// below `max(m, n)·ε·σ_max` are treated as zero.
pub fn least_squares(a: &DMatrix<Complex64>, b: &DVector<Complex64>) -> Result<LeastSquares> {
    if a.nrows() != b.len() {
        return Err(Error::dim(format!("A has {} rows, b has {}", a.nrows(), b.len())));
    }
    if a.ncols() == 0 {
        return Ok(LeastSquares { coefficients: DVector::zeros(0), rank_deficient: false });
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let eps = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let coefficients = svd
        .solve(b, eps)
        .map_err(|e| Error::dim(format!("SVD solve failed: {e}")))?;
    Ok(LeastSquares { coefficients, rank_deficient: rank < a.ncols() })
}

pub(crate) fn select_columns(dictionary: &Dictionary, cols: &[usize]) -> DMatrix<Complex64> {
    dictionary.matrix().select_columns(cols)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmseEstimate {
    pub x_hat: DVector<Complex64>,
    pub rank_deficient: bool,
}

/// Ridge estimate restricted to the blocks of `support_users`:
/// `x_S = (Ŝ_Sᴴ Ŝ_S + (σ²/σ_h²) I)⁻¹ Ŝ_Sᴴ y`, zero elsewhere.
pub fn mmse_estimate(
    dictionary: &Dictionary,
    y: &DVector<Complex64>,
    support_users: &[usize],
    noise_var: f64,
    prior_var: f64,
) -> Result<MmseEstimate> {
    super::check_measurement(dictionary, y)?;
    if support_users.is_empty() {
        return Err(Error::config("MMSE needs a non-empty support"));
    }
    if support_users.iter().any(|&k| k >= dictionary.user_count()) {
        return Err(Error::dim("support user out of range"));
    }
    if !(noise_var >= 0.0) || !(prior_var > 0.0) {
        return Err(Error::config("noise_var must be ≥ 0 and prior_var > 0"));
    }
    let cols = dictionary.block_columns(support_users);
    let a = select_columns(dictionary, &cols);
    let ratio = noise_var / prior_var;

    let (coefficients, rank_deficient) = if ratio == 0.0 {
        let ls = least_squares(&a, y)?;
        (ls.coefficients, ls.rank_deficient)
    } else {
        let mut gram = a.ad_mul(&a);
        for i in 0..gram.nrows() {
            gram[(i, i)] += Complex64::new(ratio, 0.0);
        }
        let rhs = a.ad_mul(y);
        match gram.clone().cholesky() {
            Some(chol) => (chol.solve(&rhs), false),
            None => {
                let ls = least_squares(&gram, &rhs)?;
                (ls.coefficients, true)
            }
        }
    };

    let mut x_hat = DVector::zeros(dictionary.cols());
    for (&col, &v) in cols.iter().zip(coefficients.iter()) {
        x_hat[col] = v;
    }
    Ok(MmseEstimate { x_hat, rank_deficient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::sysmodel::{complex_gaussian, dictionary_for, SystemConfig};

    fn orthonormal_dictionary() -> Dictionary {
        // unitary 4×4 (scaled Hadamard), blocks of 2
        let h = [1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0];
        let m = DMatrix::from_row_slice(4, 4, &h.map(|v| Complex64::new(v / 2.0, 0.0)));
        Dictionary::from_matrix(m, 2).unwrap()
    }

    #[test]
    fn orthonormal_closed_form() {
        let d = orthonormal_dictionary();
        let y = DVector::from_vec(vec![
            Complex64::new(1.0, 0.5),
            Complex64::new(-0.3, 2.0),
            Complex64::new(0.7, 0.0),
            Complex64::new(0.0, -1.0),
        ]);
        let noise_var = 0.4;
        let est = mmse_estimate(&d, &y, &[1], noise_var, 1.0).unwrap();
        let block = d.block(1);
        let expected = block.ad_mul(&y) / Complex64::new(1.0 + noise_var, 0.0);
        assert!((est.x_hat.rows(2, 2) - expected).norm() < 1e-12);
        assert!(est.x_hat.rows(0, 2).iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn zero_noise_is_least_squares() {
        let config = SystemConfig::desk();
        let (_, d) = dictionary_for(&config).unwrap();
        let mut rng = rng_from(3);
        let y = DVector::from_fn(d.rows(), |_, _| complex_gaussian(&mut rng, 1.0));
        let support = [2, 7, 11];
        let ridge = mmse_estimate(&d, &y, &support, 0.0, 1.0).unwrap();
        let a = select_columns(&d, &d.block_columns(&support));
        let ls = least_squares(&a, &y).unwrap();
        let direct = (a.ad_mul(&a)).try_inverse().unwrap() * a.ad_mul(&y);
        assert!((ls.coefficients - &direct).norm() < 1e-10);
        let cols = d.block_columns(&support);
        for (i, &col) in cols.iter().enumerate() {
            assert!((ridge.x_hat[col] - direct[i]).norm() < 1e-10);
        }
    }

    #[test]
    fn noiseless_consistency() {
        let config = SystemConfig::desk();
        let (_, d) = dictionary_for(&config).unwrap();
        let mut rng = rng_from(4);
        let mut x = DVector::zeros(d.cols());
        for col in d.block_columns(&[0, 5]) {
            x[col] = complex_gaussian(&mut rng, 1.0);
        }
        let y = d.apply(&x).unwrap();
        let est = mmse_estimate(&d, &y, &[0, 5], 0.0, 1.0).unwrap();
        assert!((est.x_hat - x).norm() < 1e-10);
        assert!(!est.rank_deficient);
    }

    #[test]
    fn rank_deficient_support_is_flagged() {
        // two identical blocks
        let col = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)]);
        let m = DMatrix::from_columns(&[col.clone(), col]);
        let d = Dictionary::from_matrix(m, 1).unwrap();
        let y = DVector::from_vec(vec![Complex64::new(2.0, 0.0), Complex64::new(4.0, 0.0), Complex64::new(0.0, 0.0)]);
        let est = mmse_estimate(&d, &y, &[0, 1], 0.0, 1.0).unwrap();
        assert!(est.rank_deficient);
        // minimum-norm split of the coefficient 2 across both columns
        assert!((est.x_hat[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((est.x_hat[1] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn empty_support_is_an_error() {
        let d = orthonormal_dictionary();
        assert!(mmse_estimate(&d, &DVector::zeros(4), &[], 0.1, 1.0).is_err());
    }
}
