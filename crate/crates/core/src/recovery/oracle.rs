use std::time::Instant;

use nalgebra::DVector;
use num_complex::Complex64;

use super::linalg::{least_squares, select_columns};
use super::{check_measurement, RecoveryResult};
use crate::error::{Error, Result};
use crate::sysmodel::Dictionary;

/// Largest number of candidate supports the oracle will enumerate.
pub const ORACLE_LIMIT: u128 = 1_000_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Advances `combo` to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exhaustive search over every `block_budget`-subset of users: least
/// squares on each, keep the smallest residual. Earlier (lexicographically
/// smaller) supports win ties.
pub fn brute_force_oracle(
    dictionary: &Dictionary,
    y: &DVector<Complex64>,
    block_budget: usize,
) -> Result<RecoveryResult> {
    let start = Instant::now();
    check_measurement(dictionary, y)?;
    let users = dictionary.user_count();
    if block_budget > users {
        return Err(Error::config(format!("block budget {block_budget} exceeds K = {users}")));
    }
    let candidates = binomial(users, block_budget);
    if candidates > ORACLE_LIMIT {
        return Err(Error::CombinatorialBudget { candidates, limit: ORACLE_LIMIT });
    }

    let mut combo: Vec<usize> = (0..block_budget).collect();
    let mut best: Option<(f64, Vec<usize>, DVector<Complex64>, bool)> = None;
    let mut evaluated = 0;
    loop {
        let cols = dictionary.block_columns(&combo);
        let a = select_columns(dictionary, &cols);
        let ls = least_squares(&a, y)?;
        let residual = (y - &a * &ls.coefficients).norm();
        evaluated += 1;
        if best.as_ref().map_or(true, |(r, ..)| residual < *r) {
            best = Some((residual, combo.clone(), ls.coefficients, ls.rank_deficient));
        }
        if !next_combination(&mut combo, users) {
            break;
        }
    }

    let (loop_residual, support, coefficients, rank_deficient) = best.expect("at least one candidate");
    let mut x_hat = DVector::zeros(dictionary.cols());
    for (&col, &v) in dictionary.block_columns(&support).iter().zip(coefficients.iter()) {
        x_hat[col] = v;
    }
    let mut result = RecoveryResult::finish(dictionary, y, x_hat, loop_residual, evaluated, start.elapsed());
    result.support_users = support;
    result.rank_deficient = rank_deficient;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::sysmodel::{dictionary_for, GroundTruth, SystemConfig};

    #[test]
    fn enumeration_counts() {
        assert_eq!(binomial(8, 2), 28);
        assert_eq!(binomial(100, 6), 1_192_052_400);
        let mut combo = vec![0, 1];
        let mut count = 1;
        while next_combination(&mut combo, 8) {
            count += 1;
        }
        assert_eq!(count, 28);
    }

    #[test]
    fn single_user_is_found_with_zero_residual() {
        let config = SystemConfig { users: 3, pilot_len: 5, taps: 2, active: 1, snr_db: 10.0, seed: 1 };
        let (_, d) = dictionary_for(&config).unwrap();
        let truth = GroundTruth::sample(&config, 1, &mut rng_from(0)).unwrap();
        let mut x = DVector::zeros(6);
        x.rows_mut(2, 2).copy_from(&truth.h.rows(2, 2));
        let y = d.apply(&x).unwrap();
        let r = brute_force_oracle(&d, &y, 1).unwrap();
        assert_eq!(r.support_users, vec![1]);
        assert!(r.residual_norm < 1e-12);
        assert_eq!(r.iterations, 3);
    }

    #[test]
    fn counts_candidates_and_rejects_huge_searches() {
        let config = SystemConfig { users: 8, pilot_len: 8, taps: 2, active: 2, snr_db: 10.0, seed: 1 };
        let (_, d) = dictionary_for(&config).unwrap();
        let truth = GroundTruth::sample(&config, 2, &mut rng_from(2)).unwrap();
        let r = brute_force_oracle(&d, &d.apply(&truth.x).unwrap(), 2).unwrap();
        assert_eq!(r.iterations, 28);
        assert_eq!(r.support_users, truth.active_set);
        assert!(r.residual_norm < 1e-9);

        let (_, big) = dictionary_for(&SystemConfig::paper_scale()).unwrap();
        assert!(matches!(
            brute_force_oracle(&big, &DVector::zeros(45), 6),
            Err(Error::CombinatorialBudget { .. })
        ));
    }
}
