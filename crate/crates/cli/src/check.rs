//! Embedded self-tests. Nothing here writes to disk.

use std::fs;
use std::path::Path;

use csmud_core::neural::{
    block_activation_forward, gradcheck, read_model, write_model, ArchConfig, Network,
};
use csmud_core::recovery::{bomp, brute_force_oracle, SolverParams};
use csmud_core::rng::derived_rng;
use csmud_core::sysmodel::{dictionary_for, GroundTruth};
use csmud_core::{Architecture, SystemConfig};
use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed, detail: detail.into() }
    }
}

/// Every pattern in `{−1.5, 0, +1.5}^L` for `L = 1..=4`: the block passes
/// unchanged iff some entry is strictly positive.
pub fn block_activation_truth_table() -> CheckResult {
    let mut cases = 0;
    for l in 1..=4u32 {
        for p in 0..3usize.pow(l) {
            let block: Vec<f64> = (0..l).map(|i| ((p / 3usize.pow(i)) % 3) as f64 * 1.5 - 1.5).collect();
            let x = Array2::from_shape_vec((1, l as usize), block.clone()).expect("shape");
            let out = match block_activation_forward(x.view(), l as usize) {
                Ok((out, _)) => out,
                Err(e) => return CheckResult::new("block activation truth table", false, e.to_string()),
            };
            let expected = if block.iter().any(|&v| v > 0.0) { block.clone() } else { vec![0.0; l as usize] };
            if out.iter().copied().collect::<Vec<_>>() != expected {
                return CheckResult::new(
                    "block activation truth table",
                    false,
                    format!("L={l}: input {block:?} gave {out:?}"),
                );
            }
            cases += 1;
        }
    }
    CheckResult::new("block activation truth table", true, format!("{cases} patterns"))
}

pub fn gradient_checks(trials: usize, seed: u64) -> Vec<CheckResult> {
    gradcheck::check_all(trials, seed)
        .into_iter()
        .map(|r| {
            CheckResult::new(
                format!("gradient {}", r.layer),
                r.passed(),
                format!("{} trials, max relative error {:.2e}, {} redrawn", r.trials, r.max_rel_error, r.redrawn),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleComparison {
    pub trials: usize,
    pub oracle_exact_fit: usize,
    pub bomp_agrees: usize,
    /// Trials where BOMP's residual was not below the oracle's.
    pub oracle_not_worse: usize,
    pub max_oracle_residual: f64,
}

/// Noiseless K=8, L=2, Ns=8, n=2 trials: the exhaustive search must fit
/// every measurement exactly and never lose to BOMP on the residual.
pub fn oracle_comparison(trials: usize, seed: u64) -> csmud_core::Result<OracleComparison> {
    let config = SystemConfig { users: 8, pilot_len: 8, taps: 2, active: 2, snr_db: 10.0, seed };
    let (_, dictionary) = dictionary_for(&config)?;
    let params = SolverParams::greedy();
    let mut out = OracleComparison { trials, oracle_exact_fit: 0, bomp_agrees: 0, oracle_not_worse: 0, max_oracle_residual: 0.0 };
    for t in 0..trials {
        let mut rng = derived_rng(seed, 0x5e1f, t as u64);
        let truth = GroundTruth::sample(&config, config.active, &mut rng)?;
        let y = dictionary.apply(&truth.x)?;
        let oracle = brute_force_oracle(&dictionary, &y, config.active)?;
        let rel = oracle.residual_norm / y.norm().max(f64::MIN_POSITIVE);
        out.max_oracle_residual = out.max_oracle_residual.max(oracle.residual_norm);
        if oracle.residual_norm < 1e-9 || rel < 1e-9 {
            out.oracle_exact_fit += 1;
        }
        let greedy = bomp(&dictionary, &y, config.active, &params)?;
        if greedy.support_users == oracle.support_users {
            out.bomp_agrees += 1;
        }
        if oracle.residual_norm <= greedy.residual_norm + 1e-12 {
            out.oracle_not_worse += 1;
        }
    }
    Ok(out)
}

fn oracle_check(trials: usize, seed: u64) -> CheckResult {
    match oracle_comparison(trials, seed) {
        Ok(c) => CheckResult::new(
            "oracle micro-comparison",
            c.oracle_exact_fit == c.trials && c.oracle_not_worse == c.trials,
            format!(
                "oracle exact fit {}/{}, BOMP agreement {}/{} ({:.1}%)",
                c.oracle_exact_fit,
                c.trials,
                c.bomp_agrees,
                c.trials,
                100.0 * c.bomp_agrees as f64 / c.trials as f64
            ),
        ),
        Err(e) => CheckResult::new("oracle micro-comparison", false, e.to_string()),
    }
}

fn model_round_trip() -> CheckResult {
    let name = "model round trip";
    let cfg = ArchConfig { relu_width: Some(16), ..ArchConfig::default() };
    let result = Network::<f32>::build(Architecture::Brnn, 6, 2, 9, &cfg, 11).and_then(|net| {
        let mut bytes = Vec::new();
        write_model(&net, &mut bytes)?;
        let back = read_model::<f32>(&mut &bytes[..])?;
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        let corrupted = read_model::<f32>(&mut &bytes[..]);
        Ok((back == net, corrupted.is_err()))
    });
    match result {
        Ok((true, true)) => CheckResult::new(name, true, "exact reload, corruption detected"),
        Ok((same, caught)) => CheckResult::new(name, false, format!("reload exact: {same}, corruption detected: {caught}")),
        Err(e) => CheckResult::new(name, false, e.to_string()),
    }
}

/// Verifies every `*.model` file in `dir`, if the directory exists.
pub fn stored_models(dir: &Path) -> Vec<CheckResult> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "model"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = format!("model file {}", p.display());
            let bytes = match fs::read(&p) {
                Ok(b) => b,
                Err(e) => return CheckResult::new(name, false, e.to_string()),
            };
            let f32_result = read_model::<f32>(&mut &bytes[..]);
            let result = match f32_result {
                Err(csmud_core::Error::Shape(_)) => read_model::<f64>(&mut &bytes[..]).map(|n| (n.arch, n.batches_seen)),
                other => other.map(|n| (n.arch, n.batches_seen)),
            };
            match result {
                Ok((arch, batches)) => CheckResult::new(name, true, format!("{} after {batches} batches", arch.name())),
                Err(e) => CheckResult::new(name, false, e.to_string()),
            }
        })
        .collect()
}

/// The full self-test list. `models_dir` is scanned for stored models.
pub fn run_all(seed: u64, models_dir: &Path) -> Vec<CheckResult> {
    let mut results = vec![block_activation_truth_table()];
    results.extend(gradient_checks(20, seed));
    results.push(oracle_check(200, seed));
    results.push(model_round_trip());
    results.extend(stored_models(models_dir));
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_table_passes() {
        let r = block_activation_truth_table();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.detail, "120 patterns");
    }

    #[test]
    fn round_trip_passes() {
        assert!(model_round_trip().passed);
    }

    #[test]
    fn corrupted_model_reported() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::<f32>::build(Architecture::Dnn, 4, 2, 5, &ArchConfig::default(), 1).unwrap();
        let mut bytes = Vec::new();
        write_model(&net, &mut bytes).unwrap();
        fs::write(dir.path().join("good.model"), &bytes).unwrap();
        let at = bytes.len() - 40;
        bytes[at] ^= 0xff;
        fs::write(dir.path().join("bad.model"), &bytes).unwrap();
        let r = stored_models(dir.path());
        assert_eq!(r.len(), 2);
        assert!(!r[0].passed && r[0].detail.contains("integrity"), "{r:?}");
        assert!(r[1].passed);
        assert!(stored_models(&dir.path().join("absent")).is_empty());
    }
}
