use std::path::PathBuf;

use csmud_core::bench::{
    bernoulli_halfwidth, emit_report, run_detection_sweep, run_mse_sweep, ExperimentConfig, Method, Models, SweepAxis,
};
use csmud_core::SystemConfig;
use proptest::prelude::*;

fn tiny(seed: u64, methods: Vec<Method>, noiseless: bool) -> ExperimentConfig {
    ExperimentConfig {
        system: SystemConfig { users: 8, pilot_len: 8, taps: 2, active: 2, snr_db: 10.0, seed },
        methods,
        sweep_axis: SweepAxis::Active,
        sweep_values: vec![1, 2, 3],
        trials: 40,
        output_dir: PathBuf::from("unused"),
        seed: seed.wrapping_add(1),
        noiseless,
        normalized_mse: true,
    }
}

const CLASSICAL: [Method; 6] = [Method::Omp, Method::Bomp, Method::Iht, Method::Biht, Method::Oracle, Method::Genie];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rows_are_consistent(seed in any::<u64>(), noiseless in any::<bool>()) {
        let exp = tiny(seed, CLASSICAL.to_vec(), noiseless);
        for row in run_detection_sweep(&exp, &Models::new()).unwrap() {
            prop_assert!(row.exact_set_success_rate <= row.user_hit_ratio + 1e-15);
            prop_assert_eq!(row.trials, exp.trials);
            prop_assert_eq!(row.ci_halfwidth, bernoulli_halfwidth(row.exact_set_success_rate, row.trials));
            prop_assert!(row.channel_mse.is_none());
        }
    }

    #[test]
    fn genie_dominates_on_noiseless_data(seed in any::<u64>()) {
        let exp = tiny(seed, CLASSICAL.to_vec(), true);
        let rows = run_mse_sweep(&exp, &Models::new()).unwrap();
        for &v in &exp.sweep_values {
            let at = |m: Method| rows.iter().find(|r| r.method == m && r.sweep_value == v).unwrap();
            let genie = at(Method::Genie);
            prop_assert_eq!(genie.exact_set_success_rate, 1.0);
            prop_assert_eq!(genie.user_hit_ratio, 1.0);
            // ±1 pilots can make two supports fit exactly, so only the
            // genie is guaranteed to be best
            for m in CLASSICAL {
                prop_assert!(genie.channel_mse.unwrap() <= at(m).channel_mse.unwrap() + 1e-12, "{:?} at n={}", m, v);
            }
        }
    }
}

#[test]
fn single_method_report() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny(3, vec![Method::Iht], false);
    let rows = run_detection_sweep(&exp, &Models::new()).unwrap();
    let (csv, manifest) = emit_report(&rows, &exp, dir.path(), "iht", &[]).unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 1 + exp.sweep_values.len());
    assert!(lines[1..].iter().all(|l| l.starts_with("IHT,")));
    assert!(manifest.exists());
}

#[test]
fn network_methods_need_models() {
    let exp = tiny(3, vec![Method::Brnn], false);
    assert!(matches!(
        run_detection_sweep(&exp, &Models::new()),
        Err(csmud_core::Error::MissingArtifact(_))
    ));
}
