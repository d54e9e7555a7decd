use std::collections::HashSet;

use ndarray::Array2;
use proptest::prelude::*;

use evidential_cp::conformal::coverage_distribution;
use evidential_cp::dataset::{DataFormat, LogitDataset, SplitSpec};
use evidential_cp::runner::synth::{synth, SynthConfig};
use evidential_cp::runner::{run_on, ExperimentConfig};
use evidential_cp::scores::Method;

fn dataset(rows: usize, classes: usize, values: Vec<f64>, labels: Vec<usize>) -> LogitDataset {
    let labels = labels.into_iter().map(|l| l % classes).collect();
    LogitDataset::new(Array2::from_shape_vec((rows, classes), values).unwrap(), labels).unwrap()
}

fn arb_dataset() -> impl Strategy<Value = LogitDataset> {
    (1usize..30, 2usize..8).prop_flat_map(|(rows, classes)| {
        (
            // binary logits are stored as f32
            prop::collection::vec(prop::num::f32::ANY.prop_filter("finite", |v| v.is_finite()).prop_map(f64::from), rows * classes),
            prop::collection::vec(0usize..1000, rows),
        )
            .prop_map(move |(v, l)| dataset(rows, classes, v, l))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_files_round_trip_byte_identically(ds in arb_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let (z1, y1) = (dir.path().join("a.cplt"), dir.path().join("a.cplb"));
        let (z2, y2) = (dir.path().join("b.cplt"), dir.path().join("b.cplb"));
        ds.write_binary(&z1, &y1).unwrap();
        let back = LogitDataset::load(&z1, &y1, Some(DataFormat::Binary)).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert!(back.logits().iter().zip(ds.logits().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        back.write_binary(&z2, &y2).unwrap();
        prop_assert_eq!(std::fs::read(&z1).unwrap(), std::fs::read(&z2).unwrap());
        prop_assert_eq!(std::fs::read(&y1).unwrap(), std::fs::read(&y2).unwrap());
    }

    #[test]
    fn csv_files_round_trip_exactly(ds in arb_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let (z, y) = (dir.path().join("z.csv"), dir.path().join("y.csv"));
        ds.write_csv(&z, &y).unwrap();
        let back = LogitDataset::load(&z, &y, None).unwrap();
        prop_assert_eq!(back, ds);
    }
}

#[test]
fn splits_partition_every_index() {
    for n in [2usize, 3, 7, 10, 99, 100, 500, 1000] {
        for seed in 0..100u64 {
            for fraction in [0.3, 0.5, 0.9] {
                let spec = SplitSpec::new(fraction, seed, seed % 7);
                let Ok(split) = spec.split(n) else {
                    let n_cal = spec.calibration_size(n);
                    assert!(n_cal == 0 || n_cal >= n, "n={n} f={fraction} rejected a valid split");
                    continue;
                };
                assert_eq!(split.calibration.len(), spec.calibration_size(n));
                let cal: HashSet<usize> = split.calibration.iter().copied().collect();
                let val: HashSet<usize> = split.validation.iter().copied().collect();
                assert!(cal.is_disjoint(&val));
                assert_eq!(cal.len() + val.len(), n);
                assert!(cal.iter().chain(&val).all(|&i| i < n));
            }
        }
    }
}

#[test]
fn splits_differ_across_trials_and_seeds() {
    let a = SplitSpec::new(0.3, 1, 0).split(1000).unwrap();
    assert_eq!(a, SplitSpec::new(0.3, 1, 0).split(1000).unwrap());
    assert_ne!(a, SplitSpec::new(0.3, 1, 1).split(1000).unwrap());
    assert_ne!(a, SplitSpec::new(0.3, 2, 0).split(1000).unwrap());
}

#[test]
fn coverage_rarely_falls_two_beta_deviations_short() {
    let data = synth(&SynthConfig::new(10, 2.25, 32_000, 606)).unwrap();
    let methods = vec![Method::Ecp, Method::Aps, Method::Raps, Method::Las];
    let cfg = ExperimentConfig {
        methods: methods.clone(),
        trials: 200,
        calibration_fraction: 2_000.0 / 32_000.0,
        ..ExperimentConfig::new("synthetic", "synthetic")
    };
    let report = run_on(&data, &cfg).unwrap();
    let beta = coverage_distribution(2_000, 0.1).unwrap();
    let floor = 0.9 - 2.0 * beta.std_dev();
    for m in methods {
        let cov: Vec<f64> = report.per_trial.iter().filter(|r| r.method == m).map(|r| r.coverage).collect();
        let above = cov.iter().filter(|&&c| c >= floor).count() as f64 / cov.len() as f64;
        assert!(above > 0.95, "{m}: {above} of trials reach {floor}");
        let mean = cov.iter().sum::<f64>() / cov.len() as f64;
        let sd = (cov.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (cov.len() - 1) as f64).sqrt();
        let se = sd / (cov.len() as f64).sqrt();
        assert!((mean - beta.mean()).abs() <= 3.0 * se, "{m}: mean {mean} vs {}", beta.mean());
    }
}
