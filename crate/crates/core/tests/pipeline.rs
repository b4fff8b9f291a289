//! Statistical recovery and end-to-end behaviour.

use curemark::cure::{fit_cure_em, CureData, EmOptions};
use curemark::data::build_landmark_dataset;
use curemark::experiment::{cross_validate, run_replicate, scenario_grid};
use curemark::mixed::{fit_lmm, CovariateSlice, MixedModelSpec, SubjectSeries};
use curemark::prediction::{LandmarkModel, ModelOptions, SummaryKind};
use curemark::simulation::{generate_dataset, ScenarioSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

#[test]
fn lmm_recovers_variance_components() {
    // y = 2 - 0.5 t + b0 + b1 t + e, Sigma_b = [[1, 0.2], [0.2, 0.25]], sigma^2 = 0.3.
    let reps = 40;
    let fits: Vec<_> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + r);
            let series = (0..120)
                .map(|i| {
                    let z0: f64 = rng.sample(StandardNormal);
                    let z1: f64 = rng.sample(StandardNormal);
                    let (b0, b1) = (z0, 0.2 * z0 + 0.458_257_569_495_584 * z1);
                    let times: Vec<f64> = (0..6).map(|j| j as f64 * 0.6).collect();
                    let values = times
                        .iter()
                        .map(|t| {
                            let e: f64 = rng.sample(StandardNormal);
                            2.0 - 0.5 * t + b0 + b1 * t + 0.3f64.sqrt() * e
                        })
                        .collect();
                    SubjectSeries {
                        subject_id: format!("s{i}"),
                        times,
                        values,
                        baseline: vec![],
                    }
                })
                .collect();
            let slice = CovariateSlice {
                covariate: "y".into(),
                series,
            };
            fit_lmm(&slice, &MixedModelSpec::default()).unwrap()
        })
        .collect();
    let mean = |f: &dyn Fn(&curemark::mixed::MixedModelFit) -> f64| fits.iter().map(f).sum::<f64>() / reps as f64;
    assert!((mean(&|f| f.gamma[0]) - 2.0).abs() < 0.05);
    assert!((mean(&|f| f.gamma[1]) + 0.5).abs() < 0.03);
    assert!((mean(&|f| f.sigma_b()[(0, 0)]) - 1.0).abs() < 0.06);
    assert!((mean(&|f| f.sigma_b()[(0, 1)]) - 0.2).abs() < 0.03);
    assert!((mean(&|f| f.sigma_b()[(1, 1)]) - 0.25).abs() < 0.02);
    assert!((mean(&|f| f.sigma_eps_sq) - 0.3).abs() < 0.01);
}

/// Mixture cure data with exponential latency and censoring well past the
/// support of the uncured event times.
fn cure_sample(seed: u64, m: usize) -> CureData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(m, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z = DMatrix::from_fn(m, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut times = Vec::with_capacity(m);
    let mut events = Vec::with_capacity(m);
    for i in 0..m {
        let pi = 1.0 / (1.0 + (-(0.5 + x[(i, 0)])).exp());
        let uncured = rng.random::<f64>() < pi;
        let c = 4.0 + 4.0 * rng.random::<f64>();
        let t = if uncured {
            // Truncated at 3 so every uncured subject fails before censoring starts.
            let rate = (0.8 * z[(i, 0)]).exp();
            loop {
                let t = -(1.0 - rng.random::<f64>()).ln() / rate;
                if t < 3.0 {
                    break t;
                }
            }
        } else {
            f64::INFINITY
        };
        times.push(t.min(c));
        events.push(t <= c);
    }
    CureData::new(times, events, x, z).unwrap()
}

#[test]
fn em_recovers_incidence_parameters() {
    let reps = 20;
    let est: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let fit = fit_cure_em(&cure_sample(77 + r, 1500), 1, &EmOptions::default()).unwrap();
            assert!(fit.converged);
            (fit.alpha0, fit.alpha[0])
        })
        .collect();
    let a0 = est.iter().map(|e| e.0).sum::<f64>() / reps as f64;
    let a1 = est.iter().map(|e| e.1).sum::<f64>() / reps as f64;
    assert!((a0 - 0.5).abs() < 0.05, "alpha0 {a0}");
    assert!((a1 - 1.0).abs() < 0.06, "alpha1 {a1}");
}

#[test]
fn landmark_fits_are_reproducible_and_informative() {
    let spec = ScenarioSpec::from_id(9, 300, 1, 42).unwrap();
    let (train, valid) = generate_dataset(&spec, 0).unwrap();
    let ld = build_landmark_dataset(&train.longitudinal, &train.subjects, spec.landmark).unwrap();
    let test = build_landmark_dataset(&valid.longitudinal, &valid.subjects, spec.landmark).unwrap();
    let opts = ModelOptions::default();
    for kind in [SummaryKind::Locf, SummaryKind::ModelBased] {
        let a = LandmarkModel::fit(&ld, kind, &opts).unwrap();
        let b = LandmarkModel::fit(&ld, kind, &opts).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        let back: LandmarkModel = serde_json::from_str(&json).unwrap();
        let grid = [1.0, 2.0];
        assert_eq!(a.predict(&test, &grid).unwrap(), back.predict(&test, &grid).unwrap());
        // Incidence effects (-1, 0, 1, 0) should at least have the right signs.
        assert!(a.cure.alpha[0] < 0.0 && a.cure.alpha[2] > 0.0, "{:?}", a.cure.alpha);
    }
}

#[test]
fn replicates_are_pure_functions_of_the_spec() {
    let spec = ScenarioSpec::from_id(4, 150, 2, 9).unwrap();
    let grid = scenario_grid(&spec, 5).unwrap();
    let kinds = [SummaryKind::Locf, SummaryKind::ModelBased];
    let a = run_replicate(&spec, 1, &kinds, &grid, &ModelOptions::default()).unwrap();
    let b = run_replicate(&spec, 1, &kinds, &grid, &ModelOptions::default()).unwrap();
    assert_eq!(a, b);
    let c = run_replicate(&spec, 0, &kinds, &grid, &ModelOptions::default()).unwrap();
    assert_ne!(a.reports, c.reports);
}

#[test]
fn cross_validation_uses_every_fold() {
    let spec = ScenarioSpec::from_id(10, 160, 1, 3).unwrap();
    let (train, _) = generate_dataset(&spec, 0).unwrap();
    let out = cross_validate(
        &train.longitudinal,
        &train.subjects,
        spec.landmark,
        &[SummaryKind::Locf],
        4,
        2,
        5,
        &[1.0, 3.0],
        &ModelOptions::default(),
    )
    .unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].failed_folds, 0);
    assert_eq!(out[0].c_index.n, 8);
    assert!(out[0].c_index.mean > 0.55);
}

#[test]
fn reml_does_not_stall_with_a_vanishing_variance() {
    // This slice once sent the log-Cholesky intercept entry to -22 on the
    // first step, where its gradient is numerically zero.
    let spec = ScenarioSpec::from_id(9, 300, 100, 1).unwrap();
    let (train, _) = generate_dataset(&spec, 8).unwrap();
    let ld = build_landmark_dataset(&train.longitudinal, &train.subjects, spec.landmark).unwrap();
    let slice = CovariateSlice::from_history(ld.history(), ld.subjects(), "y2", &[]).unwrap();
    let fit = fit_lmm(&slice, &MixedModelSpec::default()).unwrap();
    assert!(fit.convergence.iterations < 50);
    assert!(fit.sigma_b()[(0, 0)] > 0.5, "{:?}", fit.sigma_b());
}
