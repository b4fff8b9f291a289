//! Estimators checked against independent brute-force oracles.

mod common;

use common::model::*;
use common::{minimize, rel};
use curemark::cure::{mstep_incidence, mstep_latency, WeightedSurvival};
use curemark::mixed::{fit_lmm, predict_subject_random_effects, MixedModelSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn reml_matches_grid_search() {
    let slice = reml_fixture(11);
    let fit = fit_lmm(&slice, &MixedModelSpec::default()).unwrap();
    assert!(!fit.convergence.boundary, "fixture should have an interior optimum");

    let obj = |t: &[f64]| {
        let (sb, s2) = unpack(t);
        -reml_loglik(&slice, &sb, s2)
    };
    let mut best = (vec![0.0; 4], f64::INFINITY);
    for a in 0..13 {
        for b in 0..9 {
            for c in 0..13 {
                for d in 0..13 {
                    let t = [
                        -2.0 + 0.3 * a as f64,
                        -2.0 + 0.5 * b as f64,
                        -4.0 + 0.4 * c as f64,
                        -4.0 + 0.4 * d as f64,
                    ];
                    let v = obj(&t);
                    if v < best.1 {
                        best = (t.to_vec(), v);
                    }
                }
            }
        }
    }
    let (theta, _) = minimize(obj, &best.0, 0.1, 1e-14);
    let (sb_oracle, s2_oracle) = unpack(&theta);

    let sb = fit.sigma_b();
    let scale = sb_oracle.amax();
    for i in 0..2 {
        for j in 0..2 {
            assert!(
                rel(sb[(i, j)], sb_oracle[(i, j)], scale) < 1e-3,
                "Sigma_b[{i},{j}]: {} vs oracle {}",
                sb[(i, j)],
                sb_oracle[(i, j)]
            );
        }
    }
    assert!(rel(fit.sigma_eps_sq, s2_oracle, 0.0) < 1e-3, "{} vs {}", fit.sigma_eps_sq, s2_oracle);
    assert!(reml_loglik(&slice, &sb, fit.sigma_eps_sq) >= -obj(&theta) - 1e-8);
}

#[test]
fn blup_matches_closed_form_and_joint_mode() {
    let fit = hand_fit();
    let cases = [
        series(&[0.0, 0.7, 1.9, 3.0], &[2.1, 1.4, 3.9, 3.2]),
        series(&[2.5], &[-1.0]),
        series(&[0.0, 3.0], &[0.2, 5.5]),
    ];
    for s in &cases {
        let (b, singular) = predict_subject_random_effects(&fit, s).unwrap();
        assert!(!singular);
        let cf = closed_form_blup(&fit, s);
        let mode = joint_density_mode(&fit, s);
        for k in 0..2 {
            assert!((b[k] - cf[k]).abs() < 1e-6, "closed form {k}: {} vs {}", b[k], cf[k]);
            assert!((b[k] - mode[k]).abs() < 1e-6, "joint mode {k}: {} vs {}", b[k], mode[k]);
        }
    }
}

#[test]
fn blup_from_a_reml_fit_matches_closed_form() {
    let slice = reml_fixture(11);
    let fit = fit_lmm(&slice, &MixedModelSpec::default()).unwrap();
    for s in &slice.series {
        let (b, _) = predict_subject_random_effects(&fit, s).unwrap();
        let cf = closed_form_blup(&fit, s);
        assert!((b[0] - cf[0]).abs() < 1e-6 && (b[1] - cf[1]).abs() < 1e-6);
    }
}

#[test]
fn latency_mstep_with_unit_weights_is_the_cox_estimate() {
    for seed in [1, 2, 3] {
        let d = cox_data(seed, 40);
        let w = vec![1.0; d.times.len()];
        let up = mstep_latency(
            &d.z,
            WeightedSurvival {
                times: &d.times,
                events: &d.events,
                weights: &w,
            },
            &DVector::zeros(2),
            200,
            true,
        );
        let (oracle, _) = minimize(|b| -breslow_partial(&d, b), &[0.0, 0.0], 0.5, 1e-14);
        for k in 0..2 {
            assert!((up.coef[k] - oracle[k]).abs() < 1e-4, "seed {seed} coef {k}: {} vs {}", up.coef[k], oracle[k]);
        }

        // Breslow jumps d_k / sum_{t_j >= s_k} exp(eta_j) at the oracle optimum.
        let mut event_times: Vec<f64> = (0..d.times.len()).filter(|&i| d.events[i]).map(|i| d.times[i]).collect();
        event_times.sort_by(f64::total_cmp);
        event_times.dedup();
        let mut h = 0.0;
        for s in event_times {
            let deaths = (0..d.times.len()).filter(|&i| d.events[i] && d.times[i] == s).count() as f64;
            let risk: f64 = (0..d.times.len())
                .filter(|&j| d.times[j] >= s)
                .map(|j| (oracle[0] * d.z[(j, 0)] + oracle[1] * d.z[(j, 1)]).exp())
                .sum();
            h += deaths / risk;
            assert!((up.baseline.cumulative(s) - h).abs() < 1e-4 * h.max(1.0));
        }
    }
}

#[test]
fn incidence_mstep_is_weighted_logistic_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = 80;
    let x = DMatrix::from_fn(m, 3, |_, _| normal(&mut rng));
    for fractional in [false, true] {
        let q: Vec<f64> = (0..m)
            .map(|i| {
                let p = 1.0 / (1.0 + (-(0.3 + x[(i, 0)] - 0.7 * x[(i, 2)])).exp());
                let u: f64 = rng.random();
                if fractional {
                    (p + 0.3 * (u - 0.5)).clamp(0.0, 1.0)
                } else {
                    f64::from(u < p)
                }
            })
            .collect();
        let fit = mstep_incidence(&x, &q, None).unwrap();
        let oracle = irls(&x, &q);
        assert!((fit.alpha0 - oracle[0]).abs() < 1e-8);
        for k in 0..3 {
            assert!((fit.alpha[k] - oracle[k + 1]).abs() < 1e-8, "{fractional} {k}");
        }
    }
}
