//! Independent reference implementations for the model components.

use curemark::mixed::{Convergence, CovariateSlice, MixedModelFit, MixedModelSpec, SubjectSeries};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::minimize;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Five subjects, four visits, random intercept and slope.
pub fn reml_fixture(seed: u64) -> CovariateSlice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = [0.0, 1.0, 2.0, 3.0];
    let series = (0..5)
        .map(|i| {
            let b0 = 1.2 * normal(&mut rng);
            let b1 = 0.6 * normal(&mut rng);
            let values = times
                .iter()
                .map(|t| 1.0 + 0.5 * t + b0 + b1 * t + 0.4 * normal(&mut rng))
                .collect();
            SubjectSeries {
                subject_id: format!("s{i}"),
                times: times.to_vec(),
                values,
                baseline: vec![],
            }
        })
        .collect();
    CovariateSlice {
        covariate: "y".into(),
        series,
    }
}

/// Restricted log-likelihood without constants, written from the textbook
/// formula with dense matrices.
pub fn reml_loglik(slice: &CovariateSlice, sigma_b: &DMatrix<f64>, sigma2: f64) -> f64 {
    let mut xtvx = DMatrix::<f64>::zeros(2, 2);
    let mut xtvy = DVector::<f64>::zeros(2);
    let mut logdet = 0.0;
    let mut blocks = Vec::new();
    for s in &slice.series {
        let n = s.times.len();
        let x = DMatrix::from_fn(n, 2, |j, k| if k == 0 { 1.0 } else { s.times[j] });
        let v = &x * sigma_b * x.transpose() + DMatrix::identity(n, n) * sigma2;
        let Some(vinv) = v.clone().try_inverse() else { return f64::NEG_INFINITY };
        let det = v.determinant();
        if det <= 0.0 {
            return f64::NEG_INFINITY;
        }
        logdet += det.ln();
        let y = DVector::from_column_slice(&s.values);
        xtvx += x.transpose() * &vinv * &x;
        xtvy += x.transpose() * &vinv * &y;
        blocks.push((x, vinv, y));
    }
    let gamma = xtvx.clone().try_inverse().unwrap() * xtvy;
    let quad: f64 = blocks
        .iter()
        .map(|(x, vinv, y)| {
            let r = y - x * &gamma;
            (r.transpose() * vinv * &r)[(0, 0)]
        })
        .sum();
    -0.5 * (logdet + xtvx.determinant().ln() + quad)
}

pub fn unpack(theta: &[f64]) -> (DMatrix<f64>, f64) {
    let l = DMatrix::from_row_slice(2, 2, &[theta[0].exp(), 0.0, theta[1], theta[2].exp()]);
    (&l * l.transpose(), theta[3].exp())
}


pub fn hand_fit() -> MixedModelFit {
    // Sigma_b = [[1, 0.3], [0.3, 0.34]].
    MixedModelFit {
        covariate: "y".into(),
        spec: MixedModelSpec::default(),
        gamma: vec![1.0, 0.5],
        sigma_b_cholesky: vec![vec![1.0, 0.0], vec![0.3, 0.5]],
        sigma_eps_sq: 0.2,
        convergence: Convergence::default(),
    }
}

pub fn series(times: &[f64], values: &[f64]) -> SubjectSeries {
    SubjectSeries {
        subject_id: "a".into(),
        times: times.to_vec(),
        values: values.to_vec(),
        baseline: vec![],
    }
}

pub fn closed_form_blup(fit: &MixedModelFit, s: &SubjectSeries) -> DVector<f64> {
    let n = s.times.len();
    let v = DMatrix::from_fn(n, 2, |j, k| if k == 0 { 1.0 } else { s.times[j] });
    let gamma = DVector::from_column_slice(&fit.gamma);
    let sb = fit.sigma_b();
    let cov = &v * &sb * v.transpose() + DMatrix::identity(n, n) * fit.sigma_eps_sq;
    let r = DVector::from_column_slice(&s.values) - &v * gamma;
    &sb * v.transpose() * cov.try_inverse().unwrap() * r
}

pub fn joint_density_mode(fit: &MixedModelFit, s: &SubjectSeries) -> Vec<f64> {
    let sb_inv = fit.sigma_b().try_inverse().unwrap();
    let neg_log_joint = |b: &[f64]| {
        let lik: f64 = s
            .times
            .iter()
            .zip(&s.values)
            .map(|(t, y)| {
                let mu = fit.gamma[0] + fit.gamma[1] * t + b[0] + b[1] * t;
                (y - mu).powi(2) / (2.0 * fit.sigma_eps_sq)
            })
            .sum();
        let bv = DVector::from_column_slice(b);
        lik + 0.5 * (bv.transpose() * &sb_inv * &bv)[(0, 0)]
    };
    minimize(neg_log_joint, &[0.0, 0.0], 0.5, 1e-16).0
}


pub struct CoxData {
    pub z: DMatrix<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

pub fn cox_data(seed: u64, n: usize) -> CoxData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, 2, |_, _| normal(&mut rng));
    let mut times = Vec::new();
    let mut events = Vec::new();
    for i in 0..n {
        let eta = 0.8 * z[(i, 0)] - 0.5 * z[(i, 1)];
        let t = -(1.0 - rng.random::<f64>()).ln() / eta.exp();
        let c = 2.0 * rng.random::<f64>();
        // Rounding produces ties.
        let obs = (t.min(c) * 10.0).ceil() / 10.0;
        times.push(obs);
        events.push(t <= c);
    }
    CoxData { z, times, events }
}

/// Breslow partial log-likelihood by direct risk-set enumeration.
pub fn breslow_partial(d: &CoxData, beta: &[f64]) -> f64 {
    let eta: Vec<f64> = (0..d.times.len())
        .map(|i| beta[0] * d.z[(i, 0)] + beta[1] * d.z[(i, 1)])
        .collect();
    let mut ll = 0.0;
    for i in 0..d.times.len() {
        if !d.events[i] {
            continue;
        }
        let risk: f64 = (0..d.times.len())
            .filter(|&j| d.times[j] >= d.times[i])
            .map(|j| eta[j].exp())
            .sum();
        ll += eta[i] - risk.ln();
    }
    ll
}


/// Logistic regression with fractional responses by iteratively reweighted
/// least squares.
pub fn irls(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let (m, p) = (x.nrows(), x.ncols() + 1);
    let xa = DMatrix::from_fn(m, p, |i, k| if k == 0 { 1.0 } else { x[(i, k - 1)] });
    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let eta = &xa * &beta;
        let mu: Vec<f64> = eta.iter().map(|e| 1.0 / (1.0 + (-e).exp())).collect();
        let w = DMatrix::from_diagonal(&DVector::from_iterator(m, mu.iter().map(|p| p * (1.0 - p))));
        let zr = DVector::from_iterator(m, (0..m).map(|i| eta[i] + (y[i] - mu[i]) / (mu[i] * (1.0 - mu[i]))));
        let next = (xa.transpose() * &w * &xa).try_inverse().unwrap() * xa.transpose() * &w * zr;
        let done = (&next - &beta).amax() < 1e-13;
        beta = next;
        if done {
            break;
        }
    }
    beta
}

