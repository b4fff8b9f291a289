use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CovariateSlice, Link, MixedModelFit, SubjectDesign, SubjectSeries};
use crate::error::{Error, Result};

/// Predicted random effects `b_il` of one covariate for a set of subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectSummary {
    pub covariate: String,
    pub subject_ids: Vec<String>,
    /// `values[i]` has length `p_V`.
    pub values: Vec<Vec<f64>>,
    /// Subjects whose marginal covariance was singular (prediction set to 0).
    pub singular: Vec<String>,
}

/// `Sigma_b V' (V Sigma_b V' + R)^{-1} r` with `R = diag(resid_var)`.
pub(crate) fn conditional_mean(
    sigma_b: &DMatrix<f64>,
    z: &DMatrix<f64>,
    resid_var: &DVector<f64>,
    resid: &DVector<f64>,
) -> Option<DVector<f64>> {
    let mut v = z * sigma_b * z.transpose();
    for j in 0..v.nrows() {
        v[(j, j)] += resid_var[j];
    }
    let chol = v.cholesky()?;
    Some(sigma_b * z.transpose() * chol.solve(resid))
}

/// Empirical Bayes prediction for a single subject's series. The boolean is
/// true when the marginal covariance was singular and zeros were returned.
pub fn predict_subject_random_effects(
    fit: &MixedModelFit,
    series: &SubjectSeries,
) -> Result<(Vec<f64>, bool)> {
    if series.values.is_empty() {
        return Err(Error::MissingHistory {
            subject: series.subject_id.clone(),
            covariate: fit.covariate.clone(),
        });
    }
    if series.baseline.len() != fit.spec.baseline.len() {
        return Err(Error::InvalidInput(format!(
            "subject {} has {} baseline values, model expects {}",
            series.subject_id,
            series.baseline.len(),
            fit.spec.baseline.len()
        )));
    }
    let link = fit.link();
    if let Some(y) = series.values.iter().find(|y| !link.in_domain(**y)) {
        return Err(Error::InvalidInput(format!(
            "value {y} of subject {} outside the domain of the {:?} link",
            series.subject_id, link
        )));
    }
    let d = SubjectDesign::build(&fit.spec, series, None);
    let sigma_b = fit.sigma_b();
    let q = sigma_b.nrows();
    let fixed = &d.w * fit.gamma_vec();
    let n = d.y.len();

    if link == Link::Identity {
        let rv = DVector::from_element(n, fit.sigma_eps_sq);
        return Ok(match conditional_mean(&sigma_b, &d.z, &rv, &(&d.y - &fixed)) {
            Some(b) => (b.iter().copied().collect(), false),
            None => (vec![0.0; q], true),
        });
    }

    // Working-response iteration with the fitted (gamma, Sigma_b, phi) held fixed.
    let mut b = DVector::zeros(q);
    for _ in 0..100 {
        let (ystar, rv) = working_response(link, &d.y, &(&fixed + &d.z * &b), fit.sigma_eps_sq);
        let Some(b_new) = conditional_mean(&sigma_b, &d.z, &rv, &(&ystar - &fixed)) else {
            return Ok((vec![0.0; q], true));
        };
        let change = (&b_new - &b).amax();
        b = b_new;
        if change < 1e-10 * (1.0 + b.amax()) {
            break;
        }
    }
    Ok((b.iter().copied().collect(), false))
}

/// Linearized response `y* = eta + (y - mu) g'(mu)` and its working
/// variances `phi g'(mu)^2 V(mu)`.
pub(crate) fn working_response(
    link: Link,
    y: &DVector<f64>,
    eta: &DVector<f64>,
    phi: f64,
) -> (DVector<f64>, DVector<f64>) {
    let n = y.len();
    let mut ystar = DVector::zeros(n);
    let mut rv = DVector::zeros(n);
    for j in 0..n {
        let mu = link.clamp_mean(link.inverse(eta[j]));
        let gp = link.derivative(mu);
        ystar[j] = eta[j] + (y[j] - mu) * gp;
        rv[j] = phi * gp * gp * link.variance(mu);
    }
    (ystar, rv)
}

/// Predict `b_il` for every subject of `slice` from a fitted model.
pub fn predict_random_effects(fit: &MixedModelFit, slice: &CovariateSlice) -> Result<RandomEffectSummary> {
    let mut values = Vec::with_capacity(slice.series.len());
    let mut singular = Vec::new();
    for s in &slice.series {
        let (b, sing) = predict_subject_random_effects(fit, s)?;
        if sing {
            singular.push(s.subject_id.clone());
        }
        values.push(b);
    }
    Ok(RandomEffectSummary {
        covariate: slice.covariate.clone(),
        subject_ids: slice.series.iter().map(|s| s.subject_id.clone()).collect(),
        values,
        singular,
    })
}
