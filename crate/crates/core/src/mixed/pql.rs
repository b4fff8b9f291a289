//! Penalized quasi-likelihood for non-Gaussian longitudinal covariates.
//!
//! Each cycle linearizes the model around the current fitted means,
//! `y* = eta + (y - mu) g'(mu)`, with working residual variances
//! `phi g'(mu)^2 V(mu)`, and fits the resulting Gaussian LMM by REML with the
//! dispersion `phi` held at its Pearson estimate.

use nalgebra::{DMatrix, DVector};

use super::blup::{conditional_mean, working_response};
use super::lmm::{fit_lmm, fit_problem, RemlProblem};
use super::{CovariateSlice, Link, MixedModelFit, MixedModelSpec, SubjectDesign};
use crate::error::{Error, Result};

const MAX_CYCLES: usize = 100;
const TOL: f64 = 1e-6;

pub fn fit_glmm_pql(slice: &CovariateSlice, spec: &MixedModelSpec) -> Result<MixedModelFit> {
    let link = spec.link;
    if link == Link::Identity {
        return fit_lmm(slice, spec);
    }
    spec.validate()?;
    let designs: Vec<SubjectDesign> = slice
        .series
        .iter()
        .map(|s| SubjectDesign::build(spec, s, None))
        .collect();
    let all_y: Vec<f64> = designs.iter().flat_map(|d| d.y.iter().copied()).collect();
    if let Some(y) = all_y.iter().find(|y| !link.in_domain(**y)) {
        return Err(Error::InvalidInput(format!(
            "response {y} of {} outside the domain of the {link:?} link",
            slice.covariate
        )));
    }
    let degenerate = match link {
        Link::Logit => all_y.iter().all(|&y| y == 0.0) || all_y.iter().all(|&y| y == 1.0),
        Link::Log => all_y.iter().all(|&y| y == 0.0),
        Link::Identity => false,
    };
    if degenerate {
        return Err(Error::LinkBoundary(format!(
            "all responses of {} sit on the boundary of the {link:?} link",
            slice.covariate
        )));
    }
    let n: usize = all_y.len();
    let p = spec.n_fixed();
    if n <= p {
        return Err(Error::InvalidInput(format!(
            "{n} observations of {} cannot identify {p} fixed effects",
            slice.covariate
        )));
    }

    let gamma0 = glm_irls(link, &designs, p)?;
    let mut eta: Vec<DVector<f64>> = designs.iter().map(|d| &d.w * &gamma0).collect();
    let q = spec.n_random();
    let mut b: Vec<DVector<f64>> = vec![DVector::zeros(q); designs.len()];
    let mut theta = None;
    let mut prev: Option<(Vec<f64>, DMatrix<f64>)> = None;
    let mut damped_steps = 0;

    for cycle in 1..=MAX_CYCLES {
        let mut ystar = Vec::with_capacity(designs.len());
        let mut scale = Vec::with_capacity(designs.len());
        let mut pearson = 0.0;
        for (d, e) in designs.iter().zip(&eta) {
            let (ys, rv) = working_response(link, &d.y, e, 1.0);
            for j in 0..d.y.len() {
                let mu = link.clamp_mean(link.inverse(e[j]));
                pearson += (d.y[j] - mu).powi(2) / link.variance(mu);
            }
            ystar.push(ys.iter().copied().collect::<Vec<f64>>());
            scale.push(rv);
        }
        let phi = (pearson / (n - p) as f64).max(1e-8);
        let problem = RemlProblem::new(slice, spec, Some(&ystar), Some(scale.clone()), Some(phi))?;
        let (mut fit, th) = fit_problem(&problem, slice, spec, theta.take())?;
        theta = th;
        let sigma_b = fit.sigma_b();
        let gamma = fit.gamma_vec();

        let mut b_prop = Vec::with_capacity(designs.len());
        for ((d, ys), sc) in designs.iter().zip(&ystar).zip(&scale) {
            let resid = DVector::from_column_slice(ys) - &d.w * &gamma;
            let bi = conditional_mean(&sigma_b, &d.z, &(sc * phi), &resid)
                .unwrap_or_else(|| DVector::zeros(q));
            b_prop.push(bi);
        }
        let eta_prop: Vec<DVector<f64>> = designs
            .iter()
            .zip(&b_prop)
            .map(|(d, bi)| &d.w * &gamma + &d.z * bi)
            .collect();

        // Step-halving on the working-response update.
        let sigma_inv = regularized_inverse(&sigma_b);
        let crit = |eta: &[DVector<f64>], b: &[DVector<f64>]| {
            penalized_deviance(link, &designs, eta, b, &sigma_inv, phi)
        };
        let old = crit(&eta, &b);
        let mut step = 1.0;
        let (mut eta_new, mut b_new) = (eta_prop.clone(), b_prop.clone());
        for _ in 0..10 {
            if crit(&eta_new, &b_new) <= old + 1e-10 * (1.0 + old.abs()) || !old.is_finite() {
                break;
            }
            step *= 0.5;
            damped_steps += 1;
            eta_new = eta.iter().zip(&eta_prop).map(|(a, p)| a + (p - a) * step).collect();
            b_new = b.iter().zip(&b_prop).map(|(a, p)| a + (p - a) * step).collect();
        }
        eta = eta_new;
        b = b_new;

        let params = (fit.gamma.clone(), sigma_b.clone());
        let converged = prev.as_ref().is_some_and(|(g0, s0)| {
            let dg = g0
                .iter()
                .zip(&params.0)
                .map(|(a, c)| (a - c).abs() / (1.0 + a.abs()))
                .fold(0.0, f64::max);
            let ds = s0
                .iter()
                .zip(params.1.iter())
                .map(|(a, c)| (a - c).abs() / (1.0 + a.abs()))
                .fold(0.0, f64::max);
            dg.max(ds) < TOL
        });
        prev = Some(params);
        if converged {
            fit.convergence.pql_cycles = cycle;
            fit.convergence.damped_steps = damped_steps;
            return Ok(fit);
        }
    }
    Err(Error::NonConvergence {
        what: "PQL",
        iterations: MAX_CYCLES,
    })
}

fn regularized_inverse(s: &DMatrix<f64>) -> DMatrix<f64> {
    let q = s.nrows();
    let ridge = 1e-10 * (1.0 + s.diagonal().amax());
    (s + DMatrix::identity(q, q) * ridge)
        .try_inverse()
        .unwrap_or_else(|| DMatrix::zeros(q, q))
}

fn penalized_deviance(
    link: Link,
    designs: &[SubjectDesign],
    eta: &[DVector<f64>],
    b: &[DVector<f64>],
    sigma_inv: &DMatrix<f64>,
    phi: f64,
) -> f64 {
    let mut total = 0.0;
    for ((d, e), bi) in designs.iter().zip(eta).zip(b) {
        for j in 0..d.y.len() {
            let mu = link.clamp_mean(link.inverse(e[j]));
            total += link.deviance(d.y[j], mu) / phi;
        }
        total += bi.dot(&(sigma_inv * bi));
    }
    total
}

/// Fixed-effects-only GLM by iteratively reweighted least squares.
fn glm_irls(link: Link, designs: &[SubjectDesign], p: usize) -> Result<DVector<f64>> {
    let mut gamma = DVector::zeros(p);
    for _ in 0..50 {
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for d in designs {
            let eta = &d.w * &gamma;
            for j in 0..d.y.len() {
                let mu = link.clamp_mean(link.inverse(eta[j]));
                let gp = link.derivative(mu);
                let w = 1.0 / (gp * gp * link.variance(mu));
                let zj = eta[j] + (d.y[j] - mu) * gp;
                let row = d.w.row(j);
                xtwx += row.transpose() * row * w;
                xtwz += row.transpose() * (w * zj);
            }
        }
        let new = xtwx
            .cholesky()
            .ok_or_else(|| Error::Singular("fixed-effect design is rank deficient".into()))?
            .solve(&xtwz);
        let change = (&new - &gamma).amax();
        gamma = new;
        if change < 1e-10 * (1.0 + gamma.amax()) {
            break;
        }
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixed::SubjectSeries;

    fn slice(values: Vec<Vec<f64>>) -> CovariateSlice {
        CovariateSlice {
            covariate: "y".into(),
            series: values
                .into_iter()
                .enumerate()
                .map(|(i, v)| SubjectSeries {
                    subject_id: format!("s{i}"),
                    times: (0..v.len()).map(|k| k as f64 * 0.5).collect(),
                    values: v,
                    baseline: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn logit_all_zero_is_boundary() {
        let s = slice(vec![vec![0.0; 4]; 6]);
        let err = fit_glmm_pql(&s, &MixedModelSpec::with_link(Link::Logit)).unwrap_err();
        assert!(matches!(err, Error::LinkBoundary(_)));
    }

    #[test]
    fn out_of_domain_response() {
        let s = slice(vec![vec![0.0, 2.0, 1.0]; 3]);
        assert!(fit_glmm_pql(&s, &MixedModelSpec::with_link(Link::Logit)).is_err());
        let s = slice(vec![vec![-1.0, 2.0, 1.0]; 3]);
        assert!(fit_glmm_pql(&s, &MixedModelSpec::with_link(Link::Log)).is_err());
    }

    #[test]
    fn identity_delegates_to_lmm() {
        let s = slice(vec![
            vec![1.0, 2.1, 2.9, 4.2],
            vec![0.1, 0.4, 1.6, 1.7],
            vec![3.0, 3.3, 4.9, 5.1],
            vec![2.2, 2.0, 3.1, 3.9],
        ]);
        let a = fit_glmm_pql(&s, &MixedModelSpec::default()).unwrap();
        let b = fit_lmm(&s, &MixedModelSpec::default()).unwrap();
        assert_eq!(a, b);
    }
}
