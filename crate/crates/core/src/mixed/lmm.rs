//! REML estimation of a Gaussian linear mixed model.
//!
//! The variance parameters are `theta = (log-Cholesky(Sigma_b), log sigma^2)`:
//! the lower triangle of `L` row by row with log-transformed diagonal, so
//! every `theta` maps to a positive-definite `Sigma_b = L L'`. Fixed effects
//! are profiled out by generalized least squares.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{
    lower_rows, Convergence, CovariateSlice, Link, MixedModelFit, MixedModelSpec, SubjectDesign,
};
use crate::error::{Error, Result};
use crate::optim::{self, BfgsOptions};

/// A Gaussian LMM with residual covariance `sigma^2 diag(scale_i)` per subject.
#[derive(Debug, Clone)]
pub(crate) struct RemlProblem {
    pub subjects: Vec<SubjectDesign>,
    /// Per-observation residual variance multipliers (1 for a plain LMM).
    pub scale: Vec<DVector<f64>>,
    pub p: usize,
    pub q: usize,
    pub n: usize,
    /// Residual variance held fixed instead of estimated.
    pub fixed_sigma2: Option<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct RemlEval {
    /// Negative REML log-likelihood.
    pub f: f64,
    pub gamma: DVector<f64>,
    /// d f / d Sigma_b (as a symmetric matrix functional: df = tr(dSigma G)).
    pub grad_sigma_b: DMatrix<f64>,
    /// d f / d sigma^2.
    pub grad_sigma2: f64,
}

pub(crate) fn n_chol(q: usize) -> usize {
    q * (q + 1) / 2
}

pub(crate) fn theta_to_chol(theta: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[k].exp() } else { theta[k] };
            k += 1;
        }
    }
    l
}

pub(crate) fn chol_to_theta(l: &DMatrix<f64>) -> Vec<f64> {
    let q = l.nrows();
    let mut out = Vec::with_capacity(n_chol(q));
    for i in 0..q {
        for j in 0..=i {
            out.push(if i == j { l[(i, i)].max(1e-12).ln() } else { l[(i, j)] });
        }
    }
    out
}

impl RemlProblem {
    pub fn new(
        slice: &CovariateSlice,
        spec: &MixedModelSpec,
        response: Option<&[Vec<f64>]>,
        scale: Option<Vec<DVector<f64>>>,
        fixed_sigma2: Option<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        if let Some(s) = slice.series.iter().find(|s| s.values.is_empty()) {
            return Err(Error::InvalidInput(format!(
                "subject {} has no observations of {}",
                s.subject_id, slice.covariate
            )));
        }
        let subjects: Vec<SubjectDesign> = slice
            .series
            .iter()
            .enumerate()
            .map(|(i, s)| SubjectDesign::build(spec, s, response.map(|r| r[i].as_slice())))
            .collect();
        let n = slice.n_obs();
        let p = spec.n_fixed();
        if n <= p {
            return Err(Error::InvalidInput(format!(
                "{} observations of {} cannot identify {p} fixed effects",
                n, slice.covariate
            )));
        }
        let scale = scale.unwrap_or_else(|| {
            subjects
                .iter()
                .map(|s| DVector::from_element(s.y.len(), 1.0))
                .collect()
        });
        Ok(Self {
            subjects,
            scale,
            p,
            q: spec.n_random(),
            n,
            fixed_sigma2,
        })
    }

    pub fn n_theta(&self) -> usize {
        n_chol(self.q) + usize::from(self.fixed_sigma2.is_none())
    }

    /// Ordinary least squares fit; errors if `W` is rank deficient.
    pub fn ols(&self) -> Result<(DVector<f64>, f64)> {
        let mut wtw = DMatrix::zeros(self.p, self.p);
        let mut wty = DVector::zeros(self.p);
        for s in &self.subjects {
            wtw += s.w.transpose() * &s.w;
            wty += s.w.transpose() * &s.y;
        }
        let diag_max = wtw.diagonal().amax();
        let chol = wtw.clone().cholesky().ok_or_else(|| {
            Error::Singular("fixed-effect design is rank deficient".into())
        })?;
        let ldiag_min = chol.l().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if ldiag_min * ldiag_min < 1e-12 * diag_max {
            return Err(Error::Singular("fixed-effect design is rank deficient".into()));
        }
        let gamma = chol.solve(&wty);
        let rss = self
            .subjects
            .iter()
            .map(|s| (&s.y - &s.w * &gamma).norm_squared())
            .sum();
        Ok((gamma, rss))
    }

    /// Negative REML log-likelihood and its gradient at `(Sigma_b = L L', sigma2)`.
    pub fn eval(&self, sigma_b: &DMatrix<f64>, sigma2: f64, want_grad: bool) -> Option<RemlEval> {
        let (p, q) = (self.p, self.q);
        let mut logdet_v = 0.0;
        let mut a = DMatrix::zeros(p, p);
        let mut c = DVector::zeros(p);
        struct Parts {
            vinv: DMatrix<f64>,
            vinv_w: DMatrix<f64>,
            vinv_y: DVector<f64>,
        }
        let mut parts = Vec::with_capacity(self.subjects.len());
        for (s, d) in self.subjects.iter().zip(&self.scale) {
            let mut v = &s.z * sigma_b * s.z.transpose();
            for j in 0..v.nrows() {
                v[(j, j)] += sigma2 * d[j];
            }
            let chol = v.cholesky()?;
            logdet_v += 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let vinv_w = chol.solve(&s.w);
            let vinv_y = chol.solve(&s.y);
            a += s.w.transpose() * &vinv_w;
            c += s.w.transpose() * &vinv_y;
            let vinv = if want_grad { chol.inverse() } else { DMatrix::zeros(0, 0) };
            parts.push(Parts {
                vinv,
                vinv_w,
                vinv_y,
            });
        }
        let a_chol = a.clone().cholesky()?;
        let logdet_a = 2.0 * a_chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let gamma = a_chol.solve(&c);
        let mut quad = 0.0;
        let mut g_sigma = DMatrix::zeros(q, q);
        let mut g_s2 = 0.0;
        let a_inv = if want_grad { a_chol.inverse() } else { DMatrix::zeros(0, 0) };
        for ((s, d), pt) in self.subjects.iter().zip(&self.scale).zip(&parts) {
            // V^{-1} r
            let vinv_r = &pt.vinv_y - &pt.vinv_w * &gamma;
            let r = &s.y - &s.w * &gamma;
            quad += r.dot(&vinv_r);
            if want_grad {
                let zt = s.z.transpose();
                let m = &zt * &pt.vinv * &s.z;
                let u = &zt * &vinv_r;
                let nmat = &zt * &pt.vinv_w;
                g_sigma += m - &u * u.transpose() - &nmat * &a_inv * nmat.transpose();
                // sigma^2 direction: dV = diag(d)
                let tr_vinv_d: f64 = (0..d.len()).map(|j| pt.vinv[(j, j)] * d[j]).sum();
                let r_term: f64 = (0..d.len()).map(|j| vinv_r[j] * vinv_r[j] * d[j]).sum();
                let mut wdw = DMatrix::zeros(self.p, self.p);
                for j in 0..d.len() {
                    let row = pt.vinv_w.row(j);
                    wdw += row.transpose() * row * d[j];
                }
                let tr_a = (&a_inv * wdw).trace();
                g_s2 += tr_vinv_d - tr_a - r_term;
            }
        }
        let f = 0.5 * (logdet_v + logdet_a + quad + (self.n - self.p) as f64 * (2.0 * PI).ln());
        if !f.is_finite() {
            return None;
        }
        Some(RemlEval {
            f,
            gamma,
            grad_sigma_b: g_sigma * 0.5,
            grad_sigma2: 0.5 * g_s2,
        })
    }

    fn unpack(&self, theta: &[f64]) -> (DMatrix<f64>, f64) {
        let k = n_chol(self.q);
        let l = theta_to_chol(&theta[..k], self.q);
        let s2 = match self.fixed_sigma2 {
            Some(s) => s,
            None => theta[k].exp(),
        };
        (l, s2)
    }

    /// Objective and gradient in `theta` coordinates.
    pub fn eval_theta(&self, theta: &DVector<f64>) -> Option<(f64, DVector<f64>, DVector<f64>)> {
        if theta.iter().any(|t| !t.is_finite() || t.abs() > 60.0) {
            return None;
        }
        let (l, s2) = self.unpack(theta.as_slice());
        let sigma_b = &l * l.transpose();
        let ev = self.eval(&sigma_b, s2, true)?;
        // df/dL = 2 G L for symmetric G.
        let gl = &ev.grad_sigma_b * &l * 2.0;
        let mut grad = DVector::zeros(theta.len());
        let mut k = 0;
        for i in 0..self.q {
            for j in 0..=i {
                grad[k] = if i == j { gl[(i, j)] * l[(i, j)] } else { gl[(i, j)] };
                k += 1;
            }
        }
        if self.fixed_sigma2.is_none() {
            grad[k] = ev.grad_sigma2 * s2;
        }
        Some((ev.f, grad, ev.gamma))
    }

    /// Moment-style starting values.
    pub fn initial_theta(&self, resid_var: f64) -> DVector<f64> {
        let mut l = DMatrix::zeros(self.q, self.q);
        let all_z: Vec<&DMatrix<f64>> = self.subjects.iter().map(|s| &s.z).collect();
        for k in 0..self.q {
            let vals: Vec<f64> = all_z.iter().flat_map(|z| z.column(k).iter().copied().collect::<Vec<_>>()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = if k == 0 {
                1.0
            } else {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).max(1e-8)
            };
            l[(k, k)] = (0.5 * resid_var.max(1e-8) / var).sqrt();
        }
        let mut theta = chol_to_theta(&l);
        if self.fixed_sigma2.is_none() {
            theta.push((0.5 * resid_var).max(1e-8).ln());
        }
        DVector::from_vec(theta)
    }

    pub fn optimize(&self, theta0: DVector<f64>, max_iter: usize) -> Result<(DVector<f64>, RemlOutcome)> {
        // Short steps keep the log-Cholesky diagonal out of the flat region
        // where its gradient vanishes.
        let opts = BfgsOptions {
            max_iter,
            max_step: 1.0,
            ..Default::default()
        };
        let res = optim::minimize(
            |th| self.eval_theta(th).map(|(f, g, _)| (f, g)),
            theta0,
            &opts,
        )
        .ok_or_else(|| Error::Singular("marginal covariance not positive definite at start".into()))?;
        if !res.converged {
            return Err(Error::NonConvergence {
                what: "REML optimization",
                iterations: res.iterations,
            });
        }
        Ok((
            res.x,
            RemlOutcome {
                iterations: res.iterations,
                trace: res.trace,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RemlOutcome {
    pub iterations: usize,
    /// Criterion value after each accepted step.
    pub trace: Vec<f64>,
}

pub(crate) fn is_boundary(sigma_b: &DMatrix<f64>, sigma2: f64) -> bool {
    let eig = sigma_b.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    min < 1e-6 * (max + sigma2).max(f64::MIN_POSITIVE)
}

/// Fit a Gaussian LMM by REML.
pub fn fit_lmm(slice: &CovariateSlice, spec: &MixedModelSpec) -> Result<MixedModelFit> {
    if spec.link != Link::Identity {
        return Err(Error::InvalidInput(
            "fit_lmm requires the identity link; use fit_glmm_pql".into(),
        ));
    }
    let problem = RemlProblem::new(slice, spec, None, None, None)?;
    fit_problem(&problem, slice, spec, None).map(|(fit, _)| fit)
}

/// Shared driver for plain and working-response fits. Returns the fit and
/// the optimizer's final `theta` for warm starts.
pub(crate) fn fit_problem(
    problem: &RemlProblem,
    slice: &CovariateSlice,
    spec: &MixedModelSpec,
    warm_start: Option<DVector<f64>>,
) -> Result<(MixedModelFit, Option<DVector<f64>>)> {
    let (gamma_ols, rss) = problem.ols()?;
    let q = problem.q;
    let y_scale: f64 = problem.subjects.iter().map(|s| s.y.norm_squared()).sum::<f64>() / problem.n as f64;
    if problem.fixed_sigma2.is_none() && rss <= 1e-20 * problem.n as f64 * (1.0 + y_scale) {
        // Exact fit by the fixed effects alone: every variance component is 0.
        return Ok((
            MixedModelFit {
                covariate: slice.covariate.clone(),
                spec: spec.clone(),
                gamma: gamma_ols.iter().copied().collect(),
                sigma_b_cholesky: vec![vec![0.0; q]; q],
                sigma_eps_sq: 0.0,
                convergence: Convergence {
                    iterations: 0,
                    reml_loglik: None,
                    converged: true,
                    boundary: true,
                    ..Default::default()
                },
            },
            None,
        ));
    }
    let resid_var = rss / (problem.n - problem.p) as f64;
    let theta0 = warm_start
        .filter(|t| t.len() == problem.n_theta())
        .unwrap_or_else(|| problem.initial_theta(resid_var));
    let (theta, outcome) = problem.optimize(theta0, 200)?;
    log::debug!(
        "REML for {}: {} iterations, criterion {:?} -> {:?}",
        slice.covariate,
        outcome.iterations,
        outcome.trace.first(),
        outcome.trace.last()
    );
    let (l, s2) = problem.unpack(theta.as_slice());
    let sigma_b = &l * l.transpose();
    let ev = problem
        .eval(&sigma_b, s2, false)
        .ok_or_else(|| Error::Singular("marginal covariance at optimum".into()))?;
    Ok((
        MixedModelFit {
            covariate: slice.covariate.clone(),
            spec: spec.clone(),
            gamma: ev.gamma.iter().copied().collect(),
            sigma_b_cholesky: lower_rows(&l),
            sigma_eps_sq: s2,
            convergence: Convergence {
                iterations: outcome.iterations,
                reml_loglik: Some(-ev.f),
                converged: true,
                boundary: is_boundary(&sigma_b, s2),
                ..Default::default()
            },
        },
        Some(theta),
    ))
}

/// Re-evaluate the REML log-likelihood of a Gaussian fit on `slice`.
pub fn reml_criterion(slice: &CovariateSlice, fit: &MixedModelFit) -> Result<f64> {
    let problem = RemlProblem::new(slice, &fit.spec, None, None, None)?;
    problem
        .eval(&fit.sigma_b(), fit.sigma_eps_sq, false)
        .map(|e| -e.f)
        .ok_or_else(|| Error::Singular("marginal covariance is singular".into()))
}
