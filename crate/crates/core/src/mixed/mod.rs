//! Per-covariate (generalized) linear mixed models on pre-landmark data and
//! empirical Bayes prediction of the subject-specific random effects.
//!
//! Each longitudinal covariate `l` gets its own model
//!
//! ```text
//! y_il(t_ij) = g^{-1}(W_il(t_ij) gamma_l + V_il(t_ij) b_il) + eps,   b_il ~ N(0, Sigma_b)
//! ```
//!
//! Gaussian responses are fitted by REML ([`fit_lmm`]); other links by
//! penalized quasi-likelihood on a linearized working response
//! ([`fit_glmm_pql`]). [`predict_random_effects`] returns the conditional
//! means `E(b_il | y_il)` used as landmark summaries.

mod blup;
mod lmm;
mod pql;

pub use blup::{predict_random_effects, predict_subject_random_effects, RandomEffectSummary};
pub use lmm::{fit_lmm, reml_criterion};
pub use pql::fit_glmm_pql;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, SubjectTable};
use crate::error::{Error, Result};

/// Link function `g` of the longitudinal model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Identity,
    Logit,
    Log,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Log => eta.exp(),
        }
    }

    /// `g'(mu)`.
    pub fn derivative(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => 1.0 / (mu * (1.0 - mu)),
            Link::Log => 1.0 / mu,
        }
    }

    /// Canonical variance function `V(mu)`.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => mu * (1.0 - mu),
            Link::Log => mu,
        }
    }

    /// Unit deviance contribution `d(y, mu)`.
    pub fn deviance(self, y: f64, mu: f64) -> f64 {
        fn ylogy(y: f64, m: f64) -> f64 {
            if y > 0.0 {
                y * (y / m).ln()
            } else {
                0.0
            }
        }
        match self {
            Link::Identity => (y - mu).powi(2),
            Link::Logit => 2.0 * (ylogy(y, mu) + ylogy(1.0 - y, 1.0 - mu)),
            Link::Log => 2.0 * (ylogy(y, mu) - (y - mu)),
        }
    }

    pub(crate) fn in_domain(self, y: f64) -> bool {
        match self {
            Link::Identity => y.is_finite(),
            Link::Logit => (0.0..=1.0).contains(&y),
            Link::Log => y >= 0.0 && y.is_finite(),
        }
    }

    /// Keep fitted means strictly inside the link's range.
    pub(crate) fn clamp_mean(self, mu: f64) -> f64 {
        const EPS: f64 = 1e-8;
        match self {
            Link::Identity => mu,
            Link::Logit => mu.clamp(EPS, 1.0 - EPS),
            Link::Log => mu.max(EPS),
        }
    }
}

/// Design of one longitudinal model. Fixed effects are
/// `(1, t, ..., t^fixed_degree, baseline...)`; random effects are
/// `(1, t, ..., t^random_degree)`, a subset of the fixed columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedModelSpec {
    pub link: Link,
    pub fixed_degree: usize,
    pub random_degree: usize,
    /// Names of subject-level baseline covariates entering `W`.
    #[serde(default)]
    pub baseline: Vec<String>,
}

impl Default for MixedModelSpec {
    /// Random intercept and slope, fixed intercept and linear time.
    fn default() -> Self {
        Self {
            link: Link::Identity,
            fixed_degree: 1,
            random_degree: 1,
            baseline: Vec::new(),
        }
    }
}

impl MixedModelSpec {
    pub fn with_link(link: Link) -> Self {
        Self {
            link,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.random_degree > self.fixed_degree {
            return Err(Error::InvalidInput(format!(
                "random-effect degree {} exceeds fixed-effect degree {}",
                self.random_degree, self.fixed_degree
            )));
        }
        Ok(())
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed_degree + 1 + self.baseline.len()
    }

    pub fn n_random(&self) -> usize {
        self.random_degree + 1
    }

    pub(crate) fn fixed_row(&self, t: f64, baseline: &[f64]) -> Vec<f64> {
        let mut row: Vec<f64> = (0..=self.fixed_degree).map(|k| t.powi(k as i32)).collect();
        row.extend_from_slice(baseline);
        row
    }

    pub(crate) fn random_row(&self, t: f64) -> Vec<f64> {
        (0..=self.random_degree).map(|k| t.powi(k as i32)).collect()
    }
}

/// Observations of one covariate for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub subject_id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Baseline covariates named in [`MixedModelSpec::baseline`].
    pub baseline: Vec<f64>,
}

/// All subjects' observations of a single longitudinal covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSlice {
    pub covariate: String,
    pub series: Vec<SubjectSeries>,
}

impl CovariateSlice {
    /// Slice `covariate` out of `history`, ordered like `subjects`. Subjects
    /// without observations get an empty series.
    pub fn from_history(
        history: &LongitudinalDataset,
        subjects: &SubjectTable,
        covariate: &str,
        baseline: &[String],
    ) -> Result<Self> {
        let cols: Vec<(bool, usize)> = baseline
            .iter()
            .map(|name| {
                if let Some(k) = subjects.x_names().iter().position(|n| n == name) {
                    Ok((true, k))
                } else if let Some(k) = subjects.z_names().iter().position(|n| n == name) {
                    Ok((false, k))
                } else {
                    Err(Error::InvalidInput(format!(
                        "baseline covariate '{name}' is not an incidence or latency column"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        let series = subjects
            .rows()
            .iter()
            .map(|s| {
                let obs = history.series(&s.id, covariate);
                SubjectSeries {
                    subject_id: s.id.clone(),
                    times: obs.iter().map(|m| m.time).collect(),
                    values: obs.iter().map(|m| m.value).collect(),
                    baseline: cols
                        .iter()
                        .map(|&(is_x, k)| if is_x { s.x[k] } else { s.z[k] })
                        .collect(),
                }
            })
            .collect();
        Ok(Self {
            covariate: covariate.to_owned(),
            series,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.series.iter().map(|s| s.values.len()).sum()
    }
}

/// Convergence record of a mixed-model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Convergence {
    pub iterations: usize,
    /// Final REML log-likelihood of the (working) Gaussian model; absent for
    /// exactly degenerate fits where it is unbounded.
    pub reml_loglik: Option<f64>,
    pub converged: bool,
    /// Random-effect covariance is singular (estimate on the boundary).
    pub boundary: bool,
    /// Outer PQL cycles; zero for Gaussian fits.
    #[serde(default)]
    pub pql_cycles: usize,
    /// PQL step-halvings applied to the working-response update.
    #[serde(default)]
    pub damped_steps: usize,
}

/// Fitted mixed model for one longitudinal covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedModelFit {
    pub covariate: String,
    pub spec: MixedModelSpec,
    /// Fixed effects `gamma_l`.
    pub gamma: Vec<f64>,
    /// Lower-triangular Cholesky factor of `Sigma_b`, row-major `q x q`.
    pub sigma_b_cholesky: Vec<Vec<f64>>,
    /// Residual variance on the (working) link scale. For PQL fits this is
    /// the dispersion multiplying the working variances.
    pub sigma_eps_sq: f64,
    pub convergence: Convergence,
}

impl MixedModelFit {
    pub fn link(&self) -> Link {
        self.spec.link
    }

    pub fn cholesky(&self) -> DMatrix<f64> {
        let q = self.sigma_b_cholesky.len();
        DMatrix::from_fn(q, q, |i, j| if j <= i { self.sigma_b_cholesky[i][j] } else { 0.0 })
    }

    /// `Sigma_b = L L'`.
    pub fn sigma_b(&self) -> DMatrix<f64> {
        let l = self.cholesky();
        &l * l.transpose()
    }

    pub(crate) fn gamma_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.gamma)
    }
}

pub(crate) fn lower_rows(l: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..l.nrows()).map(|i| (0..l.ncols()).map(|j| if j <= i { l[(i, j)] } else { 0.0 }).collect()).collect()
}

/// Design matrices and response of one subject.
#[derive(Debug, Clone)]
pub(crate) struct SubjectDesign {
    pub w: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl SubjectDesign {
    pub fn build(spec: &MixedModelSpec, s: &SubjectSeries, y: Option<&[f64]>) -> Self {
        let n = s.times.len();
        let p = spec.n_fixed();
        let q = spec.n_random();
        let mut w = DMatrix::zeros(n, p);
        let mut z = DMatrix::zeros(n, q);
        for (j, &t) in s.times.iter().enumerate() {
            for (k, v) in spec.fixed_row(t, &s.baseline).into_iter().enumerate() {
                w[(j, k)] = v;
            }
            for (k, v) in spec.random_row(t).into_iter().enumerate() {
                z[(j, k)] = v;
            }
        }
        let y = DVector::from_column_slice(y.unwrap_or(&s.values));
        Self { w, z, y }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_identities() {
        for link in [Link::Identity, Link::Logit, Link::Log] {
            let eta = 0.3;
            let mu = link.inverse(eta);
            // d mu / d eta = 1 / g'(mu)
            let h = 1e-6;
            let fd = (link.inverse(eta + h) - link.inverse(eta - h)) / (2.0 * h);
            assert!((fd * link.derivative(mu) - 1.0).abs() < 1e-8);
        }
        assert!(Link::Logit.deviance(1.0, 1.0 - 1e-12) < 1e-10);
    }

    #[test]
    fn spec_validation() {
        let spec = MixedModelSpec {
            random_degree: 2,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        assert_eq!(MixedModelSpec::default().n_fixed(), 2);
        assert_eq!(MixedModelSpec::default().random_row(2.0), vec![1.0, 2.0]);
    }
}
