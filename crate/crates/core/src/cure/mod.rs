//! Cox proportional hazards mixture cure model fitted by EM.
//!
//! Survival for subject `i` is `S(t) = 1 - pi(X_i) + pi(X_i) S_u(t)`, with a
//! logistic incidence `pi` and a PH latency
//! `S_u(t) = exp(-H_0(t) exp(beta'Z_i + psi'b_i))`. Times are measured from
//! the landmark. Uncured survival is set to zero past the largest event time
//! for identifiability.

mod baseline;
mod em;
mod incidence;
mod latency;

pub use baseline::BaselineHazard;
pub use em::{em_step, fit_cox, fit_cure_em, observed_loglik, CureParameters, EmOptions, StepReport};
pub use incidence::{incidence_gradient, incidence_objective, mstep_incidence, IncidenceFit, INCIDENCE_LP_CAP};
pub use latency::{breslow, mstep_latency, partial_loglik, LatencyUpdate, PartialLikelihood, WeightedSurvival, LATENCY_LP_CAP};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Posterior probability of being uncured.
pub fn estep_q(pi: f64, s_u: f64, event: bool) -> f64 {
    if event {
        return 1.0;
    }
    let num = pi * s_u;
    let den = (1.0 - pi) + num;
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Inputs of one cure-model fit. `z` holds the baseline latency covariates
/// followed by the longitudinal summary columns.
#[derive(Debug, Clone)]
pub struct CureData {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl CureData {
    pub fn new(times: Vec<f64>, events: Vec<bool>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let m = times.len();
        if events.len() != m || x.nrows() != m || z.nrows() != m {
            return Err(Error::InvalidInput("cure data components differ in length".into()));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidInput("survival times must be finite and nonnegative".into()));
        }
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite covariate value".into()));
        }
        Ok(Self { times, events, x, z })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }

    /// Reorder subjects.
    pub fn permute(&self, order: &[usize]) -> Self {
        Self {
            times: order.iter().map(|&i| self.times[i]).collect(),
            events: order.iter().map(|&i| self.events[i]).collect(),
            x: self.x.select_rows(order),
            z: self.z.select_rows(order),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitFlags {
    pub incidence_capped: bool,
    pub latency_capped: bool,
    /// The observed log-likelihood evaluated to `-inf` at some iterate.
    pub loglik_infinite: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CureModelFit {
    pub alpha0: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub baseline: BaselineHazard,
    pub posterior_q: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub flags: FitFlags,
}

impl CureModelFit {
    pub fn eta_inc(&self, x: &[f64]) -> f64 {
        self.alpha0 + dot(&self.alpha, x)
    }

    /// `beta'Z + psi'summary`.
    pub fn eta_lat(&self, z: &[f64], summary: &[f64]) -> f64 {
        dot(&self.beta, z) + dot(&self.psi, summary)
    }

    pub fn pi(&self, x: &[f64]) -> f64 {
        incidence::sigmoid(self.eta_inc(x))
    }

    pub fn uncured_survival(&self, t: f64, eta_lat: f64) -> f64 {
        self.baseline.survival(t, eta_lat)
    }

    pub fn latency_coefficients(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.psi).copied().collect()
    }

    /// Posterior uncured probabilities of (possibly new) subjects under the
    /// fitted parameters.
    pub fn posterior(&self, times: &[f64], events: &[bool], eta_inc: &[f64], eta_lat: &[f64]) -> Vec<f64> {
        (0..times.len())
            .map(|i| {
                let pi = incidence::sigmoid(eta_inc[i]);
                estep_q(pi, self.baseline.survival(times[i], eta_lat[i]), events[i])
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "coefficient and covariate lengths differ");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
