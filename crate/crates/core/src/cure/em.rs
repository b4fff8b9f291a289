use nalgebra::{DMatrix, DVector};

use super::baseline::BaselineHazard;
use super::incidence::{augment, mstep_incidence, sigmoid};
use super::latency::{mstep_latency, WeightedSurvival};
use super::{estep_q, CureData, CureModelFit, FitFlags};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when `max |d theta| / (1 + |theta|) < tol` over all parameters.
    pub tol: f64,
    /// Newton steps on the latency coefficients per EM iteration.
    pub latency_newton_steps: usize,
    pub zero_tail: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            latency_newton_steps: 1,
            zero_tail: true,
        }
    }
}

/// Full parameter state of the EM iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CureParameters {
    /// Intercept first.
    pub incidence: DVector<f64>,
    pub latency: DVector<f64>,
    pub baseline: BaselineHazard,
}

impl CureParameters {
    fn flat(&self) -> Vec<f64> {
        self.incidence
            .iter()
            .chain(self.latency.iter())
            .chain(self.baseline.cumulative_values.iter())
            .copied()
            .collect()
    }

    fn relative_change(&self, other: &Self) -> f64 {
        let (a, b) = (self.flat(), other.flat());
        if a.len() != b.len() {
            return f64::INFINITY;
        }
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs() / (1.0 + x.abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    pub incidence_capped: bool,
    pub latency_capped: bool,
}

fn posterior(data: &CureData, xa: &DMatrix<f64>, params: &CureParameters) -> Vec<f64> {
    let eta_inc = xa * &params.incidence;
    let eta_lat = &data.z * &params.latency;
    (0..data.len())
        .map(|i| {
            let s_u = params.baseline.survival(data.times[i], eta_lat[i]);
            estep_q(sigmoid(eta_inc[i]), s_u, data.events[i])
        })
        .collect()
}

/// One E-step followed by the incidence and latency M-steps.
pub fn em_step(data: &CureData, params: &CureParameters, opts: &EmOptions) -> Result<(CureParameters, StepReport)> {
    let xa = augment(&data.x);
    let q = posterior(data, &xa, params);
    let inc = mstep_incidence(&data.x, &q, Some(&params.incidence))?;
    let lat = mstep_latency(
        &data.z,
        WeightedSurvival {
            times: &data.times,
            events: &data.events,
            weights: &q,
        },
        &params.latency,
        opts.latency_newton_steps,
        opts.zero_tail,
    );
    Ok((
        CureParameters {
            incidence: inc.coefficients(),
            latency: lat.coef,
            baseline: lat.baseline,
        },
        StepReport {
            incidence_capped: inc.capped,
            latency_capped: lat.capped,
        },
    ))
}

/// Observed-data log-likelihood with the step-function baseline hazard:
/// events contribute `log pi + log(dH_0(t_i) e^eta) - H_0(t_i) e^eta`,
/// censored subjects `log(1 - pi + pi S_u(t_i))`.
pub fn observed_loglik(data: &CureData, params: &CureParameters) -> f64 {
    let xa = augment(&data.x);
    let eta_inc = &xa * &params.incidence;
    let eta_lat = &data.z * &params.latency;
    let mut total = 0.0;
    for i in 0..data.len() {
        let pi = sigmoid(eta_inc[i]);
        let t = data.times[i];
        total += if data.events[i] {
            let r = eta_lat[i].exp();
            pi.ln() + (params.baseline.jump(t) * r).ln() - params.baseline.cumulative(t) * r
        } else {
            let s_u = params.baseline.survival(t, eta_lat[i]);
            (1.0 - pi + pi * s_u).ln()
        };
    }
    total
}

/// Ordinary Cox regression with the Breslow baseline (unit risk weights).
pub fn fit_cox(z: &DMatrix<f64>, times: &[f64], events: &[bool], zero_tail: bool) -> (DVector<f64>, BaselineHazard, bool) {
    let w = vec![1.0; times.len()];
    let up = mstep_latency(
        z,
        WeightedSurvival {
            times,
            events,
            weights: &w,
        },
        &DVector::zeros(z.ncols()),
        200,
        zero_tail,
    );
    (up.coef, up.baseline, up.capped)
}

/// EM fit of the mixture cure model. The first `n_z` columns of `data.z`
/// receive the `beta` coefficients and the rest `psi`.
///
/// Subjects are processed in a canonical order so the result does not depend
/// on the input order down to rounding; `posterior_q` follows the input order.
pub fn fit_cure_em(data: &CureData, n_z: usize, opts: &EmOptions) -> Result<CureModelFit> {
    if n_z > data.z.ncols() {
        return Err(Error::InvalidInput("n_z exceeds the latency design width".into()));
    }
    let order = canonical_order(data);
    let mut fit = fit_ordered(&data.permute(&order), n_z, opts)?;
    let mut q = vec![0.0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        q[i] = fit.posterior_q[k];
    }
    fit.posterior_q = q;
    Ok(fit)
}

/// Sort key: time, event status, then the covariate rows.
fn canonical_order(data: &CureData) -> Vec<usize> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let row_cmp = |m: &DMatrix<f64>, i: usize, j: usize| {
        (0..m.ncols())
            .map(|c| m[(i, c)].total_cmp(&m[(j, c)]))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    order.sort_by(|&i, &j| {
        data.times[i]
            .total_cmp(&data.times[j])
            .then(data.events[i].cmp(&data.events[j]))
            .then_with(|| row_cmp(&data.x, i, j))
            .then_with(|| row_cmp(&data.z, i, j))
    });
    order
}

fn fit_ordered(data: &CureData, n_z: usize, opts: &EmOptions) -> Result<CureModelFit> {
    let n_events = data.n_events();
    if n_events == 0 {
        return Err(Error::NoEvents("all subjects are censored".into()));
    }
    if n_events == data.len() {
        return Err(Error::Degenerate("every subject has an event; the cure fraction is not identifiable".into()));
    }

    let delta: Vec<f64> = data.events.iter().map(|&e| f64::from(u8::from(e))).collect();
    let init_inc = mstep_incidence(&data.x, &delta, None)?;
    let (init_lat, init_h0, init_capped) = fit_cox(&data.z, &data.times, &data.events, opts.zero_tail);
    let mut params = CureParameters {
        incidence: init_inc.coefficients(),
        latency: init_lat,
        baseline: init_h0,
    };
    let mut flags = FitFlags {
        incidence_capped: init_inc.capped,
        latency_capped: init_capped,
        loglik_infinite: false,
    };

    let mut trace = vec![observed_loglik(data, &params)];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let (next, report) = em_step(data, &params, opts)?;
        flags.incidence_capped |= report.incidence_capped;
        flags.latency_capped |= report.latency_capped;
        let change = next.relative_change(&params);
        params = next;
        trace.push(observed_loglik(data, &params));
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    flags.loglik_infinite = trace.iter().any(|v| !v.is_finite());
    if !converged {
        log::warn!("cure EM stopped after {iterations} iterations without converging");
    }

    let xa = augment(&data.x);
    let posterior_q = posterior(data, &xa, &params);
    let lat: Vec<f64> = params.latency.iter().copied().collect();
    Ok(CureModelFit {
        alpha0: params.incidence[0],
        alpha: params.incidence.iter().skip(1).copied().collect(),
        beta: lat[..n_z].to_vec(),
        psi: lat[n_z..].to_vec(),
        baseline: params.baseline,
        posterior_q,
        loglik_trace: trace,
        iterations,
        converged,
        flags,
    })
}

impl CureModelFit {
    pub fn parameters(&self) -> CureParameters {
        let mut inc = vec![self.alpha0];
        inc.extend(&self.alpha);
        CureParameters {
            incidence: DVector::from_vec(inc),
            latency: DVector::from_vec(self.latency_coefficients()),
            baseline: self.baseline.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> CureData {
        let times = vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 7.0];
        let events = vec![true, false, true, true, false, true, false, false, false, false];
        let x = DMatrix::from_column_slice(10, 1, &[0.5, -0.2, 1.0, 0.3, -1.0, 0.8, -0.5, 0.1, -1.2, 0.4]);
        let z = DMatrix::from_column_slice(10, 1, &[1.0, 0.0, 0.5, -0.3, 0.2, 0.9, -1.0, 0.4, 0.0, -0.6]);
        CureData::new(times, events, x, z).unwrap()
    }

    #[test]
    fn censored_beyond_last_event_contributes_log_of_cured_mass() {
        let data = CureData::new(vec![5.0], vec![false], DMatrix::zeros(1, 0), DMatrix::zeros(1, 0)).unwrap();
        let params = CureParameters {
            incidence: DVector::from_vec(vec![(0.3f64 / 0.7).ln()]),
            latency: DVector::zeros(0),
            baseline: BaselineHazard::from_increments(vec![1.0], &[0.4], true),
        };
        assert!((observed_loglik(&data, &params) - 0.7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_data_has_zero_loglik() {
        let data = CureData::new(vec![], vec![], DMatrix::zeros(0, 1), DMatrix::zeros(0, 1)).unwrap();
        let params = CureParameters {
            incidence: DVector::zeros(2),
            latency: DVector::zeros(1),
            baseline: BaselineHazard::default(),
        };
        assert_eq!(observed_loglik(&data, &params), 0.0);
    }

    #[test]
    fn fit_does_not_depend_on_input_order() {
        let data = micro();
        let order = [7, 2, 9, 0, 4, 1, 8, 3, 6, 5];
        let opts = EmOptions::default();
        let a = fit_cure_em(&data, 1, &opts).unwrap();
        let b = fit_cure_em(&data.permute(&order), 1, &opts).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(a.posterior_q[i], b.posterior_q[k]);
        }
    }

    #[test]
    fn loglik_trace_is_monotone_and_events_have_unit_q() {
        let data = micro();
        let fit = fit_cure_em(&data, 0, &EmOptions::default()).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        for (q, e) in fit.posterior_q.iter().zip(&data.events) {
            if *e {
                assert_eq!(*q, 1.0);
            }
            assert!((0.0..=1.0).contains(q));
        }
        assert_eq!(fit.psi.len(), 1);
        assert!(fit.beta.is_empty());
    }

    #[test]
    fn converged_fit_is_a_fixed_point() {
        let data = micro();
        let opts = EmOptions {
            tol: 1e-10,
            max_iter: 5000,
            ..Default::default()
        };
        let fit = fit_cure_em(&data, 1, &opts).unwrap();
        let params = fit.parameters();
        let (next, _) = em_step(&data, &params, &opts).unwrap();
        assert!(next.relative_change(&params) < 1e-3);
    }

    #[test]
    fn degenerate_inputs() {
        let x = DMatrix::zeros(3, 0);
        let z = DMatrix::zeros(3, 0);
        let all = CureData::new(vec![1.0, 2.0, 3.0], vec![true; 3], x.clone(), z.clone()).unwrap();
        assert!(matches!(fit_cure_em(&all, 0, &EmOptions::default()), Err(Error::Degenerate(_))));
        let none = CureData::new(vec![1.0, 2.0, 3.0], vec![false; 3], x, z).unwrap();
        assert!(matches!(fit_cure_em(&none, 0, &EmOptions::default()), Err(Error::NoEvents(_))));
    }
}
