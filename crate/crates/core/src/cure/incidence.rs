//! Incidence M-step: fractional-response logistic regression maximizing
//! `Q1 = sum_i q_i log pi(X_i) + (1 - q_i) log(1 - pi(X_i))`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Bound on `|alpha_0 + alpha'X_i|` guarding against separation.
pub const INCIDENCE_LP_CAP: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceFit {
    pub alpha0: f64,
    pub alpha: Vec<f64>,
    /// The linear-predictor cap was binding.
    pub capped: bool,
    pub iterations: usize,
    /// Max-norm of the gradient of `Q1` at the returned point.
    pub gradient_norm: f64,
}

impl IncidenceFit {
    pub fn coefficients(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.alpha.len() + 1);
        v[0] = self.alpha0;
        for (k, a) in self.alpha.iter().enumerate() {
            v[k + 1] = *a;
        }
        v
    }
}

/// Prepend an intercept column.
pub(crate) fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.nrows();
    let mut out = DMatrix::from_element(m, x.ncols() + 1, 1.0);
    out.view_mut((0, 1), (m, x.ncols())).copy_from(x);
    out
}

fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `Q1` at coefficients `coef` (intercept first) on augmented design `xa`.
pub fn incidence_objective(xa: &DMatrix<f64>, q: &[f64], coef: &DVector<f64>) -> f64 {
    let eta = xa * coef;
    eta.iter()
        .zip(q)
        .map(|(&e, &qi)| qi * e - log1pexp(e))
        .sum()
}

pub fn incidence_gradient(xa: &DMatrix<f64>, q: &[f64], coef: &DVector<f64>) -> DVector<f64> {
    let eta = xa * coef;
    let resid = DVector::from_iterator(q.len(), eta.iter().zip(q).map(|(&e, &qi)| qi - sigmoid(e)));
    xa.transpose() * resid
}

pub(crate) fn sigmoid(e: f64) -> f64 {
    if e >= 0.0 {
        1.0 / (1.0 + (-e).exp())
    } else {
        let z = e.exp();
        z / (1.0 + z)
    }
}

/// Largest step `t` such that `|eta + t d| <= cap` elementwise.
pub(crate) fn max_step_within_cap(eta: &DVector<f64>, d: &DVector<f64>, cap: f64) -> f64 {
    let mut t_max = f64::INFINITY;
    for (&e, &di) in eta.iter().zip(d.iter()) {
        if di > 0.0 {
            t_max = t_max.min(((cap - e) / di).max(0.0));
        } else if di < 0.0 {
            t_max = t_max.min(((-cap - e) / di).max(0.0));
        }
    }
    t_max
}

/// Newton–Raphson for the incidence coefficients, monotone in `Q1`.
pub fn mstep_incidence(x: &DMatrix<f64>, q: &[f64], start: Option<&DVector<f64>>) -> Result<IncidenceFit> {
    let m = x.nrows();
    if q.len() != m {
        return Err(Error::InvalidInput("weight vector length differs from design rows".into()));
    }
    if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("posterior weights must lie in [0, 1]".into()));
    }
    let xa = augment(x);
    let p = xa.ncols();
    let mut coef = start.cloned().unwrap_or_else(|| DVector::zeros(p));
    if (&xa * &coef).amax() > INCIDENCE_LP_CAP {
        coef = DVector::zeros(p);
    }
    let mut capped = false;
    let mut f = incidence_objective(&xa, q, &coef);
    let mut iterations = 0;
    let mut grad = incidence_gradient(&xa, q, &coef);

    for it in 1..=100 {
        iterations = it;
        if grad.amax() < 1e-8 {
            break;
        }
        let eta = &xa * &coef;
        let mut info = DMatrix::zeros(p, p);
        for i in 0..m {
            let pi = sigmoid(eta[i]);
            let row = xa.row(i);
            info += row.transpose() * row * (pi * (1.0 - pi));
        }
        let dir = solve_pd(info, &grad)
            .ok_or_else(|| Error::Singular("incidence information matrix".into()))?;
        let xd = &xa * &dir;
        let t_cap = max_step_within_cap(&eta, &xd, INCIDENCE_LP_CAP);
        let mut t = 1.0f64.min(t_cap);
        if t_cap < 1.0 {
            capped = true;
        }
        if t <= 1e-12 {
            break;
        }
        let mut moved = false;
        for _ in 0..60 {
            let trial = &coef + &dir * t;
            let ft = incidence_objective(&xa, q, &trial);
            if ft >= f {
                coef = trial;
                f = ft;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
        grad = incidence_gradient(&xa, q, &coef);
    }
    let gradient_norm = grad.amax();
    Ok(IncidenceFit {
        alpha0: coef[0],
        alpha: coef.iter().skip(1).copied().collect(),
        capped,
        iterations,
        gradient_norm,
    })
}

/// Solve `A d = g` for symmetric positive (semi)definite `A`, adding a small
/// ridge if needed.
pub(crate) fn solve_pd(a: DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    let scale = a.diagonal().amax().max(1e-300);
    for ridge in [0.0, 1e-12, 1e-9, 1e-6, 1e-3] {
        let reg = &a + DMatrix::identity(n, n) * (ridge * scale);
        if let Some(ch) = reg.cholesky() {
            let d = ch.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_weights_give_flat_fit() {
        let x = DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let fit = mstep_incidence(&x, &[0.5; 4], None).unwrap();
        assert!(fit.alpha0.abs() < 1e-12 && fit.alpha[0].abs() < 1e-12);
        assert!(!fit.capped);
    }

    #[test]
    fn all_uncured_caps() {
        let x = DMatrix::from_column_slice(5, 1, &[-1.0, 0.3, 0.2, 2.0, -0.7]);
        let fit = mstep_incidence(&x, &[1.0; 5], None).unwrap();
        assert!(fit.capped);
        let lp: Vec<f64> = x.iter().map(|v| fit.alpha0 + fit.alpha[0] * v).collect();
        assert!(lp.iter().all(|e| *e <= INCIDENCE_LP_CAP + 1e-9));
        assert!(lp.iter().cloned().fold(f64::INFINITY, f64::min) > 5.0);
    }

    #[test]
    fn intercept_only_matches_mean() {
        let x = DMatrix::zeros(4, 0);
        let fit = mstep_incidence(&x, &[0.2, 0.9, 0.6, 0.3], None).unwrap();
        assert!((sigmoid(fit.alpha0) - 0.5).abs() < 1e-10);
        assert!(fit.gradient_norm < 1e-8);
    }

    #[test]
    fn rejects_bad_weights() {
        let x = DMatrix::zeros(2, 0);
        assert!(mstep_incidence(&x, &[0.5, 1.5], None).is_err());
    }
}
