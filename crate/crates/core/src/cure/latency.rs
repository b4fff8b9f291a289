//! Latency M-step: q-weighted Cox partial likelihood with Breslow ties and
//! the matching weighted Breslow estimator of `H_0`.

use nalgebra::{DMatrix, DVector};

use super::baseline::BaselineHazard;
use super::incidence::{max_step_within_cap, solve_pd};

/// Bound on `|beta'Z_i + psi'b_i|` guarding against a monotone likelihood.
pub const LATENCY_LP_CAP: f64 = 30.0;

/// Survival data in post-landmark time with per-subject risk-set weights.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSurvival<'a> {
    pub times: &'a [f64],
    pub events: &'a [bool],
    /// Risk-set weights (`q_i`; all ones for an ordinary Cox model).
    pub weights: &'a [f64],
}

/// Groups of tied times in descending order, computed once per data set.
fn tie_groups(times: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if times[g[0]] == times[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

#[derive(Debug, Clone)]
pub struct PartialLikelihood {
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Negative Hessian (observed information).
    pub information: DMatrix<f64>,
}

/// Weighted log partial likelihood
/// `sum_events lp_i - sum_k d_k log sum_{j in R_k} w_j exp(lp_j)`.
pub fn partial_loglik(
    z: &DMatrix<f64>,
    data: WeightedSurvival<'_>,
    coef: &DVector<f64>,
    derivatives: bool,
) -> PartialLikelihood {
    let p = z.ncols();
    let lp = z * coef;
    let shift = lp
        .iter()
        .zip(data.weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(e, _)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut information = DMatrix::zeros(p, p);
    for group in tie_groups(data.times) {
        for &i in &group {
            let r = data.weights[i] * (lp[i] - shift).exp();
            if r > 0.0 {
                s0 += r;
                if derivatives {
                    let zi = z.row(i).transpose();
                    s1 += &zi * r;
                    s2 += &zi * zi.transpose() * r;
                }
            }
        }
        let d = group.iter().filter(|&&i| data.events[i]).count();
        if d == 0 {
            continue;
        }
        for &i in group.iter().filter(|&&i| data.events[i]) {
            value += lp[i];
            if derivatives {
                gradient += z.row(i).transpose();
            }
        }
        let df = d as f64;
        value -= df * (s0.ln() + shift);
        if derivatives {
            let mean = &s1 / s0;
            gradient -= &mean * df;
            information += (&s2 / s0 - &mean * mean.transpose()) * df;
        }
    }
    PartialLikelihood {
        value,
        gradient,
        information,
    }
}

/// Weighted Breslow estimator at fixed coefficients:
/// jump `d_k / sum_{j in R_k} w_j exp(lp_j)` at each distinct event time.
pub fn breslow(z: &DMatrix<f64>, data: WeightedSurvival<'_>, coef: &DVector<f64>, zero_tail: bool) -> BaselineHazard {
    let lp = z * coef;
    let mut s0 = 0.0;
    let mut jumps = Vec::new();
    for group in tie_groups(data.times) {
        for &i in &group {
            s0 += data.weights[i] * lp[i].exp();
        }
        let d = group.iter().filter(|&&i| data.events[i]).count();
        if d > 0 {
            jumps.push((data.times[group[0]], d as f64 / s0));
        }
    }
    jumps.reverse();
    let (times, inc): (Vec<f64>, Vec<f64>) = jumps.into_iter().unzip();
    BaselineHazard::from_increments(times, &inc, zero_tail)
}

#[derive(Debug, Clone)]
pub struct LatencyUpdate {
    pub coef: DVector<f64>,
    pub baseline: BaselineHazard,
    pub capped: bool,
    /// No events: coefficients left unchanged and `H_0 = 0`.
    pub no_events: bool,
    pub newton_steps: usize,
}

/// Up to `max_newton` monotone Newton steps on the weighted partial
/// likelihood from `start`, then the weighted Breslow update of `H_0`.
pub fn mstep_latency(
    z: &DMatrix<f64>,
    data: WeightedSurvival<'_>,
    start: &DVector<f64>,
    max_newton: usize,
    zero_tail: bool,
) -> LatencyUpdate {
    if !data.events.iter().any(|&e| e) {
        return LatencyUpdate {
            coef: start.clone(),
            baseline: BaselineHazard {
                zero_tail,
                ..Default::default()
            },
            capped: false,
            no_events: true,
            newton_steps: 0,
        };
    }
    let mut coef = start.clone();
    let mut capped = false;
    let mut steps = 0;
    if z.ncols() > 0 {
        let mut pl = partial_loglik(z, data, &coef, true);
        for _ in 0..max_newton {
            if pl.gradient.amax() < 1e-10 {
                break;
            }
            let Some(dir) = solve_pd(pl.information.clone(), &pl.gradient) else {
                break;
            };
            let lp = z * &coef;
            let zd = z * &dir;
            let t_cap = max_step_within_cap(&lp, &zd, LATENCY_LP_CAP);
            if t_cap < 1.0 {
                capped = true;
            }
            let mut t = t_cap.min(1.0);
            if t <= 1e-12 {
                break;
            }
            let mut moved = false;
            for _ in 0..60 {
                let trial = &coef + &dir * t;
                let val = partial_loglik(z, data, &trial, false).value;
                if val >= pl.value {
                    coef = trial;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
            steps += 1;
            pl = partial_loglik(z, data, &coef, true);
        }
    }
    let baseline = breslow(z, data, &coef, zero_tail);
    LatencyUpdate {
        coef,
        baseline,
        capped,
        no_events: false,
        newton_steps: steps,
    }
}
