//! Predictive performance measures for cure models, corrected for censoring
//! by inverse probability of censoring weights (IPCW).
//!
//! Pairwise indices use strict inequality between scores: tied scores never
//! count as concordant. Undefined values (empty denominators) are `None`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::error::{Error, Result};

/// Kaplan–Meier estimate `G` of the censoring survival function, treating
/// `event == false` as the event of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoringKm {
    /// Distinct censoring times.
    pub times: Vec<f64>,
    /// `G` just after each censoring time.
    pub survival: Vec<f64>,
}

/// Product-limit estimator of the censoring distribution. The risk set at
/// `s` is every subject with `t_i >= s`.
pub fn km_censoring(times: &[f64], events: &[bool]) -> CensoringKm {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let n = times.len();
    let mut out = CensoringKm {
        times: Vec::new(),
        survival: Vec::new(),
    };
    let mut g = 1.0;
    let mut k = 0;
    while k < n {
        let t = times[order[k]];
        let at_risk = n - k;
        let mut censored = 0;
        let mut j = k;
        while j < n && times[order[j]] == t {
            if !events[order[j]] {
                censored += 1;
            }
            j += 1;
        }
        if censored > 0 {
            g *= 1.0 - censored as f64 / at_risk as f64;
            out.times.push(t);
            out.survival.push(g);
        }
        k = j;
    }
    out
}

impl CensoringKm {
    /// `G(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// `G(t-)`.
    pub fn before(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

fn inverse(g: f64) -> Option<f64> {
    (g > 0.0).then(|| 1.0 / g)
}

/// Per-subject IPCW weights at a fixed time `t`: `1/G(t_i-)` for events at or
/// before `t`, `1/G(t)` for subjects still at risk after `t`, and 0 for
/// subjects censored at or before `t`. `None` marks a needed `G` equal to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringWeights {
    pub t: f64,
    pub weights: Vec<Option<f64>>,
}

impl CensoringWeights {
    pub fn at_time(km: &CensoringKm, times: &[f64], events: &[bool], t: f64) -> Self {
        let g_t = km.at(t);
        let weights = times
            .iter()
            .zip(events)
            .map(|(&ti, &ei)| {
                if ti <= t && ei {
                    inverse(km.before(ti))
                } else if ti > t {
                    inverse(g_t)
                } else {
                    Some(0.0)
                }
            })
            .collect();
        Self { t, weights }
    }
}

/// `sum_{i != j} 1[eta_i > eta_j] q_i (1 - q_j) / sum_{i != j} q_i (1 - q_j)`.
pub fn weighted_auc_inc(eta: &[f64], q: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..eta.len() {
        if q[i] == 0.0 {
            continue;
        }
        for j in 0..eta.len() {
            if i == j {
                continue;
            }
            let w = q[i] * (1.0 - q[j]);
            den += w;
            if eta[i] > eta[j] {
                num += w;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Cure status known from the data: 1 for events, 0 for subjects censored
/// after the largest event time, unknown otherwise. Without events nothing
/// is known about censored subjects.
pub fn determinable_status(times: &[f64], events: &[bool]) -> Vec<Option<f64>> {
    let last_event = times
        .iter()
        .zip(events)
        .filter(|(_, e)| **e)
        .map(|(t, _)| *t)
        .fold(f64::NEG_INFINITY, f64::max);
    times
        .iter()
        .zip(events)
        .map(|(&t, &e)| {
            if e {
                Some(1.0)
            } else if last_event.is_finite() && t > last_event {
                Some(0.0)
            } else {
                None
            }
        })
        .collect()
}

/// `(1/m) sum_i u_i (p_i - G_i)^2` over the `m` subjects whose cure status is
/// determinable, with `u_i = 1/G(t_i-)`.
pub fn weighted_brier_inc(pred: &[f64], times: &[f64], events: &[bool], km: &CensoringKm) -> Option<f64> {
    let status = determinable_status(times, events);
    let mut sum = 0.0;
    let mut m = 0usize;
    for i in 0..pred.len() {
        let Some(g) = status[i] else { continue };
        let Some(u) = inverse(km.before(times[i])) else { continue };
        sum += u * (pred[i] - g).powi(2);
        m += 1;
    }
    (m > 0).then(|| sum / m as f64)
}

/// Cumulative/dynamic AUC at `t`: cases have an event at or before `t`,
/// controls are still event-free after `t`.
pub fn auc_lat_t(eta: &[f64], times: &[f64], events: &[bool], t: f64, w: &CensoringWeights) -> Option<f64> {
    let n = eta.len();
    let case = |i: usize| times[i] <= t && events[i];
    let mut num = 0.0;
    let mut den = 0.0;
    for i in (0..n).filter(|&i| case(i)) {
        let Some(wi) = w.weights[i] else { continue };
        for j in (0..n).filter(|&j| j != i && !case(j)) {
            let Some(wj) = w.weights[j] else { continue };
            let pair = wi * wj;
            den += pair;
            if eta[i] > eta[j] {
                num += pair;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// IPCW Brier score at `t`, averaged over all `n` subjects (those censored
/// before `t` enter with weight 0).
pub fn brier_lat_t(surv: &[f64], times: &[f64], t: f64, w: &CensoringWeights) -> Option<f64> {
    let n = surv.len();
    if n == 0 {
        return None;
    }
    let mut sum = 0.0;
    let mut used = 0;
    for i in 0..n {
        let Some(u) = w.weights[i] else { continue };
        let alive = if times[i] > t { 1.0 } else { 0.0 };
        sum += u * (alive - surv[i]).powi(2);
        used += 1;
    }
    (used > 0).then(|| sum / used as f64)
}

/// Harrell-type concordance with
/// `D_ij = 1[t_i < t_j, d_i] + 1[t_i = t_j, d_i, !d_j]`.
pub fn c_index(eta: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let n = eta.len();
    let mut num = 0usize;
    let mut den = 0usize;
    for i in (0..n).filter(|&i| events[i]) {
        for j in 0..n {
            if i == j {
                continue;
            }
            let comparable = times[i] < times[j] || (times[i] == times[j] && !events[j]);
            if comparable {
                den += 1;
                if eta[i] > eta[j] {
                    num += 1;
                }
            }
        }
    }
    (den > 0).then(|| num as f64 / den as f64)
}

/// `n` equispaced post-landmark points strictly between the landmark and the
/// 90th percentile of the observed post-landmark times. The upper end is
/// excluded because it often coincides with administrative censoring, where
/// no controls remain.
pub fn default_grid(times: &[f64], n: usize) -> Vec<f64> {
    let q90 = quantile(times, 0.9);
    (1..=n).map(|k| q90 * k as f64 / (n + 1) as f64).collect()
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Everything needed to score one set of predictions.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationInput<'a> {
    pub times: &'a [f64],
    pub events: &'a [bool],
    pub eta_inc: &'a [f64],
    /// Posterior uncured probabilities weighting the incidence AUC.
    pub q: &'a [f64],
    /// Uncured probabilities scored by the incidence Brier score.
    pub pi: &'a [f64],
    pub eta_lat: &'a [f64],
    /// `surv[k][i]` = predicted overall survival of subject `i` at `grid[k]`.
    pub surv: &'a [Vec<f64>],
    pub grid: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc_inc: Option<f64>,
    pub brier_inc: Option<f64>,
    /// Post-landmark grid of the time-dependent curves.
    pub grid: Vec<f64>,
    pub auc_lat: Vec<Option<f64>>,
    pub brier_lat: Vec<Option<f64>>,
    pub c_index: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn evaluate(input: EvaluationInput<'_>) -> Result<MetricReport> {
    let n = input.times.len();
    let lens = [
        input.events.len(),
        input.eta_inc.len(),
        input.q.len(),
        input.pi.len(),
        input.eta_lat.len(),
    ];
    if lens.iter().any(|&l| l != n) || input.surv.len() != input.grid.len() || input.surv.iter().any(|s| s.len() != n) {
        return Err(Error::InvalidInput("evaluation inputs differ in length".into()));
    }
    let km = km_censoring(input.times, input.events);
    let mut warnings = Vec::new();
    let auc_inc = weighted_auc_inc(input.eta_inc, input.q);
    let brier_inc = weighted_brier_inc(input.pi, input.times, input.events, &km);
    let c = c_index(input.eta_lat, input.times, input.events);
    let mut auc_lat = Vec::with_capacity(input.grid.len());
    let mut brier_lat = Vec::with_capacity(input.grid.len());
    for (k, &t) in input.grid.iter().enumerate() {
        let w = CensoringWeights::at_time(&km, input.times, input.events, t);
        if w.weights.iter().any(Option::is_none) {
            warnings.push(format!("censoring survival reaches 0 before t = {t}; affected subjects excluded"));
        }
        auc_lat.push(auc_lat_t(input.eta_lat, input.times, input.events, t, &w));
        brier_lat.push(brier_lat_t(&input.surv[k], input.times, t, &w));
    }
    for (name, v) in [("auc_inc", auc_inc), ("brier_inc", brier_inc), ("c_index", c)] {
        if v.is_none() {
            warnings.push(format!("{name} undefined"));
        }
    }
    if auc_lat.iter().any(Option::is_none) {
        warnings.push("time-dependent AUC undefined at some grid points".into());
    }
    if has_ties(input.eta_inc) {
        warnings.push("tied incidence scores count as discordant".into());
    }
    if has_ties(input.eta_lat) {
        warnings.push("tied latency scores count as discordant".into());
    }
    Ok(MetricReport {
        auc_inc,
        brier_inc,
        grid: input.grid.to_vec(),
        auc_lat,
        brier_lat,
        c_index: c,
        warnings,
    })
}

fn has_ties(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

/// Write labelled reports as `strategy,metric,time,value` rows. Curve times
/// are shifted by `landmark` back to study time.
pub fn write_metrics_csv(path: &Path, landmark: f64, reports: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "metric", "time", "value"])?;
    let na = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), fmt_f64);
    for (label, r) in reports {
        for (name, v) in [("auc_inc", r.auc_inc), ("brier_inc", r.brier_inc), ("c_index", r.c_index)] {
            w.write_record([label.as_str(), name, "NA", &na(v)])?;
        }
        for (k, t) in r.grid.iter().enumerate() {
            let time = fmt_f64(t + landmark);
            w.write_record([label.as_str(), "auc_lat", &time, &na(r.auc_lat[k])])?;
            w.write_record([label.as_str(), "brier_lat", &time, &na(r.brier_lat[k])])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
