//! Brute-force metric definitions by direct enumeration.

pub const EXACT: f64 = 1e-12;

/// Censoring survival by direct counting over the distinct censoring times
/// up to `s` (inclusive when `inclusive`).
pub fn g_oracle(times: &[f64], events: &[bool], s: f64, inclusive: bool) -> f64 {
    let mut cens: Vec<f64> = (0..times.len()).filter(|&i| !events[i]).map(|i| times[i]).collect();
    cens.sort_by(f64::total_cmp);
    cens.dedup();
    cens.iter()
        .filter(|&&c| if inclusive { c <= s } else { c < s })
        .map(|&c| {
            let d = (0..times.len()).filter(|&i| !events[i] && times[i] == c).count() as f64;
            let r = (0..times.len()).filter(|&i| times[i] >= c).count() as f64;
            1.0 - d / r
        })
        .product()
}

/// IPCW weight of subject `i` at `t`; `None` where the needed `G` is 0.
pub fn w_oracle(times: &[f64], events: &[bool], i: usize, t: f64) -> Option<f64> {
    let g = if times[i] <= t && events[i] {
        g_oracle(times, events, times[i], false)
    } else if times[i] > t {
        g_oracle(times, events, t, true)
    } else {
        return Some(0.0);
    };
    (g > 0.0).then(|| 1.0 / g)
}

pub fn auc_t_oracle(eta: &[f64], times: &[f64], events: &[bool], t: f64) -> Option<f64> {
    let n = eta.len();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let case = times[i] <= t && events[i];
            let control = times[j] > t;
            if i == j || !case || !control {
                continue;
            }
            let (Some(wi), Some(wj)) = (w_oracle(times, events, i, t), w_oracle(times, events, j, t)) else {
                continue;
            };
            den += wi * wj;
            if eta[i] > eta[j] {
                num += wi * wj;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn brier_t_oracle(surv: &[f64], times: &[f64], events: &[bool], t: f64) -> Option<f64> {
    let terms: Vec<f64> = (0..surv.len())
        .filter_map(|i| {
            let w = w_oracle(times, events, i, t)?;
            let alive = f64::from(u8::from(times[i] > t));
            Some(w * (alive - surv[i]).powi(2))
        })
        .collect();
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

pub fn auc_inc_oracle(eta: &[f64], q: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..eta.len() {
        for j in 0..eta.len() {
            if i != j {
                let w = q[i] * (1.0 - q[j]);
                den += w;
                if eta[i] > eta[j] {
                    num += w;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn brier_inc_oracle(p: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let last = (0..times.len()).filter(|&i| events[i]).map(|i| times[i]).reduce(f64::max)?;
    let terms: Vec<f64> = (0..p.len())
        .filter_map(|i| {
            let g = if events[i] {
                1.0
            } else if times[i] > last {
                0.0
            } else {
                return None;
            };
            let gc = g_oracle(times, events, times[i], false);
            (gc > 0.0).then(|| (p[i] - g).powi(2) / gc)
        })
        .collect();
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

pub fn c_index_oracle(eta: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let (mut conc, mut comp) = (0u32, 0u32);
    for i in 0..eta.len() {
        for j in (i + 1)..eta.len() {
            // Orient the pair so `a` fails first.
            let (a, b) = if times[i] < times[j] || (times[i] == times[j] && events[i]) { (i, j) } else { (j, i) };
            let usable = events[a] && (times[a] < times[b] || !events[b]);
            if usable {
                comp += 1;
                if eta[a] > eta[b] {
                    conc += 1;
                }
            }
        }
    }
    (comp > 0).then(|| f64::from(conc) / f64::from(comp))
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= EXACT,
        (None, None) => true,
        _ => false,
    }
}

