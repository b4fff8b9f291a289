use serde::{Deserialize, Serialize};

/// Step-function cumulative baseline hazard `H_0`, right-continuous with
/// jumps at the distinct event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BaselineHazard {
    pub jump_times: Vec<f64>,
    /// `H_0` evaluated at each jump time (inclusive).
    pub cumulative_values: Vec<f64>,
    /// Uncured survival is taken as 0 beyond the last jump time.
    pub zero_tail: bool,
}

impl BaselineHazard {
    /// Build from sorted distinct jump times and their increments.
    pub fn from_increments(jump_times: Vec<f64>, increments: &[f64], zero_tail: bool) -> Self {
        let mut acc = 0.0;
        let cumulative_values = increments
            .iter()
            .map(|h| {
                acc += h;
                acc
            })
            .collect();
        Self {
            jump_times,
            cumulative_values,
            zero_tail,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.jump_times.is_empty()
    }

    pub fn last_jump(&self) -> Option<f64> {
        self.jump_times.last().copied()
    }

    /// `H_0(t)`: value at the last jump time `<= t`, 0 before the first.
    pub fn cumulative(&self, t: f64) -> f64 {
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative_values[k - 1]
        }
    }

    /// Hazard mass exactly at `t` (0 if `t` is not a jump time).
    pub fn jump(&self, t: f64) -> f64 {
        match self.jump_times.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(0) => self.cumulative_values[0],
            Ok(k) => self.cumulative_values[k] - self.cumulative_values[k - 1],
            Err(_) => 0.0,
        }
    }

    pub fn increments(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative_values
            .iter()
            .map(|&c| {
                let d = c - prev;
                prev = c;
                d
            })
            .collect()
    }

    /// Uncured survival `exp(-H_0(t) exp(lp))`, with the zero-tail convention.
    pub fn survival(&self, t: f64, lp: f64) -> f64 {
        if self.zero_tail && self.last_jump().is_some_and(|last| t > last) {
            return 0.0;
        }
        (-self.cumulative(t) * lp.exp()).exp()
    }
}
