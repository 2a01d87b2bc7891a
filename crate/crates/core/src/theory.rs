//! Closed-form waiting times under evenly spaced unlearning arrivals.
//!
//! Unlearning requests arrive every `T / n_u` time units and each retraining
//! takes `r`. Inferences arrive uniformly at random.

use crate::error::{invalid, Result};
use crate::scheduler::{Request, RequestKind};

/// Midpoint-rule resolution for [`expected_wait_dimp_series`].
pub const DEFAULT_INTEGRATION_POINTS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    pub n_u: usize,
    pub horizon: f64,
    pub retrain: f64,
    pub p_uc: f64,
}

impl TheoryParams {
    pub fn new(n_u: usize, horizon: f64, retrain: f64, p_uc: f64) -> Result<Self> {
        let p = Self {
            n_u,
            horizon,
            retrain,
            p_uc,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_u == 0 {
            return Err(invalid("n_u must be positive"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(invalid(format!("horizon {} must be positive", self.horizon)));
        }
        if !(self.retrain >= 0.0) || !self.retrain.is_finite() {
            return Err(invalid(format!("retrain time {} must be non-negative", self.retrain)));
        }
        if !(0.0..=1.0).contains(&self.p_uc) {
            return Err(invalid(format!("p_uc {} outside [0, 1]", self.p_uc)));
        }
        Ok(())
    }

    /// Gap between consecutive unlearning arrivals.
    pub fn period(&self) -> f64 {
        self.horizon / self.n_u as f64
    }
}

/// Expected inference wait in the halting baseline.
pub fn expected_wait_sisa(p: &TheoryParams) -> f64 {
    let period = p.period();
    let r = p.retrain;
    if r <= period {
        p.n_u as f64 * r * r / (2.0 * p.horizon)
    } else {
        r - p.horizon / (2.0 * p.n_u as f64)
    }
}

pub fn dimp_upper_bound(p: &TheoryParams) -> f64 {
    p.p_uc * expected_wait_sisa(p)
}

/// Number of models retraining when an inference arrives at `t_i`.
pub fn k_r(t_i: f64, p: &TheoryParams) -> usize {
    let period = p.period();
    let base = (p.retrain * p.n_u as f64 / p.horizon).floor() as usize;
    if t_i.rem_euclid(period) > p.retrain.rem_euclid(period) {
        base
    } else {
        base + 1
    }
}

/// Time from an arrival at `t_i` to the nearest retraining completion.
pub fn t_d(t_i: f64, p: &TheoryParams) -> f64 {
    let period = p.period();
    let a = t_i.rem_euclid(period);
    let b = p.retrain.rem_euclid(period);
    if a > b {
        period + b - a
    } else {
        b - a
    }
}

/// The two printed forms of the per-arrival series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesForm {
    /// Sum from i = 1 with `t_d` inside every term.
    Expanded,
    /// `p_uc * t_d` pulled out, remaining sum from i = 2.
    Collected,
}

/// Expected DIMP wait for an inference arriving at `t_i`.
pub fn dimp_wait_at(t_i: f64, p: &TheoryParams, form: SeriesForm) -> f64 {
    let k = k_r(t_i, p);
    if k == 0 {
        // nothing is retraining, so the answer is immediate
        return 0.0;
    }
    let td = t_d(t_i, p);
    let period = p.period();
    let q = p.p_uc;
    let tail = q.powi(k as i32);
    match form {
        SeriesForm::Expanded => {
            let body: f64 = (1..k)
                .map(|i| (1.0 - q) * q.powi(i as i32) * (td + (i - 1) as f64 * period))
                .sum();
            body + tail * (td + k.saturating_sub(1) as f64 * period)
        }
        SeriesForm::Collected => {
            let body: f64 = (2..k)
                .map(|i| (1.0 - q) * q.powi(i as i32) * (i - 1) as f64 * period)
                .sum();
            q * td + body + tail * k.saturating_sub(1) as f64 * period
        }
    }
}

/// Averages [`dimp_wait_at`] over one inter-arrival period with the
/// midpoint rule on `points` nodes.
pub fn expected_wait_dimp_series(p: &TheoryParams, form: SeriesForm, points: usize) -> f64 {
    let period = p.period();
    let points = points.max(1);
    let h = period / points as f64;
    let total: f64 = (0..points)
        .map(|j| dimp_wait_at((j as f64 + 0.5) * h, p, form))
        .sum();
    total / points as f64
}

/// Returns a warning when the unlearning arrivals of `requests` are not the
/// evenly spaced grid the formulas assume.
pub fn grid_mismatch(requests: &[Request], n_u: usize, horizon: f64) -> Option<String> {
    let times: Vec<f64> = requests
        .iter()
        .filter(|r| matches!(r.kind, RequestKind::Unlearning(_)))
        .map(|r| r.arrival)
        .collect();
    if times.len() != n_u {
        return Some(format!(
            "workload has {} unlearning requests, formulas assume {n_u}",
            times.len()
        ));
    }
    let period = horizon / n_u as f64;
    let tol = 1e-9 * horizon.max(1.0);
    times
        .iter()
        .enumerate()
        .find(|(i, t)| (**t - *i as f64 * period).abs() > tol)
        .map(|(i, t)| {
            format!(
                "unlearning request {i} arrives at {t}, not on the grid point {}; theory comparison is not meaningful",
                i as f64 * period
            )
        })
}
