//! Nonparametric survival estimators: Kaplan–Meier, Nelson–Aalen, the
//! log-rank test and log-log curve data.
//!
//! Estimators are built from a [`RiskTable`] of integer counts at the
//! distinct event times. The table can be evaluated in any numeric type
//! implementing `num_traits::Num`, which lets callers check the floating
//! point estimators against exact rational arithmetic.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_traits::{FromPrimitive, Num};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SurvError {
    #[error("empty input")]
    Empty,
    #[error("input lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("time values must be finite and >= 0")]
    InvalidTime,
    #[error("log-rank test needs at least two non-empty groups")]
    SingleGroup,
    #[error("log-rank variance matrix is singular")]
    SingularVariance,
}

/// Right-continuous step function. The value on `[knots[i], knots[i+1])`
/// is `values[i]`; before the first knot it is `value_at_zero`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    pub value_at_zero: f64,
}

impl StepFunction {
    pub fn eval(&self, t: f64) -> f64 {
        // index of the last knot <= t
        match self.knots.partition_point(|&k| k <= t) {
            0 => self.value_at_zero,
            i => self.values[i - 1],
        }
    }

    /// Left limit at `t` (value just before `t`).
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.knots.partition_point(|&k| k < t) {
            0 => self.value_at_zero,
            i => self.values[i - 1],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }
}

/// One row per distinct event time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RiskRow {
    pub n_at_risk: u64,
    pub n_events: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskTable {
    pub times: Vec<f64>,
    pub rows: Vec<RiskRow>,
}

fn check_inputs(times: &[f64], events: &[bool]) -> Result<(), SurvError> {
    if times.len() != events.len() {
        return Err(SurvError::LengthMismatch(times.len(), events.len()));
    }
    if times.is_empty() {
        return Err(SurvError::Empty);
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(SurvError::InvalidTime);
    }
    Ok(())
}

impl RiskTable {
    /// Counts at each distinct event time. A censoring tied with an event
    /// is still at risk at that event time.
    pub fn new(times: &[f64], events: &[bool]) -> Result<Self, SurvError> {
        check_inputs(times, events)?;
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let mut at_risk = times.len() as u64;
        let mut out_t = Vec::new();
        let mut rows = Vec::new();
        let mut i = 0;
        while i < order.len() {
            let t = times[order[i]];
            let mut j = i;
            let mut d = 0u64;
            while j < order.len() && times[order[j]] == t {
                d += u64::from(events[order[j]]);
                j += 1;
            }
            if d > 0 {
                out_t.push(t);
                rows.push(RiskRow {
                    n_at_risk: at_risk,
                    n_events: d,
                });
            }
            at_risk -= (j - i) as u64;
            i = j;
        }
        Ok(RiskTable { times: out_t, rows })
    }

    /// Product-limit survival after each event time.
    pub fn survival<T: Num + Copy + FromPrimitive>(&self) -> Vec<T> {
        let mut s = T::one();
        self.rows
            .iter()
            .map(|r| {
                let n = T::from_u64(r.n_at_risk).expect("count fits");
                let d = T::from_u64(r.n_events).expect("count fits");
                s = s * (n - d) / n;
                s
            })
            .collect()
    }

    /// Cumulative hazard sum of d/n after each event time.
    pub fn cumulative_hazard<T: Num + Copy + FromPrimitive>(&self) -> Vec<T> {
        let mut h = T::zero();
        self.rows
            .iter()
            .map(|r| {
                h = h + T::from_u64(r.n_events).expect("count fits")
                    / T::from_u64(r.n_at_risk).expect("count fits");
                h
            })
            .collect()
    }
}

pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction, SurvError> {
    let table = RiskTable::new(times, events)?;
    Ok(StepFunction {
        values: table.survival::<f64>(),
        knots: table.times,
        value_at_zero: 1.0,
    })
}

pub fn nelson_aalen(times: &[f64], events: &[bool]) -> Result<StepFunction, SurvError> {
    let table = RiskTable::new(times, events)?;
    Ok(StepFunction {
        values: table.cumulative_hazard::<f64>(),
        knots: table.times,
        value_at_zero: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub df: usize,
    pub p_value: f64,
    /// Per-group (label order) observed and expected event counts.
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
}

/// K-sample log-rank test with the hypergeometric variance and no
/// continuity correction.
pub fn logrank_test<G: Ord + Clone>(
    times: &[f64],
    events: &[bool],
    groups: &[G],
) -> Result<LogRankResult, SurvError> {
    check_inputs(times, events)?;
    if groups.len() != times.len() {
        return Err(SurvError::LengthMismatch(times.len(), groups.len()));
    }
    let labels: BTreeMap<&G, usize> = {
        let mut m = BTreeMap::new();
        for g in groups {
            m.entry(g).or_insert(0);
        }
        for (k, v) in m.values_mut().enumerate() {
            *v = k;
        }
        m
    };
    let k = labels.len();
    if k < 2 {
        return Err(SurvError::SingleGroup);
    }
    let gidx: Vec<usize> = groups.iter().map(|g| labels[g]).collect();

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = vec![0f64; k];
    for &g in &gidx {
        at_risk[g] += 1.0;
    }
    let mut observed = vec![0f64; k];
    let mut expected = vec![0f64; k];
    let mut var = DMatrix::<f64>::zeros(k, k);

    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut deaths = vec![0f64; k];
        let mut leaving = vec![0f64; k];
        while j < order.len() && times[order[j]] == t {
            let s = order[j];
            if events[s] {
                deaths[gidx[s]] += 1.0;
            }
            leaving[gidx[s]] += 1.0;
            j += 1;
        }
        let d: f64 = deaths.iter().sum();
        let n: f64 = at_risk.iter().sum();
        if d > 0.0 {
            for g in 0..k {
                observed[g] += deaths[g];
                expected[g] += d * at_risk[g] / n;
            }
            if n > 1.0 {
                let c = d * (n - d) / (n - 1.0);
                for a in 0..k {
                    for b in 0..k {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        var[(a, b)] += c * (at_risk[a] / n) * (delta - at_risk[b] / n);
                    }
                }
            }
        }
        for g in 0..k {
            at_risk[g] -= leaving[g];
        }
        i = j;
    }

    // drop the last group; the remaining block is nonsingular when every
    // group contributes to some risk set with d > 0
    let m = k - 1;
    let diff = DVector::from_fn(m, |g, _| observed[g] - expected[g]);
    let v = var.view((0, 0), (m, m)).into_owned();
    let chi_square = if diff.iter().all(|x| *x == 0.0) {
        0.0
    } else {
        let chol = v.cholesky().ok_or(SurvError::SingularVariance)?;
        diff.dot(&chol.solve(&diff))
    };
    let p_value = ChiSquared::new(m as f64)
        .expect("df >= 1")
        .sf(chi_square)
        .clamp(0.0, 1.0);
    Ok(LogRankResult {
        chi_square,
        df: m,
        p_value,
        observed,
        expected,
    })
}

/// `(log t, log(-log S(t)))` at the knots where `0 < S(t) < 1` and `t > 0`.
pub fn loglog_curve(km: &StepFunction) -> Vec<(f64, f64)> {
    km.knots
        .iter()
        .zip(&km.values)
        .filter(|(t, s)| **t > 0.0 && **s > 0.0 && **s < 1.0)
        .map(|(t, s)| (t.ln(), (-s.ln()).ln()))
        .collect()
}
