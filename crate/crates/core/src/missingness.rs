//! MAR amputation of one categorical covariate, response-propensity
//! estimation, and inverse-probability / κ-hybrid analysis weights.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, ColumnKind, DataError, Dataset};
use crate::mi_engine::{build_predictors, PredictorRecipe};
use crate::regressors::{fit_logistic, GlmError};
use crate::seeds;

#[derive(Debug, Error)]
pub enum MissingnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("missingness rate {0} is outside [0, 1]")]
    InvalidRate(f64),
    #[error("target `{0}` already has missing cells")]
    TargetAlreadyMissing(String),
    #[error("target `{0}` must be a categorical covariate")]
    TargetNotCategorical(String),
    #[error("predictor `{0}` is the target or is not fully observed")]
    InvalidPredictor(String),
    #[error("{0} predictor weights for {1} predictors")]
    WeightCount(usize, usize),
    #[error("no missingness to model: every target cell is {0}")]
    Degenerate(&'static str),
    #[error("propensity model: {0}")]
    Propensity(#[from] GlmError),
    #[error("kappa {0} is outside [0, 1]")]
    InvalidKappa(f64),
    #[error("propensity {value} at row {row} is outside the truncation bounds [{lower}, {upper}]")]
    PropensityOutOfRange {
        row: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("invalid truncation bounds [{0}, {1}]")]
    InvalidBounds(f64, f64),
    #[error("could not solve for the amputation intercept")]
    Calibration,
}

pub type Result<T> = std::result::Result<T, MissingnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmputationPlan {
    pub target: String,
    pub predictors: Vec<String>,
    /// Expected fraction of target cells set missing.
    pub rate: f64,
    /// Weight of each (standardized) predictor in the missingness score.
    /// Empty means weight 1 for every predictor.
    #[serde(default)]
    pub predictor_weights: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Amputed {
    pub dataset: Dataset,
    /// R: `true` where the target stays observed.
    pub observed: Vec<bool>,
    /// Probability of each row being set missing.
    pub missing_probability: Vec<f64>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standardizes each column; constant columns become zero.
fn standardize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mut out = m.clone();
    for mut c in out.column_iter_mut() {
        let mean = c.sum() / n;
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for v in c.iter_mut() {
            *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Intercept `b` with `mean(logistic(b + s)) = rate`.
fn solve_intercept(score: &[f64], rate: f64) -> Result<f64> {
    let mean_p = |b: f64| score.iter().map(|s| logistic(b + s)).sum::<f64>() / score.len() as f64;
    let span = score.iter().fold(0.0f64, |m, s| m.max(s.abs())) + 50.0;
    let (mut lo, mut hi) = (-span, span);
    if !(mean_p(lo) < rate && mean_p(hi) > rate) {
        return Err(MissingnessError::Calibration);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Systematic unequal-probability selection in random order: each unit
/// is selected with exactly its probability, and the selected count is
/// within one of the probability sum.
fn systematic_select<R: Rng + ?Sized>(prob: &[f64], rng: &mut R) -> Vec<bool> {
    let mut order: Vec<usize> = (0..prob.len()).collect();
    order.shuffle(rng);
    let start: f64 = rng.random();
    let mut chosen = vec![false; prob.len()];
    let mut cum = 0.0;
    for &i in &order {
        let next = cum + prob[i];
        // a point start + m falls in [cum, next)
        chosen[i] = (next - start).ceil() > (cum - start).ceil();
        cum = next;
    }
    chosen
}

/// Sets target cells missing at random given the plan's predictors.
///
/// Each row is set missing with probability `logistic(b + Σ a_j z_j)`,
/// where `z_j` are the standardized predictors, `a_j` the plan weights and
/// `b` solved so the mean probability equals the rate.
pub fn ampute_mar(dataset: &Dataset, plan: &AmputationPlan) -> Result<Amputed> {
    if !(0.0..=1.0).contains(&plan.rate) {
        return Err(MissingnessError::InvalidRate(plan.rate));
    }
    let target = dataset.column(&plan.target)?;
    if target.kind != ColumnKind::Categorical {
        return Err(MissingnessError::TargetNotCategorical(plan.target.clone()));
    }
    if target.missing_count() > 0 {
        return Err(MissingnessError::TargetAlreadyMissing(plan.target.clone()));
    }
    for p in &plan.predictors {
        if *p == plan.target || dataset.column(p)?.missing_count() > 0 {
            return Err(MissingnessError::InvalidPredictor(p.clone()));
        }
    }
    let weights = if plan.predictor_weights.is_empty() {
        vec![1.0; plan.predictors.len()]
    } else if plan.predictor_weights.len() == plan.predictors.len() {
        plan.predictor_weights.clone()
    } else {
        return Err(MissingnessError::WeightCount(
            plan.predictor_weights.len(),
            plan.predictors.len(),
        ));
    };

    let n = dataset.n_rows();
    let design = dataio::encode(dataset, &plan.predictors)?;
    let z = standardize(&design.matrix);
    let mut score = vec![0.0; n];
    for (term_idx, term) in design.terms.iter().enumerate() {
        let cols = match term {
            dataio::Term::Continuous { column, .. } => *column..*column + 1,
            dataio::Term::Categorical { columns, .. } => columns.clone(),
        };
        for j in cols {
            for (i, s) in score.iter_mut().enumerate() {
                *s += weights[term_idx] * z[(i, j)];
            }
        }
    }

    let prob: Vec<f64> = if plan.rate == 0.0 {
        vec![0.0; n]
    } else if plan.rate == 1.0 {
        vec![1.0; n]
    } else {
        let b = solve_intercept(&score, plan.rate)?;
        score.iter().map(|s| logistic(b + s)).collect()
    };
    let mut rng = seeds::rng(plan.seed);
    let missing = systematic_select(&prob, &mut rng);
    let amputed = dataset.with_missing(&plan.target, &missing)?;
    Ok(Amputed {
        dataset: amputed,
        observed: missing.iter().map(|m| !m).collect(),
        missing_probability: prob,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for TruncationBounds {
    fn default() -> Self {
        TruncationBounds {
            lower: 0.01,
            upper: 0.99,
        }
    }
}

impl TruncationBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0 < lower && lower <= upper && upper < 1.0) {
            return Err(MissingnessError::InvalidBounds(lower, upper));
        }
        Ok(TruncationBounds { lower, upper })
    }

    /// Clipped value and whether clipping happened.
    pub fn apply(&self, pi: f64) -> (f64, bool) {
        let c = pi.clamp(self.lower, self.upper);
        (c, c != pi)
    }

    pub fn contains(&self, pi: f64) -> bool {
        (self.lower..=self.upper).contains(&pi)
    }
}

/// Per-subject response propensities and analysis weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    /// Truncated probability of the target being observed.
    pub pi: Vec<f64>,
    pub observed: Vec<bool>,
    /// Analysis weight; `None` for unobserved rows under pure IPW.
    pub weights: Vec<Option<f64>>,
    pub kappa: Option<f64>,
    pub truncation_count: usize,
    pub bounds: TruncationBounds,
}

impl WeightVector {
    /// IPW weights `1/π` on observed rows from raw fitted probabilities.
    pub fn inverse_probability(raw_pi: &[f64], observed: &[bool], bounds: TruncationBounds) -> Self {
        let mut truncation_count = 0;
        let pi: Vec<f64> = raw_pi
            .iter()
            .map(|&p| {
                let (c, clipped) = bounds.apply(p);
                truncation_count += usize::from(clipped);
                c
            })
            .collect();
        let weights = pi
            .iter()
            .zip(observed)
            .map(|(&p, &r)| r.then(|| 1.0 / p))
            .collect();
        WeightVector {
            pi,
            observed: observed.to_vec(),
            weights,
            kappa: None,
            truncation_count,
            bounds,
        }
    }

    /// Weights of the observed rows, in row order.
    pub fn observed_weights(&self) -> Vec<f64> {
        self.weights.iter().flatten().copied().collect()
    }

    /// Weights for every row; panics if some row has none.
    pub fn all_weights(&self) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.expect("weight defined for every row"))
            .collect()
    }
}

/// Fits `P(R = 1 | predictors)` by logistic regression and returns
/// truncated propensities with IPW weights on the observed rows.
pub fn estimate_propensity(
    dataset: &Dataset,
    target: &str,
    recipe: &PredictorRecipe,
    bounds: TruncationBounds,
) -> Result<WeightVector> {
    let observed = dataset.observed(target)?;
    if observed.iter().all(|&r| r) {
        return Err(MissingnessError::Degenerate("observed"));
    }
    if observed.iter().all(|&r| !r) {
        return Err(MissingnessError::Degenerate("missing"));
    }
    if recipe.covariates.iter().any(|c| c == target) {
        return Err(MissingnessError::InvalidPredictor(target.to_string()));
    }
    let design = build_predictors(dataset, recipe)?;
    let fit = fit_logistic(&design.matrix, &observed, None)?;
    let raw: Vec<f64> = (0..dataset.n_rows())
        .map(|i| {
            let row: Vec<f64> = design.matrix.row(i).iter().copied().collect();
            fit.probabilities(&row)[1]
        })
        .collect();
    Ok(WeightVector::inverse_probability(&raw, &observed, bounds))
}

/// κ-hybrid weights: `1/π` for observed rows and
/// `κ + (1 − κ)/(1 − π)` for rows whose target was imputed.
pub fn hybrid_weights(pi: &[f64], observed: &[bool], kappa: f64, bounds: TruncationBounds) -> Result<WeightVector> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(MissingnessError::InvalidKappa(kappa));
    }
    if let Some((row, &value)) = pi.iter().enumerate().find(|(_, &p)| !bounds.contains(p)) {
        return Err(MissingnessError::PropensityOutOfRange {
            row,
            value,
            lower: bounds.lower,
            upper: bounds.upper,
        });
    }
    let weights = pi
        .iter()
        .zip(observed)
        .map(|(&p, &r)| {
            Some(if r {
                1.0 / p
            } else {
                kappa * 1.0 + (1.0 - kappa) * (1.0 / (1.0 - p))
            })
        })
        .collect();
    Ok(WeightVector {
        pi: pi.to_vec(),
        observed: observed.to_vec(),
        weights,
        kappa: Some(kappa),
        truncation_count: 0,
        bounds,
    })
}
