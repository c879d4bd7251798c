//! Multiple imputation of one partially observed categorical covariate
//! and Rubin's-rules pooling.
//!
//! Both engines condition on the same predictor recipe: the fully observed
//! covariates, the event indicator and the Nelson–Aalen cumulative hazard
//! at each subject's own time. With a single incomplete column one pass
//! per imputation is a complete chained-equations cycle.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::dataio::{self, ColumnKind, DataError, Dataset, DesignMatrix};
use crate::regressors::{self, GlmError, TreeError, TreeParams};
use crate::seeds;
use crate::survcore;

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("target `{0}` must be a categorical covariate")]
    TargetNotCategorical(String),
    #[error("target `{0}` has no observed values")]
    NothingObserved(String),
    #[error("number of imputations must be >= 1")]
    NoImputations,
    #[error("imputation model: {0}")]
    Model(#[from] GlmError),
    #[error("tree model: {0}")]
    Trees(#[from] TreeError),
}

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("Rubin's rules need at least 2 imputations (got {0})")]
    TooFew(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("variances must be finite and >= 0")]
    InvalidVariance,
}

/// Which columns predict the target (and the response indicator).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorRecipe {
    pub covariates: Vec<String>,
    /// Include the event indicator.
    pub event: bool,
    /// Include the Nelson–Aalen cumulative hazard at each subject's time.
    pub cumulative_hazard: bool,
}

impl PredictorRecipe {
    /// All fully observed covariates other than the target, plus event
    /// indicator and cumulative hazard.
    pub fn default_for(dataset: &Dataset, target: &str) -> Self {
        PredictorRecipe {
            covariates: dataset
                .fully_observed_covariates()
                .into_iter()
                .filter(|c| c != target)
                .collect(),
            event: true,
            cumulative_hazard: true,
        }
    }
}

pub const CUMHAZ_COLUMN: &str = "cumhaz";

/// Imputation design: covariates, then the event indicator and the
/// Nelson–Aalen cumulative hazard as requested by the recipe.
pub fn build_predictors(dataset: &Dataset, recipe: &PredictorRecipe) -> Result<DesignMatrix, DataError> {
    let mut design = dataio::encode(dataset, &recipe.covariates)?;
    let times = dataset.times();
    let events = dataset.events();
    if recipe.event {
        let e: Vec<f64> = events.iter().map(|&d| f64::from(u8::from(d))).collect();
        design.push_column(dataset.event_name(), &e);
    }
    if recipe.cumulative_hazard {
        let h: Vec<f64> = if times.is_empty() {
            Vec::new()
        } else {
            let na = survcore::nelson_aalen(&times, &events).expect("dataset times are valid");
            times.iter().map(|&t| na.eval(t)).collect()
        };
        design.push_column(CUMHAZ_COLUMN, &h);
    }
    Ok(design)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Parametric,
    Nonparametric,
}

impl Engine {
    pub fn label(self) -> &'static str {
        match self {
            Engine::Parametric => "parametric",
            Engine::Nonparametric => "nonparametric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub engine: Engine,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationSet {
    pub target: String,
    pub datasets: Vec<Dataset>,
    pub provenance: Vec<Provenance>,
    pub recipe: PredictorRecipe,
}

impl ImputationSet {
    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// Concatenates two sets imputing the same target.
    pub fn concat(mut self, other: ImputationSet) -> ImputationSet {
        self.datasets.extend(other.datasets);
        self.provenance.extend(other.provenance);
        self
    }
}

/// Seed of the m-th imputation.
pub fn imputation_seed(seed: u64, m: usize) -> u64 {
    seed ^ m as u64
}

/// Observed/missing split of the target with levels compacted to those
/// actually observed.
struct TargetSplit {
    codes: Vec<Option<usize>>,
    observed_rows: Vec<usize>,
    missing_rows: Vec<usize>,
    /// Original level code of each compact class.
    classes: Vec<usize>,
    /// Compact class of each observed row.
    y: Vec<usize>,
}

fn split_target(dataset: &Dataset, target: &str) -> Result<TargetSplit, ImputeError> {
    let col = dataset.column(target)?;
    if col.kind != ColumnKind::Categorical {
        return Err(ImputeError::TargetNotCategorical(target.to_string()));
    }
    let (codes, levels, _) = dataset.categorical(target)?;
    let mut present = vec![false; levels.len()];
    let mut observed_rows = Vec::new();
    let mut missing_rows = Vec::new();
    for (i, c) in codes.iter().enumerate() {
        match c {
            Some(c) => {
                present[*c] = true;
                observed_rows.push(i);
            }
            None => missing_rows.push(i),
        }
    }
    let classes: Vec<usize> = (0..levels.len()).filter(|&k| present[k]).collect();
    if classes.is_empty() && !missing_rows.is_empty() {
        return Err(ImputeError::NothingObserved(target.to_string()));
    }
    let y = observed_rows
        .iter()
        .map(|&i| classes.binary_search(&codes[i].expect("observed")).expect("present"))
        .collect();
    Ok(TargetSplit {
        codes: codes.to_vec(),
        observed_rows,
        missing_rows,
        classes,
        y,
    })
}

fn complete(dataset: &Dataset, target: &str, split: &TargetSplit, imputed: &[usize]) -> Result<Dataset, ImputeError> {
    let mut codes = split.codes.clone();
    for (&row, &class) in split.missing_rows.iter().zip(imputed) {
        codes[row] = Some(split.classes[class]);
    }
    Ok(dataset.with_categorical_values(target, codes)?)
}

fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Parametric engine: multinomial logistic imputation model with
/// coefficients drawn from their asymptotic normal posterior for each m.
pub fn impute_parametric(
    dataset: &Dataset,
    target: &str,
    recipe: &PredictorRecipe,
    m: usize,
    seed: u64,
) -> Result<ImputationSet, ImputeError> {
    if m == 0 {
        return Err(ImputeError::NoImputations);
    }
    let split = split_target(dataset, target)?;
    let seeds: Vec<u64> = (0..m).map(|k| imputation_seed(seed, k)).collect();
    let datasets = if split.missing_rows.is_empty() {
        vec![dataset.clone(); m]
    } else if split.classes.len() == 1 {
        let imputed = vec![0; split.missing_rows.len()];
        vec![complete(dataset, target, &split, &imputed)?; m]
    } else {
        let design = build_predictors(dataset, recipe)?;
        let x_obs = design.matrix.select_rows(&split.observed_rows);
        let fit = regressors::fit_multinomial(&x_obs, &split.y, split.classes.len(), None)?;
        seeds
            .iter()
            .map(|&s| {
                let mut rng = seeds::rng(s);
                let draw = regressors::draw_coefficients(&fit, &mut rng)?;
                let model = fit.with_flat_coefficients(&draw);
                let imputed: Vec<usize> = split
                    .missing_rows
                    .iter()
                    .map(|&i| sample_categorical(&model.probabilities(&row_vec(&design.matrix, i)), &mut rng))
                    .collect();
                complete(dataset, target, &split, &imputed)
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(ImputationSet {
        target: target.to_string(),
        datasets,
        provenance: seeds
            .into_iter()
            .map(|seed| Provenance {
                engine: Engine::Parametric,
                seed,
            })
            .collect(),
        recipe: recipe.clone(),
    })
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        cum += pk;
        if u < cum {
            return k;
        }
    }
    p.len() - 1
}

/// Nonparametric engine: a fresh bagged tree ensemble per m, imputing each
/// missing row by a draw from a random tree's leaf.
pub fn impute_nonparametric(
    dataset: &Dataset,
    target: &str,
    recipe: &PredictorRecipe,
    m: usize,
    seed: u64,
    params: TreeParams,
) -> Result<ImputationSet, ImputeError> {
    if m == 0 {
        return Err(ImputeError::NoImputations);
    }
    let split = split_target(dataset, target)?;
    let seeds: Vec<u64> = (0..m).map(|k| imputation_seed(seed, k)).collect();
    let datasets = if split.missing_rows.is_empty() {
        vec![dataset.clone(); m]
    } else {
        let design = build_predictors(dataset, recipe)?;
        let x_obs = design.matrix.select_rows(&split.observed_rows);
        seeds
            .iter()
            .map(|&s| {
                let mut rng = seeds::rng(s);
                let ensemble = regressors::fit_trees(&x_obs, &split.y, split.classes.len(), params, &mut rng)?;
                let imputed: Vec<usize> = split
                    .missing_rows
                    .iter()
                    .map(|&i| regressors::draw_class(&ensemble, &row_vec(&design.matrix, i), &mut rng))
                    .collect();
                complete(dataset, target, &split, &imputed)
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(ImputationSet {
        target: target.to_string(),
        datasets,
        provenance: seeds
            .into_iter()
            .map(|seed| Provenance {
                engine: Engine::Nonparametric,
                seed,
            })
            .collect(),
        recipe: recipe.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledCoefficient {
    /// Mean of the per-imputation estimates.
    pub estimate: f64,
    /// Mean within-imputation variance.
    pub within: f64,
    /// Between-imputation variance.
    pub between: f64,
    pub total: f64,
    /// Infinite when the between variance is zero.
    pub df: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PooledCoefficient {
    pub fn se(&self) -> f64 {
        self.total.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledResult {
    pub m: usize,
    pub coefficients: Vec<PooledCoefficient>,
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// 97.5% quantile of Student's t, normal when `df` is infinite.
///
/// Above 1000 degrees of freedom the Cornish–Fisher expansion in `1/df`
/// is used.
pub fn t_quantile_975(df: f64) -> f64 {
    let z = Normal::standard().inverse_cdf(0.975);
    if !df.is_finite() {
        return z;
    }
    if df <= 1000.0 {
        return StudentsT::new(0.0, 1.0, df).expect("df > 0").inverse_cdf(0.975);
    }
    let z2 = z * z;
    let g1 = z * (z2 + 1.0) / 4.0;
    let g2 = z * ((5.0 * z2 + 16.0) * z2 + 3.0) / 96.0;
    let g3 = z * (((3.0 * z2 + 19.0) * z2 + 17.0) * z2 - 15.0) / 384.0;
    let g4 = z * ((((79.0 * z2 + 776.0) * z2 + 1482.0) * z2 - 1920.0) * z2 - 945.0) / 92160.0;
    let v = 1.0 / df;
    z + v * (g1 + v * (g2 + v * (g3 + v * g4)))
}

/// Rubin's rules over `M × p` estimates and variances. Sums are taken
/// over sorted values, so the result does not depend on imputation order.
pub fn rubin_pool(estimates: &[Vec<f64>], variances: &[Vec<f64>]) -> Result<PooledResult, PoolError> {
    let m = estimates.len();
    if m < 2 {
        return Err(PoolError::TooFew(m));
    }
    if variances.len() != m {
        return Err(PoolError::DimensionMismatch(format!("{m} estimate rows, {} variance rows", variances.len())));
    }
    let p = estimates[0].len();
    if estimates.iter().chain(variances).any(|r| r.len() != p) {
        return Err(PoolError::DimensionMismatch("ragged rows".into()));
    }
    if variances.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(PoolError::InvalidVariance);
    }
    let mf = m as f64;
    let coefficients = (0..p)
        .map(|j| {
            let est: Vec<f64> = estimates.iter().map(|r| r[j]).collect();
            let estimate = sorted_sum(est.clone()) / mf;
            let within = sorted_sum(variances.iter().map(|r| r[j]).collect()) / mf;
            let between = sorted_sum(est.iter().map(|e| (e - estimate).powi(2)).collect()) / (mf - 1.0);
            let inflated = (1.0 + 1.0 / mf) * between;
            let total = within + inflated;
            let df = if between == 0.0 {
                f64::INFINITY
            } else {
                (mf - 1.0) * (1.0 + within / inflated).powi(2)
            };
            let half = t_quantile_975(df) * total.sqrt();
            PooledCoefficient {
                estimate,
                within,
                between,
                total,
                df,
                ci_low: estimate - half,
                ci_high: estimate + half,
            }
        })
        .collect();
    Ok(PooledResult { m, coefficients })
}
