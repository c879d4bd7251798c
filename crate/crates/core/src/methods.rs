//! The eight analysis strategies for a Cox model with one partially
//! observed categorical covariate: complete cases, IPW, parametric and
//! nonparametric MI, and the four hybrids.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coxfit::{fit_cox, CoxData, CoxError, CoxOptions, Ties};
use crate::dataio::{self, ColumnKind, DataError, Dataset};
use crate::mi_engine::{
    self, rubin_pool, t_quantile_975, Engine, ImputationSet, ImputeError, PoolError, PooledResult, PredictorRecipe,
};
use crate::missingness::{self, MissingnessError, TruncationBounds, WeightVector};
use crate::regressors::TreeParams;
use crate::seeds;

pub const DEFAULT_M: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "IPW")]
    Ipw,
    #[serde(rename = "MI_P")]
    MiP,
    #[serde(rename = "MI_NP")]
    MiNp,
    H1,
    H2,
    H3,
    H4,
}

impl MethodKind {
    pub const ALL: [MethodKind; 8] = [
        MethodKind::Cc,
        MethodKind::Ipw,
        MethodKind::MiP,
        MethodKind::MiNp,
        MethodKind::H1,
        MethodKind::H2,
        MethodKind::H3,
        MethodKind::H4,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MethodKind::Cc => "CC",
            MethodKind::Ipw => "IPW",
            MethodKind::MiP => "MI_P",
            MethodKind::MiNp => "MI_NP",
            MethodKind::H1 => "H1",
            MethodKind::H2 => "H2",
            MethodKind::H3 => "H3",
            MethodKind::H4 => "H4",
        }
    }

    /// H2–H4 take a κ.
    pub fn uses_kappa(self) -> bool {
        matches!(self, MethodKind::H2 | MethodKind::H3 | MethodKind::H4)
    }

    pub fn imputes(self) -> bool {
        !matches!(self, MethodKind::Cc | MethodKind::Ipw)
    }

    /// H1 and H4 mix the two engines.
    pub fn uses_split(self) -> bool {
        matches!(self, MethodKind::H1 | MethodKind::H4)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MethodKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        MethodKind::ALL
            .into_iter()
            .find(|k| k.label() == norm)
            .ok_or_else(|| format!("unknown method `{s}` (CC|IPW|MI_P|MI_NP|H1|H2|H3|H4)"))
    }
}

#[derive(Debug, Error)]
pub enum MethodError {
    #[error("κ not applicable to {0}")]
    KappaNotApplicable(MethodKind),
    #[error("{0} requires κ")]
    KappaRequired(MethodKind),
    #[error("κ = {0} is outside [0, 1]")]
    InvalidKappa(f64),
    #[error("{kind} needs at least 2 imputations (got {m})")]
    TooFewImputations { kind: MethodKind, m: usize },
    #[error("split not applicable to {0}")]
    SplitNotApplicable(MethodKind),
    #[error("split {0} + {1} does not equal M = {2}")]
    SplitMismatch(usize, usize, usize),
    #[error("target `{0}` must be a categorical covariate")]
    TargetNotCategorical(String),
    #[error("target `{0}` is not among the analysis covariates")]
    TargetNotInModel(String),
    #[error("covariate `{0}` has missing cells; only the target may be incomplete")]
    OtherMissing(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("weights: {0}")]
    Weights(#[from] MissingnessError),
    #[error("imputation: {0}")]
    Impute(#[from] ImputeError),
    #[error("pooling: {0}")]
    Pool(#[from] PoolError),
    #[error("Cox fit failed{}: {source}", imputation.map(|m| format!(" on imputation {m}")).unwrap_or_default())]
    Fit {
        imputation: Option<usize>,
        source: CoxError,
    },
}

impl MethodError {
    /// Errors from an invalid request rather than from the data.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            MethodError::KappaNotApplicable(_)
                | MethodError::KappaRequired(_)
                | MethodError::InvalidKappa(_)
                | MethodError::TooFewImputations { .. }
                | MethodError::SplitNotApplicable(_)
                | MethodError::SplitMismatch(..)
                | MethodError::TargetNotCategorical(_)
                | MethodError::TargetNotInModel(_)
                | MethodError::OtherMissing(_)
                | MethodError::Data(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub m: usize,
    /// Parametric and nonparametric imputation counts for H1/H4.
    pub split: Option<(usize, usize)>,
    pub kappa: Option<f64>,
    /// Imputation predictors; defaults to every fully observed covariate
    /// plus event indicator and cumulative hazard.
    pub imputation: Option<PredictorRecipe>,
    /// Propensity predictors; same default as the imputation recipe.
    pub propensity: Option<PredictorRecipe>,
    pub ties: Ties,
    /// Overrides the default choice of robust vs model-based variance.
    pub robust: Option<bool>,
    pub bounds: TruncationBounds,
    pub trees: TreeParams,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        MethodSpec {
            kind,
            m: DEFAULT_M,
            split: None,
            kappa: None,
            imputation: None,
            propensity: None,
            ties: Ties::default(),
            robust: None,
            bounds: TruncationBounds::default(),
            trees: TreeParams::default(),
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = Some(kappa);
        self
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn validate(&self) -> Result<(), MethodError> {
        self.validate_kappas(self.kappa.as_slice())
    }

    fn validate_kappas(&self, kappas: &[f64]) -> Result<(), MethodError> {
        let kind = self.kind;
        if kind.uses_kappa() {
            if kappas.is_empty() {
                return Err(MethodError::KappaRequired(kind));
            }
            if let Some(&k) = kappas.iter().find(|k| !(0.0..=1.0).contains(*k)) {
                return Err(MethodError::InvalidKappa(k));
            }
        } else if !kappas.is_empty() {
            return Err(MethodError::KappaNotApplicable(kind));
        }
        if kind.imputes() && self.m < 2 {
            return Err(MethodError::TooFewImputations { kind, m: self.m });
        }
        if let Some((a, b)) = self.split {
            if !kind.uses_split() {
                return Err(MethodError::SplitNotApplicable(kind));
            }
            if a + b != self.m {
                return Err(MethodError::SplitMismatch(a, b, self.m));
            }
        }
        Ok(())
    }

    /// Parametric and nonparametric imputation counts.
    pub fn engine_counts(&self) -> (usize, usize) {
        match self.kind {
            MethodKind::MiP | MethodKind::H2 => (self.m, 0),
            MethodKind::MiNp | MethodKind::H3 => (0, self.m),
            MethodKind::H1 | MethodKind::H4 => self.split.unwrap_or((self.m.div_ceil(2), self.m / 2)),
            MethodKind::Cc | MethodKind::Ipw => (0, 0),
        }
    }

    fn uses_robust(&self) -> bool {
        self.robust.unwrap_or(matches!(
            self.kind,
            MethodKind::Ipw | MethodKind::H2 | MethodKind::H3 | MethodKind::H4
        ))
    }
}

/// Which column is incomplete and which covariates enter the Cox model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisSetup {
    pub target: String,
    pub covariates: Vec<String>,
}

impl AnalysisSetup {
    /// All covariates of the dataset enter the model.
    pub fn all_covariates(dataset: &Dataset, target: &str) -> Self {
        AnalysisSetup {
            target: target.to_string(),
            covariates: dataset.covariate_names(),
        }
    }

    /// The single partially observed categorical covariate, if there is one.
    pub fn infer_target(dataset: &Dataset) -> Option<String> {
        let partial: Vec<&str> = dataset
            .columns()
            .iter()
            .filter(|c| c.missing_count() > 0)
            .map(|c| c.name.as_str())
            .collect();
        match partial.as_slice() {
            [one] if dataset.column(one).ok()?.kind == ColumnKind::Categorical => Some(one.to_string()),
            _ => None,
        }
    }

    fn check(&self, dataset: &Dataset) -> Result<(), MethodError> {
        if dataset.column(&self.target)?.kind != ColumnKind::Categorical {
            return Err(MethodError::TargetNotCategorical(self.target.clone()));
        }
        if !self.covariates.contains(&self.target) {
            return Err(MethodError::TargetNotInModel(self.target.clone()));
        }
        for c in &self.covariates {
            if *c != self.target && dataset.column(c)?.missing_count() > 0 {
                return Err(MethodError::OtherMissing(c.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub engine: Engine,
    pub seed: u64,
    pub estimates: Vec<f64>,
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub kind: MethodKind,
    pub kappa: Option<f64>,
    /// Number of imputations; 0 for CC and IPW.
    pub m: usize,
    pub robust: bool,
    pub coefficients: Vec<CoefficientRow>,
    pub pooled: Option<PooledResult>,
    pub trace: Vec<TraceEntry>,
    /// Propensities truncated at the bounds.
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HazardRatioRow {
    pub name: String,
    pub hazard_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn hazard_ratios(result: &MethodResult) -> Vec<HazardRatioRow> {
    result
        .coefficients
        .iter()
        .map(|c| HazardRatioRow {
            name: c.name.clone(),
            hazard_ratio: c.estimate.exp(),
            ci_low: c.ci_low.exp(),
            ci_high: c.ci_high.exp(),
        })
        .collect()
}

struct SingleFit {
    names: Vec<String>,
    estimates: Vec<f64>,
    variances: Vec<f64>,
}

fn fit_one(
    dataset: &Dataset,
    covariates: &[String],
    weights: Option<&[f64]>,
    ties: Ties,
    robust: bool,
    imputation: Option<usize>,
) -> Result<SingleFit, MethodError> {
    let design = dataio::encode(dataset, covariates)?;
    let times = dataset.times();
    let events = dataset.events();
    let data = CoxData::new(&design.matrix, &times, &events).with_weights(weights);
    let fit = fit_cox(&data, CoxOptions { ties, robust }).map_err(|source| MethodError::Fit { imputation, source })?;
    let cov = if robust {
        fit.robust_covariance.as_ref().expect("requested")
    } else {
        &fit.model_covariance
    };
    Ok(SingleFit {
        names: design.names,
        estimates: fit.beta.iter().copied().collect(),
        variances: cov.diagonal().iter().copied().collect(),
    })
}

fn single_rows(fit: &SingleFit) -> Vec<CoefficientRow> {
    let z = t_quantile_975(f64::INFINITY);
    fit.names
        .iter()
        .zip(fit.estimates.iter().zip(&fit.variances))
        .map(|(name, (&estimate, &var))| {
            let se = var.sqrt();
            CoefficientRow {
                name: name.clone(),
                estimate,
                se,
                ci_low: estimate - z * se,
                ci_high: estimate + z * se,
            }
        })
        .collect()
}

fn pooled_rows(names: &[String], pooled: &PooledResult) -> Vec<CoefficientRow> {
    names
        .iter()
        .zip(&pooled.coefficients)
        .map(|(name, c)| CoefficientRow {
            name: name.clone(),
            estimate: c.estimate,
            se: c.se(),
            ci_low: c.ci_low,
            ci_high: c.ci_high,
        })
        .collect()
}

/// Propensities of the target being observed, shared by every fit of a
/// method. Without missing cells every row is observed with certainty.
fn propensity(dataset: &Dataset, setup: &AnalysisSetup, spec: &MethodSpec) -> Result<WeightVector, MethodError> {
    let observed = dataset.observed(&setup.target)?;
    if observed.iter().all(|&r| r) {
        return Ok(WeightVector {
            pi: vec![1.0; observed.len()],
            weights: vec![Some(1.0); observed.len()],
            observed,
            kappa: None,
            truncation_count: 0,
            bounds: spec.bounds,
        });
    }
    let recipe = spec
        .propensity
        .clone()
        .unwrap_or_else(|| PredictorRecipe::default_for(dataset, &setup.target));
    Ok(missingness::estimate_propensity(dataset, &setup.target, &recipe, spec.bounds)?)
}

/// RNG stream of one method kind.
pub fn method_seed(seed: u64, kind: MethodKind) -> u64 {
    seeds::derive_label(seed, kind.label())
}

fn impute(dataset: &Dataset, setup: &AnalysisSetup, spec: &MethodSpec, seed: u64) -> Result<ImputationSet, MethodError> {
    let recipe = spec
        .imputation
        .clone()
        .unwrap_or_else(|| PredictorRecipe::default_for(dataset, &setup.target));
    let (mp, mnp) = spec.engine_counts();
    let base = method_seed(seed, spec.kind);
    let mut set: Option<ImputationSet> = None;
    if mp > 0 {
        let s = seeds::derive_label(base, Engine::Parametric.label());
        set = Some(mi_engine::impute_parametric(dataset, &setup.target, &recipe, mp, s)?);
    }
    if mnp > 0 {
        let s = seeds::derive_label(base, Engine::Nonparametric.label());
        let np = mi_engine::impute_nonparametric(dataset, &setup.target, &recipe, mnp, s, spec.trees)?;
        set = Some(match set {
            Some(p) => p.concat(np),
            None => np,
        });
    }
    Ok(set.expect("validated m >= 2"))
}

fn fit_imputations(
    set: &ImputationSet,
    setup: &AnalysisSetup,
    spec: &MethodSpec,
    weights: Option<&[f64]>,
    robust: bool,
) -> Result<(Vec<String>, PooledResult, Vec<TraceEntry>), MethodError> {
    let mut names = Vec::new();
    let mut trace = Vec::with_capacity(set.len());
    for (m, (data, prov)) in set.datasets.iter().zip(&set.provenance).enumerate() {
        let fit = fit_one(data, &setup.covariates, weights, spec.ties, robust, Some(m))?;
        names = fit.names;
        trace.push(TraceEntry {
            engine: prov.engine,
            seed: prov.seed,
            estimates: fit.estimates,
            variances: fit.variances,
        });
    }
    let estimates: Vec<Vec<f64>> = trace.iter().map(|t| t.estimates.clone()).collect();
    let variances: Vec<Vec<f64>> = trace.iter().map(|t| t.variances.clone()).collect();
    let pooled = rubin_pool(&estimates, &variances)?;
    Ok((names, pooled, trace))
}

/// Runs one method. `seed` is the analysis seed; each kind draws from its
/// own stream derived from it.
pub fn run_method(dataset: &Dataset, setup: &AnalysisSetup, spec: &MethodSpec, seed: u64) -> Result<MethodResult, MethodError> {
    let kappas: Vec<f64> = spec.kappa.into_iter().collect();
    let mut results = run_method_grid(dataset, setup, spec, &kappas, seed)?;
    Ok(results.remove(0))
}

/// Runs one method over a κ grid, imputing once and reweighting per κ.
/// Each result equals the corresponding single-κ `run_method` call.
/// Kinds without κ take an empty grid and return one result.
pub fn run_method_grid(
    dataset: &Dataset,
    setup: &AnalysisSetup,
    spec: &MethodSpec,
    kappas: &[f64],
    seed: u64,
) -> Result<Vec<MethodResult>, MethodError> {
    spec.validate_kappas(kappas)?;
    setup.check(dataset)?;
    let robust = spec.uses_robust();
    let kind = spec.kind;
    let observed = dataset.observed(&setup.target)?;
    let single = |coefficients, truncated| MethodResult {
        kind,
        kappa: None,
        m: 0,
        robust,
        coefficients,
        pooled: None,
        trace: Vec::new(),
        truncated,
    };
    match kind {
        MethodKind::Cc => {
            let rows: Vec<usize> = (0..observed.len()).filter(|&i| observed[i]).collect();
            let fit = fit_one(&dataset.select_rows(&rows), &setup.covariates, None, spec.ties, robust, None)?;
            Ok(vec![single(single_rows(&fit), 0)])
        }
        MethodKind::Ipw => {
            let pw = propensity(dataset, setup, spec)?;
            let rows: Vec<usize> = (0..observed.len()).filter(|&i| observed[i]).collect();
            let w: Vec<f64> = rows.iter().map(|&i| pw.weights[i].expect("observed row")).collect();
            let fit = fit_one(&dataset.select_rows(&rows), &setup.covariates, Some(&w), spec.ties, robust, None)?;
            Ok(vec![single(single_rows(&fit), pw.truncation_count)])
        }
        MethodKind::MiP | MethodKind::MiNp | MethodKind::H1 => {
            let set = impute(dataset, setup, spec, seed)?;
            let (names, pooled, trace) = fit_imputations(&set, setup, spec, None, robust)?;
            Ok(vec![MethodResult {
                kind,
                kappa: None,
                m: set.len(),
                robust,
                coefficients: pooled_rows(&names, &pooled),
                pooled: Some(pooled),
                trace,
                truncated: 0,
            }])
        }
        MethodKind::H2 | MethodKind::H3 | MethodKind::H4 => {
            let pw = propensity(dataset, setup, spec)?;
            let set = impute(dataset, setup, spec, seed)?;
            kappas
                .iter()
                .map(|&kappa| {
                    let w = if pw.truncation_count == 0 && pw.pi.iter().all(|&p| p == 1.0) {
                        vec![1.0; observed.len()]
                    } else {
                        missingness::hybrid_weights(&pw.pi, &observed, kappa, spec.bounds)?.all_weights()
                    };
                    let (names, pooled, trace) = fit_imputations(&set, setup, spec, Some(&w), robust)?;
                    Ok(MethodResult {
                        kind,
                        kappa: Some(kappa),
                        m: set.len(),
                        robust,
                        coefficients: pooled_rows(&names, &pooled),
                        pooled: Some(pooled),
                        trace,
                        truncated: pw.truncation_count,
                    })
                })
                .collect()
        }
    }
}
