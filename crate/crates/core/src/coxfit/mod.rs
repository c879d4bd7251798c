//! Weighted Cox proportional-hazards regression.
//!
//! The weighted partial likelihood places each subject weight both on its
//! own event contribution and inside the risk-set sums. Tied event times
//! use Efron's or Breslow's approximation; with unit weights and no ties
//! this is the ordinary Cox partial likelihood.

mod phtest;
mod residuals;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::newton::{self, Evaluation, NewtonFailure, NewtonSettings};

pub use phtest::{ph_test, PhTestResult, PhTestRow, TimeTransform};
pub use residuals::{residuals, robust_variance, score_residuals, ResidualSet};

const SETTINGS: NewtonSettings = NewtonSettings {
    max_iterations: 50,
    max_halvings: 20,
    loglik_tol: 1e-10,
    gradient_tol: 1e-8,
    divergence_norm: 1e3,
    gain_tol: 1e-10,
    step_tol: 1e-10,
};

#[derive(Debug, Error, PartialEq)]
pub enum CoxError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in covariates, times or weights")]
    NonFinite,
    #[error("weights must be > 0")]
    InvalidWeights,
    #[error("no events in data")]
    NoEvents,
    #[error("information matrix is rank deficient (constant or collinear covariates)")]
    RankDeficient,
    #[error("monotone partial likelihood: a coefficient diverges to infinity")]
    MonotoneLikelihood,
    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),
    #[error("information matrix is singular at the estimate")]
    SingularInformation,
    #[error("too few events ({events}) for {coefficients} coefficients")]
    TooFewEvents { events: usize, coefficients: usize },
}

impl From<NewtonFailure> for CoxError {
    fn from(f: NewtonFailure) -> Self {
        match f {
            NewtonFailure::RankDeficient => CoxError::RankDeficient,
            NewtonFailure::Divergent => CoxError::MonotoneLikelihood,
            NewtonFailure::NonConvergence { iterations } => CoxError::NonConvergence(iterations),
            NewtonFailure::NonFinite => CoxError::NonFinite,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    Breslow,
    #[default]
    Efron,
}

impl std::str::FromStr for Ties {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "breslow" => Ok(Ties::Breslow),
            "efron" => Ok(Ties::Efron),
            other => Err(format!("unknown ties method `{other}` (breslow|efron)")),
        }
    }
}

/// Borrowed survival data for one Cox analysis.
#[derive(Debug, Clone, Copy)]
pub struct CoxData<'a> {
    pub x: &'a DMatrix<f64>,
    pub times: &'a [f64],
    pub events: &'a [bool],
    pub weights: Option<&'a [f64]>,
}

impl<'a> CoxData<'a> {
    pub fn new(x: &'a DMatrix<f64>, times: &'a [f64], events: &'a [bool]) -> Self {
        CoxData {
            x,
            times,
            events,
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Option<&'a [f64]>) -> Self {
        self.weights = weights;
        self
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub beta: DVector<f64>,
    pub model_covariance: DMatrix<f64>,
    pub robust_covariance: Option<DMatrix<f64>>,
    pub log_partial_likelihood: f64,
    /// Log partial likelihood at beta = 0.
    pub null_log_partial_likelihood: f64,
    pub ties: Ties,
    pub converged: bool,
    pub iterations: usize,
    pub weighted: bool,
    pub score: DVector<f64>,
    pub information: DMatrix<f64>,
}

impl CoxFit {
    pub fn model_se(&self) -> DVector<f64> {
        self.model_covariance.diagonal().map(f64::sqrt)
    }

    pub fn robust_se(&self) -> Option<DVector<f64>> {
        self.robust_covariance.as_ref().map(|c| c.diagonal().map(f64::sqrt))
    }

    pub fn hazard_ratios(&self) -> DVector<f64> {
        self.beta.map(f64::exp)
    }
}

/// Subjects sharing one distinct time.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub time: f64,
    pub members: Vec<usize>,
    pub deaths: Vec<usize>,
}

/// Validated data with centered covariates and time blocks in
/// decreasing time order.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub x: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub blocks: Vec<Block>,
    pub weighted: bool,
}

impl Prepared {
    pub fn new(data: &CoxData<'_>) -> Result<Self, CoxError> {
        let n = data.x.nrows();
        if data.times.len() != n || data.events.len() != n {
            return Err(CoxError::DimensionMismatch(format!(
                "{n} covariate rows, {} times, {} events",
                data.times.len(),
                data.events.len()
            )));
        }
        if data.x.iter().chain(data.times).any(|v| !v.is_finite()) {
            return Err(CoxError::NonFinite);
        }
        let weights = match data.weights {
            None => vec![1.0; n],
            Some(w) => {
                if w.len() != n {
                    return Err(CoxError::DimensionMismatch(format!("{} weights for {n} rows", w.len())));
                }
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(CoxError::NonFinite);
                }
                if w.iter().any(|&v| v <= 0.0) {
                    return Err(CoxError::InvalidWeights);
                }
                w.to_vec()
            }
        };
        if !data.events.iter().any(|&e| e) {
            return Err(CoxError::NoEvents);
        }

        let means = DVector::from_fn(data.x.ncols(), |j, _| data.x.column(j).mean());
        let mut x = data.x.clone();
        for j in 0..x.ncols() {
            x.column_mut(j).add_scalar_mut(-means[j]);
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data.times[b].total_cmp(&data.times[a]).then(a.cmp(&b)));
        let mut blocks = Vec::new();
        let mut i = 0;
        while i < n {
            let t = data.times[order[i]];
            let mut members = Vec::new();
            while i < n && data.times[order[i]] == t {
                members.push(order[i]);
                i += 1;
            }
            let deaths = members.iter().copied().filter(|&s| data.events[s]).collect();
            blocks.push(Block { time: t, members, deaths });
        }
        Ok(Prepared {
            x,
            weights,
            blocks,
            weighted: data.weights.is_some(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Risk-set quantities at one distinct event time.
#[derive(Debug, Clone)]
pub(crate) struct EventBlock {
    pub block: usize,
    /// Mean covariate subtracted from each death (Efron-averaged when tied).
    pub mean: DVector<f64>,
    /// Weighted information contribution of the block.
    pub variance: DMatrix<f64>,
    /// Breslow hazard increment: weighted deaths over weighted risk.
    pub hazard: f64,
    /// Breslow risk-set mean.
    pub breslow_mean: DVector<f64>,
}

pub(crate) struct Sweep {
    pub eval: Evaluation,
    pub events: Vec<EventBlock>,
    pub eta: DVector<f64>,
}

pub(crate) fn sweep(prep: &Prepared, beta: &DVector<f64>, ties: Ties, keep_blocks: bool) -> Sweep {
    let p = prep.p();
    let eta = &prep.x * beta;
    let risk: Vec<f64> = (0..prep.n()).map(|i| prep.weights[i] * eta[i].exp()).collect();

    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut events = Vec::new();

    for (b, block) in prep.blocks.iter().enumerate() {
        for &i in &block.members {
            let xi = prep.x.row(i).transpose();
            s0 += risk[i];
            s1.axpy(risk[i], &xi, 1.0);
            s2.ger(risk[i], &xi, &xi, 1.0);
        }
        if block.deaths.is_empty() {
            continue;
        }
        let d = block.deaths.len();
        let mut wd = 0.0;
        let mut d0 = 0.0;
        let mut d1 = DVector::zeros(p);
        let mut d2 = DMatrix::zeros(p, p);
        for &i in &block.deaths {
            let xi = prep.x.row(i).transpose();
            let w = prep.weights[i];
            wd += w;
            loglik += w * eta[i];
            score.axpy(w, &xi, 1.0);
            if ties == Ties::Efron && d > 1 {
                d0 += risk[i];
                d1.axpy(risk[i], &xi, 1.0);
                d2.ger(risk[i], &xi, &xi, 1.0);
            }
        }
        let breslow_mean = &s1 / s0;
        let mut mean_sum = DVector::zeros(p);
        let mut var_sum = DMatrix::zeros(p, p);
        let steps = if ties == Ties::Efron { d } else { 1 };
        let share = wd / steps as f64;
        for k in 0..steps {
            let f = k as f64 / d as f64;
            let (t0, t1, t2) = if k == 0 {
                (s0, s1.clone(), s2.clone())
            } else {
                (s0 - f * d0, &s1 - &d1 * f, &s2 - &d2 * f)
            };
            let a = &t1 / t0;
            loglik -= share * t0.ln();
            let v = &t2 / t0 - &a * a.transpose();
            mean_sum += &a;
            var_sum += v;
        }
        score.axpy(-share, &mean_sum, 1.0);
        let var_block = &var_sum * share;
        info += &var_block;
        if keep_blocks {
            events.push(EventBlock {
                block: b,
                mean: mean_sum / steps as f64,
                variance: var_block,
                hazard: wd / s0,
                breslow_mean,
            });
        }
    }
    Sweep {
        eval: Evaluation {
            loglik,
            gradient: score,
            information: info,
        },
        events,
        eta,
    }
}

fn check_beta(prep: &Prepared, beta: &DVector<f64>) -> Result<(), CoxError> {
    if beta.len() != prep.p() {
        return Err(CoxError::DimensionMismatch(format!(
            "beta has {} entries for {} covariates",
            beta.len(),
            prep.p()
        )));
    }
    Ok(())
}

/// Weighted log partial likelihood.
pub fn log_partial_likelihood(beta: &DVector<f64>, data: &CoxData<'_>, ties: Ties) -> Result<f64, CoxError> {
    let prep = Prepared::new(data)?;
    check_beta(&prep, beta)?;
    Ok(sweep(&prep, beta, ties, false).eval.loglik)
}

/// Gradient of [`log_partial_likelihood`].
pub fn score(beta: &DVector<f64>, data: &CoxData<'_>, ties: Ties) -> Result<DVector<f64>, CoxError> {
    let prep = Prepared::new(data)?;
    check_beta(&prep, beta)?;
    Ok(sweep(&prep, beta, ties, false).eval.gradient)
}

/// Observed information (negative Hessian) of the log partial likelihood.
pub fn information(beta: &DVector<f64>, data: &CoxData<'_>, ties: Ties) -> Result<DMatrix<f64>, CoxError> {
    let prep = Prepared::new(data)?;
    check_beta(&prep, beta)?;
    Ok(sweep(&prep, beta, ties, false).eval.information)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoxOptions {
    pub ties: Ties,
    /// Also compute the sandwich covariance.
    pub robust: bool,
}

/// Newton–Raphson with step halving from beta = 0.
pub fn fit_cox(data: &CoxData<'_>, options: CoxOptions) -> Result<CoxFit, CoxError> {
    let prep = Prepared::new(data)?;
    let p = prep.p();
    if p == 0 {
        return Err(CoxError::DimensionMismatch("no covariates".into()));
    }
    let start = DVector::zeros(p);
    let null_loglik = sweep(&prep, &start, options.ties, false).eval.loglik;
    let out = newton::maximize(start, |b| sweep(&prep, b, options.ties, false).eval, &SETTINGS)?;
    let model_covariance = newton::spd_inverse(&out.eval.information).ok_or(CoxError::SingularInformation)?;
    let mut fit = CoxFit {
        beta: out.beta,
        model_covariance,
        robust_covariance: None,
        log_partial_likelihood: out.eval.loglik,
        null_log_partial_likelihood: null_loglik,
        ties: options.ties,
        converged: true,
        iterations: out.iterations,
        weighted: prep.weighted,
        score: out.eval.gradient,
        information: out.eval.information,
    };
    if options.robust {
        fit.robust_covariance = Some(residuals::robust_from_prepared(&fit, &prep)?);
    }
    Ok(fit)
}
