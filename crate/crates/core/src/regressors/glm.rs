//! Binary and multinomial logistic regression by Newton–Raphson (IRLS for
//! the binary case), with asymptotic-normal coefficient draws.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::newton::{self, Evaluation, NewtonFailure, NewtonSettings};

pub const GLM_MAX_ITERATIONS: usize = 100;

const SETTINGS: NewtonSettings = NewtonSettings {
    max_iterations: GLM_MAX_ITERATIONS,
    max_halvings: 20,
    loglik_tol: 1e-10,
    gradient_tol: 1e-8,
    divergence_norm: 1e3,
    gain_tol: 1e-10,
    step_tol: 1e-10,
};

#[derive(Debug, Error, PartialEq)]
pub enum GlmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("design or weights contain non-finite values")]
    NonFinite,
    #[error("weights must be > 0")]
    InvalidWeights,
    #[error("outcome code {0} is outside the declared classes")]
    InvalidOutcome(usize),
    #[error("design is rank deficient (collinear with the intercept or other columns)")]
    RankDeficient,
    #[error("complete or quasi-complete separation: the likelihood has no finite maximizer")]
    Separation,
    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),
    #[error("covariance factorization failed")]
    Factorization,
    #[error("fit did not converge; cannot draw coefficients")]
    NotConverged,
}

impl From<NewtonFailure> for GlmError {
    fn from(f: NewtonFailure) -> Self {
        match f {
            NewtonFailure::RankDeficient => GlmError::RankDeficient,
            NewtonFailure::Divergent => GlmError::Separation,
            NewtonFailure::NonConvergence { iterations } => GlmError::NonConvergence(iterations),
            NewtonFailure::NonFinite => GlmError::NonFinite,
        }
    }
}

/// Fitted (multinomial) logistic model with reference class 0.
///
/// `coefficients` is `(1 + p) × (K − 1)`: row 0 holds intercepts, column
/// `k − 1` is the contrast of class `k` against class 0. `covariance` is
/// indexed by the column-major flattening of `coefficients`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coefficients: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub n_classes: usize,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl GlmFit {
    pub fn n_predictors(&self) -> usize {
        self.coefficients.nrows() - 1
    }

    pub fn flat_coefficients(&self) -> DVector<f64> {
        DVector::from_column_slice(self.coefficients.as_slice())
    }

    /// Same model with replaced coefficients (e.g. a posterior draw).
    pub fn with_flat_coefficients(&self, flat: &DVector<f64>) -> GlmFit {
        let mut out = self.clone();
        out.coefficients = DMatrix::from_column_slice(
            self.coefficients.nrows(),
            self.coefficients.ncols(),
            flat.as_slice(),
        );
        out
    }

    /// Class probabilities for one predictor row (without intercept).
    pub fn probabilities(&self, row: &[f64]) -> Vec<f64> {
        let q = self.coefficients.nrows();
        let mut eta = vec![0.0; self.n_classes];
        for k in 1..self.n_classes {
            let col = self.coefficients.column(k - 1);
            eta[k] = col[0] + (1..q).map(|j| col[j] * row[j - 1]).sum::<f64>();
        }
        softmax(&eta)
    }
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

fn check_inputs(x: &DMatrix<f64>, n_y: usize, weights: Option<&[f64]>) -> Result<Vec<f64>, GlmError> {
    if x.nrows() != n_y {
        return Err(GlmError::DimensionMismatch(format!(
            "{} design rows vs {} outcomes",
            x.nrows(),
            n_y
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GlmError::NonFinite);
    }
    match weights {
        None => Ok(vec![1.0; n_y]),
        Some(w) => {
            if w.len() != n_y {
                return Err(GlmError::DimensionMismatch(format!(
                    "{} weights vs {} outcomes",
                    w.len(),
                    n_y
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(GlmError::NonFinite);
            }
            if w.iter().any(|&v| v <= 0.0) {
                return Err(GlmError::InvalidWeights);
            }
            Ok(w.to_vec())
        }
    }
}

/// Weighted Bernoulli log-likelihood; `beta[0]` is the intercept.
pub fn logistic_loglik(x: &DMatrix<f64>, y: &[bool], weights: Option<&[f64]>, beta: &DVector<f64>) -> f64 {
    let z = with_intercept(x);
    let eta = &z * beta;
    y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let w = weights.map_or(1.0, |w| w[i]);
            w * (if yi { eta[i] } else { 0.0 } - softplus(eta[i]))
        })
        .sum()
}

fn logistic_eval(z: &DMatrix<f64>, y: &[bool], w: &[f64], beta: &DVector<f64>) -> Evaluation {
    let eta = z * beta;
    let n = z.nrows();
    let mut loglik = 0.0;
    let mut resid = DVector::zeros(n);
    let mut scaled = z.clone();
    for i in 0..n {
        let p = 1.0 / (1.0 + (-eta[i]).exp());
        let yi = f64::from(u8::from(y[i]));
        loglik += w[i] * (yi * eta[i] - softplus(eta[i]));
        resid[i] = w[i] * (yi - p);
        let s = w[i] * p * (1.0 - p);
        scaled.row_mut(i).scale_mut(s);
    }
    Evaluation {
        loglik,
        gradient: z.transpose() * resid,
        information: z.transpose() * scaled,
    }
}

/// Analytic gradient of [`logistic_loglik`].
pub fn logistic_score(x: &DMatrix<f64>, y: &[bool], weights: Option<&[f64]>, beta: &DVector<f64>) -> DVector<f64> {
    let w = weights.map_or_else(|| vec![1.0; y.len()], <[f64]>::to_vec);
    logistic_eval(&with_intercept(x), y, &w, beta).gradient
}

/// Maximum-likelihood logistic regression of `y` on `x` plus an intercept.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[bool], weights: Option<&[f64]>) -> Result<GlmFit, GlmError> {
    let w = check_inputs(x, y.len(), weights)?;
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(GlmError::Separation);
    }
    let z = with_intercept(x);
    let out = newton::maximize(DVector::zeros(z.ncols()), |b| logistic_eval(&z, y, &w, b), &SETTINGS)?;
    let covariance = newton::spd_inverse(&out.eval.information).ok_or(GlmError::RankDeficient)?;
    Ok(GlmFit {
        coefficients: DMatrix::from_column_slice(z.ncols(), 1, out.beta.as_slice()),
        covariance,
        n_classes: 2,
        converged: true,
        iterations: out.iterations,
        log_likelihood: out.eval.loglik,
    })
}

/// Weighted multinomial log-likelihood at flattened coefficients.
pub fn multinomial_loglik(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    weights: Option<&[f64]>,
    beta: &DVector<f64>,
) -> f64 {
    let z = with_intercept(x);
    let q = z.ncols();
    let b = DMatrix::from_column_slice(q, n_classes - 1, beta.as_slice());
    let eta = &z * &b;
    (0..z.nrows())
        .map(|i| {
            let w = weights.map_or(1.0, |w| w[i]);
            let mut row = vec![0.0; n_classes];
            for k in 1..n_classes {
                row[k] = eta[(i, k - 1)];
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            w * (row[y[i]] - lse)
        })
        .sum()
}

fn multinomial_eval(z: &DMatrix<f64>, y: &[usize], k_classes: usize, w: &[f64], beta: &DVector<f64>) -> Evaluation {
    let n = z.nrows();
    let q = z.ncols();
    let c = k_classes - 1;
    let b = DMatrix::from_column_slice(q, c, beta.as_slice());
    let eta = z * &b;
    let mut loglik = 0.0;
    let mut gradient = DVector::zeros(q * c);
    let mut information = DMatrix::zeros(q * c, q * c);
    let mut zz = DMatrix::zeros(q, q);
    for i in 0..n {
        let mut row = vec![0.0; k_classes];
        for k in 1..k_classes {
            row[k] = eta[(i, k - 1)];
        }
        let p = softmax(&row);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
        loglik += w[i] * (row[y[i]] - lse);
        let zi = z.row(i);
        for k in 1..k_classes {
            let r = w[i] * (f64::from(u8::from(y[i] == k)) - p[k]);
            for j in 0..q {
                gradient[(k - 1) * q + j] += r * zi[j];
            }
        }
        zz.fill(0.0);
        zz.ger(1.0, &zi.transpose(), &zi.transpose(), 0.0);
        for k in 1..k_classes {
            for l in 1..k_classes {
                let delta = f64::from(u8::from(k == l));
                let s = w[i] * p[k] * (delta - p[l]);
                let mut block = information.view_mut(((k - 1) * q, (l - 1) * q), (q, q));
                block += &zz * s;
            }
        }
    }
    Evaluation {
        loglik,
        gradient,
        information,
    }
}

/// Analytic gradient of [`multinomial_loglik`].
pub fn multinomial_score(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    weights: Option<&[f64]>,
    beta: &DVector<f64>,
) -> DVector<f64> {
    let w = weights.map_or_else(|| vec![1.0; y.len()], <[f64]>::to_vec);
    multinomial_eval(&with_intercept(x), y, n_classes, &w, beta).gradient
}

/// Multinomial logistic regression of class codes `y ∈ 0..n_classes` on
/// `x` plus an intercept, class 0 as reference.
pub fn fit_multinomial(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    weights: Option<&[f64]>,
) -> Result<GlmFit, GlmError> {
    let w = check_inputs(x, y.len(), weights)?;
    if n_classes < 2 {
        return Err(GlmError::Separation);
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(GlmError::InvalidOutcome(bad));
    }
    let mut present = vec![false; n_classes];
    for &c in y {
        present[c] = true;
    }
    if present.iter().any(|p| !p) {
        // a class with no observations drives its intercept to -infinity
        return Err(GlmError::Separation);
    }
    let z = with_intercept(x);
    let q = z.ncols();
    let out = newton::maximize(
        DVector::zeros(q * (n_classes - 1)),
        |b| multinomial_eval(&z, y, n_classes, &w, b),
        &SETTINGS,
    )?;
    let covariance = newton::spd_inverse(&out.eval.information).ok_or(GlmError::RankDeficient)?;
    Ok(GlmFit {
        coefficients: DMatrix::from_column_slice(q, n_classes - 1, out.beta.as_slice()),
        covariance,
        n_classes,
        converged: true,
        iterations: out.iterations,
        log_likelihood: out.eval.loglik,
    })
}

/// Draw `β* = β̂ + L z` with `L` the symmetric square root of the
/// coefficient covariance and `z` standard normal.
pub fn draw_coefficients<R: Rng + ?Sized>(fit: &GlmFit, rng: &mut R) -> Result<DVector<f64>, GlmError> {
    if !fit.converged {
        return Err(GlmError::NotConverged);
    }
    let cov = &fit.covariance;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(GlmError::Factorization);
    }
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-10 * scale.max(f64::MIN_POSITIVE)) {
        return Err(GlmError::Factorization);
    }
    let root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()))
        * eig.eigenvectors.transpose();
    let z = DVector::from_fn(cov.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(fit.flat_coefficients() + root * z)
}
