//! Damped Newton–Raphson for concave log-likelihoods.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Log-likelihood, gradient and information (negative Hessian) at a point.
#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    pub information: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonSettings {
    pub max_iterations: usize,
    pub max_halvings: usize,
    /// Relative log-likelihood change.
    pub loglik_tol: f64,
    /// Max absolute gradient component.
    pub gradient_tol: f64,
    /// Coefficient norm beyond which a stalled fit counts as divergent.
    pub divergence_norm: f64,
    /// Likelihood gain treated as vanishing.
    pub gain_tol: f64,
    /// Newton step, relative to `1 + max|β|`, below which the fit has
    /// converged even if rounding keeps the gradient above `gradient_tol`.
    pub step_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum NewtonFailure {
    RankDeficient,
    /// Likelihood keeps increasing while coefficients run off to infinity.
    Divergent,
    NonConvergence { iterations: usize },
    NonFinite,
}

#[derive(Debug, Clone)]
pub(crate) struct NewtonOutcome {
    pub beta: DVector<f64>,
    pub eval: Evaluation,
    pub iterations: usize,
}

fn eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Information collapsed relative to its scale at the start point: the
/// fitted values have saturated along some direction.
fn collapsed(info: &DMatrix<f64>, start_scale: f64) -> bool {
    let (min, _) = eigen_range(info);
    min <= 1e-8 * start_scale
}

pub(crate) fn is_rank_deficient(info: &DMatrix<f64>) -> bool {
    if info.nrows() == 0 {
        return false;
    }
    let (min, max) = eigen_range(info);
    !(max > 0.0) || min <= 1e-10 * max
}

pub(crate) fn maximize<F>(
    start: DVector<f64>,
    evaluate: F,
    settings: &NewtonSettings,
) -> Result<NewtonOutcome, NewtonFailure>
where
    F: Fn(&DVector<f64>) -> Evaluation,
{
    let mut beta = start;
    let mut eval = evaluate(&beta);
    if !eval.loglik.is_finite() {
        return Err(NewtonFailure::NonFinite);
    }
    if is_rank_deficient(&eval.information) {
        return Err(NewtonFailure::RankDeficient);
    }
    let start_scale = eigen_range(&eval.information).1;

    for iteration in 1..=settings.max_iterations {
        let step = match eval.information.clone().cholesky() {
            Some(chol) => chol.solve(&eval.gradient),
            None => {
                return Err(if collapsed(&eval.information, start_scale) {
                    NewtonFailure::Divergent
                } else {
                    NewtonFailure::RankDeficient
                })
            }
        };
        if step.amax() <= settings.step_tol * (1.0 + beta.amax()) {
            return finish(beta, eval, iteration - 1, start_scale);
        }

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let candidate = &beta + &step * scale;
            let next = evaluate(&candidate);
            if next.loglik.is_finite() && next.loglik >= eval.loglik {
                accepted = Some((candidate, next));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, next)) = accepted else {
            // No ascent possible: already at the maximum to working precision.
            let max_grad = eval.gradient.amax();
            if max_grad < settings.gradient_tol.sqrt() {
                return finish(beta, eval, iteration, start_scale);
            }
            return Err(NewtonFailure::NonConvergence { iterations: iteration });
        };

        let gain = next.loglik - eval.loglik;
        beta = candidate;
        eval = next;

        let rel = gain.abs() / eval.loglik.abs().max(f64::MIN_POSITIVE);
        if rel < settings.loglik_tol && eval.gradient.amax() < settings.gradient_tol {
            return finish(beta, eval, iteration, start_scale);
        }
        if beta.norm() > settings.divergence_norm && gain < settings.gain_tol {
            return Err(NewtonFailure::Divergent);
        }
    }
    if beta.norm() > settings.divergence_norm || collapsed(&eval.information, start_scale) {
        return Err(NewtonFailure::Divergent);
    }
    Err(NewtonFailure::NonConvergence {
        iterations: settings.max_iterations,
    })
}

fn finish(
    beta: DVector<f64>,
    eval: Evaluation,
    iterations: usize,
    start_scale: f64,
) -> Result<NewtonOutcome, NewtonFailure> {
    if collapsed(&eval.information, start_scale) {
        return Err(NewtonFailure::Divergent);
    }
    Ok(NewtonOutcome {
        beta,
        eval,
        iterations,
    })
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky()?.inverse();
    Some((&inv + inv.transpose()) * 0.5)
}
