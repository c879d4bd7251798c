use nalgebra::{DMatrix, DVector};

use super::{sweep, CoxData, CoxError, CoxFit, Prepared};
use crate::newton;

/// Schoenfeld and martingale residuals at the fitted coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    /// One row per event, ordered by decreasing event time.
    pub schoenfeld: DMatrix<f64>,
    pub event_times: Vec<f64>,
    /// Subject index of each Schoenfeld row.
    pub event_subjects: Vec<usize>,
    /// Case weight of each Schoenfeld row.
    pub event_weights: Vec<f64>,
    /// One per subject, input order.
    pub martingale: Vec<f64>,
    /// Breslow cumulative baseline hazard at each subject's time.
    pub cumulative_hazard: Vec<f64>,
}

/// Per-subject quantities shared by the residual types.
struct SubjectTerms {
    set: ResidualSet,
    score_residuals: DMatrix<f64>,
}

fn subject_terms(fit: &CoxFit, prep: &Prepared) -> SubjectTerms {
    let p = prep.p();
    let n = prep.n();
    let sw = sweep(prep, &fit.beta, fit.ties, true);

    // cumulative Breslow hazard H and hazard-weighted mean A, accumulated
    // in increasing time
    let mut hazard_at_block = vec![0.0; prep.blocks.len()];
    let mut mean_at_block = vec![DVector::zeros(p); prep.blocks.len()];
    let mut event_of_block: Vec<Option<usize>> = vec![None; prep.blocks.len()];
    for (k, ev) in sw.events.iter().enumerate() {
        event_of_block[ev.block] = Some(k);
    }
    let mut h = 0.0;
    let mut a = DVector::zeros(p);
    for b in (0..prep.blocks.len()).rev() {
        if let Some(k) = event_of_block[b] {
            let ev = &sw.events[k];
            h += ev.hazard;
            a.axpy(ev.hazard, &ev.breslow_mean, 1.0);
        }
        hazard_at_block[b] = h;
        mean_at_block[b] = a.clone();
    }

    let mut martingale = vec![0.0; n];
    let mut cumulative_hazard = vec![0.0; n];
    let mut score_residuals = DMatrix::zeros(n, p);
    let mut schoenfeld_rows = Vec::new();
    let mut event_times = Vec::new();
    let mut event_subjects = Vec::new();
    let mut event_weights = Vec::new();

    for (b, block) in prep.blocks.iter().enumerate() {
        let ev = event_of_block[b].map(|k| &sw.events[k]);
        for &i in &block.members {
            let xi = prep.x.row(i).transpose();
            let risk = sw.eta[i].exp();
            let hb = hazard_at_block[b];
            martingale[i] = f64::from(u8::from(block.deaths.contains(&i))) - risk * hb;
            cumulative_hazard[i] = hb;
            let mut l = -(&xi * hb - &mean_at_block[b]) * risk;
            if let Some(ev) = ev.filter(|_| block.deaths.contains(&i)) {
                let r = &xi - &ev.mean;
                l += &r;
                schoenfeld_rows.push(r);
                event_times.push(block.time);
                event_subjects.push(i);
                event_weights.push(prep.weights[i]);
            }
            score_residuals.set_row(i, &l.transpose());
        }
    }
    let schoenfeld = DMatrix::from_fn(schoenfeld_rows.len(), p, |r, j| schoenfeld_rows[r][j]);
    SubjectTerms {
        set: ResidualSet {
            schoenfeld,
            event_times,
            event_subjects,
            event_weights,
            martingale,
            cumulative_hazard,
        },
        score_residuals,
    }
}

/// Schoenfeld and martingale residuals; the martingale residuals use the
/// Breslow baseline hazard.
pub fn residuals(fit: &CoxFit, data: &CoxData<'_>) -> Result<ResidualSet, CoxError> {
    let prep = Prepared::new(data)?;
    Ok(subject_terms(fit, &prep).set)
}

/// Unweighted per-subject score residuals (n × p).
pub fn score_residuals(fit: &CoxFit, data: &CoxData<'_>) -> Result<DMatrix<f64>, CoxError> {
    let prep = Prepared::new(data)?;
    Ok(subject_terms(fit, &prep).score_residuals)
}

pub(crate) fn robust_from_prepared(fit: &CoxFit, prep: &Prepared) -> Result<DMatrix<f64>, CoxError> {
    let info = sweep(prep, &fit.beta, fit.ties, false).eval.information;
    let inv = newton::spd_inverse(&info).ok_or(CoxError::SingularInformation)?;
    let terms = subject_terms(fit, prep);
    let mut weighted = terms.score_residuals;
    for (i, &w) in prep.weights.iter().enumerate() {
        weighted.row_mut(i).scale_mut(w);
    }
    // rows of `dfbeta` are the weighted influence of each subject
    let dfbeta = weighted * &inv;
    let v = dfbeta.transpose() * dfbeta;
    Ok((&v + v.transpose()) * 0.5)
}

/// Sandwich covariance `A⁻¹ B A⁻¹`, with `B` the cross-product of the
/// weighted score residuals.
pub fn robust_variance(fit: &CoxFit, data: &CoxData<'_>) -> Result<DMatrix<f64>, CoxError> {
    let prep = Prepared::new(data)?;
    robust_from_prepared(fit, &prep)
}

#[cfg(test)]
mod tests {
    use super::super::{fit_cox, CoxOptions, Ties};
    use super::*;

    #[test]
    fn censored_martingale_is_nonpositive() {
        let x = DMatrix::from_column_slice(6, 1, &[0.5, -0.3, 1.2, 0.0, -1.0, 0.8]);
        let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let e = [true, false, true, true, false, true];
        let d = CoxData::new(&x, &t, &e);
        let fit = fit_cox(&d, CoxOptions::default()).unwrap();
        let r = residuals(&fit, &d).unwrap();
        for (i, m) in r.martingale.iter().enumerate() {
            if !e[i] {
                assert!(*m <= 0.0);
            }
        }
        assert!(r.martingale.iter().sum::<f64>().abs() < 1e-10);
        for j in 0..1 {
            assert!(r.schoenfeld.column(j).sum().abs() < 1e-8);
        }
    }

    #[test]
    fn three_subject_breslow_baseline_by_hand() {
        // x = (1, 0, 0), t = (1, 2, 3), d = (1, 1, 0), beta fixed at 0.5
        // risk r = (e^.5, 1, 1). H(1) = 1/(e^.5 + 2), H(2) = H(1) + 1/2
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let t = [1.0, 2.0, 3.0];
        let e = [true, true, false];
        let d = CoxData::new(&x, &t, &e);
        let fit = CoxFit {
            beta: DVector::from_element(1, 0.5),
            model_covariance: DMatrix::identity(1, 1),
            robust_covariance: None,
            log_partial_likelihood: 0.0,
            null_log_partial_likelihood: 0.0,
            ties: Ties::Breslow,
            converged: true,
            iterations: 0,
            weighted: false,
            score: DVector::zeros(1),
            information: DMatrix::identity(1, 1),
        };
        let r = residuals(&fit, &d).unwrap();
        let e5 = 0.5f64.exp();
        let h1 = 1.0 / (e5 + 2.0);
        let h2 = h1 + 0.5;
        let expected = [1.0 - e5 * h1, 1.0 - h2, -h2];
        for (got, want) in r.martingale.iter().zip(expected) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        // Schoenfeld rows, latest event first: t=2 -> 0 - 0, t=1 -> 1 - e5/(e5+2)
        assert_eq!(r.event_times, vec![2.0, 1.0]);
        assert!((r.schoenfeld[(0, 0)]).abs() < 1e-15);
        assert!((r.schoenfeld[(1, 0)] - (1.0 - e5 / (e5 + 2.0))).abs() < 1e-14);
    }
}
