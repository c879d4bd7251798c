//! Score test of proportional hazards against a time-varying effect
//! `β_j + γ_j g(t)`, evaluated at `(β̂, γ = 0)` from the Schoenfeld
//! residuals and the per-event information blocks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{sweep, CoxData, CoxError, CoxFit, Prepared};
use crate::newton;
use crate::survcore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeTransform {
    /// `1 − Ŝ(t−)` with the Kaplan–Meier estimate of the pooled sample.
    #[default]
    Km,
    Identity,
    /// Rank of the event time among event times.
    Rank,
}

impl std::str::FromStr for TimeTransform {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "km" => Ok(TimeTransform::Km),
            "identity" => Ok(TimeTransform::Identity),
            "rank" => Ok(TimeTransform::Rank),
            other => Err(format!("unknown time transform `{other}` (km|identity|rank)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhTestRow {
    pub name: String,
    pub chi_square: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhTestResult {
    pub covariates: Vec<PhTestRow>,
    pub global: PhTestRow,
}

fn chi_sf(x: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64).expect("df >= 1").sf(x.max(0.0)).clamp(0.0, 1.0)
}

fn quad_form(u: &DVector<f64>, v: &DMatrix<f64>) -> Result<f64, CoxError> {
    let inv = newton::spd_inverse(v).ok_or(CoxError::SingularInformation)?;
    Ok(u.dot(&(inv * u)))
}

pub fn ph_test(
    fit: &CoxFit,
    data: &CoxData<'_>,
    names: &[String],
    transform: TimeTransform,
) -> Result<PhTestResult, CoxError> {
    let prep = Prepared::new(data)?;
    let p = prep.p();
    let n_events = data.n_events();
    if n_events < 2 || n_events < p {
        return Err(CoxError::TooFewEvents {
            events: n_events,
            coefficients: p,
        });
    }
    let sw = sweep(&prep, &fit.beta, fit.ties, true);

    let event_times: Vec<f64> = sw.events.iter().map(|ev| prep.blocks[ev.block].time).collect();
    let g: Vec<f64> = match transform {
        TimeTransform::Identity => event_times.clone(),
        TimeTransform::Km => {
            let km = survcore::kaplan_meier(data.times, data.events).expect("validated inputs");
            event_times.iter().map(|&t| 1.0 - km.eval_left(t)).collect()
        }
        TimeTransform::Rank => {
            // events are stored in decreasing time; rank counts deaths, ties share the average rank
            let mut ranks = vec![0.0; event_times.len()];
            let mut below = 0usize;
            for k in (0..event_times.len()).rev() {
                let d = prep.blocks[sw.events[k].block].deaths.len();
                ranks[k] = below as f64 + (d as f64 + 1.0) / 2.0;
                below += d;
            }
            ranks
        }
    };

    let mut u = DVector::zeros(p);
    let mut i_bb = DMatrix::zeros(p, p);
    let mut i_bg = DMatrix::zeros(p, p);
    let mut i_gg = DMatrix::zeros(p, p);
    for (k, ev) in sw.events.iter().enumerate() {
        let block = &prep.blocks[ev.block];
        for &i in &block.deaths {
            let r = prep.x.row(i).transpose() - &ev.mean;
            u.axpy(g[k] * prep.weights[i], &r, 1.0);
        }
        i_bb += &ev.variance;
        i_bg += &ev.variance * g[k];
        i_gg += &ev.variance * (g[k] * g[k]);
    }
    let bb_inv = newton::spd_inverse(&i_bb).ok_or(CoxError::SingularInformation)?;
    let schur = &i_gg - i_bg.transpose() * &bb_inv * &i_bg;

    let name = |j: usize| names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
    let covariates = (0..p)
        .map(|j| {
            let chi_square = u[j] * u[j] / schur[(j, j)];
            PhTestRow {
                name: name(j),
                chi_square,
                df: 1,
                p_value: chi_sf(chi_square, 1),
            }
        })
        .collect();
    let global_chi = quad_form(&u, &schur)?;
    Ok(PhTestResult {
        covariates,
        global: PhTestRow {
            name: "GLOBAL".into(),
            chi_square: global_chi,
            df: p,
            p_value: chi_sf(global_chi, p),
        },
    })
}
