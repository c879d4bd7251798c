//! Reference implementations used as oracles by the integration tests.
//! Nothing here calls into the library's numerics.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

pub const GRID_HALF_WIDTH: f64 = 4.0;
const GRID_STEP: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Fixture {
    pub x: DMatrix<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

/// Continuous times, so no ties; at least two events.
pub fn random_fixture<R: Rng>(rng: &mut R, n: usize, p: usize) -> Fixture {
    loop {
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let exp = Exp::new(1.0).unwrap();
        let times: Vec<f64> = (0..n).map(|_| exp.sample(rng)).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.75).collect();
        if events.iter().filter(|&&e| e).count() >= 2 {
            return Fixture { x, times, events };
        }
    }
}

/// Log partial likelihood without ties, straight from the definition.
pub fn partial_loglik(fx: &Fixture, beta: &[f64]) -> f64 {
    let eta: Vec<f64> = (0..fx.x.nrows())
        .map(|i| (0..fx.x.ncols()).map(|j| fx.x[(i, j)] * beta[j]).sum())
        .collect();
    let mut ll = 0.0;
    for i in 0..fx.times.len() {
        if !fx.events[i] {
            continue;
        }
        let denom: f64 = (0..fx.times.len())
            .filter(|&k| fx.times[k] >= fx.times[i])
            .map(|k| eta[k].exp())
            .sum();
        ll += eta[i] - denom.ln();
    }
    ll
}

/// Maximizer of a unimodal function on `[a, b]`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Grid search followed by golden-section refinement (nested for two
/// coefficients). `None` when the grid maximum lies on the boundary.
pub fn brute_force_cox(fx: &Fixture) -> Option<Vec<f64>> {
    let steps = (2.0 * GRID_HALF_WIDTH / GRID_STEP).round() as usize;
    let axis: Vec<f64> = (0..=steps).map(|k| -GRID_HALF_WIDTH + k as f64 * GRID_STEP).collect();
    let on_edge = |v: f64| (v.abs() - GRID_HALF_WIDTH).abs() < 1e-9;
    let tol = 1e-11;
    match fx.x.ncols() {
        1 => {
            let best = axis
                .iter()
                .copied()
                .max_by(|a, b| partial_loglik(fx, &[*a]).total_cmp(&partial_loglik(fx, &[*b])))?;
            if on_edge(best) {
                return None;
            }
            Some(vec![golden_max(
                |b| partial_loglik(fx, &[b]),
                best - GRID_STEP,
                best + GRID_STEP,
                tol,
            )])
        }
        2 => {
            let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
            for &a in &axis {
                for &b in &axis {
                    let v = partial_loglik(fx, &[a, b]);
                    if v > best.0 {
                        best = (v, a, b);
                    }
                }
            }
            if on_edge(best.1) || on_edge(best.2) {
                return None;
            }
            let lim = GRID_HALF_WIDTH + 2.0;
            let inner = |a: f64| golden_max(|b| partial_loglik(fx, &[a, b]), -lim, lim, tol);
            let a = golden_max(|a| partial_loglik(fx, &[a, inner(a)]), -lim, lim, tol);
            Some(vec![a, inner(a)])
        }
        _ => None,
    }
}

/// Central finite-difference gradient.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    (0..at.len())
        .map(|j| {
            let h = 1e-5 * at[j].abs().max(1.0);
            let mut up = at.to_vec();
            let mut down = at.to_vec();
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max |b|`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}
