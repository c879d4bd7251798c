mod common;

use hybridcox::coxfit::{self, CoxData, CoxOptions, Ties};
use hybridcox::dataio::{self, Column, ColumnKind, Dataset};
use hybridcox::mi_engine::{self, rubin_pool, PredictorRecipe};
use hybridcox::missingness::{self, TruncationBounds};
use hybridcox::regressors::TreeParams;
use hybridcox::seeds;
use hybridcox::simharness::{self, SyntheticSpec};
use hybridcox::survcore::{self, RiskTable};
use nalgebra::DMatrix;
use num_rational::Ratio;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

fn fixture_strategy() -> impl Strategy<Value = (common::Fixture, Vec<f64>)> {
    (5usize..40, 1usize..4, any::<u64>(), prop::bool::ANY).prop_map(|(n, p, seed, tied)| {
        let mut rng = seeds::rng(seed);
        let mut fx = common::random_fixture(&mut rng, n, p);
        if tied {
            for t in &mut fx.times {
                *t = (*t * 3.0).ceil();
            }
        }
        let w = (0..n).map(|_| rng.random_range(0.1..4.0)).collect();
        (fx, w)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rubin_total_variance_identity(
        rows in prop::collection::vec(prop::collection::vec((-50.0f64..50.0, 0.0f64..10.0), 3), 2..30)
    ) {
        let est: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.0).collect()).collect();
        let var: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.1).collect()).collect();
        let pooled = rubin_pool(&est, &var).unwrap();
        let m = est.len() as f64;
        for (j, c) in pooled.coefficients.iter().enumerate() {
            let t = c.within + (1.0 + 1.0 / m) * c.between;
            prop_assert!((c.total - t).abs() <= 4.0 * f64::EPSILON * t.max(f64::MIN_POSITIVE));
            let qbar = est.iter().map(|r| r[j]).sum::<f64>() / m;
            prop_assert!((c.estimate - qbar).abs() <= 1e-12 * (1.0 + qbar.abs()));
            prop_assert!(c.ci_low <= c.estimate && c.estimate <= c.ci_high);
        }
    }

    #[test]
    fn rubin_is_order_invariant(
        rows in prop::collection::vec(prop::collection::vec((-5.0f64..5.0, 0.0f64..1.0), 2), 2..12),
        shift in 0usize..12,
    ) {
        let est: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.0).collect()).collect();
        let var: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.1).collect()).collect();
        let k = shift % est.len();
        let mut est2 = est.clone();
        let mut var2 = var.clone();
        est2.rotate_left(k);
        var2.rotate_left(k);
        prop_assert_eq!(rubin_pool(&est, &var).unwrap(), rubin_pool(&est2, &var2).unwrap());
    }

    #[test]
    fn hybrid_weights_decrease_in_kappa(pi in prop::collection::vec(0.01f64..=0.99, 1..50), k1 in 0.0f64..=1.0, k2 in 0.0f64..=1.0) {
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let bounds = TruncationBounds::default();
        let observed: Vec<bool> = (0..pi.len()).map(|i| i % 2 == 0).collect();
        let a = missingness::hybrid_weights(&pi, &observed, lo, bounds).unwrap();
        let b = missingness::hybrid_weights(&pi, &observed, hi, bounds).unwrap();
        for i in 0..pi.len() {
            let (wa, wb) = (a.weights[i].unwrap(), b.weights[i].unwrap());
            if observed[i] {
                prop_assert_eq!(wa, wb);
            } else {
                prop_assert!(wb <= wa + 1e-15);
                prop_assert!(wb >= 1.0 - 1e-15);
            }
        }
    }

    #[test]
    fn csv_round_trip(
        cells in prop::collection::vec((0.0f64..1e6, prop::bool::ANY, prop::option::of(-1e9f64..1e9), prop::option::of(0usize..4)), 1..40)
    ) {
        let levels: Vec<String> = ["11-25k", "<11k", ">25k", "a b"].iter().map(|s| s.to_string()).collect();
        let mut codes: Vec<Option<usize>> = cells.iter().map(|c| c.3).collect();
        codes[0] = Some(2);
        let data = Dataset::from_columns(vec![
            Column::numeric("time", ColumnKind::Time, cells.iter().map(|c| Some(c.0)).collect()),
            Column::numeric("status", ColumnKind::Event, cells.iter().map(|c| Some(f64::from(u8::from(c.1)))).collect()),
            Column::numeric("z", ColumnKind::Continuous, cells.iter().map(|c| c.2).collect()),
            Column::categorical("income", codes, levels, 2),
        ]).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = dataio::read_dataset(buf.as_slice(), &data.schema()).unwrap();
        for name in ["time", "status", "z"] {
            prop_assert_eq!(back.numeric(name).unwrap(), data.numeric(name).unwrap());
        }
        let text = |d: &Dataset| (0..d.n_rows()).map(|i| d.column("income").unwrap().cell_text(i)).collect::<Vec<_>>();
        prop_assert_eq!(text(&back), text(&data));
    }

    #[test]
    fn residual_sums_vanish_at_the_fit((fx, w) in fixture_strategy(), weighted in prop::bool::ANY, efron in prop::bool::ANY) {
        let ties = if efron { Ties::Efron } else { Ties::Breslow };
        let data = CoxData::new(&fx.x, &fx.times, &fx.events).with_weights(weighted.then_some(w.as_slice()));
        // Monotone likelihoods and singular designs are legitimate errors.
        if let Ok(fit) = coxfit::fit_cox(&data, CoxOptions { ties, robust: true }) {
            let res = coxfit::residuals(&fit, &data).unwrap();
            let n = fx.times.len() as f64;
            for j in 0..fx.x.ncols() {
                let s: f64 = res.schoenfeld.column(j).iter().zip(&res.event_weights).map(|(r, w)| r * w).sum();
                prop_assert!(s.abs() <= 1e-6 * n, "schoenfeld sum {}", s);
            }
            let wt = |i: usize| if weighted { w[i] } else { 1.0 };
            let m: f64 = res.martingale.iter().enumerate().map(|(i, r)| wt(i) * r).sum();
            prop_assert!(m.abs() <= 1e-6 * n, "martingale sum {}", m);
            let dfbeta = coxfit::score_residuals(&fit, &data).unwrap();
            for j in 0..fx.x.ncols() {
                let s: f64 = dfbeta.column(j).iter().enumerate().map(|(i, r)| wt(i) * r).sum();
                prop_assert!(s.abs() <= 1e-6 * n, "score residual sum {}", s);
            }
        }
    }

    #[test]
    fn km_and_na_match_rational_definition(
        obs in prop::collection::vec((1u8..8, prop::bool::ANY), 1..25)
    ) {
        let times: Vec<f64> = obs.iter().map(|o| f64::from(o.0)).collect();
        let events: Vec<bool> = obs.iter().map(|o| o.1).collect();
        let mut s = Ratio::from_integer(1i64);
        let mut h = Ratio::from_integer(0i64);
        let (mut s_ref, mut h_ref, mut t_ref) = (Vec::new(), Vec::new(), Vec::new());
        for t in 1u8..8 {
            let at_risk = obs.iter().filter(|o| o.0 >= t).count() as i64;
            let d = obs.iter().filter(|o| o.0 == t && o.1).count() as i64;
            if d > 0 {
                s *= Ratio::new(at_risk - d, at_risk);
                h += Ratio::new(d, at_risk);
                s_ref.push(s);
                h_ref.push(h);
                t_ref.push(f64::from(t));
            }
        }
        let table = RiskTable::new(&times, &events).unwrap();
        prop_assert_eq!(&table.times, &t_ref);
        prop_assert_eq!(table.survival::<Ratio<i64>>(), s_ref.clone());
        prop_assert_eq!(table.cumulative_hazard::<Ratio<i64>>(), h_ref.clone());
        let km = survcore::kaplan_meier(&times, &events).unwrap();
        for (v, r) in km.values.iter().zip(&s_ref) {
            prop_assert!((v - *r.numer() as f64 / *r.denom() as f64).abs() < 1e-12);
        }
    }
}

fn strong_signal_data(n: usize, seed: u64) -> (Dataset, Vec<Option<usize>>) {
    let spec = SyntheticSpec {
        beta: vec![0.3, 0.6, 0.3, -0.3],
        censoring: 0.3,
        assoc: 6.0,
    };
    let data = simharness::generate_synthetic(n, &spec, &mut seeds::rng(seed)).unwrap();
    let truth = data.categorical("g").unwrap().0.to_vec();
    let missing: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
    (data.with_missing("g", &missing).unwrap(), truth)
}

fn agreement(imputed: &Dataset, truth: &[Option<usize>]) -> f64 {
    let codes = imputed.categorical("g").unwrap().0;
    let rows: Vec<usize> = (0..truth.len()).filter(|i| i % 4 == 0).collect();
    rows.iter().filter(|&&i| codes[i] == truth[i]).count() as f64 / rows.len() as f64
}

#[test]
fn imputations_recover_a_strongly_predicted_covariate() {
    let (data, truth) = strong_signal_data(800, 5);
    let recipe = PredictorRecipe::default_for(&data, "g");
    let p = mi_engine::impute_parametric(&data, "g", &recipe, 5, 17).unwrap();
    let np = mi_engine::impute_nonparametric(&data, "g", &recipe, 5, 17, TreeParams::default()).unwrap();
    for d in p.datasets.iter().chain(&np.datasets) {
        assert!(agreement(d, &truth) > 0.8, "agreement {}", agreement(d, &truth));
    }
}

#[test]
fn null_wald_statistics_are_standard_normal() {
    let spec = SyntheticSpec {
        beta: vec![0.0; 4],
        censoring: 0.3,
        assoc: 1.0,
    };
    let mut z = Vec::new();
    for r in 0..300 {
        let data = simharness::generate_synthetic(200, &spec, &mut seeds::rng(seeds::derive(99, r))).unwrap();
        let design = dataio::encode(&data, &["g", "x1", "x2"]).unwrap();
        let (t, e) = (data.times(), data.events());
        let fit = coxfit::fit_cox(&CoxData::new(&design.matrix, &t, &e), CoxOptions::default()).unwrap();
        z.push(fit.beta[3] / fit.model_se()[3]);
    }
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let normal = Normal::standard();
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal.cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // 1% Kolmogorov critical value
    assert!(d < 1.63 / n.sqrt(), "KS distance {d}");
}

#[test]
fn brute_force_oracle_agrees_on_two_covariates() {
    let mut rng = seeds::rng(41);
    let mut done = 0;
    while done < 5 {
        let fx = common::random_fixture(&mut rng, 20, 2);
        let Some(expected) = common::brute_force_cox(&fx) else {
            continue;
        };
        let fit = coxfit::fit_cox(&CoxData::new(&fx.x, &fx.times, &fx.events), CoxOptions::default()).unwrap();
        for (a, b) in fit.beta.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let ll = common::partial_loglik(&fx, &expected);
        let lib = coxfit::log_partial_likelihood(&fit.beta, &CoxData::new(&fx.x, &fx.times, &fx.events), Ties::Breslow).unwrap();
        assert!((ll - lib).abs() < 1e-9);
        done += 1;
    }
}

#[test]
fn subsamples_are_distinct_rows_of_the_reference() {
    let spec = SyntheticSpec {
        beta: vec![0.5, 1.0, 0.5, -0.5],
        censoring: 0.33,
        assoc: 1.0,
    };
    let reference = simharness::generate_synthetic(2000, &spec, &mut seeds::rng(8)).unwrap();
    let level_share = |d: &Dataset| {
        let codes = d.categorical("g").unwrap().0;
        (0..3)
            .map(|k| codes.iter().filter(|c| **c == Some(k)).count() as f64 / codes.len() as f64)
            .collect::<Vec<_>>()
    };
    let full = level_share(&reference);
    let mut rng = seeds::rng(9);
    let mut mean = [0.0; 3];
    let reps = 50;
    for s in simharness::subsample_replicates(&reference, 500, reps, &mut rng).unwrap() {
        let mut t = s.times();
        t.sort_by(f64::total_cmp);
        t.dedup();
        assert_eq!(t.len(), 500);
        let all = reference.times();
        assert!(s.times().iter().all(|v| all.contains(v)));
        for (m, v) in mean.iter_mut().zip(level_share(&s)) {
            *m += v / reps as f64;
        }
    }
    for (m, f) in mean.iter().zip(&full) {
        assert!((m - f).abs() < 0.01, "{m} vs {f}");
    }
}

#[test]
fn random_design_gradient_matches_finite_differences() {
    let mut rng = seeds::rng(77);
    let n = 25;
    let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let times: Vec<f64> = (0..n).map(|i| (i % 7) as f64 + 1.0).collect();
    let events: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let data = CoxData::new(&x, &times, &events);
    for ties in [Ties::Efron, Ties::Breslow] {
        let b = [0.3, -0.7];
        let analytic = coxfit::score(&nalgebra::DVector::from_row_slice(&b), &data, ties).unwrap();
        let numeric = common::numeric_gradient(
            |b| coxfit::log_partial_likelihood(&nalgebra::DVector::from_row_slice(b), &data, ties).unwrap(),
            &b,
        );
        assert!(common::relative_error(analytic.as_slice(), &numeric) < 1e-6);
    }
}
