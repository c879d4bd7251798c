//! Monte-Carlo evaluation: generate or subsample replicates, ampute,
//! run every method, and aggregate bias, CI width and coverage.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coxfit::{fit_cox, CoxData, CoxError, CoxOptions, Ties};
use crate::dataio::{self, Column, ColumnKind, DataError, Dataset, Schema};
use crate::methods::{self, AnalysisSetup, MethodKind, MethodResult, MethodSpec};
use crate::missingness::{self, AmputationPlan, TruncationBounds};
use crate::regressors::TreeParams;
use crate::seeds;

/// Share of failed replicates per method above which a run aborts.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("censoring calibration failed for target {0}")]
    Calibration(f64),
    #[error("sample size {n} exceeds the reference size {available}")]
    SampleTooLarge { n: usize, available: usize },
    #[error("reference benchmark fit failed: {0}")]
    Benchmark(CoxError),
    #[error("{method}: {failed} of {replicates} replicates failed (first: {first})")]
    TooManyFailures {
        method: String,
        failed: usize,
        replicates: usize,
        first: String,
    },
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Column names of the synthetic design.
pub const SYN_TIME: &str = "time";
pub const SYN_EVENT: &str = "status";
pub const SYN_GROUP: &str = "g";
pub const SYN_X1: &str = "x1";
pub const SYN_X2: &str = "x2";
pub const SYN_LEVELS: [&str; 3] = ["a", "b", "c"];
const BASELINE_HAZARD: f64 = 0.1;

/// Synthetic data-generating process: a 3-level covariate `g` whose level
/// odds grow with `x1`, an independent `x2`, exponential event times and
/// independent exponential censoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Coefficients of `g[b]`, `g[c]`, `x1`, `x2`.
    pub beta: Vec<f64>,
    /// Expected censored fraction.
    pub censoring: f64,
    /// Log-odds slope of each step up in `g` per unit `x1`.
    #[serde(default = "default_assoc")]
    pub assoc: f64,
}

fn default_assoc() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn coefficient_names() -> Vec<String> {
        vec![
            dataio::dummy_name(SYN_GROUP, SYN_LEVELS[1]),
            dataio::dummy_name(SYN_GROUP, SYN_LEVELS[2]),
            SYN_X1.to_string(),
            SYN_X2.to_string(),
        ]
    }
}

/// Rate `c` of exponential censoring with `mean(c / (c + λ_i)) = target`.
fn censoring_rate(hazards: &[f64], target: f64) -> Result<f64> {
    let frac = |c: f64| hazards.iter().map(|&l| c / (c + l)).sum::<f64>() / hazards.len() as f64;
    let lo_h = hazards.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_h = hazards.iter().copied().fold(0.0, f64::max);
    let (mut lo, mut hi) = ((lo_h * 1e-12).ln(), (hi_h * 1e12).ln());
    if !(frac(lo.exp()) < target && frac(hi.exp()) > target) {
        return Err(SimError::Calibration(target));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Draws one synthetic dataset. The censoring rate is solved on the drawn
/// covariates so the expected censored fraction equals the target.
pub fn generate_synthetic<R: Rng + ?Sized>(n: usize, spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset> {
    if spec.beta.len() != 4 {
        return Err(SimError::Config(format!("beta needs 4 values, got {}", spec.beta.len())));
    }
    if !(spec.censoring > 0.0 && spec.censoring < 1.0) {
        return Err(SimError::Config(format!("censoring target {} outside (0, 1)", spec.censoring)));
    }
    if n == 0 {
        return Err(SimError::Config("n must be positive".into()));
    }
    let b = &spec.beta;
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut hazards = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let c: f64 = rng.sample(StandardNormal);
        let w = [0.0, spec.assoc * a, 2.0 * spec.assoc * a];
        let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p: Vec<f64> = w.iter().map(|v| (v - mx).exp()).collect();
        let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
        let level = if u < p[0] {
            0
        } else if u < p[0] + p[1] {
            1
        } else {
            2
        };
        let eta = match level {
            1 => b[0],
            2 => b[1],
            _ => 0.0,
        } + b[2] * a
            + b[3] * c;
        x1.push(a);
        x2.push(c);
        g.push(level);
        hazards.push(BASELINE_HAZARD * eta.exp());
    }
    let rate = censoring_rate(&hazards, spec.censoring)?;
    let censor = Exp::new(rate).map_err(|e| SimError::Config(e.to_string()))?;
    let mut time = Vec::with_capacity(n);
    let mut status = Vec::with_capacity(n);
    for &l in &hazards {
        let t = Exp::new(l).map_err(|e| SimError::Config(e.to_string()))?.sample(rng);
        let c = censor.sample(rng);
        time.push(Some(t.min(c)));
        status.push(Some(if t <= c { 1.0 } else { 0.0 }));
    }
    Ok(Dataset::from_columns(vec![
        Column::numeric(SYN_TIME, ColumnKind::Time, time),
        Column::numeric(SYN_EVENT, ColumnKind::Event, status),
        Column::categorical(
            SYN_GROUP,
            g.into_iter().map(Some).collect(),
            SYN_LEVELS.iter().map(|s| s.to_string()).collect(),
            0,
        ),
        Column::numeric(SYN_X1, ColumnKind::Continuous, x1.into_iter().map(Some).collect()),
        Column::numeric(SYN_X2, ColumnKind::Continuous, x2.into_iter().map(Some).collect()),
    ])?)
}

/// A uniform without-replacement sample of `n` reference rows.
pub fn subsample<R: Rng + ?Sized>(reference: &Dataset, n: usize, rng: &mut R) -> Result<Dataset> {
    let available = reference.n_rows();
    if n > available {
        return Err(SimError::SampleTooLarge { n, available });
    }
    let rows = rand::seq::index::sample(rng, available, n).into_vec();
    Ok(reference.select_rows(&rows))
}

/// `count` independent subsamples drawn in sequence from one generator.
pub fn subsample_replicates<'a, R: Rng + ?Sized>(
    reference: &'a Dataset,
    n: usize,
    count: usize,
    rng: &'a mut R,
) -> Result<impl Iterator<Item = Dataset> + 'a> {
    let available = reference.n_rows();
    if n > available {
        return Err(SimError::SampleTooLarge { n, available });
    }
    Ok((0..count).map(move |_| subsample(reference, n, rng).expect("size checked")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Subsamples of a complete reference CSV; the full-data fit is the truth.
    Reference {
        data: PathBuf,
        schema: PathBuf,
        /// Analysis covariates; all covariates when empty.
        #[serde(default)]
        covariates: Vec<String>,
    },
}

/// Amputation of each replicate; the seed comes from the replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmputationSpec {
    pub target: String,
    pub predictors: Vec<String>,
    pub rate: f64,
    #[serde(default)]
    pub weights: Vec<f64>,
}

fn default_methods() -> Vec<MethodKind> {
    MethodKind::ALL.to_vec()
}

fn default_kappas() -> Vec<f64> {
    vec![0.0, 0.3, 0.5, 1.0]
}

fn default_m() -> usize {
    methods::DEFAULT_M
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub replicates: usize,
    pub n: usize,
    pub source: DataSource,
    /// Without amputation every method analyses complete data.
    #[serde(default)]
    pub amputation: Option<AmputationSpec>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub ties: Ties,
    #[serde(default)]
    pub trees: TreeParams,
    #[serde(default)]
    pub bounds: TruncationBounds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SimConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config; relative reference paths resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = Self::from_toml_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Reference { data, schema, .. } = &mut config.source {
            for p in [data, schema] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.replicates == 0 {
            return bad("replicates must be >= 1".into());
        }
        if self.n < 20 {
            return bad(format!("n = {} is below 20", self.n));
        }
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if let Some(k) = self.kappas.iter().find(|k| !(0.0..=1.0).contains(*k)) {
            return bad(format!("κ = {k} outside [0, 1]"));
        }
        if self.methods.iter().any(|m| m.uses_kappa()) && self.kappas.is_empty() {
            return bad("hybrid methods need a κ grid".into());
        }
        if self.methods.iter().any(|m| m.imputes()) && self.m < 2 {
            return bad(format!("m = {} is below 2", self.m));
        }
        if let Some(a) = &self.amputation {
            if !(0.0..=1.0).contains(&a.rate) {
                return bad(format!("amputation rate {} outside [0, 1]", a.rate));
            }
        }
        if let DataSource::Synthetic(s) = &self.source {
            if s.beta.len() != 4 {
                return bad(format!("beta needs 4 values, got {}", s.beta.len()));
            }
            if !(s.censoring > 0.0 && s.censoring < 1.0) {
                return bad(format!("censoring target {} outside (0, 1)", s.censoring));
            }
        }
        Ok(())
    }

    /// The (method, κ) cells of the output tables, in config order.
    pub fn cells(&self) -> Vec<(MethodKind, Option<f64>)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            if m.uses_kappa() {
                out.extend(self.kappas.iter().map(|&k| (m, Some(k))));
            } else {
                out.push((m, None));
            }
        }
        out
    }
}

/// Per-coefficient truth and the replicate source.
struct Context {
    reference: Option<Dataset>,
    setup_covariates: Option<Vec<String>>,
    names: Vec<String>,
    truth: Vec<f64>,
}

fn build_context(config: &SimConfig) -> Result<Context> {
    match &config.source {
        DataSource::Synthetic(s) => Ok(Context {
            reference: None,
            setup_covariates: None,
            names: SyntheticSpec::coefficient_names(),
            truth: s.beta.clone(),
        }),
        DataSource::Reference { data, schema, covariates } => {
            let reference = dataio::load_dataset(data, &Schema::load(schema)?)?;
            if config.n > reference.n_rows() {
                return Err(SimError::SampleTooLarge {
                    n: config.n,
                    available: reference.n_rows(),
                });
            }
            let covariates = if covariates.is_empty() {
                reference.covariate_names()
            } else {
                covariates.clone()
            };
            let design = dataio::encode(&reference, &covariates)?;
            let times = reference.times();
            let events = reference.events();
            let fit = fit_cox(
                &CoxData::new(&design.matrix, &times, &events),
                CoxOptions {
                    ties: config.ties,
                    robust: false,
                },
            )
            .map_err(SimError::Benchmark)?;
            Ok(Context {
                reference: Some(reference),
                setup_covariates: Some(covariates),
                names: design.names,
                truth: fit.beta.iter().copied().collect(),
            })
        }
    }
}

/// One coefficient of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    pub method: MethodKind,
    pub kappa: Option<f64>,
    /// Per coefficient in truth order, or the failure message.
    pub result: std::result::Result<Vec<Estimate>, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub missing: Option<usize>,
    pub cells: Vec<CellOutcome>,
}

fn extract(result: &MethodResult, names: &[String]) -> std::result::Result<Vec<Estimate>, String> {
    names
        .iter()
        .map(|name| {
            result
                .coefficients
                .iter()
                .find(|c| c.name == *name)
                .map(|c| Estimate {
                    estimate: c.estimate,
                    ci_low: c.ci_low,
                    ci_high: c.ci_high,
                })
                .ok_or_else(|| format!("coefficient `{name}` absent from fit"))
        })
        .collect()
}

fn replicate_data(config: &SimConfig, ctx: &Context, seed: u64) -> std::result::Result<(Dataset, String), String> {
    let mut rng = seeds::rng(seeds::derive_label(seed, "data"));
    let data = match (&config.source, &ctx.reference) {
        (DataSource::Synthetic(s), _) => generate_synthetic(config.n, s, &mut rng),
        (_, Some(reference)) => subsample(reference, config.n, &mut rng),
        _ => unreachable!("reference loaded"),
    }
    .map_err(|e| e.to_string())?;
    let target = match &config.amputation {
        Some(a) => a.target.clone(),
        None => match &config.source {
            DataSource::Synthetic(_) => SYN_GROUP.to_string(),
            DataSource::Reference { .. } => data
                .columns()
                .iter()
                .find(|c| c.kind == ColumnKind::Categorical)
                .map(|c| c.name.clone())
                .ok_or("reference has no categorical covariate")?,
        },
    };
    let Some(a) = &config.amputation else {
        return Ok((data, target));
    };
    let plan = AmputationPlan {
        target: a.target.clone(),
        predictors: a.predictors.clone(),
        rate: a.rate,
        predictor_weights: a.weights.clone(),
        seed: seeds::derive_label(seed, "ampute"),
    };
    let amputed = missingness::ampute_mar(&data, &plan).map_err(|e| e.to_string())?;
    Ok((amputed.dataset, target))
}

fn run_replicate(config: &SimConfig, ctx: &Context, replicate: usize) -> ReplicateRecord {
    let seed = seeds::derive(config.seed, replicate as u64);
    let cells = config.cells();
    let fail_all = |msg: String| {
        cells
            .iter()
            .map(|&(method, kappa)| CellOutcome {
                method,
                kappa,
                result: Err(msg.clone()),
            })
            .collect::<Vec<_>>()
    };
    let (data, target) = match replicate_data(config, ctx, seed) {
        Ok(d) => d,
        Err(msg) => {
            return ReplicateRecord {
                replicate,
                seed,
                missing: None,
                cells: fail_all(msg),
            }
        }
    };
    let missing = data.column(&target).map(|c| c.missing_count()).ok();
    let setup = AnalysisSetup {
        target,
        covariates: ctx.setup_covariates.clone().unwrap_or_else(|| data.covariate_names()),
    };
    let analysis_seed = seeds::derive_label(seed, "analysis");
    let mut out = Vec::with_capacity(cells.len());
    for &kind in &config.methods {
        let mut spec = MethodSpec::new(kind).with_m(config.m);
        spec.ties = config.ties;
        spec.trees = config.trees;
        spec.bounds = config.bounds;
        let kappas: &[f64] = if kind.uses_kappa() { &config.kappas } else { &[] };
        match methods::run_method_grid(&data, &setup, &spec, kappas, analysis_seed) {
            Ok(results) => out.extend(results.iter().map(|r| CellOutcome {
                method: kind,
                kappa: r.kappa,
                result: extract(r, &ctx.names),
            })),
            Err(e) => {
                let msg = e.to_string();
                let ks: Vec<Option<f64>> = if kind.uses_kappa() {
                    kappas.iter().map(|&k| Some(k)).collect()
                } else {
                    vec![None]
                };
                out.extend(ks.into_iter().map(|kappa| CellOutcome {
                    method: kind,
                    kappa,
                    result: Err(msg.clone()),
                }));
            }
        }
    }
    ReplicateRecord {
        replicate,
        seed,
        missing,
        cells: out,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub method: MethodKind,
    pub kappa: Option<f64>,
    pub coefficient: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub abs_bias: f64,
    /// Undefined when the truth is zero.
    pub rel_bias_pct: Option<f64>,
    pub ci_width: f64,
    pub coverage_pct: f64,
    pub covered: usize,
    pub not_covered: usize,
    pub failed: usize,
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().sum::<f64>() / n
}

/// Aggregates per-replicate estimates against the truth. Failed
/// replicates are excluded and counted.
pub fn aggregate(
    cells: &[(MethodKind, Option<f64>)],
    names: &[String],
    truth: &[f64],
    records: &[ReplicateRecord],
) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for (c, &(method, kappa)) in cells.iter().enumerate() {
        let outcomes: Vec<&std::result::Result<Vec<Estimate>, String>> =
            records.iter().map(|r| &r.cells[c].result).collect();
        let ok: Vec<&Vec<Estimate>> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
        let failed = outcomes.len() - ok.len();
        for (j, name) in names.iter().enumerate() {
            let t = truth[j];
            let mean_estimate = sorted_mean(ok.iter().map(|e| e[j].estimate).collect());
            let covered = ok.iter().filter(|e| e[j].ci_low <= t && t <= e[j].ci_high).count();
            let abs_bias = mean_estimate - t;
            rows.push(MetricsRow {
                method,
                kappa,
                coefficient: name.clone(),
                truth: t,
                mean_estimate,
                abs_bias,
                rel_bias_pct: (t != 0.0).then(|| 100.0 * abs_bias / t),
                ci_width: sorted_mean(ok.iter().map(|e| e[j].ci_high - e[j].ci_low).collect()),
                coverage_pct: if ok.is_empty() {
                    f64::NAN
                } else {
                    100.0 * covered as f64 / ok.len() as f64
                },
                covered,
                not_covered: ok.len() - covered,
                failed,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub cells: Vec<(MethodKind, Option<f64>)>,
    pub metrics: Vec<MetricsRow>,
    pub records: Vec<ReplicateRecord>,
}

impl SimOutput {
    /// Failed replicates per (method, κ) cell.
    pub fn failures(&self) -> Vec<((MethodKind, Option<f64>), usize)> {
        self.cells
            .iter()
            .enumerate()
            .map(|(c, &cell)| (cell, self.records.iter().filter(|r| r.cells[c].result.is_err()).count()))
            .collect()
    }

    pub fn row(&self, method: MethodKind, kappa: Option<f64>, coefficient: &str) -> Option<&MetricsRow> {
        self.metrics
            .iter()
            .find(|r| r.method == method && r.kappa == kappa && r.coefficient == coefficient)
    }
}

/// Runs every replicate on a pool of `workers` threads. Output does not
/// depend on the worker count.
pub fn run_simulation(config: &SimConfig, workers: usize) -> Result<SimOutput> {
    config.validate()?;
    let ctx = build_context(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let records: Vec<ReplicateRecord> = pool.install(|| {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| run_replicate(config, &ctx, r))
            .collect()
    });
    let cells = config.cells();
    for (c, &(method, kappa)) in cells.iter().enumerate() {
        let errs: Vec<&String> = records.iter().filter_map(|r| r.cells[c].result.as_ref().err()).collect();
        if errs.len() as f64 > MAX_FAILURE_FRACTION * config.replicates as f64 {
            return Err(SimError::TooManyFailures {
                method: cell_label(method, kappa),
                failed: errs.len(),
                replicates: config.replicates,
                first: errs[0].clone(),
            });
        }
    }
    let metrics = aggregate(&cells, &ctx.names, &ctx.truth, &records);
    Ok(SimOutput {
        names: ctx.names,
        truth: ctx.truth,
        cells,
        metrics,
        records,
    })
}

fn cell_label(method: MethodKind, kappa: Option<f64>) -> String {
    match kappa {
        Some(k) => format!("{method} (κ = {k})"),
        None => method.to_string(),
    }
}

/// Fixed 6-decimal rendering; negative zero prints as zero.
pub fn fmt6(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header = [
        "method",
        "kappa",
        "coefficient",
        "truth",
        "mean_estimate",
        "abs_bias",
        "rel_bias_pct",
        "ci_width",
        "coverage_pct",
        "covered",
        "not_covered",
        "failed",
    ];
    w.write_record(header).map_err(csv_io)?;
    for r in rows {
        w.write_record([
            r.method.label().to_string(),
            fmt_opt(r.kappa),
            r.coefficient.clone(),
            fmt6(r.truth),
            fmt6(r.mean_estimate),
            fmt6(r.abs_bias),
            fmt_opt(r.rel_bias_pct),
            fmt6(r.ci_width),
            fmt6(r.coverage_pct),
            r.covered.to_string(),
            r.not_covered.to_string(),
            r.failed.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> SimError {
    SimError::Io(io::Error::other(e))
}

/// Wide table: one row per (method, κ), one column per coefficient, κ last.
pub fn write_wide_table<W: Write>(
    output: &SimOutput,
    metric: impl Fn(&MetricsRow) -> Option<f64>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["Method".to_string()];
    header.extend(output.names.iter().cloned());
    header.push("kappa".into());
    w.write_record(&header).map_err(csv_io)?;
    for &(method, kappa) in &output.cells {
        let mut rec = vec![method.label().to_string()];
        for name in &output.names {
            rec.push(fmt_opt(output.row(method, kappa, name).and_then(&metric)));
        }
        rec.push(fmt_opt(kappa));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(records: &[ReplicateRecord], mut writer: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.jsonl";

/// Writes the metrics CSV, the three wide tables and the trace; returns
/// the written paths.
pub fn write_outputs(output: &SimOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut file = |name: &str| -> Result<io::BufWriter<fs::File>> {
        let p = dir.join(name);
        written.push(p.clone());
        Ok(io::BufWriter::new(fs::File::create(p)?))
    };
    write_metrics_csv(&output.metrics, file(METRICS_FILE)?)?;
    write_wide_table(output, |r| r.rel_bias_pct, file("relative_bias.csv")?)?;
    write_wide_table(output, |r| Some(r.ci_width), file("ci_width.csv")?)?;
    write_wide_table(output, |r| Some(r.coverage_pct), file("coverage.csv")?)?;
    write_trace(&output.records, file(TRACE_FILE)?)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            beta: vec![0.5, 1.0, 0.5, -0.5],
            censoring: 0.33,
            assoc: 1.0,
        }
    }

    fn config() -> SimConfig {
        SimConfig::from_toml_str(
            r#"
            seed = 3
            replicates = 4
            n = 120
            methods = ["CC", "MI_P", "H2"]
            kappas = [0.0, 1.0]
            m = 3
            [source]
            kind = "synthetic"
            beta = [0.5, 1.0, 0.5, -0.5]
            censoring = 0.3
            [amputation]
            target = "g"
            predictors = ["x1", "status"]
            rate = 0.3
            "#,
        )
        .unwrap()
    }

    #[test]
    fn synthetic_is_reproducible_and_calibrated() {
        let a = generate_synthetic(10_000, &spec(), &mut seeds::rng(1)).unwrap();
        let b = generate_synthetic(10_000, &spec(), &mut seeds::rng(1)).unwrap();
        assert_eq!(a, b);
        let censored = a.events().iter().filter(|&&d| !d).count() as f64 / 10_000.0;
        assert!((0.31..=0.35).contains(&censored), "{censored}");
    }

    #[test]
    fn subsample_full_size_is_a_permutation() {
        let d = generate_synthetic(50, &spec(), &mut seeds::rng(2)).unwrap();
        let s = subsample(&d, 50, &mut seeds::rng(3)).unwrap();
        let mut a = d.times();
        let mut b = s.times();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(subsample(&d, 1, &mut seeds::rng(3)).unwrap().n_rows(), 1);
        assert!(matches!(
            subsample(&d, 51, &mut seeds::rng(3)).unwrap_err(),
            SimError::SampleTooLarge { .. }
        ));
        let reps: Vec<Dataset> = subsample_replicates(&d, 10, 3, &mut seeds::rng(4)).unwrap().collect();
        assert_eq!(reps.len(), 3);
        assert_ne!(reps[0], reps[1]);
    }

    #[test]
    fn aggregate_arithmetic() {
        let cells = vec![(MethodKind::Cc, None)];
        let rec = |r: usize, est: f64| ReplicateRecord {
            replicate: r,
            seed: 0,
            missing: None,
            cells: vec![CellOutcome {
                method: MethodKind::Cc,
                kappa: None,
                result: Ok(vec![Estimate {
                    estimate: est,
                    ci_low: est - 0.2,
                    ci_high: est + 0.2,
                }]),
            }],
        };
        let rows = aggregate(&cells, &["b".into()], &[1.0], &[rec(0, 1.25), rec(1, 0.75)]);
        assert_eq!(rows[0].abs_bias, 0.0);
        assert_eq!(rows[0].rel_bias_pct, Some(0.0));
        assert_eq!(rows[0].coverage_pct, 0.0);
        let rows = aggregate(&cells, &["b".into()], &[0.0], &[rec(0, 0.0)]);
        assert_eq!(rows[0].rel_bias_pct, None);
        assert_eq!(rows[0].coverage_pct, 100.0);
    }

    #[test]
    fn config_validation() {
        let mut c = config();
        c.n = 10;
        assert!(c.validate().is_err());
        let mut c = config();
        c.kappas = vec![1.5];
        assert!(c.validate().is_err());
        let mut c = config();
        c.replicates = 0;
        assert!(c.validate().is_err());
        assert!(SimConfig::from_toml_str("seed = 1").is_err());
    }

    #[test]
    fn small_run_independent_of_workers() {
        let c = config();
        let a = run_simulation(&c, 1).unwrap();
        let b = run_simulation(&c, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.len(), (1 + 1 + 2) * 4);
        for r in &a.metrics {
            assert_eq!(r.covered + r.not_covered + r.failed, c.replicates);
        }
    }
}
