//! Command-line front end: `fit`, `ampute`, `impute`, `analyze`,
//! `diagnose` and `simulate`.
//!
//! Every subcommand accepts `--config FILE`, a TOML table whose keys are
//! the long flag names; flags given on the command line win. Each run
//! prints its seed and resolved configuration to stderr and writes a JSON
//! manifest next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::coxfit::{self, fit_cox, ph_test, CoxData, CoxOptions, Ties, TimeTransform};
use crate::dataio::{self, ColumnKind, Dataset, Schema};
use crate::methods::{self, hazard_ratios, AnalysisSetup, MethodKind, MethodResult, MethodSpec};
use crate::mi_engine::{self, Engine, PredictorRecipe};
use crate::missingness::{self, AmputationPlan, TruncationBounds};
use crate::regressors::TreeParams;
use crate::simharness::{self, fmt6, SimConfig};
use crate::survcore;

pub const DEFAULT_SEED: u64 = 20_240_601;
/// Name of the response-indicator column written by `ampute`; never used
/// as a covariate by default.
pub const R_COLUMN: &str = "R";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        usage(e)
    }
}

impl From<dataio::DataError> for CliError {
    fn from(e: dataio::DataError) -> Self {
        usage(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hybridcox", version, about = "Cox regression with a partially observed categorical covariate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a Cox model on complete data.
    Fit(FitArgs),
    /// Set cells of a categorical covariate missing at random.
    Ampute(AmputeArgs),
    /// Write M completed datasets.
    Impute(ImputeArgs),
    /// Run one analysis method and write its coefficient table.
    Analyze(AnalyzeArgs),
    /// Survival curves, log-rank test, residuals and the PH test.
    Diagnose(DiagnoseArgs),
    /// Monte-Carlo evaluation of the methods.
    Simulate(SimulateArgs),
}

/// Input file and how to read it. Without a schema, kinds are inferred:
/// the `--time` and `--event` columns, numeric columns as continuous, the
/// rest categorical.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct InputArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    /// Time column when inferring the schema [default: time].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<String>,
    /// Event column when inferring the schema [default: status].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

impl InputArgs {
    fn load(&self) -> Result<Dataset> {
        let path = self.input.as_ref().ok_or_else(|| usage("missing --input"))?;
        let schema = match &self.schema {
            Some(s) => Schema::load(s)?,
            None => dataio::infer_schema_file(
                path,
                self.time.as_deref().unwrap_or("time"),
                self.event.as_deref().unwrap_or("status"),
            )?,
        };
        Ok(dataio::load_dataset(path, &schema)?)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FitArgs {
    /// TOML file with defaults for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub io: InputArgs,
    /// Covariates (comma separated) [default: all].
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    /// breslow | efron [default: efron].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ties: Option<Ties>,
    /// Report robust standard errors.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust: Option<bool>,
    /// Numeric column holding case weights.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    /// Output CSV [default: stdout].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AmputeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub io: InputArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Columns driving missingness (comma separated).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictors: Option<Vec<String>>,
    /// Weights of the standardized predictors [default: all 1].
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictor_weights: Option<Vec<f64>>,
    /// Expected missing fraction [default: 0.3].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ImputeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub io: InputArgs,
    /// Partially observed categorical column [default: inferred].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// parametric | trees [default: parametric].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub engine: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trees: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AnalyzeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub io: InputArgs,
    /// CC | IPW | MI_P | MI_NP | H1 | H2 | H3 | H4.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Compromise weight for H2–H4.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Number of imputations [default: 10].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Parametric,nonparametric imputation counts for H1/H4.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ties: Option<Ties>,
    /// Force robust (true) or model-based (false) per-fit variances.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust: Option<bool>,
    /// Propensity truncation bounds [default: 0.01].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    /// [default: 0.99]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trees: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// JSON-lines file with the per-imputation estimates.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DiagnoseArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub io: InputArgs,
    /// Categorical column for curves and the log-rank test.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ties: Option<Ties>,
    /// km | identity | rank [default: km].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform: Option<TimeTransform>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimulateArgs {
    /// Simulation config (TOML).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Overlays the flags that were given onto the config file's table.
fn resolve<T: Serialize + DeserializeOwned>(args: &T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        let table = toml::Table::try_from(args).map_err(usage)?;
        return table.try_into().map_err(usage);
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut base: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    for (k, v) in toml::Table::try_from(args).map_err(usage)? {
        base.insert(k, v);
    }
    base.try_into().map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn announce<T: Serialize>(command: &str, seed: Option<u64>, resolved: &T) {
    let mut err = io::stderr().lock();
    if let Some(seed) = seed {
        let _ = writeln!(err, "seed: {seed}");
    }
    let _ = writeln!(err, "[{command}]");
    let _ = write!(err, "{}", toml::to_string(resolved).unwrap_or_default());
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    config: &'a T,
    outputs: Vec<String>,
}

fn write_manifest<T: Serialize>(path: &Path, command: &str, seed: Option<u64>, config: &T, outputs: &[PathBuf]) -> Result<()> {
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(usage)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn manifest_beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Writes `bytes` to `output` (plus its manifest) or to stdout.
fn emit<T: Serialize>(output: Option<&Path>, bytes: &[u8], command: &str, seed: Option<u64>, config: &T) -> Result<()> {
    match output {
        Some(path) => {
            fs::write(path, bytes)?;
            write_manifest(&manifest_beside(path), command, seed, config, &[path.to_path_buf()])?;
            eprintln!("wrote {}", path.display());
        }
        None => io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(usage)?;
    for r in rows {
        w.write_record(r).map_err(usage)?;
    }
    w.into_inner().map_err(|e| usage(e.to_string()))
}

fn default_covariates(data: &Dataset, exclude: &[&str]) -> Vec<String> {
    data.covariate_names()
        .into_iter()
        .filter(|c| c != R_COLUMN && !exclude.contains(&c.as_str()))
        .collect()
}

fn normal_p(z: f64) -> f64 {
    2.0 * Normal::standard().sf(z.abs())
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let a = resolve(args, args.config.as_deref())?;
    announce("fit", None, &a);
    let data = a.io.load()?;
    let exclude: Vec<&str> = a.weights.iter().map(String::as_str).collect();
    let covariates = a.covariates.clone().unwrap_or_else(|| default_covariates(&data, &exclude));
    let design = dataio::encode(&data, &covariates)?;
    let weights: Option<Vec<f64>> = match &a.weights {
        Some(col) => Some(
            data.numeric(col)?
                .iter()
                .enumerate()
                .map(|(row, v)| {
                    v.ok_or_else(|| {
                        usage(format!("missing weight at row {row}"))
                    })
                })
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let times = data.times();
    let events = data.events();
    let robust = a.robust.unwrap_or(false);
    let cox = CoxData::new(&design.matrix, &times, &events).with_weights(weights.as_deref());
    let fit = fit_cox(
        &cox,
        CoxOptions {
            ties: a.ties.unwrap_or_default(),
            robust,
        },
    )
    .map_err(numerical)?;
    eprintln!(
        "log partial likelihood: {} (null {}), iterations {}",
        fmt6(fit.log_partial_likelihood),
        fmt6(fit.null_log_partial_likelihood),
        fit.iterations
    );
    let se = if robust {
        fit.robust_se().expect("requested")
    } else {
        fit.model_se()
    };
    let z975 = mi_engine::t_quantile_975(f64::INFINITY);
    let header: Vec<String> = ["coefficient", "estimate", "se", "hr", "ci_low", "ci_high", "z", "p_value"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = design
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let (b, s) = (fit.beta[j], se[j]);
            vec![
                name.clone(),
                fmt6(b),
                fmt6(s),
                fmt6(b.exp()),
                fmt6((b - z975 * s).exp()),
                fmt6((b + z975 * s).exp()),
                fmt6(b / s),
                fmt6(normal_p(b / s)),
            ]
        })
        .collect();
    emit(a.output.as_deref(), &csv_bytes(&header, &rows)?, "fit", None, &a)
}

fn run_ampute(args: &AmputeArgs) -> Result<()> {
    let a = resolve(args, args.config.as_deref())?;
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    announce("ampute", Some(seed), &a);
    let data = a.io.load()?;
    let target = a.target.clone().ok_or_else(|| usage("missing --target"))?;
    let predictors = a.predictors.clone().unwrap_or_else(|| {
        default_covariates(&data, &[&target])
    });
    let plan = AmputationPlan {
        target: target.clone(),
        predictors,
        rate: a.rate.unwrap_or(0.3),
        predictor_weights: a.predictor_weights.clone().unwrap_or_default(),
        seed,
    };
    let amputed = missingness::ampute_mar(&data, &plan).map_err(|e| match e {
        missingness::MissingnessError::Calibration => numerical(e),
        e => usage(e),
    })?;
    let r: Vec<Option<f64>> = amputed.observed.iter().map(|&o| Some(f64::from(u8::from(o)))).collect();
    let out = amputed
        .dataset
        .with_column(dataio::Column::numeric(R_COLUMN, ColumnKind::Continuous, r))?;
    let missing = amputed.observed.iter().filter(|o| !**o).count();
    eprintln!("set {missing} of {} `{target}` cells missing", out.n_rows());
    let mut bytes = Vec::new();
    out.write_csv(&mut bytes)?;
    emit(a.output.as_deref(), &bytes, "ampute", Some(seed), &a)
}

fn target_of(data: &Dataset, target: Option<&String>) -> Result<String> {
    match target {
        Some(t) => Ok(t.clone()),
        None => methods::AnalysisSetup::infer_target(data)
            .ok_or_else(|| usage("cannot infer the target: give --target")),
    }
}

fn parse_engine(s: &str) -> Result<Engine> {
    match s.to_ascii_lowercase().as_str() {
        "parametric" | "p" => Ok(Engine::Parametric),
        "trees" | "nonparametric" | "np" => Ok(Engine::Nonparametric),
        other => Err(usage(format!("unknown engine `{other}` (parametric|trees)"))),
    }
}

fn tree_params(trees: Option<usize>) -> TreeParams {
    let mut p = TreeParams::default();
    if let Some(t) = trees {
        p.n_trees = t;
    }
    p
}

fn run_impute(args: &ImputeArgs) -> Result<()> {
    let a = resolve(args, args.config.as_deref())?;
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    announce("impute", Some(seed), &a);
    let data = a.io.load()?;
    let target = target_of(&data, a.target.as_ref())?;
    let engine = parse_engine(a.engine.as_deref().unwrap_or("parametric"))?;
    let m = a.m.unwrap_or(methods::DEFAULT_M);
    let dir = a.output_dir.clone().ok_or_else(|| usage("missing --output-dir"))?;
    let recipe = PredictorRecipe {
        covariates: default_covariates(&data, &[&target])
            .into_iter()
            .filter(|c| data.column(c).map(|col| col.missing_count() == 0).unwrap_or(false))
            .collect(),
        event: true,
        cumulative_hazard: true,
    };
    let set = match engine {
        Engine::Parametric => mi_engine::impute_parametric(&data, &target, &recipe, m, seed),
        Engine::Nonparametric => mi_engine::impute_nonparametric(&data, &target, &recipe, m, seed, tree_params(a.trees)),
    }
    .map_err(|e| match e {
        mi_engine::ImputeError::Data(_)
        | mi_engine::ImputeError::TargetNotCategorical(_)
        | mi_engine::ImputeError::NoImputations => usage(e),
        e => numerical(e),
    })?;
    fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    for (k, d) in set.datasets.iter().enumerate() {
        let p = dir.join(format!("imputed_{:02}.csv", k + 1));
        d.save_csv(&p)?;
        outputs.push(p);
    }
    let provenance = dir.join("provenance.csv");
    let rows: Vec<Vec<String>> = set
        .provenance
        .iter()
        .zip(&outputs)
        .map(|(p, f)| {
            vec![
                f.file_name().unwrap().to_string_lossy().into_owned(),
                p.engine.label().to_string(),
                p.seed.to_string(),
            ]
        })
        .collect();
    fs::write(
        &provenance,
        csv_bytes(&["file".into(), "engine".into(), "seed".into()], &rows)?,
    )?;
    outputs.push(provenance);
    write_manifest(&dir.join("manifest.json"), "impute", Some(seed), &a, &outputs)?;
    eprintln!("wrote {m} imputed datasets to {}", dir.display());
    Ok(())
}

/// Wide layout: one column per coefficient; rows for the log-scale
/// estimate and SE, the hazard ratio and its CI bounds.
pub fn method_table(result: &MethodResult) -> Vec<Vec<String>> {
    let kappa = result.kappa.map(fmt6).unwrap_or_default();
    let hrs = hazard_ratios(result);
    let row = |stat: &str, vals: Vec<f64>| {
        let mut r = vec![result.kind.label().to_string(), kappa.clone(), stat.to_string()];
        r.extend(vals.into_iter().map(fmt6));
        r
    };
    vec![
        row("estimate", result.coefficients.iter().map(|c| c.estimate).collect()),
        row("se", result.coefficients.iter().map(|c| c.se).collect()),
        row("HR", hrs.iter().map(|h| h.hazard_ratio).collect()),
        row("CI lower", hrs.iter().map(|h| h.ci_low).collect()),
        row("CI upper", hrs.iter().map(|h| h.ci_high).collect()),
    ]
}

fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    let a = resolve(args, args.config.as_deref())?;
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    announce("analyze", Some(seed), &a);
    let kind: MethodKind = a
        .method
        .as_deref()
        .ok_or_else(|| usage("missing --method"))?
        .parse()
        .map_err(usage)?;
    let mut spec = MethodSpec::new(kind);
    spec.kappa = a.kappa;
    spec.m = a.m.unwrap_or(methods::DEFAULT_M);
    spec.ties = a.ties.unwrap_or_default();
    spec.robust = a.robust;
    spec.trees = tree_params(a.trees);
    spec.split = match a.split.as_deref() {
        None => None,
        Some([p, np]) => Some((*p, *np)),
        Some(_) => return Err(usage("--split takes two counts: parametric,nonparametric")),
    };
    let d = TruncationBounds::default();
    spec.bounds = TruncationBounds::new(a.lower.unwrap_or(d.lower), a.upper.unwrap_or(d.upper)).map_err(usage)?;
    spec.validate().map_err(usage)?;

    let data = a.io.load()?;
    let target = target_of(&data, a.target.as_ref())?;
    let covariates = a.covariates.clone().unwrap_or_else(|| default_covariates(&data, &[]));
    let fully_observed: Vec<String> = covariates
        .iter()
        .filter(|c| **c != target && data.column(c).map(|col| col.missing_count() == 0).unwrap_or(false))
        .cloned()
        .collect();
    let recipe = PredictorRecipe {
        covariates: fully_observed,
        event: true,
        cumulative_hazard: true,
    };
    spec.imputation = Some(recipe.clone());
    spec.propensity = Some(recipe);
    let setup = AnalysisSetup { target, covariates };
    let result = methods::run_method(&data, &setup, &spec, seed).map_err(|e| {
        if e.is_usage() {
            usage(e)
        } else {
            numerical(e)
        }
    })?;
    if result.truncated > 0 {
        eprintln!("{} propensities truncated to [{}, {}]", result.truncated, spec.bounds.lower, spec.bounds.upper);
    }
    let mut header: Vec<String> = vec!["method".into(), "kappa".into(), "statistic".into()];
    header.extend(result.coefficients.iter().map(|c| c.name.clone()));
    let bytes = csv_bytes(&header, &method_table(&result))?;
    if let Some(trace) = &a.trace {
        let mut out = Vec::new();
        for t in &result.trace {
            serde_json::to_writer(&mut out, t).map_err(usage)?;
            out.push(b'\n');
        }
        fs::write(trace, out)?;
    }
    emit(a.output.as_deref(), &bytes, "analyze", Some(seed), &a)
}

fn run_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let a = resolve(args, args.config.as_deref())?;
    announce("diagnose", None, &a);
    let data = a.io.load()?;
    let dir = a.output_dir.clone().ok_or_else(|| usage("missing --output-dir"))?;
    let covariates = a.covariates.clone().unwrap_or_else(|| default_covariates(&data, &[]));
    let group = match &a.group {
        Some(g) => Some(g.clone()),
        None => covariates
            .iter()
            .find(|c| data.column(c).map(|col| col.kind == ColumnKind::Categorical).unwrap_or(false))
            .cloned(),
    };
    // complete cases over every used column
    let mut used = covariates.clone();
    used.extend(group.iter().cloned());
    let rows: Vec<usize> = (0..data.n_rows())
        .filter(|&i| used.iter().all(|c| data.column(c).map(|col| !col.is_missing(i)).unwrap_or(true)))
        .collect();
    if rows.len() < data.n_rows() {
        eprintln!("using {} complete rows of {}", rows.len(), data.n_rows());
    }
    let data = data.select_rows(&rows);
    let times = data.times();
    let events = data.events();
    fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    let mut put = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let p = dir.join(name);
        let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
        fs::write(&p, csv_bytes(&header, &rows)?)?;
        outputs.push(p);
        Ok(())
    };

    // curves per group level (or pooled)
    let groups: Vec<(String, Vec<usize>)> = match &group {
        Some(g) => {
            let (codes, levels, _) = data.categorical(g)?;
            levels
                .iter()
                .enumerate()
                .map(|(k, l)| (l.clone(), (0..codes.len()).filter(|&i| codes[i] == Some(k)).collect()))
                .filter(|(_, idx): &(String, Vec<usize>)| !idx.is_empty())
                .collect()
        }
        None => vec![("all".into(), (0..data.n_rows()).collect())],
    };
    let mut km_rows = Vec::new();
    let mut na_rows = Vec::new();
    let mut ll_rows = Vec::new();
    for (label, idx) in &groups {
        let t: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
        let e: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
        let km = survcore::kaplan_meier(&t, &e).map_err(numerical)?;
        let na = survcore::nelson_aalen(&t, &e).map_err(numerical)?;
        for (k, v) in km.knots.iter().zip(&km.values) {
            km_rows.push(vec![label.clone(), fmt6(*k), fmt6(*v)]);
        }
        for (k, v) in na.knots.iter().zip(&na.values) {
            na_rows.push(vec![label.clone(), fmt6(*k), fmt6(*v)]);
        }
        for (lt, ls) in survcore::loglog_curve(&km) {
            ll_rows.push(vec![label.clone(), fmt6(lt), fmt6(ls)]);
        }
    }
    put("kaplan_meier.csv", &["group", "time", "survival"], km_rows)?;
    put("nelson_aalen.csv", &["group", "time", "cumulative_hazard"], na_rows)?;
    put("loglog.csv", &["group", "log_time", "log_minus_log_survival"], ll_rows)?;
    if let Some(g) = &group {
        let (codes, _, _) = data.categorical(g)?;
        let labels: Vec<usize> = codes.iter().map(|c| c.expect("complete rows")).collect();
        match survcore::logrank_test(&times, &events, &labels) {
            Ok(lr) => put(
                "logrank.csv",
                &["group", "chi_square", "df", "p_value"],
                vec![vec![g.clone(), fmt6(lr.chi_square), lr.df.to_string(), fmt6(lr.p_value)]],
            )?,
            Err(e) => eprintln!("log-rank test skipped: {e}"),
        }
    }

    let design = dataio::encode(&data, &covariates)?;
    let ties = a.ties.unwrap_or_default();
    let cox = CoxData::new(&design.matrix, &times, &events);
    let fit = fit_cox(&cox, CoxOptions { ties, robust: false }).map_err(numerical)?;
    let res = coxfit::residuals(&fit, &cox).map_err(numerical)?;
    put(
        "martingale.csv",
        &["row", "time", "event", "martingale"],
        res.martingale
            .iter()
            .enumerate()
            .map(|(i, m)| vec![i.to_string(), fmt6(times[i]), u8::from(events[i]).to_string(), fmt6(*m)])
            .collect(),
    )?;
    let mut sh: Vec<&str> = vec!["time", "row"];
    sh.extend(design.names.iter().map(String::as_str));
    let schoenfeld = (0..res.schoenfeld.nrows())
        .rev()
        .map(|r| {
            let mut row = vec![fmt6(res.event_times[r]), res.event_subjects[r].to_string()];
            row.extend(res.schoenfeld.row(r).iter().map(|v| fmt6(*v)));
            row
        })
        .collect();
    put("schoenfeld.csv", &sh, schoenfeld)?;
    let ph = ph_test(&fit, &cox, &design.names, a.transform.unwrap_or_default()).map_err(numerical)?;
    put(
        "ph_test.csv",
        &["covariate", "chi_square", "df", "p_value"],
        ph.covariates
            .iter()
            .chain(std::iter::once(&ph.global))
            .map(|r| vec![r.name.clone(), fmt6(r.chi_square), r.df.to_string(), fmt6(r.p_value)])
            .collect(),
    )?;
    write_manifest(&dir.join("manifest.json"), "diagnose", None, &a, &outputs)?;
    eprintln!("wrote diagnostics to {}", dir.display());
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let path = args.config.as_deref().ok_or_else(|| usage("missing --config"))?;
    let mut config = SimConfig::load(path).map_err(usage)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(m) = args.m {
        config.m = m;
    }
    if let Some(d) = &args.output_dir {
        config.output_dir = Some(d.clone());
    }
    config.validate().map_err(usage)?;
    let dir = config.output_dir.clone().ok_or_else(|| usage("missing --output-dir"))?;
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    eprintln!("seed: {}", config.seed);
    eprintln!("workers: {workers}");
    eprint!("{}", config.to_toml_string());
    let output = simharness::run_simulation(&config, workers).map_err(|e| match e {
        simharness::SimError::Config(_) | simharness::SimError::Toml(_) | simharness::SimError::Data(_) => usage(e),
        simharness::SimError::Io(_) | simharness::SimError::SampleTooLarge { .. } => usage(e),
        e => numerical(e),
    })?;
    let failed: usize = output.failures().iter().map(|(_, f)| f).sum();
    if failed > 0 {
        for ((method, kappa), f) in output.failures().iter().filter(|(_, f)| *f > 0) {
            eprintln!(
                "excluded {f} failed replicates for {method}{}",
                kappa.map(|k| format!(" κ={k}")).unwrap_or_default()
            );
        }
    }
    let outputs = simharness::write_outputs(&output, &dir).map_err(usage)?;
    write_manifest(&dir.join("manifest.json"), "simulate", Some(config.seed), &config, &outputs)?;
    eprintln!("wrote {} files to {}", outputs.len() + 1, dir.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Ampute(a) => run_ampute(a),
        Command::Impute(a) => run_impute(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Diagnose(a) => run_diagnose(a),
        Command::Simulate(a) => run_simulate(a),
    }
}

/// Parses `argv` and runs; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
