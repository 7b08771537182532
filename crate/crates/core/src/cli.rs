//! Command-line front end.
//!
//! Every failure is reported as a single-line JSON error record on stderr
//! together with a command-specific exit code (see [`CliError::exit_code`]).

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::MidQrError;
use crate::kernel_cdf::{CovariateKind, CovariateSpec};
use crate::mid_distributions::{mid_cdf, mid_quantile, tabulate};
use crate::model::{
    fit_model, predict_with, BandwidthChoice, DesignBuilder, FitConfig, PredictionScale,
    VarianceChoice,
};
use crate::sim::{run_study, MidQrEstimator, ScenarioId, ScenarioSpec, SimFitConfig};
use crate::transform::{Transformation, DEFAULT_LOG_OFFSET};

#[derive(Debug, Parser)]
#[command(
    name = "midqr",
    version,
    about = "Conditional mid-quantile regression for discrete responses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model at one or more levels.
    Fit(FitArgs),
    /// Predict mid-quantiles for new rows from a saved fit record.
    Predict(PredictArgs),
    /// Sample mid-CDF and mid-quantiles of one column.
    Marginal(MarginalArgs),
    /// Run a Monte Carlo study on a built-in scenario.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VarianceFlag {
    Analytic,
    Bootstrap,
    None,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Delimited text file with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Field delimiter (a single character; "tab" or "\t" for tabs).
    #[arg(long, default_value = ",")]
    pub delimiter: String,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub response: String,
    /// Covariates as `name:kind[,...]`, kind one of continuous, unordered, ordered.
    #[arg(long)]
    pub covariates: String,
    /// Levels in (0, 1), comma separated.
    #[arg(long, default_value = "0.5")]
    pub p: String,
    #[arg(long, default_value = "identity")]
    pub link: String,
    /// Offset `c` of the log link `ln(y + c)`.
    #[arg(long, default_value_t = DEFAULT_LOG_OFFSET)]
    pub log_offset: f64,
    /// `auto-rot`, `auto-cv` or `explicit:v1,...`.
    #[arg(long, default_value = "auto-rot")]
    pub bandwidth: String,
    #[arg(long, value_enum, default_value = "analytic")]
    pub variance: VarianceFlag,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 200)]
    pub boot: usize,
    /// Reselect bandwidths in every bootstrap replicate.
    #[arg(long)]
    pub boot_reselect: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Confidence level of the reported intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Minimize numerically at levels outside the admissible range.
    #[arg(long)]
    pub allow_numerical: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Fit record written by `fit --format record`.
    #[arg(long)]
    pub model: PathBuf,
    /// Levels to predict at; all fitted levels when omitted.
    #[arg(long)]
    pub p: Option<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct MarginalArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub response: String,
    /// Levels at which to report sample mid-quantiles.
    #[arg(long)]
    pub p: Option<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Number of replications.
    #[arg(long = "R", default_value_t = 200)]
    pub replications: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Levels; the scenario's defaults when omitted.
    #[arg(long)]
    pub p: Option<String>,
    /// Levels at which slope coverage is computed.
    #[arg(long, default_value = "0.3,0.5,0.7")]
    pub coverage: String,
    #[arg(long, default_value = "auto-rot")]
    pub bandwidth: String,
    /// Kernel for the discrete covariate of the `a` scenarios.
    #[arg(long, default_value = "unordered")]
    pub discrete_kind: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("column '{0}' not found in the input header")]
    MissingColumn(String),
    #[error("column '{column}', data row {row}: '{value}' is not a number")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] MidQrError),
}

impl CliError {
    /// Distinct process exit code per failure class. Code 2 is reserved for
    /// command-line usage errors reported by the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } => 3,
            Self::MissingColumn(_) => 4,
            Self::NonNumeric { .. } => 5,
            Self::Model(MidQrError::ProbabilityDomain(_)) => 6,
            Self::Model(MidQrError::NotAdmissible { .. }) => 7,
            Self::Argument(_)
            | Self::Model(MidQrError::InvalidInput(_))
            | Self::Model(MidQrError::BandwidthRange { .. })
            | Self::Model(MidQrError::DimensionMismatch(_))
            | Self::Model(MidQrError::UnknownLevel(_)) => 8,
            Self::Model(MidQrError::TransformDomain { .. }) => 9,
            Self::Model(_) => 10,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::MissingColumn(_) => "missing_column",
            Self::NonNumeric { .. } => "non_numeric",
            Self::Model(MidQrError::ProbabilityDomain(_)) => "probability_domain",
            Self::Model(MidQrError::NotAdmissible { .. }) => "not_admissible",
            Self::Model(MidQrError::TransformDomain { .. }) => "transform_domain",
            Self::Argument(_)
            | Self::Model(MidQrError::InvalidInput(_))
            | Self::Model(MidQrError::BandwidthRange { .. })
            | Self::Model(MidQrError::DimensionMismatch(_))
            | Self::Model(MidQrError::UnknownLevel(_)) => "invalid_argument",
            Self::Model(_) => "estimation",
        }
    }

    /// Machine-readable error document.
    pub fn record(&self) -> String {
        serde_json::json!({
            "error": {
                "code": self.code(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Header plus raw string fields of a delimited file.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn parse_delimiter(s: &str) -> CliResult<u8> {
    match s {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        _ if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        _ => Err(CliError::Argument(format!(
            "delimiter must be one ASCII character, got '{s}'"
        ))),
    }
}

pub fn read_table(args: &InputArgs) -> CliResult<Table> {
    let delim = parse_delimiter(&args.delimiter)?;
    let file = File::open(&args.input).map_err(|e| io_err(&args.input, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| io_err(&args.input, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(|e| io_err(&args.input, e))?;
    Ok(Table { header, rows })
}

impl Table {
    pub fn numeric_column(&self, name: &str) -> CliResult<Vec<f64>> {
        let c = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::MissingColumn(name.to_string()))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let raw = r.get(c).map(String::as_str).unwrap_or("");
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::NonNumeric {
                        column: name.to_string(),
                        row: i + 1,
                        value: raw.to_string(),
                    })
            })
            .collect()
    }

    pub fn covariate_matrix(&self, names: &[String]) -> CliResult<DMatrix<f64>> {
        let cols = names
            .iter()
            .map(|n| self.numeric_column(n))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(DMatrix::from_fn(self.rows.len(), cols.len(), |i, j| {
            cols[j][i]
        }))
    }
}

/// Parses `name:kind[,...]`.
pub fn parse_covariates(s: &str) -> CliResult<Vec<(String, CovariateKind)>> {
    let out = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let (name, kind) = t.trim().rsplit_once(':').ok_or_else(|| {
                CliError::Argument(format!("covariate '{t}' must be written name:kind"))
            })?;
            Ok((name.to_string(), kind.parse::<CovariateKind>()?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if out.is_empty() {
        return Err(CliError::Argument(
            "at least one covariate is required".into(),
        ));
    }
    Ok(out)
}

/// Parses a comma-separated list of levels, each in (0, 1).
pub fn parse_levels(s: &str) -> CliResult<Vec<f64>> {
    let levels = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Argument(format!("level '{t}' is not a number")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    for &p in &levels {
        if !(p > 0.0 && p < 1.0) {
            return Err(MidQrError::ProbabilityDomain(p).into());
        }
    }
    Ok(levels)
}

pub fn parse_bandwidth(s: &str) -> CliResult<BandwidthChoice> {
    match s {
        "auto-rot" => Ok(BandwidthChoice::RuleOfThumb),
        "auto-cv" => Ok(BandwidthChoice::CrossValidation),
        _ => {
            let values = s.strip_prefix("explicit:").ok_or_else(|| {
                CliError::Argument(format!(
                    "bandwidth must be auto-rot, auto-cv or explicit:v1,..., got '{s}'"
                ))
            })?;
            let v = values
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Argument(format!("bandwidth '{t}' is not a number")))
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok(BandwidthChoice::Explicit(v))
        }
    }
}

fn parse_link(name: &str, log_offset: f64) -> CliResult<Transformation> {
    match name.parse::<Transformation>()? {
        Transformation::Log { .. } => Ok(Transformation::log_shifted(log_offset)?),
        t => Ok(t),
    }
}

/// Declared covariate in a fit record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateRecord {
    pub name: String,
    pub kind: String,
}

/// Single-object result of `fit --format record`; also the input of
/// `predict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub levels: Vec<f64>,
    pub terms: Vec<String>,
    /// One coefficient vector per level.
    pub coefficients: Vec<Vec<f64>>,
    pub standard_errors: Vec<Option<Vec<f64>>>,
    pub ci_lower: Vec<Option<Vec<f64>>>,
    pub ci_upper: Vec<Option<Vec<f64>>>,
    pub admissible_range: [f64; 2],
    /// Per-level fit method, `closed-form` or `numerical`.
    pub method: Vec<String>,
    pub seed: u64,
    pub link: Transformation,
    pub bandwidths: Vec<f64>,
    pub covariates: Vec<CovariateRecord>,
    pub design: DesignBuilder,
    pub n: usize,
}

fn kind_name(k: CovariateKind) -> &'static str {
    match k {
        CovariateKind::Continuous => "continuous",
        CovariateKind::Unordered => "unordered",
        CovariateKind::Ordered => "ordered",
    }
}

pub fn fit_record(args: &FitArgs) -> CliResult<FitRecord> {
    let levels = parse_levels(&args.p)?;
    let covs = parse_covariates(&args.covariates)?;
    let link = parse_link(&args.link, args.log_offset)?;
    let bandwidth = parse_bandwidth(&args.bandwidth)?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::Argument(format!(
            "confidence level {} is outside (0, 1)",
            args.level
        )));
    }
    let table = read_table(&args.input)?;
    let y = table.numeric_column(&args.response)?;
    let names: Vec<String> = covs.iter().map(|(n, _)| n.clone()).collect();
    let kinds: Vec<CovariateKind> = covs.iter().map(|(_, k)| *k).collect();
    let covariates = table.covariate_matrix(&names)?;
    let spec = CovariateSpec::new(kinds.clone(), &covariates)?;
    let builder = DesignBuilder::from_kinds(&kinds, &covariates);
    let design = builder.build(&covariates)?;
    let variance = match args.variance {
        VarianceFlag::Analytic => VarianceChoice::Analytic,
        VarianceFlag::None => VarianceChoice::None,
        VarianceFlag::Bootstrap => VarianceChoice::Bootstrap {
            replicates: args.boot,
            seed: args.seed,
        },
    };
    let config = FitConfig {
        bandwidth,
        transformation: link,
        variance,
        allow_numerical: args.allow_numerical,
        confidence_level: args.level,
        bootstrap_reselect: args.boot_reselect,
    };
    let model = fit_model(&y, &covariates, &spec, &design, &levels, &config)?;
    let split = |l: &crate::model::LevelFit, upper: bool| {
        l.intervals.as_ref().map(|iv| {
            iv.iter()
                .map(|(a, b)| if upper { *b } else { *a })
                .collect()
        })
    };
    Ok(FitRecord {
        levels: model.levels.iter().map(|l| l.p).collect(),
        terms: builder.column_names(&names),
        coefficients: model
            .levels
            .iter()
            .map(|l| l.beta.iter().copied().collect())
            .collect(),
        standard_errors: model.levels.iter().map(|l| l.standard_errors()).collect(),
        ci_lower: model.levels.iter().map(|l| split(l, false)).collect(),
        ci_upper: model.levels.iter().map(|l| split(l, true)).collect(),
        admissible_range: [model.admissible_range.lo, model.admissible_range.hi],
        method: model
            .levels
            .iter()
            .map(|l| l.method.as_str().to_string())
            .collect(),
        seed: args.seed,
        link,
        bandwidths: model.bandwidths.lambda.clone(),
        covariates: covs
            .iter()
            .map(|(n, k)| CovariateRecord {
                name: n.clone(),
                kind: kind_name(*k).into(),
            })
            .collect(),
        design: builder,
        n: y.len(),
    })
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Argument(e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Argument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is valid UTF-8"))
}

fn opt(v: &Option<Vec<f64>>, j: usize) -> String {
    v.as_ref().map(|v| v[j].to_string()).unwrap_or_default()
}

fn render_fit(rec: &FitRecord, format: Format) -> CliResult<String> {
    match format {
        Format::Record => Ok(serde_json::to_string_pretty(rec).expect("record serializes") + "\n"),
        Format::Csv => {
            let mut rows = Vec::new();
            for (l, p) in rec.levels.iter().enumerate() {
                for (j, term) in rec.terms.iter().enumerate() {
                    rows.push(vec![
                        p.to_string(),
                        term.clone(),
                        rec.coefficients[l][j].to_string(),
                        opt(&rec.standard_errors[l], j),
                        opt(&rec.ci_lower[l], j),
                        opt(&rec.ci_upper[l], j),
                        rec.method[l].clone(),
                        rec.admissible_range[0].to_string(),
                        rec.admissible_range[1].to_string(),
                    ]);
                }
            }
            csv_string(
                &[
                    "p",
                    "term",
                    "estimate",
                    "std_error",
                    "ci_lower",
                    "ci_upper",
                    "method",
                    "admissible_lo",
                    "admissible_hi",
                ],
                &rows,
            )
        }
    }
}

/// Response-scale predictions per requested level, one vector per level.
pub fn predictions(args: &PredictArgs) -> CliResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut text = String::new();
    File::open(&args.model)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_err(&args.model, e))?;
    let rec: FitRecord = serde_json::from_str(&text).map_err(|e| io_err(&args.model, e))?;
    let levels = match &args.p {
        Some(s) => parse_levels(s)?,
        None => rec.levels.clone(),
    };
    let table = read_table(&args.input)?;
    let names: Vec<String> = rec.covariates.iter().map(|c| c.name.clone()).collect();
    let x = rec.design.build(&table.covariate_matrix(&names)?)?;
    let preds = levels
        .iter()
        .map(|&p| {
            let l = rec
                .levels
                .iter()
                .position(|q| (q - p).abs() <= 1e-12)
                .ok_or(MidQrError::UnknownLevel(p))?;
            let beta = DVector::from_vec(rec.coefficients[l].clone());
            Ok(predict_with(
                &beta,
                &x,
                &rec.link,
                PredictionScale::Response,
            )?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((levels, preds))
}

fn render_predictions(levels: &[f64], preds: &[Vec<f64>], format: Format) -> CliResult<String> {
    match format {
        Format::Record => Ok(serde_json::to_string_pretty(&serde_json::json!({
            "levels": levels,
            "predictions": preds,
        }))
        .expect("record serializes")
            + "\n"),
        Format::Csv => {
            let rows: Vec<Vec<String>> = levels
                .iter()
                .zip(preds)
                .flat_map(|(p, v)| {
                    v.iter()
                        .enumerate()
                        .map(move |(i, y)| vec![(i + 1).to_string(), p.to_string(), y.to_string()])
                })
                .collect();
            csv_string(&["row", "p", "mid_quantile"], &rows)
        }
    }
}

fn render_marginal(args: &MarginalArgs) -> CliResult<String> {
    let table = read_table(&args.input)?;
    let y = table.numeric_column(&args.response)?;
    let sample = tabulate(&y)?;
    let m = mid_cdf(&sample);
    let levels = args
        .p
        .as_deref()
        .map(parse_levels)
        .transpose()?
        .unwrap_or_default();
    let quantiles = levels
        .iter()
        .map(|&p| mid_quantile(&m, p))
        .collect::<crate::Result<Vec<_>>>()?;
    let n = sample.n() as f64;
    match args.output.format {
        Format::Record => Ok(serde_json::to_string_pretty(&serde_json::json!({
            "n": sample.n(),
            "values": m.values(),
            "counts": sample.counts(),
            "cdf": m.cdf(),
            "mid_cdf": m.midprobs(),
            "levels": levels,
            "mid_quantiles": quantiles,
        }))
        .expect("record serializes")
            + "\n"),
        Format::Csv if levels.is_empty() => {
            let rows: Vec<Vec<String>> = (0..sample.k())
                .map(|j| {
                    vec![
                        m.values()[j].to_string(),
                        sample.counts()[j].to_string(),
                        (sample.counts()[j] as f64 / n).to_string(),
                        m.cdf()[j].to_string(),
                        m.midprobs()[j].to_string(),
                    ]
                })
                .collect();
            csv_string(&["value", "count", "pmf", "cdf", "mid_cdf"], &rows)
        }
        Format::Csv => {
            let rows: Vec<Vec<String>> = levels
                .iter()
                .zip(&quantiles)
                .map(|(p, q)| vec![p.to_string(), q.to_string()])
                .collect();
            csv_string(&["p", "mid_quantile"], &rows)
        }
    }
}

fn render_simulation(args: &SimulateArgs) -> CliResult<String> {
    let id: ScenarioId = args.scenario.parse()?;
    let levels = match &args.p {
        Some(s) => parse_levels(s)?,
        None => id.default_levels(),
    };
    let coverage = if args.coverage.trim().is_empty() || args.coverage == "none" {
        Vec::new()
    } else {
        parse_levels(&args.coverage)?
    };
    let estimator = MidQrEstimator {
        config: SimFitConfig {
            discrete_kind: args.discrete_kind.parse()?,
            bandwidth: parse_bandwidth(&args.bandwidth)?,
            allow_numerical: true,
        },
    };
    let spec = ScenarioSpec::new(id, args.n, args.seed)?;
    let table = run_study(&spec, args.replications, &levels, &coverage, &estimator)?;
    match args.output.format {
        Format::Csv => Ok(table.to_csv()?),
        Format::Record => {
            Ok(serde_json::to_string_pretty(&table).expect("record serializes") + "\n")
        }
    }
}

fn write_output(out: &OutputArgs, text: &str) -> CliResult<()> {
    match &out.out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_err(path, e)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

/// Executes one parsed command.
pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Fit(a) => write_output(&a.output, &render_fit(&fit_record(a)?, a.output.format)?),
        Command::Predict(a) => {
            let (levels, preds) = predictions(a)?;
            write_output(
                &a.output,
                &render_predictions(&levels, &preds, a.output.format)?,
            )
        }
        Command::Marginal(a) => write_output(&a.output, &render_marginal(a)?),
        Command::Simulate(a) => write_output(&a.output, &render_simulation(a)?),
    }
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}
