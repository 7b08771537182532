//! Monte Carlo harness: data-generating processes with discrete or
//! continuous covariates, exact true mid-quantiles, and bias, RMSE and
//! coverage summaries over replications.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MidQrError, Result};
use crate::fit::LeastSquares;
use crate::kernel_cdf::{CovariateKind, CovariateSpec};
use crate::mid_distributions::{population_mid_quantile, Pmf};
use crate::model::{
    analytic_variance, estimate_level, first_step, working_residuals, BandwidthChoice,
};
use crate::transform::Transformation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    #[serde(rename = "1a")]
    S1a,
    #[serde(rename = "1b")]
    S1b,
    #[serde(rename = "2a")]
    S2a,
    #[serde(rename = "2b")]
    S2b,
    #[serde(rename = "3a")]
    S3a,
    #[serde(rename = "3b")]
    S3b,
    #[serde(rename = "4a")]
    S4a,
    #[serde(rename = "4b")]
    S4b,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 8] = [
        Self::S1a,
        Self::S1b,
        Self::S2a,
        Self::S2b,
        Self::S3a,
        Self::S3b,
        Self::S4a,
        Self::S4b,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::S1a => "1a",
            Self::S1b => "1b",
            Self::S2a => "2a",
            Self::S2b => "2b",
            Self::S3a => "3a",
            Self::S3b => "3b",
            Self::S4a => "4a",
            Self::S4b => "4b",
        }
    }

    /// One discrete covariate (`true`) or two continuous ones.
    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::S1a | Self::S2a | Self::S3a | Self::S4a)
    }

    pub fn n_covariates(&self) -> usize {
        if self.is_discrete() {
            1
        } else {
            2
        }
    }

    /// Link of the fitted model: linear for models 1-2, log-linear for 3,
    /// logistic for 4.
    pub fn transformation(&self) -> Transformation {
        match self {
            Self::S1a | Self::S1b | Self::S2a | Self::S2b => Transformation::Identity,
            Self::S3a | Self::S3b => Transformation::log(),
            Self::S4a | Self::S4b => Transformation::Logit,
        }
    }

    /// Deciles 0.2..0.8, or the median alone for the binary model.
    pub fn default_levels(&self) -> Vec<f64> {
        match self {
            Self::S4a | Self::S4b => vec![0.5],
            _ => (2..=8).map(|d| d as f64 / 10.0).collect(),
        }
    }

    /// Support of the discrete covariate.
    pub fn covariate_support(&self) -> Option<Vec<f64>> {
        match self {
            Self::S1a | Self::S2a | Self::S4a => Some((0..=5).map(f64::from).collect()),
            Self::S3a => Some(vec![1.0, 2.0, 3.0]),
            _ => None,
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = MidQrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| MidQrError::InvalidInput(format!("unknown scenario '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub n: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(id: ScenarioId, n: usize, seed: u64) -> Result<Self> {
        if n < 20 {
            return Err(MidQrError::InvalidInput("scenarios need n >= 20".into()));
        }
        Ok(Self { id, n, seed })
    }
}

/// One simulated sample; `covariates` has one column per covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub y: Vec<f64>,
    pub covariates: DMatrix<f64>,
}

impl SimData {
    /// `[1, w]` or `[1, w1, w2]`.
    pub fn design(&self) -> DMatrix<f64> {
        let (n, c) = self.covariates.shape();
        DMatrix::from_fn(n, c + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                self.covariates[(i, j - 1)]
            }
        })
    }
}

fn scaled_chi2_3<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    (0..3)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * z
        })
        .sum::<f64>()
        / 3.0
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Draws covariates for one observation.
fn draw_covariates<R: Rng + ?Sized>(id: ScenarioId, rng: &mut R) -> Vec<f64> {
    match id {
        ScenarioId::S1a | ScenarioId::S2a | ScenarioId::S4a => vec![rng.random_range(0..=5) as f64],
        ScenarioId::S3a => vec![rng.random_range(1..=3) as f64],
        ScenarioId::S1b | ScenarioId::S2b | ScenarioId::S4b => {
            vec![rng.random_range(0.0..5.0), scaled_chi2_3(rng)]
        }
        ScenarioId::S3b => vec![rng.random_range(1.0..3.0), scaled_chi2_3(rng)],
    }
}

fn w_parts(w: &[f64]) -> (f64, f64) {
    (w[0], w.get(1).copied().unwrap_or(0.0))
}

/// Mean of the Poisson or Bernoulli response, or the location and scale of
/// the discrete-uniform models.
fn poisson_mean(w: &[f64]) -> f64 {
    let (w1, w2) = w_parts(w);
    (0.5 + 2.0 * w1 + 0.3 * w2).exp()
}

fn bernoulli_mean(w: &[f64]) -> f64 {
    let (w1, w2) = w_parts(w);
    logistic(3.0 + w1 + w2)
}

fn location(w: &[f64]) -> f64 {
    let (w1, w2) = w_parts(w);
    (1.0 + 2.0 * w1 + w2).floor()
}

fn draw_response<R: Rng + ?Sized>(id: ScenarioId, w: &[f64], rng: &mut R) -> f64 {
    match id {
        ScenarioId::S1a | ScenarioId::S1b => location(w) + rng.random_range(1..=10) as f64,
        ScenarioId::S2a | ScenarioId::S2b => {
            location(w) + (w[0] + 1.0).floor() * rng.random_range(1..=10) as f64
        }
        ScenarioId::S3a | ScenarioId::S3b => Poisson::new(poisson_mean(w))
            .expect("positive mean")
            .sample(rng),
        ScenarioId::S4a | ScenarioId::S4b => {
            if rng.random::<f64>() < bernoulli_mean(w) {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn generate_with_rng<R: Rng + ?Sized>(id: ScenarioId, n: usize, rng: &mut R) -> SimData {
    let c = id.n_covariates();
    let mut y = Vec::with_capacity(n);
    let mut cov = DMatrix::zeros(n, c);
    for i in 0..n {
        let w = draw_covariates(id, rng);
        y.push(draw_response(id, &w, rng));
        for (j, v) in w.iter().enumerate() {
            cov[(i, j)] = *v;
        }
    }
    SimData { y, covariates: cov }
}

pub fn generate(spec: &ScenarioSpec) -> SimData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    generate_with_rng(spec.id, spec.n, &mut rng)
}

/// Exact distribution of the response given covariates `w`.
pub fn conditional_pmf(id: ScenarioId, w: &[f64]) -> Result<Pmf> {
    if w.len() != id.n_covariates() {
        return Err(MidQrError::DimensionMismatch(format!(
            "scenario {id} takes {} covariates",
            id.n_covariates()
        )));
    }
    match id {
        ScenarioId::S1a | ScenarioId::S1b => {
            let c = location(w);
            Pmf::uniform_over((1..=10).map(|e| c + e as f64).collect())
        }
        ScenarioId::S2a | ScenarioId::S2b => {
            let c = location(w);
            let m = (w[0] + 1.0).floor();
            Pmf::uniform_over((1..=10).map(|e| c + m * e as f64).collect())
        }
        ScenarioId::S3a | ScenarioId::S3b => Pmf::poisson(poisson_mean(w)),
        ScenarioId::S4a | ScenarioId::S4b => Pmf::bernoulli(bernoulli_mean(w)),
    }
}

/// True conditional mid-quantile of the response at covariates `w`.
pub fn true_mid_quantile(id: ScenarioId, w: &[f64], p: f64) -> Result<f64> {
    population_mid_quantile(&conditional_pmf(id, w)?, p)
}

/// True mid-quantiles of every row of `covariates` at each level
/// (`out[level][row]`), computing each distinct row's distribution once.
pub fn true_mid_quantiles(
    id: ScenarioId,
    covariates: &DMatrix<f64>,
    levels: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let n = covariates.nrows();
    let mut out = vec![vec![0.0; n]; levels.len()];
    let mut cache: std::collections::HashMap<Vec<u64>, Vec<f64>> = Default::default();
    for i in 0..n {
        let w: Vec<f64> = covariates.row(i).iter().copied().collect();
        let key: Vec<u64> = w.iter().map(|v| v.to_bits()).collect();
        let values = match cache.get(&key) {
            Some(v) => v.clone(),
            None => {
                let pmf = conditional_pmf(id, &w)?;
                let v = levels
                    .iter()
                    .map(|&p| population_mid_quantile(&pmf, p))
                    .collect::<Result<Vec<_>>>()?;
                if id.is_discrete() {
                    cache.insert(key, v.clone());
                }
                v
            }
        };
        for (l, v) in values.into_iter().enumerate() {
            out[l][i] = v;
        }
    }
    Ok(out)
}

/// Average true mid-quantile over the rows of `covariates`.
pub fn average_true_mid_quantile(id: ScenarioId, covariates: &DMatrix<f64>, p: f64) -> Result<f64> {
    let h = true_mid_quantiles(id, covariates, &[p])?;
    Ok(h[0].iter().sum::<f64>() / covariates.nrows() as f64)
}

/// Estimates at one level for one simulated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelEstimate {
    pub p: f64,
    /// Estimated mid-quantiles on the response scale at each row.
    pub fitted: Vec<f64>,
    pub beta: DVector<f64>,
    /// Standard error of the first slope, when requested.
    pub slope_se: Option<f64>,
}

/// Estimator plugged into the harness.
pub trait Estimator: Sync {
    /// One result per level; standard errors are required only for the
    /// levels in `variance_levels`.
    fn estimate(
        &self,
        id: ScenarioId,
        data: &SimData,
        levels: &[f64],
        variance_levels: &[f64],
    ) -> Vec<Result<LevelEstimate>>;
}

/// Settings of the mid-quantile estimator in simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFitConfig {
    /// Kernel used for the discrete covariate of the `a` scenarios.
    pub discrete_kind: CovariateKind,
    pub bandwidth: BandwidthChoice,
    pub allow_numerical: bool,
}

impl Default for SimFitConfig {
    fn default() -> Self {
        Self {
            discrete_kind: CovariateKind::Unordered,
            bandwidth: BandwidthChoice::RuleOfThumb,
            allow_numerical: true,
        }
    }
}

/// The mid-quantile regression estimator with analytic standard errors.
#[derive(Debug, Clone, Default)]
pub struct MidQrEstimator {
    pub config: SimFitConfig,
}

fn has_level(levels: &[f64], p: f64) -> bool {
    levels.iter().any(|l| (l - p).abs() <= 1e-12)
}

impl Estimator for MidQrEstimator {
    fn estimate(
        &self,
        id: ScenarioId,
        data: &SimData,
        levels: &[f64],
        variance_levels: &[f64],
    ) -> Vec<Result<LevelEstimate>> {
        let kinds = if id.is_discrete() {
            vec![self.config.discrete_kind]
        } else {
            vec![CovariateKind::Continuous; 2]
        };
        let prepared = (|| -> Result<_> {
            let spec = CovariateSpec::new(kinds, &data.covariates)?;
            let step = first_step(&data.y, &data.covariates, &spec, &self.config.bandwidth)?;
            let ls = LeastSquares::new(&data.design())?;
            Ok((step, ls))
        })();
        let (step, ls) = match prepared {
            Ok(v) => v,
            Err(e) => return levels.iter().map(|_| Err(e.clone())).collect(),
        };
        let h = id.transformation();
        levels
            .iter()
            .map(|&p| {
                let (beta, method, _) =
                    estimate_level(&ls, &step.mid, p, &h, self.config.allow_numerical)?;
                let slope_se = if has_level(variance_levels, p) {
                    let resid = working_residuals(&data.y, ls.x(), &beta, &h);
                    let v = analytic_variance(&ls, &step.mid, p, &h, &beta, method, &resid)?;
                    Some(v.standard_errors()[1])
                } else {
                    None
                };
                let fitted = (ls.x() * &beta).iter().map(|e| h.hinv(*e)).collect();
                Ok(LevelEstimate {
                    p,
                    fitted,
                    beta,
                    slope_se,
                })
            })
            .collect()
    }
}

/// Returns the true mid-quantiles; used to check the harness itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleEstimator;

impl Estimator for OracleEstimator {
    fn estimate(
        &self,
        id: ScenarioId,
        data: &SimData,
        levels: &[f64],
        variance_levels: &[f64],
    ) -> Vec<Result<LevelEstimate>> {
        let truth = match true_mid_quantiles(id, &data.covariates, levels) {
            Ok(t) => t,
            Err(e) => return levels.iter().map(|_| Err(e.clone())).collect(),
        };
        levels
            .iter()
            .zip(truth)
            .map(|(&p, fitted)| {
                let beta = design_truth(id, &data.design(), &fitted)?;
                Ok(LevelEstimate {
                    p,
                    fitted,
                    beta,
                    slope_se: has_level(variance_levels, p).then_some(0.0),
                })
            })
            .collect()
    }
}

/// Coefficients of the best linear fit of the transformed true
/// mid-quantiles on the realized design, the target of the closed-form
/// estimator when the mid-probabilities are known.
pub fn design_truth(id: ScenarioId, x: &DMatrix<f64>, truth: &[f64]) -> Result<DVector<f64>> {
    let h = id.transformation();
    let u: Vec<f64> = truth
        .iter()
        .map(|t| {
            h.h(*t)
                .ok_or_else(|| MidQrError::TransformDomain { rows: vec![] })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LeastSquares::new(x)?.solve(&DVector::from_vec(u)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub p: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Mean over replications of the average true mid-quantile.
    pub hbar: f64,
    /// Percentage of nominal 95% slope intervals covering the target.
    pub coverage: Option<f64>,
    pub slope_mean: f64,
    pub slope_variance: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub scenario: ScenarioId,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn row(&self, p: f64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| (r.p - p).abs() <= 1e-12)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| MidQrError::InvalidInput(e.to_string());
        w.write_record([
            "scenario",
            "n",
            "R",
            "p",
            "bias",
            "rmse",
            "hbar",
            "coverage",
            "slope_mean",
            "slope_variance",
            "successes",
            "failures",
        ])
        .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                self.scenario.to_string(),
                self.n.to_string(),
                self.replications.to_string(),
                r.p.to_string(),
                format!("{:.6}", r.bias),
                format!("{:.6}", r.rmse),
                format!("{:.6}", r.hbar),
                r.coverage.map(|c| format!("{c:.2}")).unwrap_or_default(),
                format!("{:.6}", r.slope_mean),
                format!("{:.6e}", r.slope_variance),
                r.successes.to_string(),
                r.failures.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| MidQrError::InvalidInput(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| MidQrError::InvalidInput(e.to_string()))
    }

    /// Plain-text table with columns `p`, `Bias`, `RMSE`, `H` (average true
    /// mid-quantile) and, where computed, coverage.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "Scenario {}  n = {}  R = {}  seed = {}\n",
            self.scenario, self.n, self.replications, self.seed
        );
        s.push_str(&format!(
            "{:>5} {:>9} {:>9} {:>11} {:>9}\n",
            "p", "Bias", "RMSE", "H-bar", "Coverage"
        ));
        for r in &self.rows {
            let cov = r
                .coverage
                .map(|c| format!("{c:.2}"))
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "{:>5.2} {:>9.3} {:>9.3} {:>11.3} {:>9}\n",
                r.p, r.bias, r.rmse, r.hbar, cov
            ));
        }
        s
    }
}

/// Per-replication summary at one level.
#[derive(Debug, Clone, Copy)]
struct ReplicationLevel {
    bias: f64,
    mse: f64,
    hbar: f64,
    slope: f64,
    covered: Option<bool>,
}

/// Random stream of replication `r`.
pub fn replication_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

/// Runs `replications` independent samples of size `spec.n` and summarizes
/// the estimates at each level. Coverage of the first slope is computed at
/// `coverage_levels` against the best linear fit of the transformed true
/// mid-quantiles on each realized design.
pub fn run_study<E: Estimator + ?Sized>(
    spec: &ScenarioSpec,
    replications: usize,
    levels: &[f64],
    coverage_levels: &[f64],
    estimator: &E,
) -> Result<MetricsTable> {
    if replications < 2 {
        return Err(MidQrError::InvalidInput(
            "at least two replications are required".into(),
        ));
    }
    if levels.is_empty() {
        return Err(MidQrError::InvalidInput(
            "no quantile levels requested".into(),
        ));
    }
    for &p in levels {
        if !(p > 0.0 && p < 1.0) {
            return Err(MidQrError::ProbabilityDomain(p));
        }
    }
    let z = 1.959_963_984_540_054;
    let per_rep: Vec<Result<Vec<Option<ReplicationLevel>>>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(spec.seed, r);
            let data = generate_with_rng(spec.id, spec.n, &mut rng);
            let truth = true_mid_quantiles(spec.id, &data.covariates, levels)?;
            let design = data.design();
            let estimates = estimator.estimate(spec.id, &data, levels, coverage_levels);
            let n = spec.n as f64;
            Ok(estimates
                .into_iter()
                .zip(&truth)
                .map(|(est, h)| {
                    let est = est.ok()?;
                    let (mut bias, mut mse) = (0.0, 0.0);
                    for (fh, th) in est.fitted.iter().zip(h) {
                        bias += fh - th;
                        mse += (fh - th).powi(2);
                    }
                    let covered = match est.slope_se {
                        Some(se) => {
                            let target = design_truth(spec.id, &design, h).ok()?[1];
                            Some((est.beta[1] - target).abs() <= z * se)
                        }
                        None => None,
                    };
                    Some(ReplicationLevel {
                        bias: bias / n,
                        mse: mse / n,
                        hbar: h.iter().sum::<f64>() / n,
                        slope: est.beta[1],
                        covered,
                    })
                })
                .collect())
        })
        .collect();

    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = levels
        .iter()
        .enumerate()
        .map(|(l, &p)| {
            let ok: Vec<ReplicationLevel> = per_rep.iter().filter_map(|r| r[l]).collect();
            let m = ok.len() as f64;
            let mean = |f: &dyn Fn(&ReplicationLevel) -> f64| ok.iter().map(f).sum::<f64>() / m;
            let slope_mean = mean(&|r| r.slope);
            let slope_variance = if ok.len() > 1 {
                ok.iter()
                    .map(|r| (r.slope - slope_mean).powi(2))
                    .sum::<f64>()
                    / (m - 1.0)
            } else {
                f64::NAN
            };
            let cov: Vec<bool> = ok.iter().filter_map(|r| r.covered).collect();
            MetricsRow {
                p,
                bias: mean(&|r| r.bias),
                rmse: mean(&|r| r.mse).sqrt(),
                hbar: mean(&|r| r.hbar),
                coverage: (!cov.is_empty())
                    .then(|| 100.0 * cov.iter().filter(|c| **c).count() as f64 / cov.len() as f64),
                slope_mean,
                slope_variance,
                successes: ok.len(),
                failures: replications - ok.len(),
            }
        })
        .collect();
    Ok(MetricsTable {
        scenario: spec.id,
        n: spec.n,
        replications,
        seed: spec.seed,
        rows,
    })
}

/// Average true mid-quantiles on a fresh covariate draw of size `n`.
pub fn hbar_table(id: ScenarioId, n: usize, seed: u64, levels: &[f64]) -> Result<Vec<f64>> {
    let data = generate(&ScenarioSpec::new(id, n, seed)?);
    let truth = true_mid_quantiles(id, &data.covariates, levels)?;
    Ok(truth
        .iter()
        .map(|h| h.iter().sum::<f64>() / n as f64)
        .collect())
}
