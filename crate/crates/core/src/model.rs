//! End-to-end fitting: bandwidth selection, conditional mid-probabilities,
//! coefficient estimation at each level and variance estimation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MidQrError, Result};
use crate::fit::{
    admissible_range, closed_form_with, numerical_fit, AdmissibleRange, FitDiagnostics, FitMethod,
    LeastSquares,
};
use crate::inference::{
    bootstrap_variance, confidence_intervals, delta_component, huber_white_with,
    jacobian_beta_wrt_pi, theorem_sandwich, total_variance, SeededResampler, VarianceEstimate,
};
use crate::kernel_cdf::{
    conditional_cdf, conditional_mid_probabilities, select_bandwidths, BandwidthMethod, Bandwidths,
    ConditionalMidCdfMatrix, CovariateKind, CovariateSpec,
};
use crate::transform::Transformation;

/// Smallest bootstrap size accepted by the pipeline.
pub const MIN_BOOTSTRAP: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BandwidthChoice {
    RuleOfThumb,
    CrossValidation,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarianceChoice {
    None,
    Analytic,
    Bootstrap { replicates: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub bandwidth: BandwidthChoice,
    pub transformation: Transformation,
    pub variance: VarianceChoice,
    /// Minimize the objective numerically when `p` is outside the
    /// admissible range instead of failing.
    pub allow_numerical: bool,
    pub confidence_level: f64,
    /// Select bandwidths afresh in every bootstrap replicate instead of
    /// reusing the ones chosen on the full sample.
    pub bootstrap_reselect: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            bandwidth: BandwidthChoice::RuleOfThumb,
            transformation: Transformation::Identity,
            variance: VarianceChoice::Analytic,
            allow_numerical: false,
            confidence_level: 0.95,
            bootstrap_reselect: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelFit {
    pub p: f64,
    pub beta: DVector<f64>,
    pub method: FitMethod,
    pub variance: Option<VarianceEstimate>,
    pub intervals: Option<Vec<(f64, f64)>>,
    /// Working residuals `(y - h^{-1}(eta)) / h^{-1}'(eta)`.
    pub residuals: Vec<f64>,
    pub diagnostics: Option<FitDiagnostics>,
}

impl LevelFit {
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.variance
            .as_ref()
            .map(VarianceEstimate::standard_errors)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedMidQuantileModel {
    pub levels: Vec<LevelFit>,
    pub transformation: Transformation,
    pub bandwidths: Bandwidths,
    pub admissible_range: AdmissibleRange,
    pub tie_broken_rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionScale {
    Response,
    Link,
}

impl FittedMidQuantileModel {
    pub fn level(&self, p: f64) -> Result<&LevelFit> {
        self.levels
            .iter()
            .find(|l| (l.p - p).abs() <= 1e-12)
            .ok_or(MidQrError::UnknownLevel(p))
    }

    /// Predicted mid-quantiles at level `p` for the design rows `x`.
    pub fn predict(&self, x: &DMatrix<f64>, p: f64, scale: PredictionScale) -> Result<Vec<f64>> {
        let level = self.level(p)?;
        predict_with(&level.beta, x, &self.transformation, scale)
    }
}

pub fn predict_with(
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    h: &Transformation,
    scale: PredictionScale,
) -> Result<Vec<f64>> {
    if x.ncols() != beta.len() {
        return Err(MidQrError::DimensionMismatch(format!(
            "design has {} columns but the model has {} coefficients",
            x.ncols(),
            beta.len()
        )));
    }
    let eta = x * beta;
    Ok(match scale {
        PredictionScale::Link => eta.iter().copied().collect(),
        PredictionScale::Response => eta.iter().map(|e| h.hinv(*e)).collect(),
    })
}

/// Working residuals on the link scale.
pub fn working_residuals(
    y: &[f64],
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    h: &Transformation,
) -> Vec<f64> {
    let eta = x * beta;
    y.iter()
        .zip(eta.iter())
        .map(|(yi, e)| {
            let d = h.d1hinv(*e);
            if d > 0.0 {
                (yi - h.hinv(*e)) / d
            } else {
                0.0
            }
        })
        .collect()
}

/// Prepared first step shared by all levels.
pub struct FirstStep {
    pub bandwidths: Bandwidths,
    pub mid: ConditionalMidCdfMatrix,
}

pub fn first_step(
    y: &[f64],
    covariates: &DMatrix<f64>,
    spec: &CovariateSpec,
    bandwidth: &BandwidthChoice,
) -> Result<FirstStep> {
    if y.is_empty() {
        return Err(MidQrError::EmptyInput);
    }
    let bandwidths = match bandwidth {
        BandwidthChoice::RuleOfThumb => {
            select_bandwidths(y, covariates, spec, BandwidthMethod::RuleOfThumb)?
        }
        BandwidthChoice::CrossValidation => {
            select_bandwidths(y, covariates, spec, BandwidthMethod::CrossValidation)?
        }
        BandwidthChoice::Explicit(v) => {
            let bw = Bandwidths::new(v.clone());
            bw.validate(spec)?;
            bw
        }
    };
    let cdf = conditional_cdf(y, covariates, &bandwidths, spec)?;
    let mid = conditional_mid_probabilities(&cdf);
    Ok(FirstStep { bandwidths, mid })
}

/// Coefficients at one level: closed form inside the admissible range,
/// numerical minimization outside it when allowed.
pub(crate) fn estimate_level(
    ls: &LeastSquares,
    mid: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
    allow_numerical: bool,
) -> Result<(DVector<f64>, FitMethod, Option<FitDiagnostics>)> {
    let range = admissible_range(mid);
    if range.contains(p) {
        let fit = closed_form_with(ls, mid, p, h)?;
        return Ok((fit.beta, FitMethod::ClosedForm, None));
    }
    if !allow_numerical {
        return Err(MidQrError::NotAdmissible {
            p,
            lo: range.lo,
            hi: range.hi,
        });
    }
    let nf = numerical_fit(ls.x(), mid, p, h, None)?;
    Ok((nf.beta, FitMethod::Numerical, Some(nf.diagnostics)))
}

/// Fits the conditional mid-quantile model at each level.
///
/// `covariates` feed the kernel estimator (one column per entry of
/// `spec`); `design` is the regression matrix, usually an intercept plus
/// coded covariates.
pub fn fit_model(
    y: &[f64],
    covariates: &DMatrix<f64>,
    spec: &CovariateSpec,
    design: &DMatrix<f64>,
    levels: &[f64],
    config: &FitConfig,
) -> Result<FittedMidQuantileModel> {
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
    if design.nrows() != y.len() {
        return Err(MidQrError::DimensionMismatch(format!(
            "design has {} rows for {} responses",
            design.nrows(),
            y.len()
        )));
    }
    if let VarianceChoice::Bootstrap { replicates, .. } = config.variance {
        if replicates < MIN_BOOTSTRAP {
            return Err(MidQrError::InvalidInput(format!(
                "the bootstrap needs at least {MIN_BOOTSTRAP} replicates"
            )));
        }
    }
    let step = first_step(y, covariates, spec, &config.bandwidth)?;
    let ls = LeastSquares::new(design)?;
    let h = config.transformation;

    let fits: Vec<Result<LevelFit>> = levels
        .par_iter()
        .map(|&p| {
            let (beta, method, diagnostics) =
                estimate_level(&ls, &step.mid, p, &h, config.allow_numerical)?;
            let residuals = working_residuals(y, design, &beta, &h);
            let variance = match config.variance {
                VarianceChoice::None => None,
                // A flat objective direction leaves the numerical fit without
                // a finite sandwich; report no variance in that case.
                VarianceChoice::Analytic => {
                    match analytic_variance(&ls, &step.mid, p, &h, &beta, method, &residuals) {
                        Ok(v) => Some(v),
                        Err(MidQrError::RankDeficient) if method == FitMethod::Numerical => None,
                        Err(e) => return Err(e),
                    }
                }
                VarianceChoice::Bootstrap { replicates, seed } => Some(bootstrap_level(
                    y,
                    covariates,
                    spec,
                    design,
                    &step.bandwidths,
                    p,
                    config,
                    replicates,
                    seed,
                )?),
            };
            let intervals = match &variance {
                Some(v) => Some(confidence_intervals(
                    &beta,
                    &v.standard_errors(),
                    config.confidence_level,
                )?),
                None => None,
            };
            Ok(LevelFit {
                p,
                beta,
                method,
                variance,
                intervals,
                residuals,
                diagnostics,
            })
        })
        .collect();

    Ok(FittedMidQuantileModel {
        levels: fits.into_iter().collect::<Result<Vec<_>>>()?,
        transformation: h,
        bandwidths: step.bandwidths,
        admissible_range: admissible_range(&step.mid),
        tie_broken_rows: step.mid.tie_broken_rows().to_vec(),
    })
}

/// Huber-White plus delta-method variance for a closed-form fit; the
/// asymptotic M-estimator sandwich plus Huber-White for a numerical one.
pub fn analytic_variance(
    ls: &LeastSquares,
    mid: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
    beta: &DVector<f64>,
    method: FitMethod,
    residuals: &[f64],
) -> Result<VarianceEstimate> {
    let hw = huber_white_with(ls, residuals);
    let delta = match method {
        FitMethod::ClosedForm => {
            let fit = closed_form_with(ls, mid, p, h)?;
            let jac = jacobian_beta_wrt_pi(ls, mid, p, h, &fit)?;
            delta_component(&jac, mid.varpi())?
        }
        FitMethod::Numerical => theorem_sandwich(beta, ls.x(), mid, p, h)?,
    };
    Ok(total_variance(hw, delta))
}

#[allow(clippy::too_many_arguments)]
fn bootstrap_level(
    y: &[f64],
    covariates: &DMatrix<f64>,
    spec: &CovariateSpec,
    design: &DMatrix<f64>,
    bandwidths: &Bandwidths,
    p: f64,
    config: &FitConfig,
    replicates: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    let choice = if config.bootstrap_reselect {
        config.bandwidth.clone()
    } else {
        BandwidthChoice::Explicit(bandwidths.lambda.clone())
    };
    let refit = |idx: &[usize]| -> Result<DVector<f64>> {
        let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let cb = covariates.select_rows(idx);
        let xb = design.select_rows(idx);
        let step = first_step(&yb, &cb, spec, &choice)?;
        let ls = LeastSquares::new(&xb)?;
        Ok(estimate_level(
            &ls,
            &step.mid,
            p,
            &config.transformation,
            config.allow_numerical,
        )?
        .0)
    };
    Ok(bootstrap_variance(&SeededResampler { seed }, y.len(), replicates, refit)?.variance)
}

/// How a covariate column enters the regression design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnCoding {
    Numeric,
    /// Indicators for every level but the first.
    Dummy {
        levels: Vec<f64>,
    },
}

/// Builds `[1, coded covariates]` consistently for training and new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignBuilder {
    pub codings: Vec<ColumnCoding>,
}

impl DesignBuilder {
    /// Numeric coding for continuous and ordered columns, dummy coding for
    /// unordered ones.
    pub fn from_kinds(kinds: &[CovariateKind], covariates: &DMatrix<f64>) -> Self {
        let codings = kinds
            .iter()
            .enumerate()
            .map(|(c, k)| match k {
                CovariateKind::Unordered => {
                    let mut levels: Vec<f64> = covariates.column(c).iter().copied().collect();
                    levels.sort_by(f64::total_cmp);
                    levels.dedup();
                    ColumnCoding::Dummy { levels }
                }
                _ => ColumnCoding::Numeric,
            })
            .collect();
        Self { codings }
    }

    pub fn numeric(columns: usize) -> Self {
        Self {
            codings: vec![ColumnCoding::Numeric; columns],
        }
    }

    pub fn n_columns(&self) -> usize {
        1 + self
            .codings
            .iter()
            .map(|c| match c {
                ColumnCoding::Numeric => 1,
                ColumnCoding::Dummy { levels } => levels.len().saturating_sub(1),
            })
            .sum::<usize>()
    }

    pub fn column_names(&self, names: &[String]) -> Vec<String> {
        let mut out = vec!["(intercept)".to_string()];
        for (c, coding) in self.codings.iter().enumerate() {
            match coding {
                ColumnCoding::Numeric => out.push(names[c].clone()),
                ColumnCoding::Dummy { levels } => {
                    out.extend(levels.iter().skip(1).map(|l| format!("{}={}", names[c], l)))
                }
            }
        }
        out
    }

    pub fn build(&self, covariates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if covariates.ncols() != self.codings.len() {
            return Err(MidQrError::DimensionMismatch(format!(
                "{} covariate columns for {} codings",
                covariates.ncols(),
                self.codings.len()
            )));
        }
        let n = covariates.nrows();
        let mut x = DMatrix::zeros(n, self.n_columns());
        for i in 0..n {
            x[(i, 0)] = 1.0;
            let mut col = 1;
            for (c, coding) in self.codings.iter().enumerate() {
                let v = covariates[(i, c)];
                match coding {
                    ColumnCoding::Numeric => {
                        x[(i, col)] = v;
                        col += 1;
                    }
                    ColumnCoding::Dummy { levels } => {
                        let pos = levels.iter().position(|l| *l == v).ok_or_else(|| {
                            MidQrError::InvalidInput(format!("unseen level {v} in covariate {c}"))
                        })?;
                        if pos > 0 {
                            x[(i, col + pos - 1)] = 1.0;
                        }
                        col += levels.len() - 1;
                    }
                }
            }
        }
        Ok(x)
    }
}
