//! First estimation step: kernel estimates of the conditional CDF of the
//! response at every sample point, and the conditional mid-probabilities
//! derived from them.
//!
//! The estimator is a product-kernel weighted ECDF,
//! `F(z | x) = sum_l I(Y_l <= z) K(X_l, x) / sum_l K(X_l, x)`, with a
//! Gaussian (or Epanechnikov) kernel for continuous columns, the
//! Aitchison-Aitken kernel for unordered categories and a geometric kernel
//! for ordered categories.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MidQrError, Result};
use crate::mid_distributions::midprobs_from_cdf;

/// Floor applied to plug-in variances of the conditional CDF.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Step used to break ties in a mid-probability row.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Unordered,
    Ordered,
}

impl std::str::FromStr for CovariateKind {
    type Err = MidQrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "continuous" | "c" => Ok(Self::Continuous),
            "unordered" | "unordered-discrete" | "factor" | "u" => Ok(Self::Unordered),
            "ordered" | "ordered-discrete" | "o" => Ok(Self::Ordered),
            other => Err(MidQrError::InvalidInput(format!(
                "unknown covariate kind '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContinuousKernel {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl ContinuousKernel {
    /// Kernel value at zero.
    fn peak(self) -> f64 {
        match self {
            Self::Gaussian => 1.0 / (2.0 * PI).sqrt(),
            Self::Epanechnikov => 0.75,
        }
    }

    /// Kernel value relative to its peak, so that `relative(0) == 1`.
    fn relative(self, u: f64) -> f64 {
        match self {
            Self::Gaussian => (-0.5 * u * u).exp(),
            Self::Epanechnikov => (1.0 - u * u).max(0.0),
        }
    }

    /// Roughness `integral K(u)^2 du`.
    pub fn roughness(self) -> f64 {
        match self {
            Self::Gaussian => 1.0 / (2.0 * PI.sqrt()),
            Self::Epanechnikov => 0.6,
        }
    }
}

/// Kernel type of each covariate column (the intercept is not a covariate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    kinds: Vec<CovariateKind>,
    categories: Vec<usize>,
    kernel: ContinuousKernel,
}

impl CovariateSpec {
    /// Declares column kinds; category counts of discrete columns are read
    /// from the data.
    pub fn new(kinds: Vec<CovariateKind>, covariates: &DMatrix<f64>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(MidQrError::InvalidInput(
                "at least one covariate is required".into(),
            ));
        }
        if kinds.len() != covariates.ncols() {
            return Err(MidQrError::DimensionMismatch(format!(
                "{} covariate kinds for {} columns",
                kinds.len(),
                covariates.ncols()
            )));
        }
        let categories = kinds
            .iter()
            .enumerate()
            .map(|(c, kind)| match kind {
                CovariateKind::Continuous => 0,
                _ => {
                    let mut vals: Vec<f64> = covariates.column(c).iter().copied().collect();
                    vals.sort_by(f64::total_cmp);
                    vals.dedup();
                    vals.len()
                }
            })
            .collect();
        Ok(Self {
            kinds,
            categories,
            kernel: ContinuousKernel::Gaussian,
        })
    }

    /// Spec with explicit category counts, for evaluating new points.
    pub fn with_categories(kinds: Vec<CovariateKind>, categories: Vec<usize>) -> Result<Self> {
        if kinds.len() != categories.len() || kinds.is_empty() {
            return Err(MidQrError::DimensionMismatch(
                "kinds and category counts must have equal, nonzero length".into(),
            ));
        }
        Ok(Self {
            kinds,
            categories,
            kernel: ContinuousKernel::Gaussian,
        })
    }

    pub fn with_kernel(mut self, kernel: ContinuousKernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn kinds(&self) -> &[CovariateKind] {
        &self.kinds
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn kernel(&self) -> ContinuousKernel {
        self.kernel
    }

    pub fn dim(&self) -> usize {
        self.kinds.len()
    }

    pub fn n_continuous(&self) -> usize {
        self.kinds
            .iter()
            .filter(|k| **k == CovariateKind::Continuous)
            .count()
    }

    /// Largest admissible bandwidth of a discrete column.
    pub fn max_discrete_bandwidth(&self, column: usize) -> f64 {
        match self.kinds[column] {
            CovariateKind::Continuous => f64::INFINITY,
            CovariateKind::Ordered => 1.0,
            CovariateKind::Unordered => {
                let c = self.categories[column].max(1) as f64;
                (c - 1.0) / c
            }
        }
    }
}

/// Smoothing parameters, one per covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub lambda: Vec<f64>,
}

impl Bandwidths {
    pub fn new(lambda: Vec<f64>) -> Self {
        Self { lambda }
    }

    /// Checks each bandwidth against the admissible range of its column.
    pub fn validate(&self, spec: &CovariateSpec) -> Result<()> {
        if self.lambda.len() != spec.dim() {
            return Err(MidQrError::DimensionMismatch(format!(
                "{} bandwidths for {} covariates",
                self.lambda.len(),
                spec.dim()
            )));
        }
        for (c, &l) in self.lambda.iter().enumerate() {
            let bad = |reason: &str| MidQrError::BandwidthRange {
                column: c,
                value: l,
                reason: reason.into(),
            };
            match spec.kinds[c] {
                CovariateKind::Continuous => {
                    if !(l > 0.0) || l.is_nan() {
                        return Err(bad("continuous bandwidths must be positive"));
                    }
                }
                _ => {
                    let max = spec.max_discrete_bandwidth(c);
                    if !(0.0..=max).contains(&l) {
                        return Err(bad(&format!("discrete bandwidths must lie in [0, {max}]")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Product of the continuous-column bandwidths.
    pub fn continuous_product(&self, spec: &CovariateSpec) -> f64 {
        self.lambda
            .iter()
            .zip(spec.kinds())
            .filter(|(_, k)| **k == CovariateKind::Continuous)
            .map(|(l, _)| *l)
            .product()
    }
}

/// Kernel weight of one column relative to the weight at zero distance.
fn relative_column_weight(
    kind: CovariateKind,
    categories: usize,
    kernel: ContinuousKernel,
    lambda: f64,
    a: f64,
    b: f64,
) -> f64 {
    match kind {
        CovariateKind::Continuous => kernel.relative((a - b) / lambda),
        CovariateKind::Unordered => {
            if a == b {
                1.0
            } else if categories <= 1 {
                0.0
            } else {
                lambda / ((categories as f64 - 1.0) * (1.0 - lambda))
            }
        }
        CovariateKind::Ordered => {
            let d = (a - b).abs();
            if d == 0.0 {
                1.0
            } else {
                lambda.powf(d)
            }
        }
    }
}

/// Kernel weight at zero distance for one column.
fn column_peak(kind: CovariateKind, kernel: ContinuousKernel, lambda: f64) -> f64 {
    match kind {
        CovariateKind::Continuous => kernel.peak() / lambda,
        CovariateKind::Unordered => 1.0 - lambda,
        CovariateKind::Ordered => 1.0,
    }
}

struct KernelEval<'a> {
    spec: &'a CovariateSpec,
    lambda: &'a [f64],
}

impl KernelEval<'_> {
    fn relative(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut w = 1.0;
        for c in 0..self.spec.dim() {
            w *= relative_column_weight(
                self.spec.kinds[c],
                self.spec.categories[c],
                self.spec.kernel,
                self.lambda[c],
                a[c],
                b[c],
            );
            if w == 0.0 {
                break;
            }
        }
        w
    }

    fn peak(&self) -> f64 {
        (0..self.spec.dim())
            .map(|c| column_peak(self.spec.kinds[c], self.spec.kernel, self.lambda[c]))
            .product()
    }
}

/// Product-kernel weight `K_lambda(x_i, x)`.
pub fn kernel_weight(x_i: &[f64], x: &[f64], bw: &Bandwidths, spec: &CovariateSpec) -> Result<f64> {
    if x_i.len() != spec.dim() || x.len() != spec.dim() {
        return Err(MidQrError::DimensionMismatch(
            "covariate rows must match the covariate spec".into(),
        ));
    }
    bw.validate(spec)?;
    let eval = KernelEval {
        spec,
        lambda: &bw.lambda,
    };
    Ok(eval.peak() * eval.relative(x_i, x))
}

/// Kernel conditional CDF evaluated at every sample point.
#[derive(Debug, Clone)]
pub struct ConditionalCdfMatrix {
    grid: Vec<f64>,
    /// Row-major `n x k`.
    values: Vec<f64>,
    density: Vec<f64>,
    /// Kernel weights normalized to sum to one per row: `weights[i * n + l]`.
    weights: Vec<f64>,
    bandwidths: Bandwidths,
    spec: CovariateSpec,
}

impl ConditionalCdfMatrix {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.density.len()
    }

    pub fn k(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k() + j]
    }

    /// Kernel density estimate of the covariates at each sample point.
    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Normalized weights of all observations in the estimate at row `i`.
    pub fn row_weights(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.weights[i * n..(i + 1) * n]
    }

    pub fn bandwidths(&self) -> &Bandwidths {
        &self.bandwidths
    }

    pub fn spec(&self) -> &CovariateSpec {
        &self.spec
    }
}

fn check_data(y: &[f64], x: &DMatrix<f64>, spec: &CovariateSpec) -> Result<()> {
    if y.len() != x.nrows() {
        return Err(MidQrError::DimensionMismatch(format!(
            "{} responses but {} covariate rows",
            y.len(),
            x.nrows()
        )));
    }
    if x.ncols() != spec.dim() {
        return Err(MidQrError::DimensionMismatch(format!(
            "{} covariate columns but spec has {}",
            x.ncols(),
            spec.dim()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(MidQrError::InvalidInput(
            "data contain non-finite values".into(),
        ));
    }
    Ok(())
}

fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}

/// Sorted distinct response values and the grid index of every observation.
fn response_grid(y: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut grid = y.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let index = y.iter().map(|v| grid.partition_point(|g| g < v)).collect();
    (grid, index)
}

/// Kernel conditional CDF `F(z_j | x_i)` for every observation `i` and every
/// distinct response value `z_j`.
///
/// Rows are made monotone by a running maximum and clipped to `[0, 1]`; the
/// last entry of each row is exactly one.
pub fn conditional_cdf(
    y: &[f64],
    x: &DMatrix<f64>,
    bw: &Bandwidths,
    spec: &CovariateSpec,
) -> Result<ConditionalCdfMatrix> {
    if y.len() < 2 {
        return Err(MidQrError::InvalidInput(
            "at least two observations are required".into(),
        ));
    }
    check_data(y, x, spec)?;
    bw.validate(spec)?;

    let n = y.len();
    let (grid, index) = response_grid(y);
    let k = grid.len();
    let rows = rows_of(x);
    let eval = KernelEval {
        spec,
        lambda: &bw.lambda,
    };
    let peak = eval.peak();

    let per_row: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut w: Vec<f64> = rows.iter().map(|r| eval.relative(r, &rows[i])).collect();
            let mut bins = vec![0.0; k];
            for (l, &wl) in w.iter().enumerate() {
                bins[index[l]] += wl;
            }
            let mut cum = 0.0;
            let mut row = Vec::with_capacity(k);
            for b in bins {
                cum += b;
                row.push(cum);
            }
            let total = cum;
            if !(total > 0.0) || !total.is_finite() {
                return Err(MidQrError::ZeroDenominator { row: i });
            }
            let mut running = 0.0_f64;
            for f in row.iter_mut() {
                running = running.max(*f / total);
                *f = running.clamp(0.0, 1.0);
            }
            w.iter_mut().for_each(|v| *v /= total);
            Ok((row, w, peak * total / n as f64))
        })
        .collect();

    let mut values = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n * n);
    let mut density = Vec::with_capacity(n);
    for r in per_row {
        let (row, w, d) = r?;
        values.extend(row);
        weights.extend(w);
        density.push(d);
    }
    Ok(ConditionalCdfMatrix {
        grid,
        values,
        density,
        weights,
        bandwidths: bw.clone(),
        spec: spec.clone(),
    })
}

/// Plug-in variance of each conditional CDF entry:
/// `kappa^{q_c} F (1 - F) / (n prod(lambda_c) delta(x_i))`, floored at
/// `VARIANCE_FLOOR`.
pub fn var_f_hat(cdf: &ConditionalCdfMatrix, bw: &Bandwidths) -> Vec<f64> {
    let spec = cdf.spec();
    let n = cdf.n() as f64;
    let kappa = spec.kernel().roughness().powi(spec.n_continuous() as i32);
    let lambda_prod = bw.continuous_product(spec);
    let k = cdf.k();
    let mut out = Vec::with_capacity(cdf.n() * k);
    for i in 0..cdf.n() {
        let scale = kappa / (n * lambda_prod * cdf.density()[i]);
        out.extend(
            cdf.row(i)
                .iter()
                .map(|&f| (scale * f * (1.0 - f)).max(VARIANCE_FLOOR)),
        );
    }
    out
}

/// Nonparametric-bootstrap variance of the conditional CDF at the original
/// sample points, with bandwidths held fixed. Row-major `n x k` on the
/// original grid.
pub fn var_f_hat_bootstrap(
    y: &[f64],
    x: &DMatrix<f64>,
    bw: &Bandwidths,
    spec: &CovariateSpec,
    replicates: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_data(y, x, spec)?;
    bw.validate(spec)?;
    let n = y.len();
    let (grid, _) = response_grid(y);
    let k = grid.len();
    let rows = rows_of(x);
    let eval = KernelEval {
        spec,
        lambda: &bw.lambda,
    };

    let draws: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut out = Vec::with_capacity(n * k);
            for i in 0..n {
                let mut num = vec![0.0; k];
                let mut total = 0.0;
                for &l in &idx {
                    let w = eval.relative(&rows[l], &rows[i]);
                    total += w;
                    let j = grid.partition_point(|g| *g < y[l]);
                    num[j] += w;
                }
                let mut cum = 0.0;
                for v in num {
                    cum += v;
                    out.push(if total > 0.0 { cum / total } else { f64::NAN });
                }
            }
            out
        })
        .collect();

    let mut var = vec![0.0; n * k];
    for (e, v) in var.iter_mut().enumerate() {
        let vals: Vec<f64> = draws
            .iter()
            .map(|d| d[e])
            .filter(|v| v.is_finite())
            .collect();
        if vals.len() > 1 {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            *v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        }
        *v = v.max(VARIANCE_FLOOR);
    }
    Ok(var)
}

/// Conditional mid-probabilities at every sample point with their variances.
#[derive(Debug, Clone)]
pub struct ConditionalMidCdfMatrix {
    grid: Vec<f64>,
    pi: Vec<f64>,
    varpi: Vec<f64>,
    tie_broken_rows: Vec<usize>,
}

impl ConditionalMidCdfMatrix {
    /// Builds a matrix from row-major mid-probabilities and variances.
    pub fn from_rows(grid: Vec<f64>, pi: Vec<f64>, varpi: Vec<f64>) -> Result<Self> {
        let k = grid.len();
        if k == 0 || pi.len() % k != 0 || pi.len() != varpi.len() || pi.is_empty() {
            return Err(MidQrError::DimensionMismatch(
                "mid-probability matrix does not match the grid".into(),
            ));
        }
        if !crate::mid_distributions::strictly_increasing(&grid) {
            return Err(MidQrError::InvalidInput(
                "grid must be strictly increasing".into(),
            ));
        }
        for (i, row) in pi.chunks(k).enumerate() {
            if !crate::mid_distributions::strictly_increasing(row) {
                return Err(MidQrError::InvalidInput(format!(
                    "mid-probabilities of row {i} are not strictly increasing"
                )));
            }
        }
        Ok(Self {
            grid,
            pi,
            varpi,
            tie_broken_rows: Vec::new(),
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.pi.len() / self.grid.len()
    }

    pub fn k(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.pi[i * k..(i + 1) * k]
    }

    pub fn var_row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.varpi[i * k..(i + 1) * k]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pi[i * self.k() + j]
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn varpi(&self) -> &[f64] {
        &self.varpi
    }

    /// Rows whose ties were broken by the jitter step.
    pub fn tie_broken_rows(&self) -> &[usize] {
        &self.tie_broken_rows
    }
}

/// Converts conditional CDF rows into mid-probabilities
/// `pi_ij = F_ij - 0.5 (F_ij - F_i,j-1)`, with `pi_i1 = 0.5 F_i1`, and
/// computes their variances with the cross-covariances dropped.
///
/// A row with ties is made strictly increasing by
/// `pi <- (1 - 2 k eps) pi + eps j`, which keeps it inside (0, 1).
pub fn conditional_mid_probabilities(cdf: &ConditionalCdfMatrix) -> ConditionalMidCdfMatrix {
    let var_f = var_f_hat(cdf, cdf.bandwidths());
    mid_probabilities_with_variance(cdf, &var_f)
}

/// As [`conditional_mid_probabilities`], with externally supplied CDF
/// variances (row-major `n x k`).
pub fn mid_probabilities_with_variance(
    cdf: &ConditionalCdfMatrix,
    var_f: &[f64],
) -> ConditionalMidCdfMatrix {
    let k = cdf.k();
    let mut pi = Vec::with_capacity(cdf.n() * k);
    let mut varpi = Vec::with_capacity(cdf.n() * k);
    let mut tie_broken_rows = Vec::new();
    for i in 0..cdf.n() {
        let mut row = midprobs_from_cdf(cdf.row(i));
        if !crate::mid_distributions::strictly_increasing(&row) {
            let shrink = 1.0 - 2.0 * k as f64 * TIE_EPSILON;
            for (j, g) in row.iter_mut().enumerate() {
                *g = shrink * *g + TIE_EPSILON * (j + 1) as f64;
            }
            tie_broken_rows.push(i);
        }
        pi.extend(row);
        let vf = &var_f[i * k..(i + 1) * k];
        varpi.extend((0..k).map(|j| {
            if j == 0 {
                0.25 * vf[0]
            } else {
                0.25 * vf[j - 1] + 0.25 * vf[j]
            }
        }));
    }
    ConditionalMidCdfMatrix {
        grid: cdf.grid().to_vec(),
        pi,
        varpi,
        tie_broken_rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandwidthMethod {
    RuleOfThumb,
    CrossValidation,
}

/// Sample standard deviation with the `n - 1` denominator.
fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Rule-of-thumb bandwidths: `1.06 sd n^{-1/(4+q_c)}` for continuous
/// columns and `0.5 n^{-2/(4+q_c)}` (capped) for discrete ones.
pub fn rule_of_thumb(x: &DMatrix<f64>, spec: &CovariateSpec) -> Result<Bandwidths> {
    if x.ncols() != spec.dim() {
        return Err(MidQrError::DimensionMismatch(format!(
            "{} covariate columns but spec has {}",
            x.ncols(),
            spec.dim()
        )));
    }
    let n = x.nrows() as f64;
    let qc = spec.n_continuous() as f64;
    let mut lambda = Vec::with_capacity(spec.dim());
    for c in 0..spec.dim() {
        match spec.kinds()[c] {
            CovariateKind::Continuous => {
                let sd = sample_sd(x.column(c).iter().copied());
                if !(sd > 0.0) || !sd.is_finite() {
                    return Err(MidQrError::DegenerateCovariate(c));
                }
                lambda.push(1.06 * sd * n.powf(-1.0 / (4.0 + qc)));
            }
            _ => {
                let l = 0.5 * n.powf(-2.0 / (4.0 + qc));
                lambda.push(l.min(spec.max_discrete_bandwidth(c)));
            }
        }
    }
    Ok(Bandwidths::new(lambda))
}

/// Multipliers applied to the rule-of-thumb value in cross-validation.
const CV_FACTORS: [f64; 7] = [1.0 / 64.0, 1.0 / 16.0, 0.25, 1.0, 4.0, 16.0, 64.0];
/// Largest product grid searched exhaustively; beyond it the search is
/// coordinate-wise.
const CV_FULL_GRID_LIMIT: usize = 343;

/// Leave-one-out squared error of the conditional CDF summed over the grid.
pub fn cv_score(y: &[f64], x: &DMatrix<f64>, bw: &Bandwidths, spec: &CovariateSpec) -> Result<f64> {
    check_data(y, x, spec)?;
    bw.validate(spec)?;
    let n = y.len();
    let (grid, index) = response_grid(y);
    let k = grid.len();
    let rows = rows_of(x);
    let eval = KernelEval {
        spec,
        lambda: &bw.lambda,
    };
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut bins = vec![0.0; k];
            let mut denom = 0.0;
            for l in 0..n {
                if l == i {
                    continue;
                }
                let w = eval.relative(&rows[l], &rows[i]);
                bins[index[l]] += w;
                denom += w;
            }
            let mut cum = 0.0;
            let mut err = 0.0;
            for (j, b) in bins.into_iter().enumerate() {
                cum += b;
                let f = if denom > 0.0 { cum / denom } else { 0.5 };
                let ind = if index[i] <= j { 1.0 } else { 0.0 };
                err += (ind - f).powi(2);
            }
            err
        })
        .sum();
    Ok(total / n as f64)
}

fn candidate_values(rot: f64, column: usize, spec: &CovariateSpec) -> Vec<f64> {
    let max = spec.max_discrete_bandwidth(column);
    let mut vals: Vec<f64> = CV_FACTORS
        .iter()
        .map(|f| match spec.kinds()[column] {
            CovariateKind::Continuous => rot * f,
            _ => (rot * f).min(max),
        })
        .collect();
    vals.dedup();
    vals
}

/// Selects bandwidths by the rule of thumb or by leave-one-out
/// cross-validation over a log-spaced grid around the rule of thumb.
pub fn select_bandwidths(
    y: &[f64],
    x: &DMatrix<f64>,
    spec: &CovariateSpec,
    method: BandwidthMethod,
) -> Result<Bandwidths> {
    check_data(y, x, spec)?;
    let rot = rule_of_thumb(x, spec)?;
    match method {
        BandwidthMethod::RuleOfThumb => Ok(rot),
        BandwidthMethod::CrossValidation => {
            if y.len() < 10 {
                return Err(MidQrError::InvalidInput(
                    "cross-validation needs at least 10 observations".into(),
                ));
            }
            let candidates: Vec<Vec<f64>> = (0..spec.dim())
                .map(|c| candidate_values(rot.lambda[c], c, spec))
                .collect();
            let full: usize = candidates.iter().map(Vec::len).product();
            if full <= CV_FULL_GRID_LIMIT {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for combo in product(&candidates) {
                    let score = cv_score(y, x, &Bandwidths::new(combo.clone()), spec)?;
                    if best.as_ref().is_none_or(|(s, _)| score < *s) {
                        best = Some((score, combo));
                    }
                }
                Ok(Bandwidths::new(best.unwrap().1))
            } else {
                let mut current = rot.lambda.clone();
                let mut current_score = cv_score(y, x, &rot, spec)?;
                for _sweep in 0..2 {
                    for c in 0..spec.dim() {
                        for &v in &candidates[c] {
                            let mut trial = current.clone();
                            trial[c] = v;
                            let s = cv_score(y, x, &Bandwidths::new(trial.clone()), spec)?;
                            if s < current_score {
                                current_score = s;
                                current = trial;
                            }
                        }
                    }
                }
                Ok(Bandwidths::new(current))
            }
        }
    }
}

fn product(sets: &[Vec<f64>]) -> Vec<Vec<f64>> {
    sets.iter().fold(vec![Vec::new()], |acc, set| {
        acc.iter()
            .flat_map(|prefix| {
                set.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(*v);
                    next
                })
            })
            .collect()
    })
}
