//! Variance estimation for the closed-form coefficients: a Huber-White
//! sandwich for the regression step plus a delta-method term that
//! propagates the sampling variance of the estimated mid-probabilities
//! through a sparse numerical Jacobian. A case-resampling bootstrap and the
//! asymptotic sandwich of the M-estimator are available as alternatives.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{MidQrError, Result};
use crate::fit::{ClosedFormFit, InterpolatedMidCdf, LeastSquares};
use crate::kernel_cdf::ConditionalMidCdfMatrix;
use crate::transform::Transformation;

/// Central-difference step for the Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-6;
const JACOBIAN_RETRIES: usize = 3;
/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_BOOTSTRAP_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    Analytic,
    Bootstrap,
}

impl VarianceMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Analytic => "analytic",
            Self::Bootstrap => "bootstrap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub total: DMatrix<f64>,
    pub component_hw: DMatrix<f64>,
    pub component_delta: DMatrix<f64>,
    pub method: VarianceMethod,
    /// Negative diagonal entries were clipped to zero.
    pub clipped: bool,
}

impl VarianceEstimate {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.total
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }
}

/// Sandwich `(X'X)^{-1} X' diag(e^2) X (X'X)^{-1}` without a
/// degrees-of-freedom correction.
pub fn huber_white(x: &DMatrix<f64>, residuals: &[f64]) -> Result<DMatrix<f64>> {
    if residuals.len() != x.nrows() {
        return Err(MidQrError::DimensionMismatch(format!(
            "{} residuals for {} rows",
            residuals.len(),
            x.nrows()
        )));
    }
    let ls = LeastSquares::new(x)?;
    Ok(huber_white_with(&ls, residuals))
}

pub fn huber_white_with(ls: &LeastSquares, residuals: &[f64]) -> DMatrix<f64> {
    let x = ls.x();
    let q = x.ncols();
    let mut meat = DMatrix::zeros(q, q);
    for (i, e) in residuals.iter().enumerate() {
        let xi = x.row(i).transpose();
        meat.ger(e * e, &xi, &xi, 1.0);
    }
    let bread = ls.xtx_inv();
    symmetrize(&(bread * meat * bread))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Sparse derivative of the coefficients with respect to the flattened
/// mid-probability matrix (column `i * k + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseJacobian {
    q: usize,
    n: usize,
    k: usize,
    /// `(coefficient, column, value)`.
    triplets: Vec<(usize, usize, f64)>,
    /// Observation groups sharing one covariate vector, hence one estimated
    /// mid-probability row.
    groups: Vec<usize>,
    /// Entries whose bracket moved under every trial step; their derivative
    /// is one-sided.
    flagged: Vec<(usize, usize)>,
}

impl SparseJacobian {
    pub fn shape(&self) -> (usize, usize) {
        (self.q, self.n * self.k)
    }

    pub fn triplets(&self) -> &[(usize, usize, f64)] {
        &self.triplets
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn flagged(&self) -> &[(usize, usize)] {
        &self.flagged
    }

    /// Number of stored nonzero values.
    pub fn nnz(&self) -> usize {
        self.triplets.iter().filter(|t| t.2 != 0.0).count()
    }

    /// Distinct columns holding a nonzero value.
    pub fn nonzero_columns(&self) -> usize {
        let mut cols: Vec<usize> = self
            .triplets
            .iter()
            .filter(|t| t.2 != 0.0)
            .map(|t| t.1)
            .collect();
        cols.sort_unstable();
        cols.dedup();
        cols.len()
    }

    /// Share of structurally zero entries.
    pub fn sparsity(&self) -> f64 {
        let total = (self.q * self.n * self.k) as f64;
        1.0 - self.nnz() as f64 / total
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.q, self.n * self.k);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] += v;
        }
        m
    }
}

/// Transformed inverse of one perturbed row, or `None` if the perturbation
/// moves `p` into another segment or breaks monotonicity.
fn perturbed_target(
    grid: &[f64],
    row: &mut [f64],
    j: usize,
    delta: f64,
    p: f64,
    segment: usize,
    h: &Transformation,
) -> Option<f64> {
    let orig = row[j];
    row[j] = orig + delta;
    let out = InterpolatedMidCdf::new(grid, row).ok().and_then(|icdf| {
        let (br, arg) = icdf.inverse(p, 0).ok()?;
        (br.segment == segment).then_some(())?;
        h.h(arg)
    });
    row[j] = orig;
    out
}

/// Derivative of `u_i` with respect to `pi_ij` by central differences,
/// shrinking the step when the bracket moves, and falling back to a
/// one-sided difference (flagged) when it keeps moving.
fn target_derivative(
    grid: &[f64],
    row: &mut [f64],
    j: usize,
    p: f64,
    segment: usize,
    u0: f64,
    h: &Transformation,
) -> (f64, bool) {
    let mut step = JACOBIAN_STEP;
    for _ in 0..=JACOBIAN_RETRIES {
        let up = perturbed_target(grid, row, j, step, p, segment, h);
        let down = perturbed_target(grid, row, j, -step, p, segment, h);
        if let (Some(a), Some(b)) = (up, down) {
            return ((a - b) / (2.0 * step), false);
        }
        step *= 0.1;
    }
    let step = JACOBIAN_STEP;
    if let Some(a) = perturbed_target(grid, row, j, step, p, segment, h) {
        return ((a - u0) / step, true);
    }
    if let Some(b) = perturbed_target(grid, row, j, -step, p, segment, h) {
        return ((u0 - b) / step, true);
    }
    (0.0, true)
}

/// Groups rows with identical design and mid-probability rows.
fn row_groups(x: &DMatrix<f64>, pi: &ConditionalMidCdfMatrix) -> Vec<usize> {
    let mut ids: HashMap<Vec<u64>, usize> = HashMap::new();
    (0..x.nrows())
        .map(|i| {
            let key: Vec<u64> = x
                .row(i)
                .iter()
                .chain(pi.row(i))
                .map(|v| v.to_bits())
                .collect();
            let next = ids.len();
            *ids.entry(key).or_insert(next)
        })
        .collect()
}

/// Jacobian of the closed-form coefficients with respect to the estimated
/// mid-probabilities. Only the two bracket entries of each row can be
/// nonzero. Because the coefficients are linear in `u`, the derivative is
/// `(X'X)^{-1} x_i du_i/dpi_ij`, with `du_i/dpi_ij` by central differences.
pub fn jacobian_beta_wrt_pi(
    ls: &LeastSquares,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
    fit: &ClosedFormFit,
) -> Result<SparseJacobian> {
    let n = pi.n();
    let k = pi.k();
    let q = ls.x().ncols();
    if ls.x().nrows() != n || fit.brackets.len() != n {
        return Err(MidQrError::DimensionMismatch(
            "fit, design and mid-probabilities disagree in size".into(),
        ));
    }
    let grid = pi.grid();
    let mut triplets = Vec::with_capacity(2 * n * q);
    let mut flagged = Vec::new();
    for i in 0..n {
        let seg = fit.brackets[i].segment;
        let mut row = pi.row(i).to_vec();
        let infl = ls.influence(i);
        for j in [seg, seg + 1] {
            let (d, flag) = target_derivative(grid, &mut row, j, p, seg, fit.u[i], h);
            if flag {
                flagged.push((i, j));
            }
            for r in 0..q {
                triplets.push((r, i * k + j, infl[r] * d));
            }
        }
    }
    Ok(SparseJacobian {
        q,
        n,
        k,
        triplets,
        groups: row_groups(ls.x(), pi),
        flagged,
    })
}

/// `J diag(varpi) J'` over the stored entries. Columns belonging to rows
/// that share one estimated mid-probability row are the same random
/// quantity, so they are pooled before squaring; distinct rows are treated
/// as independent.
pub fn delta_component(jac: &SparseJacobian, varpi: &[f64]) -> Result<DMatrix<f64>> {
    let (q, cols) = jac.shape();
    if varpi.len() != cols {
        return Err(MidQrError::DimensionMismatch(format!(
            "{} variances for {} Jacobian columns",
            varpi.len(),
            cols
        )));
    }
    let mut pooled: HashMap<(usize, usize), (DVector<f64>, f64)> = HashMap::new();
    for &(r, c, v) in &jac.triplets {
        let (i, j) = (c / jac.k, c % jac.k);
        let entry = pooled
            .entry((jac.groups[i], j))
            .or_insert_with(|| (DVector::zeros(q), varpi[c]));
        entry.0[r] += v;
    }
    let mut keys: Vec<_> = pooled.keys().copied().collect();
    keys.sort_unstable();
    let mut out = DMatrix::zeros(q, q);
    for key in keys {
        let (col, var) = &pooled[&key];
        out.ger(*var, col, col, 1.0);
    }
    Ok(symmetrize(&out))
}

/// Sum of the two components, symmetrized, with negative diagonal entries
/// clipped to zero.
pub fn total_variance(hw: DMatrix<f64>, delta: DMatrix<f64>) -> VarianceEstimate {
    let mut total = symmetrize(&(&hw + &delta));
    let mut clipped = false;
    for d in 0..total.nrows() {
        if total[(d, d)] < 0.0 {
            total[(d, d)] = 0.0;
            clipped = true;
        }
    }
    VarianceEstimate {
        total,
        component_hw: hw,
        component_delta: delta,
        method: VarianceMethod::Analytic,
        clipped,
    }
}

/// Source of bootstrap resampling indices.
pub trait ResampleSource: Sync {
    fn indices(&self, replicate: usize, n: usize) -> Vec<usize>;
}

/// Uniform resampling with one ChaCha stream per replicate.
#[derive(Debug, Clone, Copy)]
pub struct SeededResampler {
    pub seed: u64,
}

impl ResampleSource for SeededResampler {
    fn indices(&self, replicate: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64 + 1);
        (0..n).map(|_| rng.random_range(0..n)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub variance: VarianceEstimate,
    pub replicates: Vec<DVector<f64>>,
    pub failed: usize,
}

/// Case-resampling bootstrap: `refit` receives resampled row indices and
/// returns the coefficients of the refitted model. Replicates run in
/// parallel; results are combined in replicate order.
pub fn bootstrap_variance<S, F>(
    source: &S,
    n: usize,
    replicates: usize,
    refit: F,
) -> Result<BootstrapResult>
where
    S: ResampleSource + ?Sized,
    F: Fn(&[usize]) -> Result<DVector<f64>> + Sync,
{
    if replicates < 2 {
        return Err(MidQrError::InvalidInput(
            "at least two bootstrap replicates are required".into(),
        ));
    }
    if n == 0 {
        return Err(MidQrError::EmptyInput);
    }
    let results: Vec<Result<DVector<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| refit(&source.indices(b, n)))
        .collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    let draws: Vec<DVector<f64>> = results.into_iter().filter_map(|r| r.ok()).collect();
    if failed as f64 > MAX_BOOTSTRAP_FAILURE_RATE * replicates as f64 || draws.len() < 2 {
        return Err(MidQrError::BootstrapFailure {
            failed,
            total: replicates,
        });
    }
    let q = draws[0].len();
    let m = draws.len() as f64;
    let mean = draws.iter().fold(DVector::zeros(q), |acc, d| acc + d) / m;
    let mut cov = DMatrix::zeros(q, q);
    for d in &draws {
        let c = d - &mean;
        cov.ger(1.0 / (m - 1.0), &c, &c, 1.0);
    }
    let cov = symmetrize(&cov);
    Ok(BootstrapResult {
        variance: VarianceEstimate {
            component_hw: DMatrix::zeros(q, q),
            component_delta: DMatrix::zeros(q, q),
            total: cov,
            method: VarianceMethod::Bootstrap,
            clipped: false,
        },
        replicates: draws,
        failed,
    })
}

/// Normal-theory intervals `beta_h +/- z_{(1+level)/2} se_h`.
pub fn confidence_intervals(
    beta: &DVector<f64>,
    se: &[f64],
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(MidQrError::ProbabilityDomain(level));
    }
    if se.len() != beta.len() {
        return Err(MidQrError::DimensionMismatch(
            "one standard error per coefficient".into(),
        ));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    Ok(beta
        .iter()
        .zip(se)
        .map(|(b, s)| (b - z * s, b + z * s))
        .collect())
}

/// Asymptotic sandwich `H^{-1} D H^{-1}` of the M-estimator, with `H` the
/// Hessian of the objective at `beta` and `D` the variance of its gradient
/// from the plug-in mid-probability variances, treating distinct rows as
/// independent and pooling rows that share an estimate.
pub fn theorem_sandwich(
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> Result<DMatrix<f64>> {
    let hess = crate::fit::hessian(beta, x, pi, p, h);
    let inv = hess
        .clone()
        .cholesky()
        .ok_or(MidQrError::RankDeficient)?
        .inverse();
    let n = x.nrows() as f64;
    let q = x.ncols();
    let groups = row_groups(x, pi);
    // Each gradient term is -(2/n) x_i b_i h'(eta_i) r_i; the residual
    // r_i = p - G_i varies through the two bracket mid-probabilities.
    let mut pooled: HashMap<(usize, usize), (DVector<f64>, f64)> = HashMap::new();
    for i in 0..x.nrows() {
        let eta = x.row(i).dot(&beta.transpose());
        let y = h.hinv(eta);
        let icdf = InterpolatedMidCdf::from_matrix(pi, i);
        let b = icdf.slope_at(y);
        if b == 0.0 {
            continue;
        }
        let grid = pi.grid();
        let j = grid.partition_point(|z| *z <= y) - 1;
        let gamma = (y - grid[j]) / (grid[j + 1] - grid[j]);
        let scale = 2.0 / n * b * h.d1hinv(eta);
        let xi = x.row(i).transpose();
        for (jj, w) in [(j, 1.0 - gamma), (j + 1, gamma)] {
            let e = pooled
                .entry((groups[i], jj))
                .or_insert_with(|| (DVector::zeros(q), pi.var_row(i)[jj]));
            e.0.axpy(scale * w, &xi, 1.0);
        }
    }
    let mut keys: Vec<_> = pooled.keys().copied().collect();
    keys.sort_unstable();
    let mut d = DMatrix::zeros(q, q);
    for key in keys {
        let (col, var) = &pooled[&key];
        d.ger(*var, col, col, 1.0);
    }
    Ok(symmetrize(&(&inv * d * &inv)))
}
