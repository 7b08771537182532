//! Second estimation step: interpolated conditional mid-CDFs, the admissible
//! range of quantile levels, the closed-form coefficient estimator, and the
//! least-squares objective with its derivatives and a Newton fallback.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MidQrError, Result};
use crate::kernel_cdf::ConditionalMidCdfMatrix;
use crate::mid_distributions::strictly_increasing;
use crate::transform::Transformation;

pub const MAX_ITERATIONS: usize = 500;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const STEP_TOLERANCE: f64 = 1e-10;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const RIDGE_SCALE: f64 = 1e-8;

/// Piecewise-linear interpolant through `(z_j, pi_j)` for one observation,
/// flat outside `[z_1, z_k]`.
#[derive(Debug, Clone, Copy)]
pub struct InterpolatedMidCdf<'a> {
    grid: &'a [f64],
    pi: &'a [f64],
}

/// Segment `[pi_j, pi_{j+1}]` (0-based `segment = j`) holding a level `p`,
/// with `gamma = (p - pi_j) / (pi_{j+1} - pi_j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub segment: usize,
    pub gamma: f64,
}

impl<'a> InterpolatedMidCdf<'a> {
    pub fn new(grid: &'a [f64], pi: &'a [f64]) -> Result<Self> {
        if grid.is_empty() || grid.len() != pi.len() {
            return Err(MidQrError::DimensionMismatch(
                "grid and mid-probabilities must have equal, nonzero length".into(),
            ));
        }
        if !strictly_increasing(grid) || !strictly_increasing(pi) {
            return Err(MidQrError::InvalidInput(
                "grid and mid-probabilities must be strictly increasing".into(),
            ));
        }
        Ok(Self { grid, pi })
    }

    /// Row `i` of a mid-probability matrix (already validated).
    pub fn from_matrix(pi: &'a ConditionalMidCdfMatrix, i: usize) -> Self {
        Self {
            grid: pi.grid(),
            pi: pi.row(i),
        }
    }

    pub fn grid(&self) -> &[f64] {
        self.grid
    }

    pub fn pi(&self) -> &[f64] {
        self.pi
    }

    pub fn k(&self) -> usize {
        self.grid.len()
    }

    /// Slope `b_j` of segment `j`.
    pub fn slope(&self, j: usize) -> f64 {
        (self.pi[j + 1] - self.pi[j]) / (self.grid[j + 1] - self.grid[j])
    }

    pub fn slopes(&self) -> Vec<f64> {
        (0..self.k().saturating_sub(1))
            .map(|j| self.slope(j))
            .collect()
    }

    /// Segment holding `eta` with `z_j <= eta < z_{j+1}`, if any.
    fn segment_of(&self, eta: f64) -> Option<usize> {
        let k = self.k();
        if k < 2 || eta < self.grid[0] || eta >= self.grid[k - 1] || eta.is_nan() {
            return None;
        }
        Some(self.grid.partition_point(|z| *z <= eta) - 1)
    }

    pub fn eval(&self, eta: f64) -> f64 {
        let k = self.k();
        if eta <= self.grid[0] {
            return self.pi[0];
        }
        if eta >= self.grid[k - 1] {
            return self.pi[k - 1];
        }
        let j = self.segment_of(eta).expect("interior point");
        if eta == self.grid[j] {
            return self.pi[j];
        }
        self.pi[j] + self.slope(j) * (eta - self.grid[j])
    }

    /// Derivative of [`eval`](Self::eval); a knot takes the slope of the
    /// segment starting there, and the tails have slope zero.
    pub fn slope_at(&self, eta: f64) -> f64 {
        self.segment_of(eta).map_or(0.0, |j| self.slope(j))
    }

    /// Segment containing `p`. A level equal to a knot value selects the
    /// segment starting at that knot (`gamma = 0`), except at the last knot.
    pub fn locate_bracket(&self, p: f64, row: usize) -> Result<Bracket> {
        let k = self.k();
        let (lo, hi) = (self.pi[0], self.pi[k - 1]);
        if k < 2 || !(lo..=hi).contains(&p) {
            return Err(MidQrError::Bracket { row, p, lo, hi });
        }
        let mut j = self.pi.partition_point(|g| *g <= p) - 1;
        if j == k - 1 {
            j = k - 2;
        }
        let gamma = (p - self.pi[j]) / (self.pi[j + 1] - self.pi[j]);
        Ok(Bracket { segment: j, gamma })
    }

    /// Interpolated mid-quantile `(p - pi_j) / b_j + z_j` on the response
    /// scale.
    pub fn inverse(&self, p: f64, row: usize) -> Result<(Bracket, f64)> {
        let br = self.locate_bracket(p, row)?;
        let j = br.segment;
        let arg = if p == self.pi[j] {
            self.grid[j]
        } else {
            (p - self.pi[j]) / self.slope(j) + self.grid[j]
        };
        Ok((br, arg))
    }
}

/// Levels `p` at which every observation's interpolant can be inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleRange {
    pub lo: f64,
    pub hi: f64,
}

impl AdmissibleRange {
    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }

    /// Closed-interval membership; endpoints count as inside.
    pub fn contains(&self, p: f64) -> bool {
        !self.is_empty() && p >= self.lo && p <= self.hi
    }

    pub fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.lo, self.hi)
    }
}

pub fn admissible_range(pi: &ConditionalMidCdfMatrix) -> AdmissibleRange {
    let k = pi.k();
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..pi.n() {
        let row = pi.row(i);
        lo = lo.max(row[0]);
        hi = hi.min(row[k - 1]);
    }
    AdmissibleRange { lo, hi }
}

/// Ordinary least squares with a cached `(X'X)^{-1}`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    x: DMatrix<f64>,
    xtx_inv: DMatrix<f64>,
}

/// Relative singular-value threshold for declaring a design rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

impl LeastSquares {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (n, q) = x.shape();
        if n == 0 || q == 0 {
            return Err(MidQrError::EmptyInput);
        }
        if n < q || x.iter().any(|v| !v.is_finite()) {
            return Err(MidQrError::RankDeficient);
        }
        let sv = x.clone().svd(false, false).singular_values;
        let max = sv.max();
        if !(max > 0.0) || sv.min() <= RANK_TOLERANCE * max {
            return Err(MidQrError::RankDeficient);
        }
        let xtx = x.transpose() * x;
        let xtx_inv = xtx.cholesky().ok_or(MidQrError::RankDeficient)?.inverse();
        Ok(Self {
            x: x.clone(),
            xtx_inv,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn xtx_inv(&self) -> &DMatrix<f64> {
        &self.xtx_inv
    }

    pub fn solve(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.xtx_inv * (self.x.transpose() * u)
    }

    /// `(X'X)^{-1} x_i`, the sensitivity of the coefficients to `u_i`.
    pub fn influence(&self, i: usize) -> DVector<f64> {
        &self.xtx_inv * self.x.row(i).transpose()
    }
}

/// Output of the closed-form estimator.
#[derive(Debug, Clone)]
pub struct ClosedFormFit {
    pub beta: DVector<f64>,
    /// Transformed interpolated mid-quantiles `u_i`.
    pub u: DVector<f64>,
    /// Untransformed arguments `(p - pi_ij) / b_ij + z_j`.
    pub arguments: Vec<f64>,
    pub brackets: Vec<Bracket>,
}

fn check_level(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(MidQrError::ProbabilityDomain(p))
    }
}

fn check_problem(x: &DMatrix<f64>, pi: &ConditionalMidCdfMatrix, p: f64) -> Result<()> {
    check_level(p)?;
    if x.nrows() != pi.n() {
        return Err(MidQrError::DimensionMismatch(format!(
            "design has {} rows but there are {} mid-probability rows",
            x.nrows(),
            pi.n()
        )));
    }
    if pi.k() < 2 {
        return Err(MidQrError::InvalidInput(
            "the response must take at least two distinct values".into(),
        ));
    }
    Ok(())
}

/// Row-level transformed mid-quantile `u_i = h((p - pi_ij) / b_ij + z_j)`.
/// `None` in the last slot flags an argument outside the domain of `h`.
pub(crate) fn row_target(
    pi: &ConditionalMidCdfMatrix,
    i: usize,
    p: f64,
    h: &Transformation,
) -> Result<(Bracket, f64, Option<f64>)> {
    let (br, arg) = InterpolatedMidCdf::from_matrix(pi, i).inverse(p, i)?;
    Ok((br, arg, h.h(arg)))
}

/// Closed-form estimator `beta = (X'X)^{-1} X' u` for `p` inside the
/// admissible range.
pub fn closed_form_fit(
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> Result<ClosedFormFit> {
    check_problem(x, pi, p)?;
    let range = admissible_range(pi);
    if !range.contains(p) {
        return Err(MidQrError::NotAdmissible {
            p,
            lo: range.lo,
            hi: range.hi,
        });
    }
    let ls = LeastSquares::new(x)?;
    closed_form_with(&ls, pi, p, h)
}

/// Closed-form fit reusing a factorized design.
pub fn closed_form_with(
    ls: &LeastSquares,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> Result<ClosedFormFit> {
    check_problem(ls.x(), pi, p)?;
    let n = pi.n();
    let mut u = DVector::zeros(n);
    let mut arguments = Vec::with_capacity(n);
    let mut brackets = Vec::with_capacity(n);
    let mut bad = Vec::new();
    for i in 0..n {
        let (br, arg, ui) = row_target(pi, i, p, h)?;
        match ui {
            Some(v) => u[i] = v,
            None => bad.push(i),
        }
        arguments.push(arg);
        brackets.push(br);
    }
    if !bad.is_empty() {
        return Err(MidQrError::TransformDomain { rows: bad });
    }
    Ok(ClosedFormFit {
        beta: ls.solve(&u),
        u,
        arguments,
        brackets,
    })
}

/// Per-observation quantities of the objective at one `beta`.
struct RowTerms {
    residual: f64,
    slope: f64,
    d1: f64,
    d2: f64,
}

fn row_terms(
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> Vec<RowTerms> {
    (0..x.nrows())
        .map(|i| {
            let eta = x.row(i).dot(&beta.transpose());
            let y = h.hinv(eta);
            let icdf = InterpolatedMidCdf::from_matrix(pi, i);
            let slope = icdf.slope_at(y);
            RowTerms {
                residual: p - icdf.eval(y),
                slope,
                d1: h.d1hinv(eta),
                d2: h.d2hinv(eta),
            }
        })
        .collect()
}

/// `psi(beta) = (1/n) sum_i (p - G_i(h^{-1}(x_i' beta)))^2`.
pub fn objective(
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> f64 {
    let terms = row_terms(beta, x, pi, p, h);
    terms.iter().map(|t| t.residual * t.residual).sum::<f64>() / x.nrows() as f64
}

pub fn gradient(
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> DVector<f64> {
    let n = x.nrows() as f64;
    let terms = row_terms(beta, x, pi, p, h);
    let mut g = DVector::zeros(x.ncols());
    for (i, t) in terms.iter().enumerate() {
        if t.slope == 0.0 {
            continue;
        }
        let w = -2.0 / n * t.residual * t.slope * t.d1;
        g.axpy(w, &x.row(i).transpose(), 1.0);
    }
    g
}

/// Second derivative `(2/n) sum_i x_i x_i' [(b_i h'_i)^2 - r_i b_i h''_i]`,
/// where `h'` and `h''` are derivatives of the inverse link.
pub fn hessian(
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let q = x.ncols();
    let terms = row_terms(beta, x, pi, p, h);
    let mut hess = DMatrix::zeros(q, q);
    for (i, t) in terms.iter().enumerate() {
        if t.slope == 0.0 {
            continue;
        }
        let bd = t.slope * t.d1;
        let w = 2.0 / n * (bd * bd - t.residual * t.slope * t.d2);
        let xi = x.row(i).transpose();
        hess.ger(w, &xi, &xi, 1.0);
    }
    hess
}

/// How the coefficients at a level were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    ClosedForm,
    Numerical,
}

impl FitMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ClosedForm => "closed-form",
            Self::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Newton failed and coordinate-wise golden-section search was used.
    pub used_fallback: bool,
    /// The Hessian needed a ridge to be positive definite.
    pub ridge_used: bool,
    /// `p` lies beyond every observation's range: the minimizers form a
    /// plateau and the returned coefficients are its upper edge.
    pub plateau: bool,
    /// The minimum sits where some fitted values equal a knot, so the
    /// objective is not differentiable there and `gradient_norm` is a
    /// one-sided value.
    #[serde(default)]
    pub on_kink: bool,
}

#[derive(Debug, Clone)]
pub struct NumericalFit {
    pub beta: DVector<f64>,
    pub diagnostics: FitDiagnostics,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Coefficients with `X beta = c 1`, if the constant lies in the column
/// space of `X`.
fn constant_fit(x: &DMatrix<f64>, c: f64) -> Option<DVector<f64>> {
    let ls = LeastSquares::new(x).ok()?;
    let target = DVector::from_element(x.nrows(), c);
    let beta = ls.solve(&target);
    let resid = inf_norm(&(x * &beta - &target));
    (resid <= 1e-8 * (1.0 + c.abs())).then_some(beta)
}

/// Starting point: the closed-form fit at the nearest admissible level or,
/// failing that, least squares on each row's inverse at its clamped level.
fn default_start(
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> DVector<f64> {
    let range = admissible_range(pi);
    if !range.is_empty() {
        if let Ok(fit) = closed_form_fit(x, pi, range.clamp(p), h) {
            return fit.beta;
        }
    }
    let Ok(ls) = LeastSquares::new(x) else {
        return DVector::zeros(x.ncols());
    };
    let k = pi.k();
    let grid = pi.grid();
    let u: Vec<f64> = (0..pi.n())
        .map(|i| {
            let row = pi.row(i);
            let pc = p.clamp(row[0], row[k - 1]);
            let arg = InterpolatedMidCdf::from_matrix(pi, i)
                .inverse(pc, i)
                .map(|(_, a)| a)
                .unwrap_or(grid[0]);
            let span = grid[k - 1] - grid[0];
            // keep the argument inside the open domain of h where possible
            h.h(arg)
                .or_else(|| h.h(arg + 1e-3 * span))
                .or_else(|| h.h(arg - 1e-3 * span))
                .unwrap_or(0.0)
        })
        .collect();
    ls.solve(&DVector::from_vec(u))
}

/// Rows sitting in a flat tail of their mid-CDF while their residual asks
/// to move back inside the grid. Such rows carry no gradient, so a step
/// that strands them there ends in a spurious stationary point.
fn trapped_rows(
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> usize {
    let grid = pi.grid();
    let (z1, zk) = (grid[0], grid[grid.len() - 1]);
    let k = pi.k();
    (0..x.nrows())
        .filter(|&i| {
            let y = h.hinv(x.row(i).dot(&beta.transpose()));
            let row = pi.row(i);
            (y >= zk && p < row[k - 1]) || (y < z1 && p > row[0])
        })
        .count()
}

/// Largest change of any linear predictor in one Newton step: half the
/// grid's span on the link scale, or 2 when that span is unbounded.
fn step_radius(grid: &[f64], h: &Transformation) -> f64 {
    match (h.h(grid[0]), h.h(grid[grid.len() - 1])) {
        (Some(a), Some(b)) if b > a => 0.5 * (b - a),
        _ => 2.0,
    }
}

/// Minimizes the objective by damped Newton with Armijo backtracking,
/// falling back to coordinate-wise golden-section search.
pub fn numerical_fit(
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
    init: Option<&DVector<f64>>,
) -> Result<NumericalFit> {
    check_problem(x, pi, p)?;
    let q = x.ncols();
    if let Some(b) = init {
        if b.len() != q {
            return Err(MidQrError::DimensionMismatch(format!(
                "initial value has length {} but the design has {q} columns",
                b.len()
            )));
        }
    }

    // Level beyond every row: the objective is flat for all X beta on one
    // side of the grid.
    let k = pi.k();
    let below = (0..pi.n()).all(|i| p <= pi.row(i)[0]);
    let above = (0..pi.n()).all(|i| p >= pi.row(i)[k - 1]);
    if below || above {
        let edge = if below {
            pi.grid()[0]
        } else {
            pi.grid()[k - 1]
        };
        if let Some(beta) = h.h(edge).and_then(|c| constant_fit(x, c)) {
            let obj = objective(&beta, x, pi, p, h);
            let gn = inf_norm(&gradient(&beta, x, pi, p, h));
            return Ok(NumericalFit {
                beta,
                diagnostics: FitDiagnostics {
                    iterations: 0,
                    objective: obj,
                    gradient_norm: gn,
                    converged: true,
                    used_fallback: false,
                    ridge_used: false,
                    plateau: true,
                    on_kink: false,
                },
            });
        }
    }

    let radius = step_radius(pi.grid(), h);
    let mut beta = init.cloned().unwrap_or_else(|| default_start(x, pi, p, h));
    let mut value = objective(&beta, x, pi, p, h);
    let mut ridge_used = false;
    let mut iterations = 0;
    let mut newton_failed = false;
    let mut converged = false;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let g = gradient(&beta, x, pi, p, h);
        let gnorm = inf_norm(&g);
        if value == 0.0 {
            converged = true;
            break;
        }
        let hess = hessian(&beta, x, pi, p, h);
        let mut chol = hess.clone().cholesky();
        if chol.is_none() {
            ridge_used = true;
            let tr = hess.trace().abs();
            let mut ridge = if tr > 0.0 {
                RIDGE_SCALE * tr / q as f64
            } else {
                RIDGE_SCALE
            };
            for _ in 0..30 {
                let mut shifted = hess.clone();
                for d in 0..q {
                    shifted[(d, d)] += ridge;
                }
                chol = shifted.cholesky();
                if chol.is_some() {
                    break;
                }
                ridge *= 10.0;
            }
        }
        let mut direction = match chol {
            Some(c) => -c.solve(&g),
            None => -g.clone(),
        };
        // Trust region on the linear predictor: a long step through an
        // indefinite region can land where the link saturates and the
        // gradient vanishes away from any minimum.
        let reach = inf_norm(&(x * &direction));
        if reach > radius {
            direction *= radius / reach;
        }
        let slope = g.dot(&direction);
        if slope >= 0.0 || !slope.is_finite() {
            if gnorm <= GRADIENT_TOLERANCE {
                converged = true;
            } else {
                newton_failed = true;
            }
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        let trapped_now = trapped_rows(&beta, x, pi, p, h);
        for _ in 0..MAX_HALVINGS {
            let trial = &beta + &direction * t;
            let tv = objective(&trial, x, pi, p, h);
            if tv <= value + ARMIJO_C * t * slope
                && trapped_rows(&trial, x, pi, p, h) <= trapped_now
            {
                accepted = Some((trial, tv));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, tv)) => {
                let step = inf_norm(&(&trial - &beta));
                beta = trial;
                value = tv;
                let gn = inf_norm(&gradient(&beta, x, pi, p, h));
                if gn <= GRADIENT_TOLERANCE && step <= STEP_TOLERANCE {
                    converged = true;
                    break;
                }
                if gn <= GRADIENT_TOLERANCE && value == 0.0 {
                    converged = true;
                    break;
                }
                if step <= STEP_TOLERANCE * (1.0 + inf_norm(&beta)) {
                    // Stalled without a vanishing gradient: typically a kink.
                    newton_failed = true;
                    break;
                }
            }
            None => {
                if gnorm <= GRADIENT_TOLERANCE {
                    converged = true;
                } else {
                    newton_failed = true;
                }
                break;
            }
        }
    }

    let mut on_kink = false;
    if !converged {
        if let Some((b, v, its)) = kink_polish(&beta, value, x, pi, p, h) {
            beta = b;
            value = v;
            iterations += its;
            converged = true;
            on_kink = true;
        }
    }

    let mut used_fallback = false;
    if !converged && (newton_failed || iterations >= MAX_ITERATIONS) {
        used_fallback = true;
        let remaining = MAX_ITERATIONS.saturating_sub(iterations).max(50);
        let (b, v, sweeps) = golden_section_descent(&beta, value, remaining, x, pi, p, h);
        beta = b;
        value = v;
        iterations += sweeps;
        let gn = inf_norm(&gradient(&beta, x, pi, p, h));
        converged = gn <= GRADIENT_TOLERANCE || value == 0.0;
        if !converged {
            if let Some((b, v, its)) = kink_polish(&beta, value, x, pi, p, h) {
                beta = b;
                value = v;
                iterations += its;
                converged = true;
                on_kink = true;
            }
        }
    }

    let gradient_norm = inf_norm(&gradient(&beta, x, pi, p, h));
    if !converged {
        return Err(MidQrError::NonConvergence {
            iterations,
            objective: value,
            gradient_norm,
            beta: beta.iter().copied().collect(),
        });
    }
    Ok(NumericalFit {
        beta,
        diagnostics: FitDiagnostics {
            iterations,
            objective: value,
            gradient_norm,
            converged,
            used_fallback,
            ridge_used,
            plateau: below || above,
            on_kink,
        },
    })
}

/// Relative distance below which a fitted value counts as sitting on a knot.
const KINK_TOLERANCE: f64 = 1e-6;

/// Minimizes on the manifold where the rows currently at a knot stay there,
/// then checks that leaving the manifold in any constrained direction does
/// not lower the objective. Returns `None` when no row is at a knot or the
/// point is not a local minimum.
fn kink_polish(
    start: &DVector<f64>,
    start_value: f64,
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> Option<(DVector<f64>, f64, usize)> {
    let knots: Vec<f64> = pi.grid().iter().filter_map(|&z| h.h(z)).collect();
    let lp = x * start;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, &eta) in lp.iter().enumerate() {
        let nearest = knots
            .iter()
            .copied()
            .min_by(|a, b| (a - eta).abs().total_cmp(&(b - eta).abs()))?;
        if (nearest - eta).abs() <= KINK_TOLERANCE * (1.0 + nearest.abs()) {
            rows.push(i);
            targets.push(nearest);
        }
    }
    if rows.is_empty() {
        return None;
    }
    let q = x.ncols();
    let a = x.select_rows(&rows);
    let svd = a.clone().svd(true, true);
    let v_t = svd.v_t.as_ref()?;
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOLERANCE * smax)
        .count();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    // Rows of v_t beyond the rank span the null space of the active rows.
    let range = DMatrix::from_fn(q, rank, |r, c| v_t[(order[c], r)]);
    let null = {
        let proj = DMatrix::<f64>::identity(q, q) - &range * range.transpose();
        let s = proj.svd(true, false);
        let u = s.u?;
        let mut idx: Vec<usize> = (0..q).collect();
        idx.sort_by(|&i, &j| s.singular_values[j].total_cmp(&s.singular_values[i]));
        DMatrix::from_fn(q, q - rank, |r, c| u[(r, idx[c])])
    };

    // Move onto the manifold exactly.
    let t = DVector::from_vec(targets);
    let correction = svd.solve(&(&a * start - &t), RANK_TOLERANCE * smax).ok()?;
    let mut beta = start - correction;
    let mut value = objective(&beta, x, pi, p, h);
    let mut iterations = 0;
    if null.ncols() > 0 {
        while iterations < MAX_ITERATIONS {
            iterations += 1;
            let g = null.transpose() * gradient(&beta, x, pi, p, h);
            if inf_norm(&g) <= GRADIENT_TOLERANCE {
                break;
            }
            let mut hr = null.transpose() * hessian(&beta, x, pi, p, h) * &null;
            let ridge = RIDGE_SCALE * hr.trace().abs().max(1.0);
            let mut chol = hr.clone().cholesky();
            let mut shift = ridge;
            while chol.is_none() && shift < 1e12 {
                for d in 0..hr.nrows() {
                    hr[(d, d)] += shift;
                }
                chol = hr.clone().cholesky();
                shift *= 10.0;
            }
            let dir = &null
                * match chol {
                    Some(c) => -c.solve(&g),
                    None => -g.clone(),
                };
            let slope =
                (null.transpose() * gradient(&beta, x, pi, p, h)).dot(&(null.transpose() * &dir));
            let mut step = 1.0;
            let mut moved = false;
            for _ in 0..MAX_HALVINGS {
                let trial = &beta + &dir * step;
                let tv = objective(&trial, x, pi, p, h);
                if tv <= value + ARMIJO_C * step * slope {
                    beta = trial;
                    value = tv;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                return None;
            }
        }
        let g = null.transpose() * gradient(&beta, x, pi, p, h);
        if inf_norm(&g) > GRADIENT_TOLERANCE {
            return None;
        }
    }
    if value > start_value * (1.0 + 1e-12) + 1e-300 {
        return None;
    }

    // Local-minimum check across the kink: every constrained direction and
    // its negative must not decrease the objective.
    let delta = 1e-6 * (1.0 + inf_norm(&beta));
    for c in 0..range.ncols() {
        let v = range.column(c).into_owned();
        for sign in [1.0, -1.0] {
            let trial = &beta + &v * (sign * delta);
            if objective(&trial, x, pi, p, h) < value * (1.0 - 1e-12) {
                return None;
            }
        }
    }
    Some((beta, value, iterations))
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[allow(clippy::too_many_arguments)]
fn golden_section_descent(
    start: &DVector<f64>,
    start_value: f64,
    max_sweeps: usize,
    x: &DMatrix<f64>,
    pi: &ConditionalMidCdfMatrix,
    p: f64,
    h: &Transformation,
) -> (DVector<f64>, f64, usize) {
    let mut beta = start.clone();
    let mut value = start_value;
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let before = value;
        for c in 0..beta.len() {
            let width = beta[c].abs().max(1.0);
            let f = |t: f64| {
                let mut b = beta.clone();
                b[c] = t;
                objective(&b, x, pi, p, h)
            };
            let (mut a, mut b) = (beta[c] - width, beta[c] + width);
            let mut x1 = b - GOLDEN * (b - a);
            let mut x2 = a + GOLDEN * (b - a);
            let (mut f1, mut f2) = (f(x1), f(x2));
            for _ in 0..100 {
                if f1 <= f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - GOLDEN * (b - a);
                    f1 = f(x1);
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + GOLDEN * (b - a);
                    f2 = f(x2);
                }
            }
            let t = 0.5 * (a + b);
            let ft = f(t);
            if ft < value {
                beta[c] = t;
                value = ft;
            }
        }
        if before - value <= 1e-16 * before.max(1e-300) {
            break;
        }
    }
    (beta, value, sweeps)
}

/// Linear predictor `X beta`.
pub fn linear_predictor(x: &DMatrix<f64>, beta: &DVector<f64>) -> DVector<f64> {
    x * beta
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn matrix(rows: &[&[f64]], grid: &[f64]) -> ConditionalMidCdfMatrix {
        let pi: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let var = vec![0.0; pi.len()];
        ConditionalMidCdfMatrix::from_rows(grid.to_vec(), pi, var).unwrap()
    }

    fn ones(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    const ROW: [f64; 3] = [0.25, 0.625, 0.875];
    const GRID: [f64; 3] = [1.0, 2.0, 3.0];

    #[test]
    fn admissible_range_is_componentwise() {
        let m = matrix(&[&[0.1, 0.5, 0.9], &[0.2, 0.6, 0.8]], &GRID);
        let r = admissible_range(&m);
        assert_eq!((r.lo, r.hi), (0.2, 0.8));
        assert!(!r.is_empty() && r.contains(0.2) && r.contains(0.8) && !r.contains(0.81));
        let m = matrix(&[&ROW, &ROW], &GRID);
        assert_eq!(
            admissible_range(&m),
            AdmissibleRange {
                lo: 0.25,
                hi: 0.875
            }
        );
        let m = matrix(&[&[0.1, 0.3], &[0.5, 0.9]], &[0.0, 1.0]);
        assert!(admissible_range(&m).is_empty());
    }

    #[test]
    fn interpolation() {
        let icdf = InterpolatedMidCdf::new(&GRID, &ROW).unwrap();
        for j in 0..3 {
            assert_eq!(icdf.eval(GRID[j]), ROW[j]);
        }
        assert_abs_diff_eq!(icdf.eval(1.5), (ROW[0] + ROW[1]) / 2.0, epsilon = 1e-15);
        assert_eq!(icdf.eval(103.0), 0.875);
        assert_eq!(icdf.eval(-5.0), 0.25);
        assert_eq!(icdf.slope_at(-5.0), 0.0);
        assert_eq!(icdf.slope_at(1.0), 0.375);
        assert_eq!(icdf.slope_at(2.0), 0.25);
        assert_eq!(icdf.slope_at(3.0), 0.0);
        assert!(InterpolatedMidCdf::new(&GRID, &[0.2, 0.2, 0.9]).is_err());
    }

    #[test]
    fn bracket_conventions() {
        let icdf = InterpolatedMidCdf::new(&GRID, &ROW).unwrap();
        assert_eq!(icdf.locate_bracket(0.5, 0).unwrap().segment, 0);
        let knot = icdf.locate_bracket(0.625, 0).unwrap();
        assert_eq!((knot.segment, knot.gamma), (1, 0.0));
        let top = icdf.locate_bracket(0.875, 0).unwrap();
        assert_eq!((top.segment, top.gamma), (1, 1.0));
        assert_eq!(
            icdf.locate_bracket(0.1, 4),
            Err(MidQrError::Bracket {
                row: 4,
                p: 0.1,
                lo: 0.25,
                hi: 0.875
            })
        );
    }

    #[test]
    fn closed_form_single_row() {
        let m = matrix(&[&ROW], &GRID);
        let fit = closed_form_fit(&ones(1), &m, 0.5, &Transformation::Identity).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 5.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn closed_form_identical_rows_is_mean() {
        let m = matrix(&[&ROW, &ROW, &ROW], &GRID);
        let fit = closed_form_fit(&ones(3), &m, 0.7, &Transformation::Identity).unwrap();
        let mean = fit.u.mean();
        assert_abs_diff_eq!(fit.beta[0], mean, epsilon = 1e-14);
        assert_abs_diff_eq!(
            objective(&fit.beta, &ones(3), &m, 0.7, &Transformation::Identity),
            0.0,
            epsilon = 1e-20
        );
    }

    #[test]
    fn bernoulli_cells_recover_mean() {
        // cell means 0.3 and 0.8
        let (mu0, mu1) = (0.3, 0.8);
        let r0 = [0.5 * (1.0 - mu0), 1.0 - 0.5 * mu0];
        let r1 = [0.5 * (1.0 - mu1), 1.0 - 0.5 * mu1];
        let m = matrix(&[&r0, &r0, &r1], &[0.0, 1.0]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let fit = closed_form_fit(&x, &m, 0.5, &Transformation::Identity).unwrap();
        assert_abs_diff_eq!(fit.beta[0], mu0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.beta[0] + fit.beta[1], mu1, epsilon = 1e-14);
        let logit = closed_form_fit(&x, &m, 0.5, &Transformation::Logit).unwrap();
        assert_abs_diff_eq!(
            Transformation::Logit.hinv(logit.beta[0]),
            mu0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn closed_form_errors() {
        let m = matrix(&[&ROW, &[0.1, 0.5, 0.9]], &GRID);
        assert!(matches!(
            closed_form_fit(&ones(2), &m, 0.2, &Transformation::Identity),
            Err(MidQrError::NotAdmissible { .. })
        ));
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(
            closed_form_fit(&x, &m, 0.5, &Transformation::Identity).unwrap_err(),
            MidQrError::RankDeficient
        );
        let m0 = matrix(&[&ROW, &ROW], &[0.0, 1.0, 2.0]);
        assert_eq!(
            closed_form_fit(&ones(2), &m0, 0.25, &Transformation::log()).unwrap_err(),
            MidQrError::TransformDomain { rows: vec![0, 1] }
        );
        assert_eq!(
            closed_form_fit(&ones(2), &m0, 1.0, &Transformation::Identity).unwrap_err(),
            MidQrError::ProbabilityDomain(1.0)
        );
    }

    #[test]
    fn minimum_on_a_knot_is_certified() {
        // Left of 2 the objective falls, right of it it rises: the minimum
        // is the kink itself and the gradient never vanishes.
        let m = matrix(&[&[0.05, 0.15, 0.2], &[0.3, 0.31, 0.9]], &GRID);
        let fit = numerical_fit(&ones(2), &m, 0.2, &Transformation::Identity, None).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 2.0, epsilon = 1e-9);
        assert!(fit.diagnostics.on_kink);
        assert!(fit.diagnostics.gradient_norm > 1e-3);
    }

    #[test]
    fn objective_on_flat_tail() {
        let m = matrix(&[&ROW, &[0.1, 0.5, 0.9]], &GRID);
        let beta = DVector::from_element(1, 50.0);
        let v = objective(&beta, &ones(2), &m, 0.5, &Transformation::Identity);
        assert_abs_diff_eq!(
            v,
            ((0.5f64 - 0.875).powi(2) + 0.4f64.powi(2)) / 2.0,
            epsilon = 1e-15
        );
        assert_eq!(
            hessian(&beta, &ones(2), &m, 0.5, &Transformation::Identity)[(0, 0)],
            0.0
        );
        assert_eq!(
            gradient(&beta, &ones(2), &m, 0.5, &Transformation::Identity)[0],
            0.0
        );
    }

    #[test]
    fn single_observation_gradient() {
        let m = matrix(&[&ROW], &GRID);
        let beta = DVector::from_element(1, 1.2);
        let g = gradient(&beta, &ones(1), &m, 0.5, &Transformation::Identity);
        let resid = 0.5 - (0.25 + 0.375 * 0.2);
        assert_abs_diff_eq!(g[0], -2.0 * resid * 0.375, epsilon = 1e-15);
    }

    #[test]
    fn plateau_returns_upper_edge() {
        let m = matrix(&[&ROW, &[0.3, 0.5, 0.9]], &GRID);
        let fit = numerical_fit(&ones(2), &m, 0.2, &Transformation::Identity, None).unwrap();
        assert!(fit.diagnostics.plateau);
        assert_abs_diff_eq!(fit.beta[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn numerical_matches_closed_form() {
        let m = matrix(&[&ROW, &[0.1, 0.5, 0.9], &[0.2, 0.45, 0.7]], &GRID);
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let cf = closed_form_fit(&x, &m, 0.55, &Transformation::Identity).unwrap();
        let start = &cf.beta + DVector::from_vec(vec![0.3, -0.2, 0.1]);
        let nf = numerical_fit(&x, &m, 0.55, &Transformation::Identity, Some(&start)).unwrap();
        assert!(
            inf_norm(&(&nf.beta - &cf.beta)) <= 1e-9,
            "{} vs {}",
            nf.beta,
            cf.beta
        );
    }

    #[test]
    fn saturating_link_start_is_not_a_minimum() {
        // Started where the logistic curve is nearly flat, an unbounded
        // Newton step used to run off to eta of about -42.
        let m = matrix(&[&[0.3, 0.8]], &[0.0, 1.0]);
        let h = Transformation::Logit;
        let nf = numerical_fit(
            &ones(1),
            &m,
            0.46,
            &h,
            Some(&DVector::from_element(1, 2.237)),
        )
        .unwrap();
        assert_abs_diff_eq!(nf.beta[0], h.h(0.32).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn step_does_not_strand_rows_in_the_tail() {
        // Negative curvature at the start sends the raw step beyond the last
        // knot, where the row has no gradient but the wrong residual sign.
        let m = matrix(&[&[0.1, 0.15, 0.2, 0.9]], &[1.0, 2.0, 3.0, 4.0]);
        let h = Transformation::log();
        let start = DVector::from_element(1, 2.5f64.ln());
        let nf = numerical_fit(&ones(1), &m, 0.8, &h, Some(&start)).unwrap();
        assert_abs_diff_eq!(nf.beta[0], (3.0 + 0.6 / 0.7f64).ln(), epsilon = 1e-9);
        assert!(nf.diagnostics.objective < 1e-20);
    }
}
