//! Marginal mid-distribution and mid-quantile functions for discrete data.
//!
//! The mid-CDF of a discrete variable is `G(y) = P(Y <= y) - 0.5 P(Y = y)`.
//! Its piecewise-linear inverse through the points `(G(y_j), y_j)`, held
//! flat outside `[G(y_1), G(y_k)]`, is the mid-quantile function. The sample
//! versions below are used directly by the CLI, and the population versions
//! serve as oracles for the simulation harness and the tests.

use std::cmp::Ordering;

use statrs::distribution::{Discrete, Poisson};

use crate::error::{MidQrError, Result};

/// Upper-tail mass discarded when an infinite support is truncated.
pub const TAIL_MASS: f64 = 1e-10;

/// Sorted distinct values with their occurrence counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSample {
    values: Vec<f64>,
    counts: Vec<usize>,
    n: usize,
}

impl DiscreteSample {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }
}

/// Tabulates a raw sample into sorted distinct values and counts.
pub fn tabulate(raw: &[f64]) -> Result<DiscreteSample> {
    if raw.is_empty() {
        return Err(MidQrError::EmptyInput);
    }
    if let Some(pos) = raw.iter().position(|v| !v.is_finite()) {
        return Err(MidQrError::InvalidInput(format!(
            "value at position {pos} is not a finite number"
        )));
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut values = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for v in sorted {
        match values.last() {
            Some(&last) if last == v => *counts.last_mut().unwrap() += 1,
            _ => {
                values.push(v);
                counts.push(1);
            }
        }
    }
    Ok(DiscreteSample {
        values,
        counts,
        n: raw.len(),
    })
}

/// Sample CDF and mid-CDF evaluated on the distinct values.
#[derive(Debug, Clone, PartialEq)]
pub struct MidCdf {
    values: Vec<f64>,
    cdf: Vec<f64>,
    midprobs: Vec<f64>,
}

impl MidCdf {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    pub fn midprobs(&self) -> &[f64] {
        &self.midprobs
    }

    /// Builds a mid-CDF from a value grid and its mid-probabilities.
    pub fn from_parts(values: Vec<f64>, midprobs: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(MidQrError::EmptyInput);
        }
        if values.len() != midprobs.len() {
            return Err(MidQrError::DimensionMismatch(format!(
                "{} values but {} mid-probabilities",
                values.len(),
                midprobs.len()
            )));
        }
        if !strictly_increasing(&values) || !strictly_increasing(&midprobs) {
            return Err(MidQrError::InvalidInput(
                "values and mid-probabilities must be strictly increasing".into(),
            ));
        }
        // The CDF is recovered from G(z_j) = (F_{j-1} + F_j) / 2.
        let mut cdf = Vec::with_capacity(values.len());
        let mut prev = 0.0;
        for &g in &midprobs {
            let f = 2.0 * g - prev;
            cdf.push(f);
            prev = f;
        }
        Ok(Self {
            values,
            cdf,
            midprobs,
        })
    }
}

/// Computes `F(z_j)` and `G(z_j) = F(z_j) - 0.5 (F(z_j) - F(z_{j-1}))`.
///
/// The cumulative counts are divided by `n` once, so `F(z_k) = 1` exactly.
pub fn mid_cdf(sample: &DiscreteSample) -> MidCdf {
    let n = sample.n as f64;
    let mut cum = 0usize;
    let cdf: Vec<f64> = sample
        .counts
        .iter()
        .map(|&c| {
            cum += c;
            cum as f64 / n
        })
        .collect();
    let midprobs = midprobs_from_cdf(&cdf);
    MidCdf {
        values: sample.values.clone(),
        cdf,
        midprobs,
    }
}

/// Mid-probabilities from a nondecreasing CDF row, with `G(z_1) = 0.5 F(z_1)`.
pub(crate) fn midprobs_from_cdf(cdf: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    cdf.iter()
        .map(|&f| {
            let g = f - 0.5 * (f - prev);
            prev = f;
            g
        })
        .collect()
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(MidQrError::ProbabilityDomain(p))
    }
}

/// Piecewise-linear inverse of `(midprobs, values)`, flat outside the knots.
///
/// Knot hits return the knot value exactly.
pub(crate) fn interpolate_inverse(midprobs: &[f64], values: &[f64], p: f64) -> f64 {
    let k = values.len();
    if p <= midprobs[0] {
        return values[0];
    }
    if p >= midprobs[k - 1] {
        return values[k - 1];
    }
    // midprobs[j] <= p < midprobs[j + 1]
    let j = midprobs.partition_point(|&g| g <= p) - 1;
    if midprobs[j] == p {
        return values[j];
    }
    let gap = midprobs[j + 1] - midprobs[j];
    if gap <= 0.0 {
        return values[j];
    }
    let gamma = (p - midprobs[j]) / gap;
    (1.0 - gamma) * values[j] + gamma * values[j + 1]
}

/// Sample mid-quantile at level `p`.
pub fn mid_quantile(midcdf: &MidCdf, p: f64) -> Result<f64> {
    check_probability(p)?;
    Ok(interpolate_inverse(&midcdf.midprobs, &midcdf.values, p))
}

/// A probability mass function on a finite (possibly truncated) support.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl Pmf {
    /// Builds a pmf from values and masses; tied values are merged and the
    /// support is sorted.
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(MidQrError::EmptyInput);
        }
        if support.len() != probs.len() {
            return Err(MidQrError::DimensionMismatch(format!(
                "{} support points but {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite())
            || support.iter().any(|v| !v.is_finite())
        {
            return Err(MidQrError::InvalidInput(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MidQrError::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self::merged(support, probs))
    }

    fn merged(support: Vec<f64>, probs: Vec<f64>) -> Self {
        let mut pairs: Vec<(f64, f64)> = support.into_iter().zip(probs).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut support = Vec::with_capacity(pairs.len());
        let mut probs: Vec<f64> = Vec::with_capacity(pairs.len());
        for (v, p) in pairs {
            match support.last() {
                Some(&last) if last == v => *probs.last_mut().unwrap() += p,
                _ => {
                    support.push(v);
                    probs.push(p);
                }
            }
        }
        Self { support, probs }
    }

    /// Equally likely outcomes; repeated values accumulate mass.
    pub fn uniform_over(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(MidQrError::EmptyInput);
        }
        let m = values.len() as f64;
        let probs = vec![1.0 / m; values.len()];
        Ok(Self::merged(values, probs))
    }

    /// Discrete uniform on the integers `a..=b`.
    pub fn discrete_uniform(a: i64, b: i64) -> Result<Self> {
        if b < a {
            return Err(MidQrError::InvalidInput(format!("empty range {a}..={b}")));
        }
        Self::uniform_over((a..=b).map(|v| v as f64).collect())
    }

    pub fn bernoulli(mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(MidQrError::InvalidInput(format!(
                "Bernoulli mean {mu} outside [0, 1]"
            )));
        }
        Ok(Self {
            support: vec![0.0, 1.0],
            probs: vec![1.0 - mu, mu],
        })
    }

    /// Poisson pmf truncated once the cumulative mass reaches `1 - TAIL_MASS`,
    /// then renormalized.
    pub fn poisson(mu: f64) -> Result<Self> {
        let dist = Poisson::new(mu)
            .map_err(|e| MidQrError::InvalidInput(format!("Poisson mean {mu}: {e}")))?;
        let mut support = Vec::new();
        let mut probs = Vec::new();
        let mut cum = 0.0;
        let mut k = 0u64;
        while cum < 1.0 - TAIL_MASS {
            let pk = dist.pmf(k);
            support.push(k as f64);
            probs.push(pk);
            cum += pk;
            k += 1;
            if k > 100_000_000 {
                break;
            }
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(Self { support, probs })
    }

    /// Empirical pmf of a tabulated sample.
    pub fn from_sample(sample: &DiscreteSample) -> Self {
        let n = sample.n as f64;
        Self {
            support: sample.values.clone(),
            probs: sample.counts.iter().map(|&c| c as f64 / n).collect(),
        }
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Mid-probabilities `pi_j = sum_{i<j} p_i + p_j / 2` over the points of
    /// positive mass.
    pub fn midprobs(&self) -> (Vec<f64>, Vec<f64>) {
        let mut values = Vec::with_capacity(self.support.len());
        let mut mids = Vec::with_capacity(self.support.len());
        let mut cum = 0.0;
        for (&v, &p) in self.support.iter().zip(&self.probs) {
            if p > 0.0 {
                values.push(v);
                mids.push(cum + 0.5 * p);
                cum += p;
            }
        }
        (values, mids)
    }
}

/// Population mid-quantile `H_Y(p)`.
pub fn population_mid_quantile(pmf: &Pmf, p: f64) -> Result<f64> {
    check_probability(p)?;
    let (values, mids) = pmf.midprobs();
    if values.is_empty() {
        return Err(MidQrError::InvalidInput("pmf has no positive mass".into()));
    }
    Ok(interpolate_inverse(&mids, &values, p))
}

pub(crate) fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2)
        .all(|w| w[0].partial_cmp(&w[1]) == Some(Ordering::Less))
}
