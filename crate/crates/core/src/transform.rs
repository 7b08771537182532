use serde::{Deserialize, Serialize};

use crate::error::{MidQrError, Result};

/// Shift `c` in `h(y) = ln(y + c)` when a log link is requested by name,
/// so that zero counts stay inside the domain.
pub const DEFAULT_LOG_OFFSET: f64 = 1.0;

/// Monotone link `h` under which the conditional mid-quantile is linear in
/// the covariates, with its inverse and the inverse's derivatives in the
/// linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Transformation {
    Identity,
    /// `h(y) = a + b y`, `b > 0`.
    Linear {
        a: f64,
        b: f64,
    },
    /// `h(y) = ln(y + offset)`.
    Log {
        offset: f64,
    },
    Logit,
}

impl Transformation {
    /// Unshifted log link, `h(y) = ln y`.
    pub fn log() -> Self {
        Self::Log { offset: 0.0 }
    }

    /// `h(y) = ln(y + offset)`.
    pub fn log_shifted(offset: f64) -> Result<Self> {
        if !offset.is_finite() {
            return Err(MidQrError::InvalidInput("log offset must be finite".into()));
        }
        Ok(Self::Log { offset })
    }

    pub fn linear(a: f64, b: f64) -> Result<Self> {
        if !(b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(MidQrError::InvalidInput(
                "linear transformation needs finite a and b > 0".into(),
            ));
        }
        Ok(Self::Linear { a, b })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Linear { .. } => "linear",
            Self::Log { .. } => "log",
            Self::Logit => "logit",
        }
    }

    /// Forward map; `None` outside the domain.
    pub fn h(&self, y: f64) -> Option<f64> {
        let v = match *self {
            Self::Identity => y,
            Self::Linear { a, b } => a + b * y,
            Self::Log { offset } => {
                let s = y + offset;
                if s <= 0.0 {
                    return None;
                }
                s.ln()
            }
            Self::Logit => {
                if y <= 0.0 || y >= 1.0 {
                    return None;
                }
                (y / (1.0 - y)).ln()
            }
        };
        v.is_finite().then_some(v)
    }

    pub fn hinv(&self, eta: f64) -> f64 {
        match *self {
            Self::Identity => eta,
            Self::Linear { a, b } => (eta - a) / b,
            Self::Log { offset } => eta.exp() - offset,
            Self::Logit => logistic(eta),
        }
    }

    pub fn d1hinv(&self, eta: f64) -> f64 {
        match *self {
            Self::Identity => 1.0,
            Self::Linear { b, .. } => 1.0 / b,
            Self::Log { .. } => eta.exp(),
            Self::Logit => {
                let s = logistic(eta);
                s * (1.0 - s)
            }
        }
    }

    pub fn d2hinv(&self, eta: f64) -> f64 {
        match *self {
            Self::Identity | Self::Linear { .. } => 0.0,
            Self::Log { .. } => eta.exp(),
            Self::Logit => {
                let s = logistic(eta);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

impl std::str::FromStr for Transformation {
    type Err = MidQrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Self::Identity),
            "log" => Ok(Self::Log {
                offset: DEFAULT_LOG_OFFSET,
            }),
            "logit" => Ok(Self::Logit),
            other => Err(MidQrError::InvalidInput(format!("unknown link '{other}'"))),
        }
    }
}
