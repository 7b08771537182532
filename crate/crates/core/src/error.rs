use thiserror::Error;

/// Errors raised by estimation, inference and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MidQrError {
    #[error("empty input")]
    EmptyInput,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("probability {0} is outside the open interval (0, 1)")]
    ProbabilityDomain(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("bandwidth {value} for column {column} is out of range ({reason})")]
    BandwidthRange {
        column: usize,
        value: f64,
        reason: String,
    },

    #[error("covariate column {0} is degenerate (zero variance)")]
    DegenerateCovariate(usize),

    #[error("kernel weights vanish at row {row}; increase the bandwidth")]
    ZeroDenominator { row: usize },

    #[error("p = {p} is outside the range [{lo}, {hi}] of row {row}")]
    Bracket {
        row: usize,
        p: f64,
        lo: f64,
        hi: f64,
    },

    #[error("p = {p} is outside the admissible range [{lo}, {hi}]")]
    NotAdmissible { p: f64, lo: f64, hi: f64 },

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error(
        "transformation undefined for rows {rows:?}; shift the response with an offset (e.g. log(y + 1))"
    )]
    TransformDomain { rows: Vec<usize> },

    #[error(
        "optimizer did not converge after {iterations} iterations (objective {objective:e}, gradient norm {gradient_norm:e})"
    )]
    NonConvergence {
        iterations: usize,
        objective: f64,
        gradient_norm: f64,
        beta: Vec<f64>,
    },

    #[error("no fitted level matches p = {0}")]
    UnknownLevel(f64),

    #[error("{failed} of {total} bootstrap replicates failed")]
    BootstrapFailure { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, MidQrError>;
