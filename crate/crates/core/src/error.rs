use thiserror::Error;

use crate::model::Side;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RdError {
    #[error("sample is empty")]
    EmptySample,
    #[error("column lengths differ: {0}")]
    LengthMismatch(String),
    #[error("non-finite value at row {row}, column `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("level `{level}` of `{column}` is not among the declared levels")]
    UnknownLevel { column: String, level: String },
    #[error("cannot form {bins} quantile bins for `{column}`: only {distinct} distinct cut points")]
    DegenerateQuantiles {
        column: String,
        bins: usize,
        distinct: usize,
    },
    #[error("column `{0}` must be numeric")]
    NotNumeric(String),
    #[error("column `{column}` is not binary: {detail}")]
    NotBinary { column: String, detail: String },
    #[error("bandwidth must be strictly positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("invalid fit specification: {0}")]
    InvalidSpec(String),
    #[error(
        "singular Gram matrix on the {side} side (reciprocal condition {rcond:.3e}): \
         too few observations or collinear heterogeneity covariates within bandwidth"
    )]
    SingularGram { side: Side, rcond: f64 },
    #[error("derivative order {nu} exceeds min(p, s) = {max}")]
    NuOutOfRange { nu: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bandwidth has not been resolved")]
    BandwidthUnresolved,
    #[error("too few observations on the {side} side: {have} (need {need})")]
    TooFewObservations { side: Side, have: usize, need: usize },
    #[error("bias constant is degenerate; MSE-optimal bandwidth is undefined")]
    BiasDegenerate,
    #[error("observation {index} on the {side} side has leverage {leverage} >= 1; HC2/HC3 undefined")]
    LeverageOne {
        side: Side,
        index: usize,
        leverage: f64,
    },
    #[error("cluster-robust variance needs cluster labels")]
    MissingClusters,
    #[error("cluster-robust variance needs at least 2 clusters in the window, found {0}")]
    TooFewClusters(usize),
    #[error("all {0} Monte Carlo replications failed")]
    AllReplicationsFailed(usize),
}

pub type Result<T, E = RdError> = std::result::Result<T, E>;
