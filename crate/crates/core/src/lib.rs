//! Heterogeneous treatment effects in sharp and kink regression discontinuity
//! designs.
//!
//! The estimator is a local polynomial regression in the running variable,
//! fully interacted with treatment and with pretreatment covariates `W`, fitted
//! separately on each side of the cutoff. Conditional effects
//! `kappa(w) = theta + xi'w` are read off the coefficient differences; bandwidths
//! can be chosen to minimise the leading MSE of a chosen estimand, and inference
//! uses robust bias correction with heteroskedasticity- or cluster-robust
//! standard errors.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the `*F64`
//! aliases below name the common instantiations.

// Index loops mirror the matrix algebra; `!(a < b)` guards are NaN-aware.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bandwidth;
pub mod error;
pub mod estimands;
pub mod inference;
pub mod kernelbasis;
pub mod linalg;
pub mod localfit;
pub mod model;
pub mod scalar;
pub mod simulate;

pub use error::{RdError, Result};
pub use estimands::{fit_hte, fit_hte_grouped, fit_hte_labeled, EstimateRecord, HteResult, Selector};
pub use kernelbasis::KernelKind;
pub use linalg::Matrix;
pub use localfit::{fit_side, SideFit};
pub use model::{
    BandwidthChoice, BiasBandwidth, CovariateKind, CovariateSpec, FitSpec, RdSample, SelectMode,
    Side, Vce,
};
pub use scalar::Scalar;

pub type SampleF64 = RdSample<f64>;
pub type FitSpecF64 = FitSpec<f64>;
pub type HteResultF64 = HteResult<f64>;
pub type SideFitF64 = SideFit<f64>;
pub type MatrixF64 = Matrix<f64>;
pub type SampleF32 = RdSample<f32>;
pub type FitSpecF32 = FitSpec<f32>;
pub type HteResultF32 = HteResult<f32>;
