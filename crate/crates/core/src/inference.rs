//! Sandwich variance estimation (HC0-HC3 and cluster-robust), robust
//! bias-corrected point estimates and variances, confidence intervals and
//! p-values.
//!
//! Conventions. With `K_i = K((X_i - c)/h)` and `r_i` the scaled design row, the
//! meat is
//!
//! ```text
//! V_hat = (1/(n h)) sum_i w_i K_i^2 r_i r_i' u_i^2
//! ```
//!
//! so that `Var[a' theta_hat] = a' Gamma^{-1} V_hat Gamma^{-1} a / (n h^{2 nu + 1})`
//! for a selector `a` that extracts derivative order `nu`. The cluster meat
//! replaces the sum of squares by sums over clusters of `K_i r_i u_i`.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bandwidth::{bias_vectors, pilot_coef_index};
use crate::error::{RdError, Result};
use crate::linalg::{dot, Matrix};
use crate::localfit::SideFit;
use crate::model::{RdSample, Side, Vce};
use crate::scalar::{from_usize, lit, to_f64, Scalar};

/// HC weight convention: some `L_i` at or numerically indistinguishable from 1.
const LEVERAGE_ONE: f64 = 1.0 - 1e-12;

/// Per-observation HC weights `w_i`, aligned with `fit.rows`.
///
/// HC0: 1. HC1: `N/(N - 2 tr(Q) + tr(QQ))` with `N` the effective sample size.
/// HC2: `1/(1 - L_i)`. HC3: `1/(1 - L_i)^2`. For `Cluster` the weights are 1.
pub fn hc_weights<T: Scalar>(kind: Vce, fit: &SideFit<T>) -> Result<Vec<T>> {
    let m = fit.rows.len();
    match kind {
        Vce::HC0 | Vce::Cluster => Ok(vec![T::one(); m]),
        Vce::HC1 => {
            let (tr, tr2) = fit.hat_traces();
            let nn = from_usize::<T>(fit.eff_n);
            let denom = nn - (tr + tr) + tr2;
            if !(denom > T::zero()) {
                return Err(RdError::TooFewObservations {
                    side: fit.side,
                    have: fit.eff_n,
                    need: fit.n_params() + 1,
                });
            }
            Ok(vec![nn / denom; m])
        }
        Vce::HC2 | Vce::HC3 => {
            let mut out = Vec::with_capacity(m);
            for (j, &l) in fit.leverages.iter().enumerate() {
                if to_f64(l) >= LEVERAGE_ONE {
                    return Err(RdError::LeverageOne {
                        side: fit.side,
                        index: fit.rows[j],
                        leverage: to_f64(l),
                    });
                }
                let inv = T::one() / (T::one() - l);
                out.push(if kind == Vce::HC2 { inv } else { inv * inv });
            }
            Ok(out)
        }
    }
}

/// `V_hat = (1/(n h)) sum_i w_i K_i^2 r_i r_i' u_i^2`.
pub fn meat_matrix<T: Scalar>(fit: &SideFit<T>, weights: &[T]) -> Matrix<T> {
    let k = fit.n_params();
    let mut v = Matrix::zeros(k, k);
    // stored weights are K_i / h, so K_i^2 / (n h) = h * weight_i^2 / n
    let scale = fit.h / from_usize::<T>(fit.n);
    for j in 0..fit.rows.len() {
        let kw = fit.weights[j];
        let u = fit.residuals[j];
        v.add_outer(fit.design.row(j), scale * weights[j] * kw * kw * u * u);
    }
    v
}

/// Number of distinct clusters among the fit's in-window rows.
pub fn cluster_count<T: Scalar>(fit: &SideFit<T>, clusters: &[i64]) -> usize {
    let mut ids: Vec<i64> = fit.rows.iter().map(|&i| clusters[i]).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}

/// Cluster meat `(1/(n h)) sum_g S_g S_g'` with `S_g = sum_{i in g} K_i r_i u_i`.
/// With every observation in its own cluster this equals the HC0 meat.
pub fn cluster_meat<T: Scalar>(fit: &SideFit<T>, clusters: &[i64]) -> Result<Matrix<T>> {
    let g = cluster_count(fit, clusters);
    if g < 2 {
        return Err(RdError::TooFewClusters(g));
    }
    let k = fit.n_params();
    let mut sums: BTreeMap<i64, Vec<T>> = BTreeMap::new();
    for (j, &i) in fit.rows.iter().enumerate() {
        let f = fit.weights[j] * fit.h * fit.residuals[j];
        let acc = sums.entry(clusters[i]).or_insert_with(|| vec![T::zero(); k]);
        for (a, &r) in acc.iter_mut().zip(fit.design.row(j)) {
            *a += f * r;
        }
    }
    let scale = T::one() / (from_usize::<T>(fit.n) * fit.h);
    let mut v = Matrix::zeros(k, k);
    for s in sums.values() {
        v.add_outer(s, scale);
    }
    Ok(v)
}

/// Small-sample factor applied to clustered contractions: `N / (N - p - 1 - d)`
/// with `N` the side's effective sample size.
pub fn cluster_factor<T: Scalar>(fit: &SideFit<T>) -> T {
    let nn = from_usize::<T>(fit.eff_n);
    let denom = nn - from_usize::<T>(fit.p + 1 + fit.d);
    if denom > T::zero() {
        nn / denom
    } else {
        T::infinity()
    }
}

/// Meat matrix for the requested estimator on one side.
pub fn side_meat<T: Scalar>(
    fit: &SideFit<T>,
    vce: Vce,
    clusters: Option<&[i64]>,
) -> Result<Matrix<T>> {
    match vce {
        Vce::Cluster => {
            let c = clusters.ok_or(RdError::MissingClusters)?;
            cluster_meat(fit, c)
        }
        _ => {
            let w = hc_weights(vce, fit)?;
            Ok(meat_matrix(fit, &w))
        }
    }
}

/// `a' Gamma^{-1} V Gamma^{-1} a`.
pub fn sandwich_contraction<T: Scalar>(fit: &SideFit<T>, meat: &Matrix<T>, a: &[T]) -> T {
    let g = fit.gram_inv.matvec(a);
    meat.quad_form(&g)
}

#[derive(Debug, Clone, Serialize)]
pub struct SideVariance<T> {
    pub side: Side,
    /// `a' Gamma^{-1} V Gamma^{-1} a`, including the cluster factor if clustered.
    pub contraction: T,
    /// Variance of this side's `a' theta_hat`.
    pub variance: T,
    pub clusters: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceEstimate<T> {
    pub kind: Vce,
    pub left: SideVariance<T>,
    pub right: SideVariance<T>,
    pub variance: T,
    pub se: T,
}

/// Variance of `a'(theta_+ - theta_-)` where `a` is the short-form selector
/// extracting derivative order `nu`. The two sides use disjoint observations,
/// so their variances add.
pub fn coef_variance<T: Scalar>(
    left: &SideFit<T>,
    right: &SideFit<T>,
    a: &[T],
    nu: usize,
    vce: Vce,
    clusters: Option<&[i64]>,
) -> Result<VarianceEstimate<T>> {
    let side = |fit: &SideFit<T>| -> Result<SideVariance<T>> {
        let meat = side_meat(fit, vce, clusters)?;
        let mut contraction = sandwich_contraction(fit, &meat, a);
        let mut g = None;
        if vce == Vce::Cluster {
            contraction *= cluster_factor(fit);
            g = clusters.map(|c| cluster_count(fit, c));
        }
        let scale = from_usize::<T>(fit.n) * fit.h.powi(2 * nu as i32 + 1);
        Ok(SideVariance {
            side: fit.side,
            contraction,
            variance: contraction / scale,
            clusters: g,
        })
    };
    let l = side(left)?;
    let r = side(right)?;
    let variance = l.variance + r.variance;
    Ok(VarianceEstimate {
        kind: vce,
        left: l,
        right: r,
        variance,
        se: variance.max(T::zero()).sqrt(),
    })
}

/// Bias-corrected point: `point - h^order * bias`, where `order = 1 + (p ^ s) - nu`
/// (2 for the local linear jump).
pub fn rbc_point<T: Scalar>(point: T, bias_contrast: T, h: T, order: usize) -> T {
    point - h.powi(order as i32) * bias_contrast
}

/// Exponent of `h` in the leading bias of a `nu`-th derivative estimate.
pub fn bias_order(p: usize, s: usize, nu: usize) -> usize {
    1 + p.min(s) - nu
}

/// Influence weights of one side's `a' theta_hat` on `Y`, aligned with `fit.rows`:
/// `a' H^{-1} Gamma^{-1} r_i K_i / (n h)`.
pub fn influence<T: Scalar>(fit: &SideFit<T>, a: &[T]) -> Vec<T> {
    let hdiag = fit.scaling();
    let ah: Vec<T> = a.iter().zip(&hdiag).map(|(&x, &h)| x / h).collect();
    let g = fit.gram_inv.matvec(&ah);
    let nn = from_usize::<T>(fit.n);
    (0..fit.rows.len())
        .map(|j| dot(fit.design.row(j), &g) * fit.weights[j] / nn)
        .collect()
}

/// One side's bias-corrected estimate expressed as a linear functional of `Y`.
#[derive(Debug, Clone)]
pub struct RbcSide<T> {
    pub side: Side,
    /// Sample indices and combined weights `c_i`, sorted by index.
    pub weights: Vec<(usize, T)>,
    /// `a' theta_hat` from the main fit.
    pub point: T,
    /// Estimated leading bias `h^order * B_hat`.
    pub bias: T,
}

impl<T: Scalar> RbcSide<T> {
    pub fn apply(&self, y: &[T]) -> T {
        self.weights.iter().map(|&(i, c)| c * y[i]).sum()
    }
}

/// Builds the combined influence vector `main - h^order * (bias multipliers) x
/// (pilot coefficient influences)` for one side.
pub fn rbc_side<T: Scalar>(
    sample: &RdSample<T>,
    main: &SideFit<T>,
    pilot: &SideFit<T>,
    a: &[T],
    nu: usize,
) -> RbcSide<T> {
    let (p, s, d) = (main.p, main.s, main.d);
    let order = bias_order(p, s, nu);
    let hpow = main.h.powi(order as i32);
    let bv = bias_vectors(sample, main);
    // multipliers on the pilot's unscaled coefficients
    let mut mult: Vec<(usize, T)> = Vec::new();
    if p <= s {
        let g = dot(a, &main.gram_inv.matvec(&bv.zeta));
        mult.push((pilot_coef_index(p, s, None), g));
    }
    if p >= s {
        for l in 0..d {
            let col = bv.phi.column(l);
            let g = dot(a, &main.gram_inv.matvec(&col));
            mult.push((pilot_coef_index(p, s, Some(l)), g));
        }
    }

    let mut acc: BTreeMap<usize, T> = BTreeMap::new();
    let main_infl = influence(main, a);
    for (&i, &c) in main.rows.iter().zip(&main_infl) {
        *acc.entry(i).or_insert(T::zero()) += c;
    }
    let mut bias = T::zero();
    if !mult.is_empty() {
        let k = pilot.n_params();
        let mut sel = vec![T::zero(); k];
        for &(j, g) in &mult {
            sel[j] += g;
            bias += g * pilot.theta[j];
        }
        let pilot_infl = influence(pilot, &sel);
        for (&i, &c) in pilot.rows.iter().zip(&pilot_infl) {
            *acc.entry(i).or_insert(T::zero()) -= hpow * c;
        }
    }
    RbcSide {
        side: main.side,
        weights: acc.into_iter().collect(),
        point: dot(a, &main.theta),
        bias: hpow * bias,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RbcVariance<T> {
    pub left: T,
    pub right: T,
    pub variance: T,
    pub se: T,
}

/// Variance of one side's bias-corrected estimate: the selected HC or cluster
/// sandwich applied to the combined influence vector, using residuals and
/// leverages of the higher-order pilot fit.
fn rbc_side_variance<T: Scalar>(
    sample: &RdSample<T>,
    rbc: &RbcSide<T>,
    pilot: &SideFit<T>,
    vce: Vce,
) -> Result<T> {
    let mut pos = BTreeMap::new();
    for (j, &i) in pilot.rows.iter().enumerate() {
        pos.insert(i, j);
    }
    let hc = hc_weights(vce, pilot)?;
    let outside = match vce {
        Vce::HC1 => hc.first().copied().unwrap_or(T::one()),
        _ => T::one(),
    };
    let resid = |i: usize| -> (T, T) {
        match pos.get(&i) {
            Some(&j) => (pilot.residuals[j], hc[j]),
            None => {
                let u = sample.y[i]
                    - pilot.predict(sample.x[i] - sample.cutoff, sample.w.row(i));
                (u, outside)
            }
        }
    };
    match vce {
        Vce::Cluster => {
            let cl = sample.cluster.as_deref().ok_or(RdError::MissingClusters)?;
            let mut sums: BTreeMap<i64, T> = BTreeMap::new();
            for &(i, c) in &rbc.weights {
                let (u, _) = resid(i);
                *sums.entry(cl[i]).or_insert(T::zero()) += c * u;
            }
            if sums.len() < 2 {
                return Err(RdError::TooFewClusters(sums.len()));
            }
            let v: T = sums.values().map(|&s| s * s).sum();
            Ok(v * cluster_factor(pilot))
        }
        _ => Ok(rbc
            .weights
            .iter()
            .map(|&(i, c)| {
                let (u, w) = resid(i);
                w * c * c * u * u
            })
            .sum()),
    }
}

/// Robust bias-corrected variance of `a'(theta_+ - theta_-)`.
pub fn rbc_variance<T: Scalar>(
    sample: &RdSample<T>,
    left: (&RbcSide<T>, &SideFit<T>),
    right: (&RbcSide<T>, &SideFit<T>),
    vce: Vce,
) -> Result<RbcVariance<T>> {
    let l = rbc_side_variance(sample, left.0, left.1, vce)?;
    let r = rbc_side_variance(sample, right.0, right.1, vce)?;
    let variance = l + r;
    Ok(RbcVariance {
        left: l,
        right: r,
        variance,
        se: variance.max(T::zero()).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CiResult<T> {
    pub lower: T,
    pub upper: T,
    pub z: T,
    pub p_value: T,
    /// Standard error was zero: the interval collapses to the point and the
    /// p-value is 0 or 1.
    pub zero_se: bool,
}

/// Two-sided Gaussian critical value `z_{1 - (1-level)/2}`.
pub fn normal_critical(level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Gaussian confidence interval and two-sided p-value for `H0: estimand = 0`.
pub fn ci_pvalue<T: Scalar>(point: T, se: T, level: T) -> CiResult<T> {
    let crit: T = lit(normal_critical(to_f64(level)));
    if !(se > T::zero()) {
        return CiResult {
            lower: point,
            upper: point,
            z: if point == T::zero() {
                T::zero()
            } else {
                point.signum() * T::infinity()
            },
            p_value: if point == T::zero() { T::one() } else { T::zero() },
            zero_se: true,
        };
    }
    let z = point / se;
    let p = 2.0 * Normal::standard().cdf(-to_f64(z).abs());
    CiResult {
        lower: point - crit * se,
        upper: point + crit * se,
        z,
        p_value: lit::<T>(p.clamp(0.0, 1.0)),
        zero_se: false,
    }
}
