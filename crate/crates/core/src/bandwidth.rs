//! Leading bias and variance constants, rule-of-thumb pilot bandwidths and
//! MSE-optimal bandwidth selection.
//!
//! For a short-form selector `a` extracting derivative order `nu`, one side's
//! estimate has leading bias `h^{1 + q - nu} B(a)` with `q = min(p, s)` and
//! variance `V(a) / (n h^{2 nu + 1})`. The bias constant combines the
//! main-polynomial channel (`p <= s`) and the covariate-interaction channel
//! (`p >= s`):
//!
//! ```text
//! B(a) = 1(p <= s) a' Gamma^{-1} zeta_p alpha^{(p+1)}/(p+1)!
//!      + 1(p >= s) a' Gamma^{-1} phi_s lambda^{(s+1)}/(s+1)!
//! ```
//!
//! where `zeta_j = (1/(n h)) sum K_i r_i u_i^{j+1}` and
//! `phi_j = (1/(n h)) sum K_i r_i W_i' u_i^{j+1}`, and the unknown derivatives
//! are read from a pilot fit of orders `(p + 1, s + 1)`.

use serde::Serialize;

use crate::error::{RdError, Result};
use crate::inference::{cluster_factor, side_meat};
use crate::kernelbasis::KernelKind;
use crate::linalg::{dot, Matrix};
use crate::localfit::{fit_side, SideFit};
use crate::model::{quantile, RdSample, SelectMode, Side, Vce};
use crate::scalar::{from_usize, lit, to_f64, Scalar};

/// Pilot rule constant: `2.576 * spread * n^{-1/(2 max(p, s) + 5)}`.
pub const PILOT_CONSTANT: f64 = 2.576;
/// Squared bias below `BIAS_FLOOR * V / (n b)` is regularised.
pub const BIAS_FLOOR: f64 = 1e-2;

/// Moment vectors of one fit: `zeta` (length `k`) and `phi` (`k x d`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentVectors<T> {
    pub zeta: Vec<T>,
    pub phi: Matrix<T>,
}

/// `zeta_j` and `phi_j` over the fit's in-window rows, for power `j + 1`.
pub fn moment_vectors<T: Scalar>(
    sample: &RdSample<T>,
    fit: &SideFit<T>,
    zeta_order: usize,
    phi_order: usize,
) -> MomentVectors<T> {
    let k = fit.n_params();
    let d = fit.d;
    let nn = from_usize::<T>(fit.n);
    let mut zeta = vec![T::zero(); k];
    let mut phi = Matrix::zeros(k, d);
    for (j, &i) in fit.rows.iter().enumerate() {
        let u = (sample.x[i] - sample.cutoff) / fit.h;
        // stored weights are K_i / h, so K_i / (n h) = weight_i / n
        let wz = fit.weights[j] * u.powi(zeta_order as i32 + 1) / nn;
        let wp = fit.weights[j] * u.powi(phi_order as i32 + 1) / nn;
        let r = fit.design.row(j);
        let wi = sample.w.row(i);
        for a in 0..k {
            zeta[a] += wz * r[a];
            for l in 0..d {
                phi[(a, l)] += wp * r[a] * wi[l];
            }
        }
    }
    MomentVectors { zeta, phi }
}

/// Moment vectors at the orders the bias formula needs: `zeta_p`, `phi_s`.
pub fn bias_vectors<T: Scalar>(sample: &RdSample<T>, fit: &SideFit<T>) -> MomentVectors<T> {
    moment_vectors(sample, fit, fit.p, fit.s)
}

/// Position in a `(p + 1, s + 1)` pilot fit of the coefficient on `u^{p+1}`
/// (`cov = None`) or on `W_l u^{s+1}` (`cov = Some(l)`).
pub fn pilot_coef_index(p: usize, s: usize, cov: Option<usize>) -> usize {
    match cov {
        None => p + 1,
        Some(l) => (p + 2) + l * (s + 2) + (s + 1),
    }
}

/// Leading bias constant of one side, in the coordinates of the main fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasConstants<T> {
    pub side: Side,
    /// Bandwidth of the fits the constants were evaluated with.
    pub b: T,
    /// `Gamma^{-1} zeta_p alpha^{(p+1)}/(p+1)!`, present when `p <= s`.
    pub b0: Option<Vec<T>>,
    /// `Gamma^{-1} phi_s lambda^{(s+1)}/(s+1)!`, present when `p >= s`.
    pub b1: Option<Vec<T>>,
}

impl<T: Scalar> BiasConstants<T> {
    /// `B(a) = a' b0 + a' b1` over the channels that are present.
    pub fn contract(&self, a: &[T]) -> T {
        let mut out = T::zero();
        if let Some(b0) = &self.b0 {
            out += dot(a, b0);
        }
        if let Some(b1) = &self.b1 {
            out += dot(a, b1);
        }
        out
    }
}

/// Bias constants from a main fit and a `(p + 1, s + 1)` pilot fit.
pub fn bias_from_fits<T: Scalar>(
    sample: &RdSample<T>,
    main: &SideFit<T>,
    pilot: &SideFit<T>,
) -> BiasConstants<T> {
    let (p, s, d) = (main.p, main.s, main.d);
    let mv = bias_vectors(sample, main);
    let b0 = (p <= s).then(|| {
        let coef = pilot.theta[pilot_coef_index(p, s, None)];
        main.gram_inv
            .matvec(&mv.zeta)
            .into_iter()
            .map(|v| v * coef)
            .collect()
    });
    let b1 = (p >= s).then(|| {
        let lam: Vec<T> = (0..d)
            .map(|l| pilot.theta[pilot_coef_index(p, s, Some(l))])
            .collect();
        main.gram_inv.matvec(&mv.phi.matvec(&lam))
    });
    BiasConstants {
        side: main.side,
        b: main.h,
        b0,
        b1,
    }
}

/// Bias constants for one side, with both the main-order and the pilot fit
/// evaluated at bandwidth `b`.
pub fn bias_constants<T: Scalar>(
    sample: &RdSample<T>,
    side: Side,
    p: usize,
    s: usize,
    kernel: KernelKind,
    b: T,
) -> Result<BiasConstants<T>> {
    let main = fit_side(sample, side, b, p, s, kernel)?;
    let pilot = fit_side(sample, side, b, p + 1, s + 1, kernel)?;
    Ok(bias_from_fits(sample, &main, &pilot))
}

/// `Omega = Gamma^{-1} V_hat Gamma^{-1}` of one side (times the cluster factor
/// for clustered estimators).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceConstants<T> {
    pub side: Side,
    pub omega: Matrix<T>,
}

impl<T: Scalar> VarianceConstants<T> {
    pub fn contract(&self, a: &[T]) -> T {
        self.omega.quad_form(a)
    }
}

pub fn variance_constants<T: Scalar>(
    sample: &RdSample<T>,
    fit: &SideFit<T>,
    vce: Vce,
) -> Result<VarianceConstants<T>> {
    let meat = side_meat(fit, vce, sample.cluster.as_deref())?;
    let mut omega = fit.gram_inv.matmul(&meat).matmul(&fit.gram_inv);
    if vce == Vce::Cluster {
        omega = omega.scale(cluster_factor(fit));
    }
    Ok(VarianceConstants {
        side: fit.side,
        omega,
    })
}

/// Distances `|X_i - c|` of one side's observations, sorted ascending.
fn side_distances<T: Scalar>(sample: &RdSample<T>, side: Side) -> Vec<T> {
    let mut v: Vec<T> = (0..sample.n())
        .filter(|&i| side.contains(sample.x[i], sample.cutoff))
        .map(|i| (sample.x[i] - sample.cutoff).abs())
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite running variable"));
    v
}

/// Smallest bandwidth that gives `need` observations a strictly positive
/// weight under every supported kernel (the triangular kernel vanishes at
/// `|u| = 1`).
fn covering_bandwidth<T: Scalar>(dist: &[T], need: usize) -> T {
    let far = dist[need.min(dist.len()) - 1];
    let bump = lit::<T>(1.0 + 1e-9);
    if far > T::zero() {
        far * bump
    } else {
        T::epsilon().sqrt()
    }
}

/// Minimum number of in-window observations the pilot rule guarantees.
pub fn pilot_min_obs(p: usize, s: usize, d: usize) -> usize {
    let k_pilot = 2 + p + d * (2 + s);
    (5 * (p + 2)).max(2 * k_pilot)
}

/// Rule-of-thumb pilot bandwidth for one side:
/// `2.576 min(sd, IQR/1.349) n_side^{-1/(2 max(p, s) + 5)}`, enlarged if needed so
/// the window holds at least [`pilot_min_obs`] observations.
pub fn pilot_bandwidth<T: Scalar>(
    sample: &RdSample<T>,
    side: Side,
    p: usize,
    s: usize,
) -> Result<T> {
    let xs: Vec<T> = (0..sample.n())
        .filter(|&i| side.contains(sample.x[i], sample.cutoff))
        .map(|i| sample.x[i])
        .collect();
    let n_side = xs.len();
    if n_side < 10 {
        return Err(RdError::TooFewObservations {
            side,
            have: n_side,
            need: 10,
        });
    }
    let nn = from_usize::<T>(n_side);
    let mean = xs.iter().copied().sum::<T>() / nn;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / (nn - T::one());
    let sd = var.sqrt();
    let mut sorted = xs;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite running variable"));
    let iqr = quantile(&sorted, lit(0.75)) - quantile(&sorted, lit(0.25));
    let robust = iqr / lit(1.349);
    let spread = if robust > T::zero() { sd.min(robust) } else { sd };
    let rate = -1.0 / (2.0 * p.max(s) as f64 + 5.0);
    let mut b = lit::<T>(PILOT_CONSTANT) * spread * nn.powf(lit(rate));

    let dist = side_distances(sample, side);
    let need = pilot_min_obs(p, s, sample.d());
    let floor = covering_bandwidth(&dist, need);
    if !(b >= floor) {
        b = floor;
    }
    Ok(b)
}

/// `[(1 + 2 nu) / (2 (1 + q - nu) n) * V / B^2]^{1/(3 + 2q)}`.
pub fn mse_formula<T: Scalar>(v: T, b2: T, n: T, nu: usize, q: usize) -> T {
    let c = from_usize::<T>(1 + 2 * nu) / (from_usize::<T>(2 * (1 + q - nu)) * n);
    (c * v / b2).powf(T::one() / from_usize::<T>(3 + 2 * q))
}

/// Outcome of MSE-optimal bandwidth selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthSelection<T> {
    pub mode: SelectMode,
    /// Selected `(h_left, h_right)` after clamping.
    pub h: (T, T),
    /// Unclamped formula values.
    pub raw: (T, T),
    /// Pilot bandwidths at which the constants were evaluated.
    pub pilot: (T, T),
    /// `V(a)` per side.
    pub variance: (T, T),
    /// `B(a)` per side.
    pub bias: (T, T),
    /// The squared bias was too small relative to the variance and was floored.
    pub regularized: bool,
}

/// Admissible range `[h_min, h_max]` for one side: at least enough in-window
/// observations for the bias-correction fit, at most the side's range.
pub fn bandwidth_bounds<T: Scalar>(
    sample: &RdSample<T>,
    side: Side,
    p: usize,
    s: usize,
) -> Result<(T, T)> {
    let dist = side_distances(sample, side);
    let need = 2 + p + sample.d() * (2 + s) + 1;
    if dist.len() < need {
        return Err(RdError::TooFewObservations {
            side,
            have: dist.len(),
            need,
        });
    }
    let lo = covering_bandwidth(&dist, need);
    let hi = dist[dist.len() - 1] * lit(1.0 + 1e-9);
    Ok((lo, hi.max(lo)))
}

/// MSE-optimal bandwidth for the short-form selector `a` (derivative `nu`).
pub fn mse_bandwidth<T: Scalar>(
    sample: &RdSample<T>,
    a: &[T],
    p: usize,
    s: usize,
    nu: usize,
    kernel: KernelKind,
    vce: Vce,
    mode: SelectMode,
) -> Result<BandwidthSelection<T>> {
    let q = p.min(s);
    let n = from_usize::<T>(sample.n());
    let constants = |side: Side| -> Result<(T, T, T)> {
        let b = pilot_bandwidth(sample, side, p, s)?;
        let main = fit_side(sample, side, b, p, s, kernel)?;
        let pilot = fit_side(sample, side, b, p + 1, s + 1, kernel)?;
        let bias = bias_from_fits(sample, &main, &pilot).contract(a);
        let var = variance_constants(sample, &main, vce)?.contract(a);
        Ok((b, var, bias))
    };
    let (bl, vl, bsl) = constants(Side::Left)?;
    let (br, vr, bsr) = constants(Side::Right)?;
    let floor = |v: T, b: T| lit::<T>(BIAS_FLOOR) * v / (n * b);

    let mut regularized = false;
    let mut solve = |v: T, bias: T, b_ref: T| -> Result<T> {
        let mut b2 = bias * bias;
        let eps = floor(v, b_ref);
        if b2 <= eps {
            b2 += eps;
            regularized = true;
        }
        let h = mse_formula(v, b2, n, nu, q);
        if !h.is_finite() || h < T::zero() {
            return Err(RdError::BiasDegenerate);
        }
        Ok(h)
    };
    let raw = match mode {
        SelectMode::OneSided => (solve(vl, bsl, bl)?, solve(vr, bsr, br)?),
        SelectMode::TwoSided => {
            let h = solve(vl + vr, bsr - bsl, (bl + br) / lit(2.0))?;
            (h, h)
        }
    };

    let (lo_l, hi_l) = bandwidth_bounds(sample, Side::Left, p, s)?;
    let (lo_r, hi_r) = bandwidth_bounds(sample, Side::Right, p, s)?;
    let clamp = |h: T, lo: T, hi: T| h.max(lo).min(hi);
    let h = match mode {
        SelectMode::OneSided => (clamp(raw.0, lo_l, hi_l), clamp(raw.1, lo_r, hi_r)),
        SelectMode::TwoSided => {
            let h = clamp(raw.0, lo_l.max(lo_r), hi_l.max(hi_r));
            (h, h)
        }
    };
    if !(to_f64(h.0) > 0.0 && to_f64(h.1) > 0.0) {
        return Err(RdError::BiasDegenerate);
    }
    Ok(BandwidthSelection {
        mode,
        h,
        raw,
        pilot: (bl, br),
        variance: (vl, vr),
        bias: (bsl, bsr),
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use proptest::prelude::*;

    fn grid_sample(n: usize, f: impl Fn(f64, f64) -> f64) -> RdSample<f64> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        for i in 0..n {
            let xi = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
            let wi = ((i * 7) % 3) as f64 / 2.0;
            x.push(xi);
            w.push([wi]);
            y.push(f(xi, wi));
        }
        RdSample::new(y, x, 0.0, Matrix::from_rows(&w))
    }

    #[test]
    fn formula_check_value() {
        let h = mse_formula(1.0f64, 1.0, 1.0, 0, 1);
        assert!((h - 0.757858).abs() < 1e-6);
        // h ~ n^{-1/5}: quadrupling n scales h by 4^{-1/5}
        let r = mse_formula(1.0f64, 1.0, 4000.0, 0, 1) / mse_formula(1.0, 1.0, 1000.0, 0, 1);
        assert!((r - 0.757858).abs() < 1e-6);
    }

    #[test]
    fn pilot_bandwidth_rule() {
        let s = grid_sample(400, |x, _| x);
        let b = pilot_bandwidth(&s, Side::Right, 1, 1).unwrap();
        // right side: 200 points uniform on (0, 1)
        let xs: Vec<f64> = s.x.iter().copied().filter(|&x| x >= 0.0).collect();
        let m = xs.iter().sum::<f64>() / 200.0;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 199.0).sqrt();
        let iqr = 0.5 * (199.0 / 200.0);
        let expect = 2.576 * sd.min(iqr / 1.349) * 200f64.powf(-1.0 / 7.0);
        assert!((b - expect).abs() < 1e-9, "{b} vs {expect}");
        let tiny = grid_sample(12, |x, _| x);
        assert!(matches!(
            pilot_bandwidth(&tiny, Side::Left, 1, 1),
            Err(RdError::TooFewObservations { have: 6, .. })
        ));
    }

    #[test]
    fn pilot_window_holds_minimum() {
        let s = grid_sample(60, |x, _| x);
        let b = pilot_bandwidth(&s, Side::Left, 1, 1).unwrap();
        let inside = s.x.iter().filter(|&&x| x < 0.0 && -x < b).count();
        assert!(inside >= pilot_min_obs(1, 1, 1));
    }

    #[test]
    fn bias_vanishes_for_low_degree_and_matches_curvature() {
        let flat = grid_sample(2000, |x, w| 1.0 + 2.0 * x + w * (0.5 - x));
        let bc = bias_constants(&flat, Side::Right, 1, 1, KernelKind::Triangular, 0.5).unwrap();
        assert!(bc.contract(&[1.0, 0.0, 0.0, 0.0]).abs() < 1e-10);
        assert!(bc.b0.is_some() && bc.b1.is_some());

        // pure quadratic: the local linear bias at the boundary is
        // h^2 * (alpha''/2) * e0' Gamma^{-1} zeta_1 exactly
        let quad = grid_sample(2000, |x, _| 3.0 * x * x);
        let h = 0.4;
        let main = fit_side(&quad, Side::Right, h, 1, 1, KernelKind::Triangular).unwrap();
        let bc = bias_constants(&quad, Side::Right, 1, 1, KernelKind::Triangular, h).unwrap();
        let e0 = [1.0, 0.0, 0.0, 0.0];
        assert!((main.theta[0] - h * h * bc.contract(&e0)).abs() < 1e-10);
    }

    #[test]
    fn channel_selection_by_order() {
        let s = grid_sample(500, |x, w| x * x + w * x * x);
        let bc = bias_constants(&s, Side::Left, 1, 2, KernelKind::Triangular, 0.6).unwrap();
        assert!(bc.b0.is_some() && bc.b1.is_none());
        let bc = bias_constants(&s, Side::Left, 2, 1, KernelKind::Triangular, 0.6).unwrap();
        assert!(bc.b0.is_none() && bc.b1.is_some());
    }

    #[test]
    fn selection_regularizes_zero_bias() {
        // linear truth plus deterministic wiggle: pilot curvature ~ 0
        let s = grid_sample(800, |x, w| 1.0 + x + 0.2 * w + 0.1 * ((x * 1000.0).sin()));
        let a = [1.0, 0.0, 0.0, 0.0];
        let sel = mse_bandwidth(&s, &a, 1, 1, 0, KernelKind::Triangular, Vce::HC0, SelectMode::TwoSided)
            .unwrap();
        assert!(sel.h.0 > 0.0 && sel.h.0 <= 1.0 + 1e-6);
        assert_eq!(sel.h.0, sel.h.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn selected_bandwidth_is_scale_equivariant(scale in 0.2f64..5.0) {
            let base = grid_sample(600, |x, w| (2.0 * x).sin() + x * x * x + w * (x * x));
            let mut scaled = base.clone();
            scaled.x.iter_mut().for_each(|x| *x *= scale);
            let a = [1.0, 0.0, 0.0, 0.0];
            let go = |s: &RdSample<f64>| {
                mse_bandwidth(s, &a, 1, 1, 0, KernelKind::Triangular, Vce::HC0, SelectMode::TwoSided)
                    .unwrap()
            };
            let h0 = go(&base);
            let h1 = go(&scaled);
            prop_assert!(!h0.regularized);
            prop_assert!((h1.h.0 - scale * h0.h.0).abs() < 1e-8 * scale);
        }
    }
}
