//! One-sided kernel-weighted least squares with covariate interactions.
//!
//! For a side `+` or `-` and bandwidth `h`, the fit regresses `Y` on
//! `r_{p,s}((X - c)/h, W)` with weights `K((X - c)/h)/h` over the observations
//! on that side of the cutoff. Coefficients are solved through a QR factorisation
//! of the weighted design; the Gram matrix `R'KR/n` is still formed because the
//! variance and bias formulas are written in terms of it.

use serde::Serialize;

use crate::error::{RdError, Result};
use crate::kernelbasis::{interacted_basis_into, scaling_diag, KernelKind};
use crate::linalg::{dot, Matrix, QrSolver};
use crate::model::{RdSample, Side};
use crate::scalar::{from_usize, lit, to_f64, Scalar};

/// Reciprocal condition estimate of the Gram matrix below which a fit is
/// rejected as singular.
pub const SINGULAR_RCOND: f64 = 1e-12;

/// Observations inside one side's kernel window, with their scaled design rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SideDesign<T> {
    pub side: Side,
    pub h: T,
    pub p: usize,
    pub s: usize,
    /// Indices into the sample of the included observations.
    pub rows: Vec<usize>,
    /// `r_{p,s}((X_i - c)/h, W_i)` for each included row.
    pub design: Matrix<T>,
    /// `K((X_i - c)/h) / h`, strictly positive.
    pub weights: Vec<T>,
}

/// Builds the in-window design for one side. An observation is included iff it
/// lies on `side` and its kernel weight is strictly positive.
pub fn side_design<T: Scalar>(
    sample: &RdSample<T>,
    side: Side,
    h: T,
    p: usize,
    s: usize,
    kernel: KernelKind,
) -> Result<SideDesign<T>> {
    if !(h > T::zero()) || !h.is_finite() {
        return Err(RdError::NonPositiveBandwidth(to_f64(h)));
    }
    let d = sample.d();
    let k = 1 + p + d * (1 + s);
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    let mut data = Vec::new();
    let mut buf = Vec::with_capacity(k);
    for i in 0..sample.n() {
        let x = sample.x[i];
        if !side.contains(x, sample.cutoff) {
            continue;
        }
        let u = (x - sample.cutoff) / h;
        let kw = kernel.eval(u);
        if !(kw > T::zero()) {
            continue;
        }
        interacted_basis_into(u, sample.w.row(i), p, s, &mut buf);
        data.extend_from_slice(&buf);
        rows.push(i);
        weights.push(kw / h);
    }
    Ok(SideDesign {
        side,
        h,
        p,
        s,
        design: Matrix::from_vec(rows.len(), k, data),
        rows,
        weights,
    })
}

/// Result of one side's weighted least-squares fit.
#[derive(Debug, Clone, Serialize)]
pub struct SideFit<T> {
    pub side: Side,
    pub h: T,
    pub p: usize,
    pub s: usize,
    pub d: usize,
    /// Total sample size `n` used in the `1/n` normalisations.
    pub n: usize,
    #[serde(skip)]
    pub rows: Vec<usize>,
    #[serde(skip)]
    pub design: Matrix<T>,
    /// `K(u_i)/h` for in-window rows.
    #[serde(skip)]
    pub weights: Vec<T>,
    /// `Gamma_hat = R'KR/n`.
    pub gram: Matrix<T>,
    #[serde(skip)]
    pub gram_inv: Matrix<T>,
    /// `Upsilon_hat = R'KY/n`.
    pub score: Vec<T>,
    /// Unscaled coefficients on `(X-c)^j` and `W_l (X-c)^j`.
    pub theta: Vec<T>,
    /// Residuals of in-window rows, aligned with `rows`.
    #[serde(skip)]
    pub residuals: Vec<T>,
    /// Diagonal of the weighted hat matrix `Q`, aligned with `rows`.
    #[serde(skip)]
    pub leverages: Vec<T>,
    pub eff_n: usize,
    pub gram_rcond: T,
}

impl<T: Scalar> SideFit<T> {
    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// `H_{p,s}(h)` diagonal.
    pub fn scaling(&self) -> Vec<T> {
        scaling_diag(self.h, self.p, self.s, self.d).expect("h > 0 for a fitted side")
    }

    /// Scaled coefficients `H theta = Gamma^{-1} Upsilon`.
    pub fn scaled_theta(&self) -> Vec<T> {
        self.theta
            .iter()
            .zip(self.scaling())
            .map(|(&t, h)| t * h)
            .collect()
    }

    /// Fitted value `r_{p,s}(x - c, w)' theta` at an arbitrary point.
    pub fn predict(&self, x_minus_c: T, w: &[T]) -> T {
        let mut buf = Vec::new();
        interacted_basis_into(x_minus_c, w, self.p, self.s, &mut buf);
        dot(&buf, &self.theta)
    }

    /// `tr(Q)` and `tr(QQ)` of the weighted projection `Q = R Gamma^{-1} R'K / n`.
    pub fn hat_traces(&self) -> (T, T) {
        // Q = D G with D = R, G = Gamma^{-1} R' K / n.  tr(QQ) = sum_{ij} Q_ij Q_ji.
        let nh = from_usize::<T>(self.n);
        let m = self.rows.len();
        let g: Vec<Vec<T>> = (0..m)
            .map(|i| self.gram_inv.matvec(self.design.row(i)))
            .collect();
        let q = |i: usize, j: usize| dot(self.design.row(i), &g[j]) * self.weights[j] / nh;
        let mut tr = T::zero();
        let mut tr2 = T::zero();
        for i in 0..m {
            tr += q(i, i);
            for j in 0..m {
                tr2 += q(i, j) * q(j, i);
            }
        }
        (tr, tr2)
    }
}

/// Fits one side at bandwidth `h`.
pub fn fit_side<T: Scalar>(
    sample: &RdSample<T>,
    side: Side,
    h: T,
    p: usize,
    s: usize,
    kernel: KernelKind,
) -> Result<SideFit<T>> {
    let design = side_design(sample, side, h, p, s, kernel)?;
    fit_design(sample, design)
}

/// Solves the weighted least-squares problem for a prepared design. Any
/// positive rescaling of `design.weights` leaves coefficients, residuals and
/// leverages unchanged.
pub fn fit_design<T: Scalar>(sample: &RdSample<T>, design: SideDesign<T>) -> Result<SideFit<T>> {
    let SideDesign {
        side,
        h,
        p,
        s,
        rows,
        design,
        weights,
    } = design;
    let n = sample.n();
    let d = sample.d();
    let k = design.ncols();
    let m = rows.len();

    let singular = |rcond: f64| RdError::SingularGram { side, rcond };
    if m < k {
        return Err(singular(0.0));
    }

    let mut a = design.clone();
    let mut wy = Vec::with_capacity(m);
    for (j, &i) in rows.iter().enumerate() {
        let sw = weights[j].sqrt();
        a.row_mut(j).iter_mut().for_each(|v| *v *= sw);
        wy.push(sample.y[i] * sw);
    }
    let qr = QrSolver::new(&a).map_err(|_| singular(0.0))?;
    let rcond = qr.gram_rcond();
    if !(to_f64(rcond) >= SINGULAR_RCOND) {
        return Err(singular(to_f64(rcond)));
    }

    let beta = qr.solve(&wy);
    let nn = from_usize::<T>(n);
    // Gamma = A'A / n, so Gamma^{-1} = n (A'A)^{-1}
    let gram_inv = qr.gram_inverse().scale(nn);
    let mut gram = Matrix::zeros(k, k);
    let mut score = vec![T::zero(); k];
    for (j, &i) in rows.iter().enumerate() {
        let r = design.row(j);
        gram.add_outer(r, weights[j] / nn);
        for (sc, &rv) in score.iter_mut().zip(r) {
            *sc += rv * weights[j] * sample.y[i] / nn;
        }
    }

    let hdiag = scaling_diag(h, p, s, d)?;
    let theta: Vec<T> = beta.iter().zip(&hdiag).map(|(&b, &hh)| b / hh).collect();

    let mut residuals = Vec::with_capacity(m);
    let mut leverages = Vec::with_capacity(m);
    for (j, &i) in rows.iter().enumerate() {
        let r = design.row(j);
        residuals.push(sample.y[i] - dot(r, &beta));
        leverages.push(weights[j] * gram_inv.quad_form(r) / nn);
    }

    Ok(SideFit {
        side,
        h,
        p,
        s,
        d,
        n,
        rows,
        design,
        weights,
        gram,
        gram_inv,
        score,
        theta,
        residuals,
        leverages,
        eff_n: m,
        gram_rcond: rcond,
    })
}

/// Fits both sides; the two fits are independent and run concurrently.
pub fn fit_both<T: Scalar>(
    sample: &RdSample<T>,
    h: (T, T),
    p: usize,
    s: usize,
    kernel: KernelKind,
) -> Result<(SideFit<T>, SideFit<T>)> {
    let (left, right) = rayon::join(
        || fit_side(sample, Side::Left, h.0, p, s, kernel),
        || fit_side(sample, Side::Right, h.1, p, s, kernel),
    );
    Ok((left?, right?))
}

/// Coefficients of the long interacted regression
/// `Y ~ r_p, T r_p, W (x) r_s, T W (x) r_s` (in `X - c`, unscaled).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongFit<T> {
    /// Control-side levels of the main polynomial.
    pub base: Vec<T>,
    /// Treated-minus-control differences of the main polynomial.
    pub treat: Vec<T>,
    /// Control-side covariate interaction coefficients.
    pub cov: Vec<T>,
    /// Treated-minus-control covariate interaction coefficients.
    pub treat_cov: Vec<T>,
}

/// Fits the long regression with a common bandwidth on both sides.
pub fn fit_long<T: Scalar>(
    sample: &RdSample<T>,
    h: T,
    p: usize,
    s: usize,
    kernel: KernelKind,
) -> Result<LongFit<T>> {
    let left = side_design(sample, Side::Left, h, p, s, kernel)?;
    let right = side_design(sample, Side::Right, h, p, s, kernel)?;
    let d = sample.d();
    let m = d * (1 + s);
    let k = 2 * (1 + p) + 2 * m;
    let nrows = left.rows.len() + right.rows.len();
    if nrows < k {
        return Err(RdError::SingularGram {
            side: Side::Left,
            rcond: 0.0,
        });
    }
    let mut a = Matrix::zeros(nrows, k);
    let mut wy = Vec::with_capacity(nrows);
    let mut r = 0;
    for (design, treated) in [(&left, false), (&right, true)] {
        for (j, &i) in design.rows.iter().enumerate() {
            let sw = design.weights[j].sqrt();
            let row = design.design.row(j);
            let out = a.row_mut(r);
            // layout: [r_p | T r_p | W(x)r_s | T W(x)r_s]
            for l in 0..=p {
                out[l] = row[l] * sw;
                if treated {
                    out[1 + p + l] = row[l] * sw;
                }
            }
            for l in 0..m {
                out[2 * (1 + p) + l] = row[1 + p + l] * sw;
                if treated {
                    out[2 * (1 + p) + m + l] = row[1 + p + l] * sw;
                }
            }
            wy.push(sample.y[i] * sw);
            r += 1;
        }
    }
    let qr = QrSolver::new(&a).map_err(|_| RdError::SingularGram {
        side: Side::Left,
        rcond: 0.0,
    })?;
    let rcond = qr.gram_rcond();
    if !(to_f64(rcond) >= SINGULAR_RCOND) {
        return Err(RdError::SingularGram {
            side: Side::Left,
            rcond: to_f64(rcond),
        });
    }
    let beta = qr.solve(&wy);
    let main_h = scaling_diag(h, p, s, 0)?;
    let cov_h = scaling_diag(h, 0, s, d)?.split_off(1);
    let unscale = |b: &[T], hs: &[T]| -> Vec<T> { b.iter().zip(hs).map(|(&x, &y)| x / y).collect() };
    Ok(LongFit {
        base: unscale(&beta[..1 + p], &main_h),
        treat: unscale(&beta[1 + p..2 * (1 + p)], &main_h),
        cov: unscale(&beta[2 * (1 + p)..2 * (1 + p) + m], &cov_h),
        treat_cov: unscale(&beta[2 * (1 + p) + m..], &cov_h),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport<T> {
    pub max_rel_error: T,
    pub equivalent: bool,
}

/// Tolerance of the long/short comparison, relative to the largest coefficient.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

/// Compares the long interacted regression against the two short fits at a
/// common bandwidth: control levels must match the left fit and treatment
/// interactions must match the right-minus-left differences.
pub fn long_short_equivalence_check<T: Scalar>(
    sample: &RdSample<T>,
    h: T,
    p: usize,
    s: usize,
    kernel: KernelKind,
) -> Result<EquivalenceReport<T>> {
    let (left, right) = fit_both(sample, (h, h), p, s, kernel)?;
    let long = fit_long(sample, h, p, s, kernel)?;
    let main = 1 + p;
    let short_base = &left.theta[..main];
    let short_cov = &left.theta[main..];
    let diff: Vec<T> = right
        .theta
        .iter()
        .zip(&left.theta)
        .map(|(&r, &l)| r - l)
        .collect();
    let pairs = short_base
        .iter()
        .zip(&long.base)
        .chain(diff[..main].iter().zip(&long.treat))
        .chain(short_cov.iter().zip(&long.cov))
        .chain(diff[main..].iter().zip(&long.treat_cov));
    let mut max_err = T::zero();
    let mut scale = T::zero();
    for (&a, &b) in pairs {
        max_err = max_err.max((a - b).abs());
        scale = scale.max(a.abs()).max(b.abs());
    }
    let rel = max_err / scale.max(T::min_positive_value());
    Ok(EquivalenceReport {
        max_rel_error: rel,
        equivalent: rel < lit(EQUIVALENCE_TOL),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RdSample;

    fn toy() -> RdSample<f64> {
        // x: -0.5, 0.25, 0.0 ; w: 2, 1, 3
        RdSample::new(
            vec![1.0, 2.0, 3.0],
            vec![-0.5, 0.25, 0.0],
            0.0,
            Matrix::from_rows(&[[2.0], [1.0], [3.0]]),
        )
    }

    #[test]
    fn side_without_observations_is_empty() {
        let s = RdSample::without_covariates(vec![1.0, 2.0], vec![-1.0, -0.5], 0.0);
        let d = side_design(&s, Side::Right, 1.0, 1, 1, KernelKind::Triangular).unwrap();
        assert!(d.rows.is_empty());
        assert_eq!(d.design.nrows(), 0);
    }

    #[test]
    fn observation_at_cutoff_gets_peak_weight() {
        let s = toy();
        let h = 0.8;
        let d = side_design(&s, Side::Right, h, 1, 1, KernelKind::Triangular).unwrap();
        let pos = d.rows.iter().position(|&i| i == 2).unwrap();
        assert!((d.weights[pos] - 1.0 / h).abs() < 1e-15);
    }

    #[test]
    fn toy_design_matches_hand_computation() {
        let s = toy();
        let d = side_design(&s, Side::Right, 0.5, 1, 1, KernelKind::Triangular).unwrap();
        // right side rows: i=1 (x=.25,u=.5,w=1) and i=2 (x=0,u=0,w=3)
        assert_eq!(d.rows, vec![1, 2]);
        assert_eq!(d.design.row(0), &[1.0, 0.5, 1.0, 0.5]);
        assert_eq!(d.design.row(1), &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(d.weights, vec![0.5 / 0.5, 1.0 / 0.5]);
        let l = side_design(&s, Side::Left, 0.5, 1, 1, KernelKind::Triangular).unwrap();
        // x=-0.5 sits on the boundary: triangular weight is zero, so excluded
        assert!(l.rows.is_empty());
        let l = side_design(&s, Side::Left, 0.5, 1, 1, KernelKind::Uniform).unwrap();
        assert_eq!(l.rows, vec![0]);
        assert_eq!(l.design.row(0), &[1.0, -1.0, 2.0, -2.0]);
    }

    fn noiseless(n: usize) -> RdSample<f64> {
        let mut x = Vec::new();
        let mut w = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let xi = (i as f64 + 0.5) / n as f64; // right side, c = 0
            let wi = ((i * 7) % 5) as f64 - 2.0;
            x.push(xi);
            w.push([wi]);
            y.push(2.0 + 3.0 * xi + wi - 0.5 * wi * xi);
        }
        RdSample::new(y, x, 0.0, Matrix::from_rows(&w))
    }

    #[test]
    fn exact_fit_recovers_coefficients() {
        let s = noiseless(40);
        let f = fit_side(&s, Side::Right, 0.9, 1, 1, KernelKind::Triangular).unwrap();
        for (got, want) in f.theta.iter().zip([2.0, 3.0, 1.0, -0.5]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        assert!(f.residuals.iter().all(|r| r.abs() < 1e-10));
        assert!(f.gram.is_symmetric(1e-14));
        let lev_sum: f64 = f.leverages.iter().sum();
        assert!((lev_sum - 4.0).abs() < 1e-10);
        assert!(f.leverages.iter().all(|&l| l >= 0.0));
        let (tr, tr2) = f.hat_traces();
        assert!((tr - 4.0).abs() < 1e-10 && (tr2 - 4.0).abs() < 1e-10);
    }

    #[test]
    fn no_covariates_is_local_linear() {
        let x: Vec<f64> = (0..30).map(|i| -1.0 + i as f64 / 14.5).collect();
        let y: Vec<f64> = x.iter().map(|&v| (3.0 * v).sin()).collect();
        let s = RdSample::without_covariates(y.clone(), x.clone(), 0.0);
        let h = 0.7;
        let f = fit_side(&s, Side::Right, h, 1, 1, KernelKind::Triangular).unwrap();
        // closed-form weighted simple regression
        let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(&y) {
            if xi < 0.0 {
                continue;
            }
            let k = kernel_w(xi / h);
            sw += k;
            swx += k * xi;
            swy += k * yi;
            swxx += k * xi * xi;
            swxy += k * xi * yi;
        }
        let slope = (sw * swxy - swx * swy) / (sw * swxx - swx * swx);
        let icept = (swy - slope * swx) / sw;
        assert_eq!(f.theta.len(), 2);
        assert!((f.theta[0] - icept).abs() < 1e-12);
        assert!((f.theta[1] - slope).abs() < 1e-12);
    }

    fn kernel_w(u: f64) -> f64 {
        (1.0 - u.abs()).max(0.0)
    }

    #[test]
    fn collinear_covariate_is_singular() {
        let mut s = noiseless(30);
        // second covariate duplicates the first
        let w: Vec<[f64; 2]> = (0..30).map(|i| [s.w[(i, 0)], 2.0 * s.w[(i, 0)]]).collect();
        s.w = Matrix::from_rows(&w);
        let err = fit_side(&s, Side::Right, 0.9, 1, 1, KernelKind::Triangular).unwrap_err();
        assert!(matches!(err, RdError::SingularGram { .. }));
    }

    #[test]
    fn too_few_rows_is_singular() {
        let s = noiseless(3);
        assert!(matches!(
            fit_side(&s, Side::Right, 0.9, 1, 1, KernelKind::Triangular),
            Err(RdError::SingularGram { .. })
        ));
    }

    #[test]
    fn kernel_scale_invariance() {
        let s = noiseless(25);
        let mut s2 = s.clone();
        s2.y.iter_mut()
            .enumerate()
            .for_each(|(i, y)| *y += ((i * 13) % 7) as f64 * 0.1);
        let base = side_design(&s2, Side::Right, 0.8, 1, 1, KernelKind::Epanechnikov).unwrap();
        let mut scaled = base.clone();
        scaled.weights.iter_mut().for_each(|w| *w *= 3.7);
        let a = fit_design(&s2, base).unwrap();
        let b = fit_design(&s2, scaled).unwrap();
        for (x, y) in a.theta.iter().zip(&b.theta) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.residuals.iter().zip(&b.residuals) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.leverages.iter().zip(&b.leverages) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_fit_works() {
        let s = noiseless(40);
        let s32 = RdSample::new(
            s.y.iter().map(|&v| v as f32).collect(),
            s.x.iter().map(|&v| v as f32).collect(),
            0.0f32,
            Matrix::from_vec(40, 1, s.w.as_slice().iter().map(|&v| v as f32).collect()),
        );
        let f = fit_side(&s32, Side::Right, 0.9, 1, 1, KernelKind::Triangular).unwrap();
        for (got, want) in f.theta.iter().zip([2.0f32, 3.0, 1.0, -0.5]) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }
}
