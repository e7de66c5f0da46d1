//! Estimands built from the two one-sided fits: the coefficient-difference
//! vector `varsigma = (theta, xi)`, conditional effects `kappa(w) = theta + xi'w`,
//! and general linear contrasts, each with robust bias-corrected inference.
//!
//! A long-form selector `(s_0, s_1..s_d)` picks `s_0 theta + sum_l s_l xi_l`. On a
//! single side it becomes the short-form vector with `nu! s_0` at the main
//! polynomial's position `nu` and `nu! s_l` at position `nu` of covariate
//! block `l`; all other entries are zero.

use serde::Serialize;

use crate::bandwidth::{mse_bandwidth, pilot_bandwidth, BandwidthSelection};
use crate::error::{RdError, Result};
use crate::inference::{bias_order, ci_pvalue, coef_variance, rbc_side, rbc_variance};
use crate::linalg::{dot, Matrix};
use crate::localfit::{fit_both, SideFit};
use crate::model::{
    validate_sample, BandwidthChoice, BiasBandwidth, CovariateGroup, FitSpec, GroupKind, RdSample,
    Side,
};
use crate::scalar::{factorial, to_f64, Scalar};

/// A named long-form selector `(s_0, s_1..s_d)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selector<T> {
    pub label: String,
    pub weights: Vec<T>,
}

impl<T: Scalar> Selector<T> {
    pub fn new(label: impl Into<String>, weights: Vec<T>) -> Self {
        Selector {
            label: label.into(),
            weights,
        }
    }

    /// `(1, 0, .., 0)`: the effect at `w = 0`.
    pub fn baseline(d: usize) -> Self {
        let mut weights = vec![T::zero(); 1 + d];
        weights[0] = T::one();
        Selector::new("theta", weights)
    }

    /// `(0, e_l)`: the heterogeneity coefficient of covariate `l`.
    pub fn xi(l: usize, d: usize, label: &str) -> Self {
        let mut weights = vec![T::zero(); 1 + d];
        weights[1 + l] = T::one();
        Selector::new(format!("xi[{label}]"), weights)
    }

    /// `(1, w)`: the conditional effect `kappa(w)`.
    pub fn at(w: &[T], labels: &[String]) -> Self {
        let mut weights = Vec::with_capacity(1 + w.len());
        weights.push(T::one());
        weights.extend_from_slice(w);
        let parts: Vec<String> = w
            .iter()
            .zip(labels)
            .map(|(v, l)| format!("{l}={v}"))
            .collect();
        Selector::new(format!("kappa({})", parts.join(",")), weights)
    }
}

/// Short-form selector for long-form weights `sel = (s_0, s_1..s_d)`.
pub fn short_selector<T: Scalar>(sel: &[T], nu: usize, p: usize, s: usize) -> Result<Vec<T>> {
    if nu > p.min(s) {
        return Err(RdError::NuOutOfRange {
            nu,
            max: p.min(s),
        });
    }
    if sel.is_empty() {
        return Err(RdError::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    let d = sel.len() - 1;
    let f = factorial::<T>(nu);
    let mut a = vec![T::zero(); 1 + p + d * (1 + s)];
    a[nu] = f * sel[0];
    for l in 0..d {
        a[1 + p + l * (1 + s) + nu] = f * sel[1 + l];
    }
    Ok(a)
}

/// `e_nu(w)`: extracts `nu! (alpha^{(nu)} + lambda^{(nu)}' w)`, the side's
/// `nu`-th derivative of the conditional mean at `w`.
pub fn extractor<T: Scalar>(nu: usize, w: &[T], p: usize, s: usize) -> Result<Vec<T>> {
    let mut sel = Vec::with_capacity(1 + w.len());
    sel.push(T::one());
    sel.extend_from_slice(w);
    short_selector(&sel, nu, p, s)
}

/// The `(1 + d) x 2k` matrix mapping the stacked coefficients
/// `(theta_-, theta_+)` to `varsigma = (theta, xi_1..xi_d)`.
pub fn long_form_map<T: Scalar>(nu: usize, p: usize, s: usize, d: usize) -> Result<Matrix<T>> {
    let k = 1 + p + d * (1 + s);
    let mut m = Matrix::zeros(1 + d, 2 * k);
    for row in 0..=d {
        let mut sel = vec![T::zero(); 1 + d];
        sel[row] = T::one();
        let a = short_selector(&sel, nu, p, s)?;
        for (j, &v) in a.iter().enumerate() {
            m[(row, j)] = -v;
            m[(row, k + j)] = v;
        }
    }
    Ok(m)
}

/// Point estimate and robust bias-corrected inference for one selector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRecord<T> {
    pub label: String,
    /// Long-form selector `(s_0, s_1..s_d)`.
    pub selector: Vec<T>,
    pub point: T,
    /// Conventional (not bias-corrected) standard error.
    pub se: T,
    pub rbc_point: T,
    pub rbc_se: T,
    pub ci_lower: T,
    pub ci_upper: T,
    pub z: T,
    pub p_value: T,
    /// The bias-corrected standard error was zero.
    pub zero_se: bool,
    /// Some covariate value lies outside the range observed in the windows.
    pub extrapolated: bool,
    pub h: (T, T),
    pub eff_n: (usize, usize),
}

/// Fitted model plus the default estimands.
#[derive(Debug, Clone, Serialize)]
pub struct HteResult<T> {
    pub spec: FitSpec<T>,
    pub n: usize,
    pub d: usize,
    pub covariate_labels: Vec<String>,
    /// Main bandwidths `(h_-, h_+)`.
    pub h: (T, T),
    /// Bias-correction bandwidths `(b_-, b_+)`.
    pub b: (T, T),
    /// In-window observation counts `(N_-, N_+)`.
    pub eff_n: (usize, usize),
    /// `(theta, xi_1..xi_d)` at derivative order `nu`.
    pub varsigma: Vec<T>,
    pub selection: Option<BandwidthSelection<T>>,
    pub records: Vec<EstimateRecord<T>>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub left: SideFit<T>,
    #[serde(skip)]
    pub right: SideFit<T>,
    #[serde(skip)]
    pub pilot_left: SideFit<T>,
    #[serde(skip)]
    pub pilot_right: SideFit<T>,
    #[serde(skip)]
    sample: RdSample<T>,
    #[serde(skip)]
    w_range: Vec<(T, T)>,
}

/// Fits the model with default covariate labels `w1..wd`.
pub fn fit_hte<T: Scalar>(sample: &RdSample<T>, spec: &FitSpec<T>) -> Result<HteResult<T>> {
    let labels: Vec<String> = (1..=sample.d()).map(|l| format!("w{l}")).collect();
    fit_hte_labeled(sample, spec, &labels)
}

/// Fits the model; `labels` names the covariate columns in reported estimands.
/// Every column is reported as a slope `xi[label]`.
pub fn fit_hte_labeled<T: Scalar>(
    sample: &RdSample<T>,
    spec: &FitSpec<T>,
    labels: &[String],
) -> Result<HteResult<T>> {
    fit_hte_grouped(sample, spec, labels, &[])
}

/// Fits the model and reports, besides the baseline effect `theta`, for each
/// indicator group the effect of every non-baseline level (`kappa[label]`) and
/// its difference from the baseline (`diff[label]`), and for every other
/// column its slope (`xi[label]`).
pub fn fit_hte_grouped<T: Scalar>(
    sample: &RdSample<T>,
    spec: &FitSpec<T>,
    labels: &[String],
    groups: &[CovariateGroup],
) -> Result<HteResult<T>> {
    spec.validate()?;
    let sample = validate_sample(sample.clone())?;
    let d = sample.d();
    if labels.len() != d {
        return Err(RdError::DimensionMismatch {
            expected: d,
            got: labels.len(),
        });
    }
    let (p, s, nu) = (spec.p, spec.s, spec.nu);
    let mut warnings = Vec::new();

    let (h, selection) = match spec.bandwidth {
        BandwidthChoice::Fixed(l, r) => ((l, r), None),
        BandwidthChoice::Common(h) => ((h, h), None),
        BandwidthChoice::Select(mode) => {
            let target = match &spec.bw_target {
                Some(t) => {
                    if t.len() != 1 + d {
                        return Err(RdError::DimensionMismatch {
                            expected: 1 + d,
                            got: t.len(),
                        });
                    }
                    t.clone()
                }
                None => Selector::<T>::baseline(d).weights,
            };
            let a = short_selector(&target, nu, p, s)?;
            let sel = mse_bandwidth(&sample, &a, p, s, nu, spec.kernel, spec.vce, mode)?;
            if sel.regularized {
                warnings.push(
                    "estimated bias is near zero; bandwidth selection was regularized".to_string(),
                );
            }
            if sel.h != sel.raw {
                warnings.push("selected bandwidth was clamped to the admissible range".to_string());
            }
            (sel.h, Some(sel))
        }
    };

    let b = match spec.bias_bandwidth {
        BiasBandwidth::MatchMain => h,
        BiasBandwidth::Fixed(l, r) => (l, r),
        BiasBandwidth::Pilot => (
            pilot_bandwidth(&sample, Side::Left, p, s)?.max(h.0),
            pilot_bandwidth(&sample, Side::Right, p, s)?.max(h.1),
        ),
    };

    let (left, right) = fit_both(&sample, h, p, s, spec.kernel)?;
    let (pilot_left, pilot_right) = fit_both(&sample, b, p + 1, s + 1, spec.kernel)?;

    let m = long_form_map::<T>(nu, p, s, d)?;
    let mut stacked = left.theta.clone();
    stacked.extend_from_slice(&right.theta);
    let varsigma = m.matvec(&stacked);

    let mut w_range = vec![(T::infinity(), T::neg_infinity()); d];
    for &i in left.rows.iter().chain(&right.rows) {
        for (l, r) in w_range.iter_mut().enumerate() {
            let v = sample.w[(i, l)];
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }

    let mut result = HteResult {
        spec: spec.clone(),
        n: sample.n(),
        d,
        covariate_labels: labels.to_vec(),
        h,
        b,
        eff_n: (left.eff_n, right.eff_n),
        varsigma,
        selection,
        records: Vec::new(),
        warnings,
        left,
        right,
        pilot_left,
        pilot_right,
        sample,
        w_range,
    };

    let mut records = vec![result.contrast(&Selector::baseline(d))?];
    for (l, label) in labels.iter().enumerate() {
        let indicator = groups
            .iter()
            .any(|g| g.kind == GroupKind::Indicators && g.columns.contains(&l));
        if indicator {
            let mut level = Selector::<T>::xi(l, d, label);
            level.weights[0] = T::one();
            level.label = format!("kappa[{label}]");
            records.push(result.contrast(&level)?);
            let mut diff = Selector::xi(l, d, label);
            diff.label = format!("diff[{label}]");
            records.push(result.contrast(&diff)?);
        } else {
            records.push(result.contrast(&Selector::xi(l, d, label))?);
        }
    }
    for w in &spec.eval_points {
        let rec = result.cate_at(w)?;
        if rec.extrapolated {
            result
                .warnings
                .push(format!("{} extrapolates beyond the observed covariate range", rec.label));
        }
        records.push(rec);
    }
    result.records = records;
    Ok(result)
}

impl<T: Scalar> HteResult<T> {
    /// `theta_hat`.
    pub fn theta(&self) -> T {
        self.varsigma[0]
    }

    /// `xi_hat`.
    pub fn xi(&self) -> &[T] {
        &self.varsigma[1..]
    }

    pub fn record(&self, label: &str) -> Option<&EstimateRecord<T>> {
        self.records.iter().find(|r| r.label == label)
    }

    /// `kappa(w)` with inference.
    pub fn cate_at(&self, w: &[T]) -> Result<EstimateRecord<T>> {
        if w.len() != self.d {
            return Err(RdError::DimensionMismatch {
                expected: self.d,
                got: w.len(),
            });
        }
        self.contrast(&Selector::at(w, &self.covariate_labels))
    }

    /// Any long-form linear contrast with inference.
    pub fn contrast(&self, sel: &Selector<T>) -> Result<EstimateRecord<T>> {
        if sel.weights.len() != 1 + self.d {
            return Err(RdError::DimensionMismatch {
                expected: 1 + self.d,
                got: sel.weights.len(),
            });
        }
        let spec = &self.spec;
        let (p, s, nu) = (spec.p, spec.s, spec.nu);
        let a = short_selector(&sel.weights, nu, p, s)?;
        let point = dot(&a, &self.right.theta) - dot(&a, &self.left.theta);
        let var = coef_variance(
            &self.left,
            &self.right,
            &a,
            nu,
            spec.vce,
            self.sample.cluster.as_deref(),
        )?;
        let rl = rbc_side(&self.sample, &self.left, &self.pilot_left, &a, nu);
        let rr = rbc_side(&self.sample, &self.right, &self.pilot_right, &a, nu);
        let rbc_point = point - (rr.bias - rl.bias);
        let rv = rbc_variance(
            &self.sample,
            (&rl, &self.pilot_left),
            (&rr, &self.pilot_right),
            spec.vce,
        )?;
        let ci = ci_pvalue(rbc_point, rv.se, spec.level);
        let extrapolated = sel.weights[1..]
            .iter()
            .zip(&self.w_range)
            .any(|(&v, &(lo, hi))| v < lo || v > hi);
        debug_assert_eq!(bias_order(p, s, nu), 1 + p.min(s) - nu);
        Ok(EstimateRecord {
            label: sel.label.clone(),
            selector: sel.weights.clone(),
            point,
            se: var.se,
            rbc_point,
            rbc_se: rv.se,
            ci_lower: ci.lower,
            ci_upper: ci.upper,
            z: ci.z,
            p_value: ci.p_value,
            zero_se: ci.zero_se,
            extrapolated: extrapolated && sel.label.starts_with("kappa"),
            h: self.h,
            eff_n: self.eff_n,
        })
    }

    /// The sample the model was fitted on.
    pub fn sample(&self) -> &RdSample<T> {
        &self.sample
    }

    /// Largest relative error between the stacked-coefficient map and the
    /// direct differences.
    pub fn varsigma_check(&self) -> f64 {
        let (p, s, nu) = (self.spec.p, self.spec.s, self.spec.nu);
        let mut worst: f64 = 0.0;
        for row in 0..=self.d {
            let mut sel = vec![T::zero(); 1 + self.d];
            sel[row] = T::one();
            let a = short_selector(&sel, nu, p, s).expect("validated spec");
            let direct = dot(&a, &self.right.theta) - dot(&a, &self.left.theta);
            let err = to_f64((direct - self.varsigma[row]).abs());
            worst = worst.max(err / to_f64(direct.abs()).max(1.0));
        }
        worst
    }
}
