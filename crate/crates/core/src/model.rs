//! Sample and fit-configuration types, input validation, and expansion of raw
//! covariates into the heterogeneity design `W`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::error::{RdError, Result};
use crate::kernelbasis::KernelKind;
use crate::linalg::Matrix;
use crate::scalar::{from_usize, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    /// Sharp assignment: `X >= c` is treated (right), `X < c` is control (left).
    pub fn contains<T: Scalar>(self, x: T, cutoff: T) -> bool {
        match self {
            Side::Left => x < cutoff,
            Side::Right => x >= cutoff,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

/// Outcome, running variable, cutoff, heterogeneity covariates and optional
/// cluster labels for a sharp RD design.
#[derive(Debug, Clone, PartialEq)]
pub struct RdSample<T> {
    pub y: Vec<T>,
    pub x: Vec<T>,
    pub cutoff: T,
    /// `n x d` heterogeneity design; `d = 0` gives the plain RD fit.
    pub w: Matrix<T>,
    pub cluster: Option<Vec<i64>>,
}

impl<T: Scalar> RdSample<T> {
    pub fn new(y: Vec<T>, x: Vec<T>, cutoff: T, w: Matrix<T>) -> Self {
        RdSample {
            y,
            x,
            cutoff,
            w,
            cluster: None,
        }
    }

    /// Sample without heterogeneity covariates.
    pub fn without_covariates(y: Vec<T>, x: Vec<T>, cutoff: T) -> Self {
        let n = x.len();
        Self::new(y, x, cutoff, Matrix::zeros(n, 0))
    }

    pub fn with_clusters(mut self, cluster: Vec<i64>) -> Self {
        self.cluster = Some(cluster);
        self
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn side_count(&self, side: Side) -> usize {
        self.x
            .iter()
            .filter(|&&x| side.contains(x, self.cutoff))
            .count()
    }

    /// Row subset, keeping column structure and clusters.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let d = self.d();
        let mut w = Matrix::zeros(rows.len(), d);
        for (k, &i) in rows.iter().enumerate() {
            w.row_mut(k).copy_from_slice(self.w.row(i));
        }
        RdSample {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            x: rows.iter().map(|&i| self.x[i]).collect(),
            cutoff: self.cutoff,
            w,
            cluster: self
                .cluster
                .as_ref()
                .map(|c| rows.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Checks the load-time invariants of a sample: equal lengths, `n >= 1`, all
/// values finite. The per-side support condition is checked at fit time.
pub fn validate_sample<T: Scalar>(sample: RdSample<T>) -> Result<RdSample<T>> {
    let n = sample.y.len();
    if sample.x.len() != n || sample.w.nrows() != n {
        return Err(RdError::LengthMismatch(format!(
            "y has {n} rows, x has {}, w has {}",
            sample.x.len(),
            sample.w.nrows()
        )));
    }
    if let Some(c) = &sample.cluster {
        if c.len() != n {
            return Err(RdError::LengthMismatch(format!(
                "y has {n} rows, cluster has {}",
                c.len()
            )));
        }
    }
    if n == 0 {
        return Err(RdError::EmptySample);
    }
    if !sample.cutoff.is_finite() {
        return Err(RdError::NonFinite {
            row: 0,
            column: "cutoff".into(),
        });
    }
    for i in 0..n {
        if !sample.y[i].is_finite() {
            return Err(RdError::NonFinite {
                row: i,
                column: "y".into(),
            });
        }
        if !sample.x[i].is_finite() {
            return Err(RdError::NonFinite {
                row: i,
                column: "x".into(),
            });
        }
        if let Some(j) = sample.w.row(i).iter().position(|v| !v.is_finite()) {
            return Err(RdError::NonFinite {
                row: i,
                column: format!("w[{j}]"),
            });
        }
    }
    Ok(sample)
}

/// How the bandwidth is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BandwidthChoice<T> {
    /// Separate fixed bandwidths `(h_left, h_right)`.
    Fixed(T, T),
    /// One fixed bandwidth on both sides.
    Common(T),
    /// MSE-optimal selection for the target selector.
    Select(SelectMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    OneSided,
    TwoSided,
}

/// Bandwidth of the higher-order pilot fit used by bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BiasBandwidth<T> {
    /// Same window as the main fit (`b = h`).
    MatchMain,
    /// Rule-of-thumb pilot bandwidth, never smaller than `h`.
    Pilot,
    Fixed(T, T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Vce {
    HC0,
    HC1,
    HC2,
    HC3,
    Cluster,
}

/// Polynomial orders, derivative order, kernel, bandwidth rule, variance
/// estimator and confidence level for one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSpec<T> {
    /// Main polynomial order in `X - c`.
    pub p: usize,
    /// Order of the `W x (X - c)` interaction polynomial.
    pub s: usize,
    /// Derivative order (0 for jumps, 1 for kinks).
    pub nu: usize,
    pub kernel: KernelKind,
    pub bandwidth: BandwidthChoice<T>,
    pub bias_bandwidth: BiasBandwidth<T>,
    pub vce: Vce,
    pub level: T,
    /// Long-form selector `(s_0, s_1..s_d)` the bandwidth is optimised for;
    /// `None` targets the baseline effect `(1, 0, .., 0)`.
    pub bw_target: Option<Vec<T>>,
    /// Covariate points `w` at which `kappa(w)` is reported.
    pub eval_points: Vec<Vec<T>>,
}

impl<T: Scalar> Default for FitSpec<T> {
    fn default() -> Self {
        FitSpec {
            p: 1,
            s: 1,
            nu: 0,
            kernel: KernelKind::Triangular,
            bandwidth: BandwidthChoice::Select(SelectMode::TwoSided),
            bias_bandwidth: BiasBandwidth::MatchMain,
            vce: Vce::HC3,
            level: T::from_f64(0.95).unwrap(),
            bw_target: None,
            eval_points: Vec::new(),
        }
    }
}

impl<T: Scalar> FitSpec<T> {
    pub fn validate(&self) -> Result<()> {
        let max = self.p.min(self.s);
        if self.nu > max {
            return Err(RdError::NuOutOfRange { nu: self.nu, max });
        }
        if !(self.level > T::zero() && self.level < T::one()) {
            return Err(RdError::InvalidSpec(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        let check = |h: T| {
            if h > T::zero() && h.is_finite() {
                Ok(())
            } else {
                Err(RdError::NonPositiveBandwidth(h.to_f64().unwrap_or(f64::NAN)))
            }
        };
        match self.bandwidth {
            BandwidthChoice::Fixed(l, r) => {
                check(l)?;
                check(r)?;
            }
            BandwidthChoice::Common(h) => check(h)?,
            BandwidthChoice::Select(_) => {}
        }
        if let BiasBandwidth::Fixed(l, r) = self.bias_bandwidth {
            check(l)?;
            check(r)?;
        }
        Ok(())
    }

    /// Number of coefficients in one short (one-sided) fit for `d` covariates.
    pub fn n_params(&self, d: usize) -> usize {
        1 + self.p + d * (1 + self.s)
    }
}

// ---------------------------------------------------------------------------
// covariate expansion

/// One raw input column.
#[derive(Debug, Clone, PartialEq)]
pub enum RawColumn<T> {
    Numeric(Vec<T>),
    Text(Vec<String>),
}

impl<T: Scalar> RawColumn<T> {
    pub fn len(&self) -> usize {
        match self {
            RawColumn::Numeric(v) => v.len(),
            RawColumn::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<String> {
        match self {
            RawColumn::Numeric(v) => v.iter().map(|x| format!("{x}")).collect(),
            RawColumn::Text(v) => v.clone(),
        }
    }
}

/// Named raw columns, e.g. as read from a CSV file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTable<T> {
    pub names: Vec<String>,
    pub columns: Vec<RawColumn<T>>,
}

impl<T: Scalar> RawTable<T> {
    pub fn push(&mut self, name: impl Into<String>, column: RawColumn<T>) {
        self.names.push(name.into());
        self.columns.push(column);
    }

    pub fn get(&self, name: &str) -> Option<&RawColumn<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, RawColumn::len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    /// `w, w^2, .., w^power_max`.
    Continuous { power_max: u32 },
    /// One indicator per non-baseline level. Levels default to the observed
    /// ones; the baseline defaults to the first level in sorted order.
    Categorical {
        levels: Option<Vec<String>>,
        baseline: Option<String>,
    },
    /// A 0/1 column, or a two-level label column.
    Binary,
    /// Indicators of empirical-quantile bins; the lowest bin is the baseline.
    QuantileBins { bins: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CovariateColumn {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CovariateSpec {
    pub columns: Vec<CovariateColumn>,
}

impl CovariateSpec {
    pub fn push(mut self, name: impl Into<String>, kind: CovariateKind) -> Self {
        self.columns.push(CovariateColumn {
            name: name.into(),
            kind,
        });
        self
    }
}

/// Whether the expanded columns of one source variable are mutually exclusive
/// group indicators or numeric regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Indicators,
    Numeric,
}

/// Columns of `W` that came from one source variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateGroup {
    pub source: String,
    pub kind: GroupKind,
    /// Label of the omitted baseline level, for indicator groups.
    pub baseline: Option<String>,
    pub columns: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedCovariates<T> {
    pub w: Matrix<T>,
    pub labels: Vec<String>,
    pub groups: Vec<CovariateGroup>,
}

/// Expands raw columns into `W` following `spec`, in declared order.
pub fn expand_covariates<T: Scalar>(
    raw: &RawTable<T>,
    spec: &CovariateSpec,
) -> Result<ExpandedCovariates<T>> {
    let n = raw.nrows();
    let mut cols: Vec<Vec<T>> = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();

    for cc in &spec.columns {
        let column = raw
            .get(&cc.name)
            .ok_or_else(|| RdError::InvalidSpec(format!("no column named `{}`", cc.name)))?;
        if column.len() != n {
            return Err(RdError::LengthMismatch(format!(
                "column `{}` has {} rows, expected {n}",
                cc.name,
                column.len()
            )));
        }
        let start = cols.len();
        let (kind, baseline) = match &cc.kind {
            CovariateKind::Continuous { power_max } => {
                let v = numeric(column, &cc.name)?;
                let q = (*power_max).max(1);
                for k in 1..=q {
                    cols.push(v.iter().map(|&x| x.powi(k as i32)).collect());
                    labels.push(if k == 1 {
                        cc.name.clone()
                    } else {
                        format!("{}^{k}", cc.name)
                    });
                }
                (GroupKind::Numeric, None)
            }
            CovariateKind::Categorical { levels, baseline } => {
                let (ind, names, base) =
                    categorical(column, &cc.name, levels.as_deref(), baseline.as_deref())?;
                cols.extend(ind);
                labels.extend(names);
                (GroupKind::Indicators, Some(base))
            }
            CovariateKind::Binary => match column {
                RawColumn::Numeric(v) => {
                    if let Some(bad) = v.iter().find(|&&x| x != T::zero() && x != T::one()) {
                        return Err(RdError::NotBinary {
                            column: cc.name.clone(),
                            detail: format!("value {bad} is not 0 or 1"),
                        });
                    }
                    cols.push(v.clone());
                    labels.push(cc.name.clone());
                    (GroupKind::Indicators, Some(format!("{}=0", cc.name)))
                }
                RawColumn::Text(_) => {
                    let (ind, names, base) = categorical(column, &cc.name, None, None)?;
                    if ind.len() > 1 {
                        return Err(RdError::NotBinary {
                            column: cc.name.clone(),
                            detail: format!("{} levels", ind.len() + 1),
                        });
                    }
                    cols.extend(ind);
                    labels.extend(names);
                    (GroupKind::Indicators, Some(base))
                }
            },
            CovariateKind::QuantileBins { bins } => {
                let v = numeric(column, &cc.name)?;
                let (ind, names) = quantile_bins(v, *bins, &cc.name)?;
                cols.extend(ind);
                labels.extend(names);
                (GroupKind::Indicators, Some(format!("{}:q1", cc.name)))
            }
        };
        groups.push(CovariateGroup {
            source: cc.name.clone(),
            kind,
            baseline,
            columns: start..cols.len(),
        });
    }

    let d = cols.len();
    let mut w = Matrix::zeros(n, d);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            w[(i, j)] = v;
        }
    }
    Ok(ExpandedCovariates { w, labels, groups })
}

fn numeric<'a, T: Scalar>(column: &'a RawColumn<T>, name: &str) -> Result<&'a Vec<T>> {
    match column {
        RawColumn::Numeric(v) => Ok(v),
        RawColumn::Text(_) => Err(RdError::NotNumeric(name.to_string())),
    }
}

type Indicators<T> = (Vec<Vec<T>>, Vec<String>, String);

fn categorical<T: Scalar>(
    column: &RawColumn<T>,
    name: &str,
    levels: Option<&[String]>,
    baseline: Option<&str>,
) -> Result<Indicators<T>> {
    let values = column.labels();
    let levels: Vec<String> = match levels {
        Some(declared) => {
            let known: BTreeSet<&str> = declared.iter().map(String::as_str).collect();
            if let Some(v) = values.iter().find(|v| !known.contains(v.as_str())) {
                return Err(RdError::UnknownLevel {
                    column: name.to_string(),
                    level: v.clone(),
                });
            }
            let mut l = declared.to_vec();
            l.sort();
            l.dedup();
            l
        }
        None => values
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let base = match baseline {
        Some(b) => {
            if !levels.iter().any(|l| l == b) {
                return Err(RdError::UnknownLevel {
                    column: name.to_string(),
                    level: b.to_string(),
                });
            }
            b.to_string()
        }
        None => levels
            .first()
            .cloned()
            .ok_or_else(|| RdError::InvalidSpec(format!("`{name}` has no levels")))?,
    };
    let index: BTreeMap<&str, usize> = levels
        .iter()
        .filter(|l| **l != base)
        .enumerate()
        .map(|(k, l)| (l.as_str(), k))
        .collect();
    let mut cols = vec![vec![T::zero(); values.len()]; index.len()];
    for (i, v) in values.iter().enumerate() {
        if let Some(&k) = index.get(v.as_str()) {
            cols[k][i] = T::one();
        }
    }
    let names = levels
        .iter()
        .filter(|l| **l != base)
        .map(|l| format!("{name}={l}"))
        .collect();
    Ok((cols, names, format!("{name}={base}")))
}

/// Empirical quantile with linear interpolation between order statistics:
/// position `(n - 1) * prob` in the sorted sample (R/NumPy default rule).
pub fn quantile<T: Scalar>(sorted: &[T], prob: T) -> T {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let n = sorted.len();
    let pos = from_usize::<T>(n - 1) * prob;
    let lo = pos.floor().to_usize().unwrap_or(0).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = pos - from_usize::<T>(lo);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub(crate) fn sorted_copy<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    s
}

/// Cut points at probabilities `j / bins`, `j = 1..bins-1`; bin `j` is the
/// left-closed interval `[cut_j, cut_{j+1})`. Returns indicators for bins
/// `2..=bins`.
fn quantile_bins<T: Scalar>(
    v: &[T],
    bins: usize,
    name: &str,
) -> Result<(Vec<Vec<T>>, Vec<String>)> {
    if bins < 2 {
        return Err(RdError::InvalidSpec(format!(
            "`{name}` needs at least 2 quantile bins, got {bins}"
        )));
    }
    let sorted = sorted_copy(v);
    let distinct_values = {
        let mut d = sorted.clone();
        d.dedup();
        d.len()
    };
    let cuts: Vec<T> = (1..bins)
        .map(|j| quantile(&sorted, from_usize::<T>(j) / from_usize::<T>(bins)))
        .collect();
    let mut distinct_cuts = cuts.clone();
    distinct_cuts.dedup();
    if distinct_values < bins || distinct_cuts.len() < bins - 1 {
        return Err(RdError::DegenerateQuantiles {
            column: name.to_string(),
            bins,
            distinct: distinct_cuts.len().min(distinct_values),
        });
    }
    let mut cols = vec![vec![T::zero(); v.len()]; bins - 1];
    for (i, &x) in v.iter().enumerate() {
        // number of cut points <= x gives the 0-based bin
        let bin = cuts.iter().filter(|&&c| c <= x).count();
        if bin > 0 {
            cols[bin - 1][i] = T::one();
        }
    }
    let names = (2..=bins).map(|j| format!("{name}:q{j}")).collect();
    Ok((cols, names))
}
