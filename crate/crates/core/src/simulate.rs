//! Simulation designs with known conditional effects, an independent
//! weighted-least-squares oracle, and a deterministic parallel Monte Carlo
//! harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{RdError, Result};
use crate::estimands::{fit_hte, EstimateRecord};
use crate::kernelbasis::{kernel_eval, KernelKind};
use crate::linalg::Matrix;
use crate::model::{FitSpec, RdSample, Side};

/// Distribution of one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum CovariateLaw {
    Bernoulli(f64),
    Uniform(f64, f64),
    Normal(f64, f64),
}

/// Regression error law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum NoiseLaw {
    /// `N(0, sigma^2)`.
    Gaussian { sigma: f64 },
    /// `N(0, sigma^2 (1 + slope |X - c|)^2)`.
    Heteroskedastic { sigma: f64, slope: f64 },
    /// No noise: `Y` is the conditional mean.
    None,
}

/// Cluster structure: `clusters` groups assigned uniformly at random, each
/// contributing a shared `N(0, effect_sd^2)` shock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterLaw {
    pub clusters: usize,
    pub effect_sd: f64,
}

/// `Y = alpha_t(X - c) + sum_l W_l lambda_{t,l}(X - c) + e` with `t` the side,
/// polynomials given by coefficients in increasing powers of `X - c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DgpConfig {
    pub cutoff: f64,
    /// Running variable `X ~ U[lo, hi]`.
    pub running: (f64, f64),
    pub covariates: Vec<CovariateLaw>,
    pub alpha_minus: Vec<f64>,
    pub alpha_plus: Vec<f64>,
    /// One polynomial per covariate.
    pub lambda_minus: Vec<Vec<f64>>,
    pub lambda_plus: Vec<Vec<f64>>,
    pub noise: NoiseLaw,
    pub cluster: Option<ClusterLaw>,
}

impl DgpConfig {
    /// `X ~ U[-1, 1]`, `c = 0`, binary `W` with `P(W = 1) = 0.5`, `sigma = 0.5`,
    /// `alpha_- = 0.5 + 0.8x - 0.6x^2`, `alpha_+ = 1 + 0.6x + 0.9x^2`,
    /// `lambda_- = 0.3 + 0.2x`, `lambda_+ = 0.7 - 0.1x`;
    /// so `kappa(0) = 0.5` and `kappa(1) = 0.9`.
    pub fn canonical() -> Self {
        DgpConfig {
            cutoff: 0.0,
            running: (-1.0, 1.0),
            covariates: vec![CovariateLaw::Bernoulli(0.5)],
            alpha_minus: vec![0.5, 0.8, -0.6],
            alpha_plus: vec![1.0, 0.6, 0.9],
            lambda_minus: vec![vec![0.3, 0.2]],
            lambda_plus: vec![vec![0.7, -0.1]],
            noise: NoiseLaw::Gaussian { sigma: 0.5 },
            cluster: None,
        }
    }

    /// Multiplies every coefficient of order two and above by `factor`.
    pub fn with_curvature(mut self, factor: f64) -> Self {
        let bump = |c: &mut Vec<f64>| c.iter_mut().skip(2).for_each(|v| *v *= factor);
        bump(&mut self.alpha_minus);
        bump(&mut self.alpha_plus);
        self.lambda_minus.iter_mut().for_each(bump);
        self.lambda_plus.iter_mut().for_each(bump);
        self
    }

    pub fn d(&self) -> usize {
        self.covariates.len()
    }

    /// Conditional mean `E[Y | X = x, W = w]`.
    pub fn mean(&self, x: f64, w: &[f64]) -> f64 {
        let z = x - self.cutoff;
        let (a, l) = if Side::Right.contains(x, self.cutoff) {
            (&self.alpha_plus, &self.lambda_plus)
        } else {
            (&self.alpha_minus, &self.lambda_minus)
        };
        horner(a, z) + l.iter().zip(w).map(|(c, &wl)| wl * horner(c, z)).sum::<f64>()
    }
}

fn horner(c: &[f64], z: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * z + v)
}

fn deriv_at_zero(c: &[f64], nu: usize) -> f64 {
    let f: f64 = (1..=nu).map(|i| i as f64).product();
    c.get(nu).copied().unwrap_or(0.0) * f
}

/// `kappa(w)`: the `nu`-th derivative jump of the conditional mean at the cutoff.
pub fn true_cate(dgp: &DgpConfig, w: &[f64], nu: usize) -> f64 {
    let base = deriv_at_zero(&dgp.alpha_plus, nu) - deriv_at_zero(&dgp.alpha_minus, nu);
    let het: f64 = dgp
        .lambda_plus
        .iter()
        .zip(&dgp.lambda_minus)
        .zip(w)
        .map(|((lp, lm), &wl)| wl * (deriv_at_zero(lp, nu) - deriv_at_zero(lm, nu)))
        .sum();
    base + het
}

/// Draws one sample of size `n`.
pub fn gen_sample<R: Rng + ?Sized>(dgp: &DgpConfig, n: usize, rng: &mut R) -> RdSample<f64> {
    let xlaw = Uniform::new(dgp.running.0, dgp.running.1).expect("valid running range");
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let d = dgp.d();
    let effects: Vec<f64> = match dgp.cluster {
        Some(c) => (0..c.clusters).map(|_| c.effect_sd * std.sample(rng)).collect(),
        None => Vec::new(),
    };
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut w = Matrix::zeros(n, d);
    let mut cl = Vec::new();
    for i in 0..n {
        let xi = xlaw.sample(rng);
        for (l, law) in dgp.covariates.iter().enumerate() {
            w[(i, l)] = match *law {
                CovariateLaw::Bernoulli(p) => {
                    f64::from(u8::from(Bernoulli::new(p).expect("probability").sample(rng)))
                }
                CovariateLaw::Uniform(a, b) => Uniform::new(a, b).expect("range").sample(rng),
                CovariateLaw::Normal(m, s) => m + s * std.sample(rng),
            };
        }
        let mut e = match dgp.noise {
            NoiseLaw::Gaussian { sigma } => sigma * std.sample(rng),
            NoiseLaw::Heteroskedastic { sigma, slope } => {
                sigma * (1.0 + slope * (xi - dgp.cutoff).abs()) * std.sample(rng)
            }
            NoiseLaw::None => 0.0,
        };
        if let Some(c) = dgp.cluster {
            let g = rng.random_range(0..c.clusters);
            e += effects[g];
            cl.push(g as i64);
        }
        x.push(xi);
        y.push(dgp.mean(xi, w.row(i)) + e);
    }
    let s = RdSample::new(y, x, dgp.cutoff, w);
    if dgp.cluster.is_some() {
        s.with_clusters(cl)
    } else {
        s
    }
}

/// Reference one-sided fit: forms the kernel-weighted normal equations directly
/// and solves them by Gaussian elimination with partial pivoting. Shares no
/// code with the QR-based fit. Returns unscaled coefficients.
pub fn oracle_wls(
    sample: &RdSample<f64>,
    side: Side,
    h: f64,
    p: usize,
    s: usize,
    kernel: KernelKind,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(RdError::NonPositiveBandwidth(h));
    }
    let d = sample.d();
    let k = 1 + p + d * (1 + s);
    let mut a = vec![vec![0.0; k + 1]; k];
    let mut row = vec![0.0; k];
    for i in 0..sample.n() {
        if !side.contains(sample.x[i], sample.cutoff) {
            continue;
        }
        let u = (sample.x[i] - sample.cutoff) / h;
        let kw = kernel_eval(u, kernel) / h;
        if kw <= 0.0 {
            continue;
        }
        for j in 0..=p {
            row[j] = u.powi(j as i32);
        }
        for l in 0..d {
            for j in 0..=s {
                row[1 + p + l * (1 + s) + j] = sample.w[(i, l)] * u.powi(j as i32);
            }
        }
        for r in 0..k {
            for c in 0..k {
                a[r][c] += kw * row[r] * row[c];
            }
            a[r][k] += kw * row[r] * sample.y[i];
        }
    }
    let beta = gauss_solve(a).ok_or(RdError::SingularGram { side, rcond: 0.0 })?;
    let mut theta = Vec::with_capacity(k);
    for j in 0..=p {
        theta.push(beta[j] / h.powi(j as i32));
    }
    for l in 0..d {
        for j in 0..=s {
            theta.push(beta[1 + p + l * (1 + s) + j] / h.powi(j as i32));
        }
    }
    Ok(theta)
}

/// Solves the augmented system `[A | b]` in place.
fn gauss_solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let k = a.len();
    let scale = a
        .iter()
        .flat_map(|r| r[..k].iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..k {
        let piv = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..k {
            let f = a[r][col] / a[col][col];
            for c in col..=k {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let tail: f64 = (r + 1..k).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][k] - tail) / a[r][r];
    }
    Some(x)
}

/// Per-target Monte Carlo summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetSummary {
    pub label: String,
    pub w: Vec<f64>,
    pub truth: f64,
    /// Mean of the conventional point estimate minus the truth.
    pub mean_bias: f64,
    /// Mean of the bias-corrected point minus the truth.
    pub mean_rbc_bias: f64,
    /// RMSE of the conventional point.
    pub rmse: f64,
    /// Standard deviation of the conventional point.
    pub sd: f64,
    /// Standard deviation of the bias-corrected point.
    pub rbc_sd: f64,
    pub mean_rbc_se: f64,
    /// Share of replications whose bias-corrected interval covers the truth.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloReport {
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub mean_h: (f64, f64),
    pub targets: Vec<TargetSummary>,
}

struct RepOutcome {
    h: (f64, f64),
    records: Vec<EstimateRecord<f64>>,
}

/// Runs `replications` independent fits of `spec` on samples of size `n`,
/// reporting `kappa(w)` for each `w` in `targets`. Replication `r` draws from
/// ChaCha8 seeded with `seed` on stream `r`, so the report does not depend on
/// the thread count.
pub fn monte_carlo(
    dgp: &DgpConfig,
    n: usize,
    replications: usize,
    seed: u64,
    spec: &FitSpec<f64>,
    targets: &[Vec<f64>],
) -> Result<MonteCarloReport> {
    let mut spec = spec.clone();
    spec.eval_points = targets.to_vec();
    let outcomes: Vec<Option<RepOutcome>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let sample = gen_sample(dgp, n, &mut rng);
            let fit = fit_hte(&sample, &spec).ok()?;
            let first = fit.records.len() - targets.len();
            Some(RepOutcome {
                h: fit.h,
                records: fit.records[first..].to_vec(),
            })
        })
        .collect();

    let ok: Vec<&RepOutcome> = outcomes.iter().flatten().collect();
    let failures = replications - ok.len();
    if ok.is_empty() {
        return Err(RdError::AllReplicationsFailed(replications));
    }
    let m = ok.len() as f64;
    let mut mean_h = (0.0, 0.0);
    for o in &ok {
        mean_h.0 += o.h.0 / m;
        mean_h.1 += o.h.1 / m;
    }
    let mut summaries = Vec::with_capacity(targets.len());
    for (t, w) in targets.iter().enumerate() {
        let truth = true_cate(dgp, w, spec.nu);
        let (mut bias, mut rbc_bias, mut sq, mut se, mut cover) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut points = Vec::with_capacity(ok.len());
        let mut rbc_points = Vec::with_capacity(ok.len());
        for o in &ok {
            let r = &o.records[t];
            bias += r.point - truth;
            rbc_bias += r.rbc_point - truth;
            sq += (r.point - truth).powi(2);
            se += r.rbc_se;
            if r.ci_lower <= truth && truth <= r.ci_upper {
                cover += 1.0;
            }
            points.push(r.point);
            rbc_points.push(r.rbc_point);
        }
        let sd = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / m;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt()
        };
        summaries.push(TargetSummary {
            label: ok[0].records[t].label.clone(),
            w: w.clone(),
            truth,
            mean_bias: bias / m,
            mean_rbc_bias: rbc_bias / m,
            rmse: (sq / m).sqrt(),
            sd: sd(&points),
            rbc_sd: sd(&rbc_points),
            mean_rbc_se: se / m,
            coverage: cover / m,
        });
    }
    Ok(MonteCarloReport {
        n,
        replications,
        failures,
        failure_rate: failures as f64 / replications as f64,
        mean_h,
        targets: summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localfit::fit_side;
    use crate::model::BandwidthChoice;

    #[test]
    fn canonical_truth() {
        let g = DgpConfig::canonical();
        assert!((true_cate(&g, &[0.0], 0) - 0.5).abs() < 1e-15);
        assert!((true_cate(&g, &[1.0], 0) - 0.9).abs() < 1e-15);
        // first-derivative jump: (0.6 - 0.8) + w (-0.1 - 0.2)
        assert!((true_cate(&g, &[1.0], 1) + 0.5).abs() < 1e-15);
        assert!((g.mean(0.5, &[1.0]) - (1.0 + 0.3 + 0.225 + 0.65)).abs() < 1e-15);
    }

    #[test]
    fn generation_is_reproducible() {
        let g = DgpConfig::canonical();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(gen_sample(&g, 50, &mut a), gen_sample(&g, 50, &mut b));
        let mut g2 = g.clone();
        g2.cluster = Some(ClusterLaw {
            clusters: 5,
            effect_sd: 0.1,
        });
        let s = gen_sample(&g2, 40, &mut a);
        assert!(s.cluster.unwrap().iter().all(|&c| (0..5).contains(&c)));
    }

    #[test]
    fn oracle_matches_qr_fit() {
        let g = DgpConfig::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = gen_sample(&g, 400, &mut rng);
        for side in Side::BOTH {
            let o = oracle_wls(&s, side, 0.6, 1, 1, KernelKind::Epanechnikov).unwrap();
            let f = fit_side(&s, side, 0.6, 1, 1, KernelKind::Epanechnikov).unwrap();
            for (a, b) in o.iter().zip(&f.theta) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gauss_solve_detects_singularity() {
        assert!(gauss_solve(vec![vec![1.0, 2.0, 1.0], vec![2.0, 4.0, 2.0]]).is_none());
        let x = gauss_solve(vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 3.0]]).unwrap();
        assert_eq!(x, vec![3.0, 2.0]);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let g = DgpConfig::canonical();
        let spec = FitSpec {
            bandwidth: BandwidthChoice::Common(0.5),
            ..FitSpec::default()
        };
        let t = vec![vec![0.0], vec![1.0]];
        let a = monte_carlo(&g, 300, 12, 5, &spec, &t).unwrap();
        let b = monte_carlo(&g, 300, 12, 5, &spec, &t).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.failures, 0);
        assert!((a.targets[1].truth - 0.9).abs() < 1e-15);
    }
}
