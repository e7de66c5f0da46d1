use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdhte::estimands::short_selector;
use rdhte::inference::{
    cluster_factor, cluster_meat, coef_variance, hc_weights, influence, meat_matrix, rbc_side,
    rbc_variance,
};
use rdhte::simulate::{gen_sample, DgpConfig, NoiseLaw};
use rdhte::{
    fit_hte, fit_side, BandwidthChoice, FitSpec, KernelKind, RdSample, Selector, Side, Vce,
};

fn canonical(n: usize, seed: u64) -> RdSample<f64> {
    gen_sample(&DgpConfig::canonical(), n, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn common(h: f64, vce: Vce) -> FitSpec<f64> {
    FitSpec {
        bandwidth: BandwidthChoice::Common(h),
        vce,
        ..FitSpec::default()
    }
}

#[test]
fn influence_route_equals_sandwich() {
    let s = canonical(800, 3);
    let l = fit_side(&s, Side::Left, 0.5, 1, 1, KernelKind::Triangular).unwrap();
    let r = fit_side(&s, Side::Right, 0.5, 1, 1, KernelKind::Triangular).unwrap();
    let a = short_selector(&[1.0, 1.0], 0, 1, 1).unwrap();
    for vce in [Vce::HC0, Vce::HC1, Vce::HC2, Vce::HC3] {
        let v = coef_variance(&l, &r, &a, 0, vce, None).unwrap();
        let mut direct = 0.0;
        for fit in [&l, &r] {
            let w = hc_weights(vce, fit).unwrap();
            let infl = influence(fit, &a);
            for j in 0..fit.rows.len() {
                direct += w[j] * infl[j].powi(2) * fit.residuals[j].powi(2);
            }
        }
        assert!((v.variance - direct).abs() / direct < 1e-12, "{vce:?}");
    }
}

#[test]
fn influence_reproduces_point_estimate() {
    let s = canonical(600, 4);
    let f = fit_side(&s, Side::Right, 0.6, 1, 1, KernelKind::Epanechnikov).unwrap();
    let a = short_selector(&[1.0, 0.5], 0, 1, 1).unwrap();
    let lin: f64 = influence(&f, &a)
        .iter()
        .zip(&f.rows)
        .map(|(c, &i)| c * s.y[i])
        .sum();
    let direct: f64 = a.iter().zip(&f.theta).map(|(x, y)| x * y).sum();
    assert!((lin - direct).abs() < 1e-12);
}

#[test]
fn combined_weights_reproduce_rbc_point() {
    let s = canonical(1500, 5);
    let r = fit_hte(&s, &common(0.4, Vce::HC3)).unwrap();
    let a = short_selector(&[1.0, 1.0], 0, 1, 1).unwrap();
    let rl = rbc_side(&s, &r.left, &r.pilot_left, &a, 0);
    let rr = rbc_side(&s, &r.right, &r.pilot_right, &a, 0);
    let via_weights = rr.apply(&s.y) - rl.apply(&s.y);
    let rec = r.cate_at(&[1.0]).unwrap();
    assert!((via_weights - rec.rbc_point).abs() < 1e-12);
}

#[test]
fn combined_weights_annihilate_constants_for_differences() {
    let mut s = canonical(1000, 6);
    s.y.iter_mut().for_each(|v| *v = 2.5);
    let r = fit_hte(&s, &common(0.5, Vce::HC0)).unwrap();
    let a = short_selector(&[1.0, 0.0], 0, 1, 1).unwrap();
    let rl = rbc_side(&s, &r.left, &r.pilot_left, &a, 0);
    let rr = rbc_side(&s, &r.right, &r.pilot_right, &a, 0);
    assert!((rr.apply(&s.y) - rl.apply(&s.y)).abs() < 1e-12);
}

#[test]
fn rbc_variance_exceeds_plain_without_bias() {
    let mut g = DgpConfig::canonical();
    g.alpha_minus.truncate(2);
    g.alpha_plus.truncate(2);
    let s = gen_sample(&g, 1500, &mut ChaCha8Rng::seed_from_u64(7));
    let r = fit_hte(&s, &common(0.5, Vce::HC0)).unwrap();
    for rec in &r.records {
        assert!(rec.rbc_se >= rec.se, "{}", rec.label);
    }
}

#[test]
fn single_cluster_rbc_fails_and_singletons_match_hc0() {
    let s = canonical(600, 8);
    let singles = s.clone().with_clusters((0..600).collect());
    let f = fit_side(&singles, Side::Left, 0.6, 1, 1, KernelKind::Triangular).unwrap();
    let cl = cluster_meat(&f, singles.cluster.as_ref().unwrap()).unwrap();
    let hc0 = meat_matrix(&f, &hc_weights(Vce::HC0, &f).unwrap());
    assert!(cl.max_abs_diff(&hc0) < 1e-12 * hc0.max_abs());

    // clustered contraction = HC0 contraction x N/(N - p - 1 - d)
    let r = fit_hte(&singles, &common(0.6, Vce::Cluster)).unwrap();
    let h0 = fit_hte(&s, &common(0.6, Vce::HC0)).unwrap();
    let a = short_selector(&[1.0, 0.0], 0, 1, 1).unwrap();
    let vc = coef_variance(&r.left, &r.right, &a, 0, Vce::Cluster, singles.cluster.as_deref()).unwrap();
    let v0 = coef_variance(&h0.left, &h0.right, &a, 0, Vce::HC0, None).unwrap();
    let fl = cluster_factor(&r.left);
    let fr = cluster_factor(&r.right);
    assert!((vc.left.variance - fl * v0.left.variance).abs() < 1e-12 * v0.left.variance);
    assert!((vc.right.variance - fr * v0.right.variance).abs() < 1e-12 * v0.right.variance);

    let one = s.clone().with_clusters(vec![1; 600]);
    assert!(fit_hte(&one, &common(0.6, Vce::Cluster)).is_err());
    let rl = rbc_side(&s, &h0.left, &h0.pilot_left, &a, 0);
    let rr = rbc_side(&s, &h0.right, &h0.pilot_right, &a, 0);
    assert!(rbc_variance(&one, (&rl, &h0.pilot_left), (&rr, &h0.pilot_right), Vce::Cluster).is_err());
}

#[test]
fn zero_noise_zero_bias_is_exact_everywhere() {
    let mut g = DgpConfig::canonical();
    g.noise = NoiseLaw::None;
    g.alpha_minus.truncate(2);
    g.alpha_plus.truncate(2);
    let s = gen_sample(&g, 2000, &mut ChaCha8Rng::seed_from_u64(9));
    let r = fit_hte(&s, &common(0.3, Vce::HC0)).unwrap();
    let k1 = r.cate_at(&[1.0]).unwrap();
    assert!((k1.point - 0.9).abs() < 1e-10);
    assert!((k1.rbc_point - 0.9).abs() < 1e-10);
    assert!(k1.rbc_se < 1e-10);
}

#[test]
fn classical_rd_when_no_covariates() {
    let s = canonical(1000, 10);
    let s0 = RdSample::without_covariates(s.y.clone(), s.x.clone(), 0.0);
    let r = fit_hte(&s0, &common(0.5, Vce::HC3)).unwrap();
    assert_eq!(r.records.len(), 1);
    let l = fit_side(&s0, Side::Left, 0.5, 1, 1, KernelKind::Triangular).unwrap();
    let rr = fit_side(&s0, Side::Right, 0.5, 1, 1, KernelKind::Triangular).unwrap();
    assert!((r.records[0].point - (rr.theta[0] - l.theta[0])).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn outcome_scaling_scales_errors_and_keeps_p(seed in 0u64..1000, c in -5.0f64..5.0) {
        prop_assume!(c.abs() > 0.1);
        let s = canonical(800, seed);
        let mut t = s.clone();
        t.y.iter_mut().for_each(|v| *v *= c);
        let a = fit_hte(&s, &common(0.5, Vce::HC2)).unwrap();
        let b = fit_hte(&t, &common(0.5, Vce::HC2)).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            prop_assert!((y.se - c.abs() * x.se).abs() < 1e-10 * x.se.max(1.0));
            prop_assert!((y.rbc_se - c.abs() * x.rbc_se).abs() < 1e-10 * x.rbc_se.max(1.0));
            prop_assert!((y.p_value - x.p_value).abs() < 1e-9);
            prop_assert!((y.z - c.signum() * x.z).abs() < 1e-8);
        }
    }

    #[test]
    fn contrasts_are_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let s = canonical(600, seed);
        let r = fit_hte(&s, &common(0.6, Vce::HC1)).unwrap();
        let s1 = Selector::new("s1", vec![1.0, 0.3]);
        let s2 = Selector::new("s2", vec![-0.5, 2.0]);
        let mix = Selector::new("mix", vec![a - 0.5 * b, 0.3 * a + 2.0 * b]);
        let lhs = r.contrast(&mix).unwrap().point;
        let rhs = a * r.contrast(&s1).unwrap().point + b * r.contrast(&s2).unwrap().point;
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn hc_weights_are_ordered(seed in 0u64..1000) {
        let s = canonical(300, seed);
        let f = fit_side(&s, Side::Left, 0.5, 1, 1, KernelKind::Triangular).unwrap();
        let w2 = hc_weights(Vce::HC2, &f).unwrap();
        let w3 = hc_weights(Vce::HC3, &f).unwrap();
        for (x, y) in w2.iter().zip(&w3) {
            prop_assert!(1.0 <= *x && x <= y);
        }
        let m = meat_matrix(&f, &w3);
        for j in 0..m.nrows() {
            prop_assert!(m[(j, j)] >= 0.0);
        }
    }

    #[test]
    fn variance_contractions_nonnegative(seed in 0u64..1000, w in -2.0f64..2.0) {
        let s = canonical(500, seed);
        let r = fit_hte(&s, &common(0.7, Vce::HC3)).unwrap();
        let rec = r.cate_at(&[w]).unwrap();
        prop_assert!(rec.se >= 0.0 && rec.rbc_se >= 0.0);
        prop_assert!(rec.ci_lower <= rec.rbc_point && rec.rbc_point <= rec.ci_upper);
    }
}
