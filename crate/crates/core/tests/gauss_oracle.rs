//! Oracle-backed checks of the scalar Gaussian layer: series evaluations for
//! the univariate functions, independent quadrature for the bivariate cdf
//! and the truncated moments, plus the distribution-level properties.

mod common;

use macml::gauss::{
    bvn_cdf, mills_ratio, std_normal_cdf, std_normal_pdf, trunc_moments_2d, BivariateArgs,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn pdf_matches_series_oracle() {
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let oracle = common::exp_series(-0.5) * inv_sqrt_2pi;
    assert!((std_normal_pdf(1.0) - oracle).abs() < 1e-15);
    for x in [0.25, 0.5, 2.0] {
        let oracle = common::exp_series(-0.5 * x * x) * inv_sqrt_2pi;
        assert!((std_normal_pdf(x) - oracle).abs() < 1e-15, "x={x}");
    }
}

#[test]
fn cdf_matches_erf_series_oracle() {
    for x in [-3.0, -1.0, -0.3, 0.1, 1.0, 1.96, 2.5, 4.0] {
        let oracle = common::cdf_series(x);
        assert!(
            (std_normal_cdf(x) - oracle).abs() < 1e-14,
            "x={x}: {} vs {oracle}",
            std_normal_cdf(x)
        );
    }
}

#[test]
fn cdf_monotone_on_grid() {
    let mut prev = 0.0;
    for i in 0..10_000 {
        let x = -10.0 + 20.0 * i as f64 / 9_999.0;
        let v = std_normal_cdf(x);
        assert!(v >= prev, "x={x}");
        prev = v;
    }
}

proptest! {
    #[test]
    fn cdf_complement_identity(x in -38.0f64..38.0) {
        let sum = std_normal_cdf(x) + std_normal_cdf(-x);
        prop_assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bvn_factorizes_at_zero_correlation(b1 in -5.0f64..5.0, b2 in -5.0f64..5.0) {
        let v = bvn_cdf(BivariateArgs::new(b1, b2, 0.0).unwrap());
        let product = std_normal_cdf(b1) * std_normal_cdf(b2);
        prop_assert!((v - product).abs() < 1e-14);
    }

    #[test]
    fn bvn_within_frechet_bounds(
        b1 in -4.0f64..4.0,
        b2 in -4.0f64..4.0,
        rho in -0.999f64..0.999,
    ) {
        let v = bvn_cdf(BivariateArgs::new(b1, b2, rho).unwrap());
        let (p1, p2) = (std_normal_cdf(b1), std_normal_cdf(b2));
        prop_assert!(v >= (p1 + p2 - 1.0).max(0.0));
        prop_assert!(v <= p1.min(p2));
    }

    #[test]
    fn bvn_symmetric_and_monotone(
        b1 in -3.0f64..3.0,
        b2 in -3.0f64..3.0,
        rho in -0.99f64..0.99,
    ) {
        let v = bvn_cdf(BivariateArgs::new(b1, b2, rho).unwrap());
        let sym = bvn_cdf(BivariateArgs::new(b2, b1, rho).unwrap());
        prop_assert!((v - sym).abs() < 1e-15);
        let up = bvn_cdf(BivariateArgs::new(b1 + 0.05, b2, rho).unwrap());
        prop_assert!(up >= v - 1e-15);
    }

    #[test]
    fn mills_positive_and_decreasing_tail(z in -40.0f64..8.0) {
        let a = mills_ratio(z);
        prop_assert!(a.is_finite() && a > 0.0);
    }
}

#[test]
fn bvn_matches_quadrature_oracle() {
    let v = bvn_cdf(BivariateArgs::new(0.7, -0.3, 0.4).unwrap());
    let oracle = common::bvn_quad(0.7, -0.3, 0.4, 1e-13);
    assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");

    let mut rng = macml::randgen::substream(41, 0, 0);
    for _ in 0..60 {
        let b1 = rng.random_range(-3.0..=3.0);
        let b2 = rng.random_range(-3.0..=3.0);
        let rho = rng.random_range(-0.995..=0.995);
        let v = bvn_cdf(BivariateArgs::new(b1, b2, rho).unwrap());
        let oracle = common::bvn_quad(b1, b2, rho, 1e-13);
        assert!(
            (v - oracle).abs() < 1e-11,
            "({b1},{b2},{rho}): {v} vs {oracle}"
        );
    }
}

#[test]
fn bvn_high_correlation_branches() {
    // |rho| > 0.925 exercises the asymptotic branch on both signs.
    for rho in [0.93, 0.99, 0.9999, -0.93, -0.99, -0.9999] {
        for (b1, b2) in [(0.5, -0.4), (-1.2, -1.0), (1.5, 1.4), (0.0, 0.0), (2.5, -2.0)] {
            let v = bvn_cdf(BivariateArgs::new(b1, b2, rho).unwrap());
            let oracle = common::bvn_quad(b1, b2, rho, 1e-14);
            assert!(
                (v - oracle).abs() < 5e-11,
                "({b1},{b2},{rho}): {v} vs {oracle}"
            );
        }
    }
}

#[test]
fn mills_matches_quotient_at_moderate_arguments() {
    // The series cdf keeps full precision where 1 + erf does not cancel
    // badly; deeper tails are covered by the in-module branch cross-check.
    for z in [-2.0, -0.5, 0.3, 1.5, 5.0] {
        let direct = common::pdf_direct(z) / common::cdf_series(z);
        let a = mills_ratio(z);
        assert!(((a - direct) / direct).abs() < 1e-13, "z={z}");
    }
}

#[test]
fn trunc_moments_match_quadrature_oracle() {
    for (b1, b2, rho) in [
        (0.0, 0.0, 0.5),
        (0.8, -0.6, 0.3),
        (-1.0, 1.2, -0.7),
        (1.5, 1.5, 0.9),
        (-0.4, -0.9, -0.2),
    ] {
        let tm = trunc_moments_2d(BivariateArgs::new(b1, b2, rho).unwrap()).unwrap();
        let (p, m1, m2, s11, s22, s12) = common::trunc_moments_quad(b1, b2, rho, 1e-10);
        let v1 = s11 - m1 * m1;
        let v2 = s22 - m2 * m2;
        let corr = (s12 - m1 * m2) / (v1 * v2).sqrt();
        assert!((tm.p - p).abs() < 1e-8, "p ({b1},{b2},{rho})");
        assert!((tm.mean1 - m1).abs() < 1e-8, "m1 ({b1},{b2},{rho})");
        assert!((tm.mean2 - m2).abs() < 1e-8, "m2 ({b1},{b2},{rho})");
        assert!((tm.var1 - v1).abs() < 1e-8, "v1 ({b1},{b2},{rho})");
        assert!((tm.var2 - v2).abs() < 1e-8, "v2 ({b1},{b2},{rho})");
        assert!((tm.corr - corr).abs() < 1e-8, "corr ({b1},{b2},{rho})");
    }
}

#[test]
fn trunc_moments_variance_shrinks_under_truncation() {
    let mut rng = macml::randgen::substream(17, 1, 0);
    for _ in 0..200 {
        let b1 = rng.random_range(-2.0..=2.5);
        let b2 = rng.random_range(-2.0..=2.5);
        let rho = rng.random_range(-0.95..=0.95);
        let tm = trunc_moments_2d(BivariateArgs::new(b1, b2, rho).unwrap()).unwrap();
        assert!(tm.var1 <= 1.0 + 1e-8, "({b1},{b2},{rho}): {}", tm.var1);
        assert!(tm.var2 <= 1.0 + 1e-8);
        assert!(tm.corr.abs() <= 1.0 + 1e-10);
        assert!(tm.var1 > 0.0 && tm.var2 > 0.0);
    }
}
