//! Shared test oracles: series evaluations of the scalar specials, an
//! independent adaptive quadrature for bivariate quantities, and small
//! statistical helpers. Everything here is deliberately independent of the
//! implementation paths it is used to check.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;

/// exp(x) by Taylor series; negative arguments go through the reciprocal so
/// every summed term is positive and no cancellation occurs.
pub fn exp_series(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 / exp_series(-x);
    }
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for n in 1..400 {
        term *= x / n as f64;
        sum += term;
        if term < 1e-20 * sum {
            break;
        }
    }
    sum
}

/// erf(z) via the confluent (all-positive-terms) series
/// erf(z) = 2/sqrt(pi) e^{-z^2} sum_n (2 z^2)^n z / (1*3*...*(2n+1)).
pub fn erf_series(z: f64) -> f64 {
    let z2 = z * z;
    let mut term = z;
    let mut sum = z;
    for n in 1..400 {
        term *= 2.0 * z2 / (2.0 * n as f64 + 1.0);
        sum += term;
        if term.abs() < 1e-20 * sum.abs() {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * exp_series(-z2) * sum
}

/// Standard normal cdf from the erf series. Beyond |x| = 8 the tail mass is
/// under 1e-15, far below every tolerance the oracle supports, so the series
/// is clamped there (it converges too slowly to be useful anyway).
pub fn cdf_series(x: f64) -> f64 {
    if x > 8.0 {
        return 1.0;
    }
    if x < -8.0 {
        return 0.0;
    }
    0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

pub fn pdf_direct(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Adaptive Simpson quadrature, written here independently of the library.
/// Depth is capped so an integrand with a noise floor (for example a nested
/// quadrature) cannot trigger runaway refinement.
pub fn quad<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    quad_depth(f, a, b, tol, 18)
}

pub fn quad_depth<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn rec<F: FnMut(f64) -> f64>(
        f: &mut F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    if !(b > a) {
        return 0.0;
    }
    let panels = 16;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
        let xm = 0.5 * (x0 + x1);
        let (f0, fm, f1) = (f(x0), f(xm), f(x1));
        let whole = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
        total += rec(&mut f, x0, x1, f0, fm, f1, whole, tol / panels as f64, depth);
    }
    total
}

/// Bivariate normal cdf by one-dimensional reduction over the conditional
/// cdf; the independent check for the closed-form implementation.
pub fn bvn_quad(b1: f64, b2: f64, rho: f64, tol: f64) -> f64 {
    let s = (1.0 - rho * rho).sqrt();
    let lo = -8.5f64;
    let hi = b1.min(8.5);
    if hi <= lo {
        return 0.0;
    }
    quad(
        |x| pdf_direct(x) * cdf_series((b2 - rho * x) / s),
        lo,
        hi,
        tol,
    )
}

/// Raw truncated moments of the region {X1 <= b1, X2 <= b2} by nested
/// quadrature: returns (p, E X1, E X2, E X1^2, E X2^2, E X1 X2), all
/// conditional on the region. The inner integral runs at a finer tolerance
/// and the outer depth is capped at the resulting noise floor.
pub fn trunc_moments_quad(b1: f64, b2: f64, rho: f64, tol: f64) -> (f64, f64, f64, f64, f64, f64) {
    let s = (1.0 - rho * rho).sqrt();
    let lo = -8.5f64;
    let hi1 = b1.min(8.5);
    let hi2 = b2.min(8.5);
    // E[g(X1) h(X2) 1]: integrate x over the marginal, the inner integral
    // sweeps the conditional density of X2 | X1 = x.
    let raw = |g: &dyn Fn(f64) -> f64, h: &dyn Fn(f64) -> f64| {
        quad_depth(
            |x| {
                let inner = quad_depth(
                    |y| h(y) * pdf_direct((y - rho * x) / s) / s,
                    (rho * x - 8.5 * s).min(hi2),
                    hi2,
                    tol / 200.0,
                    12,
                );
                g(x) * pdf_direct(x) * inner
            },
            lo,
            hi1,
            tol,
            10,
        )
    };
    let one = |_: f64| 1.0;
    let id = |v: f64| v;
    let sq = |v: f64| v * v;
    let p = raw(&one, &one);
    let m1 = raw(&id, &one) / p;
    let m2 = raw(&one, &id) / p;
    let s11 = raw(&sq, &one) / p;
    let s22 = raw(&one, &sq) / p;
    let s12 = raw(&id, &id) / p;
    (p, m1, m2, s11, s22, s12)
}

/// Closed-form equicorrelated trivariate orthant probability at zero limits.
pub fn trivariate_orthant(rho: f64) -> f64 {
    0.125 + 3.0 * rho.asin() / (4.0 * std::f64::consts::PI)
}

/// One-sample Kolmogorov-Smirnov p-value against a continuous cdf.
pub fn ks_pvalue<F: Fn(f64) -> f64>(sample: &mut [f64], cdf: F) -> f64 {
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sample.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for j in 1..101 {
        let j = j as f64;
        p += 2.0 * (-1.0f64).powi(j as i32 - 1) * (-2.0 * j * j * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

/// Random orthant problem: limits uniform on [-2, 2], correlation from the
/// vine sampler at eta = 1. Uniform sampling occasionally lands a hair from
/// singular; redraw until the definiteness check passes.
pub fn random_problem<R: Rng + ?Sized>(k: usize, rng: &mut R) -> macml::approx::OrthantProblem {
    loop {
        let b: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..=2.0)).collect();
        let r = macml::randgen::vine_correlation(k, 1.0, rng);
        if let Ok(p) = macml::approx::OrthantProblem::new(b, r) {
            return p;
        }
    }
}

pub fn equicorrelated(k: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho })
}
