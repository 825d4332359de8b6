//! Dense quasi-Newton maximizer with a strong-Wolfe line search.
//!
//! The caller supplies value and gradient of the objective to be maximized;
//! internally the negated objective is minimized. Evaluation failures during
//! the line search are treated as infinite values (the step is rejected), so
//! an ill-behaved trial point backtracks instead of aborting the fit.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    /// Infinity-norm gradient tolerance on the maximized objective.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub c1: f64,
    pub c2: f64,
    /// Euclidean cap on a single step. Bounds how far one iteration can
    /// travel, which keeps a search started at a good point local; the
    /// limiting-bias extraction uses this to report the stationary point
    /// nearest the truth rather than a maximizer found across the box.
    pub max_step: Option<f64>,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 0.5e-5,
            max_iter: 300,
            c1: 1e-4,
            c2: 0.9,
            max_step: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective values at accepted iterates, starting point included.
    pub f_history: Vec<f64>,
}

/// Maximizes the objective from `x0`. A line-search breakdown returns the
/// best iterate with `converged = false`; only a failed evaluation at the
/// starting point itself is an error.
pub fn maximize<F>(mut fg: F, x0: &DVector<f64>, opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let dim = x0.len();
    let (f0, g0) = fg(x0)?;
    let mut x = x0.clone();
    let mut fmin = -f0;
    let mut gmin = -g0;
    let mut history = vec![f0];

    let inf_norm = |v: &DVector<f64>| v.iter().fold(0.0f64, |m, &a| m.max(a.abs()));
    if inf_norm(&gmin) <= opts.grad_tol {
        let grad_norm = inf_norm(&gmin);
        return Ok(BfgsOutcome {
            x,
            f: f0,
            grad: -gmin,
            grad_norm,
            iterations: 0,
            converged: true,
            f_history: history,
        });
    }

    let mut h = DMatrix::<f64>::identity(dim, dim);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let mut d = -(&h * &gmin);
        let mut dg = d.dot(&gmin);
        if !(dg < 0.0) {
            // Curvature information went stale; restart from steepest ascent.
            h = DMatrix::identity(dim, dim);
            d = -gmin.clone();
            dg = d.dot(&gmin);
            if !(dg < 0.0) {
                break;
            }
        }

        let mut alpha_max = 1e3;
        if let Some(cap) = opts.max_step {
            let norm = d.norm();
            if norm > cap {
                d *= cap / norm;
                dg = d.dot(&gmin);
            }
            alpha_max = 1.0;
        }

        let mut trial = |alpha: f64| -> (f64, f64, Option<DVector<f64>>) {
            let xt = &x + alpha * &d;
            match fg(&xt) {
                Ok((f, g)) => {
                    let gm = -g;
                    let slope = d.dot(&gm);
                    (-f, slope, Some(gm))
                }
                Err(_) => (f64::INFINITY, f64::NAN, None),
            }
        };

        let ls = wolfe_search(&mut trial, fmin, dg, opts.c1, opts.c2, alpha_max);
        let (alpha, f_new, g_new) = match ls {
            Some(v) => v,
            None => break,
        };

        let x_new = &x + alpha * &d;
        let s = alpha * &d;
        let y = &g_new - &gmin;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            let shy = &s * hy.transpose();
            h = &h - (&shy + shy.transpose()) * rho + (&s * s.transpose()) * (rho * rho * yhy)
                + (&s * s.transpose()) * rho;
        }
        x = x_new;
        fmin = f_new;
        gmin = g_new;
        history.push(-fmin);
        if inf_norm(&gmin) <= opts.grad_tol {
            converged = true;
            break;
        }
    }

    Ok(BfgsOutcome {
        grad_norm: inf_norm(&gmin),
        x,
        f: -fmin,
        grad: -gmin,
        iterations,
        converged,
        f_history: history,
    })
}

type Trial<'a> = dyn FnMut(f64) -> (f64, f64, Option<DVector<f64>>) + 'a;

/// Strong-Wolfe line search (bracket then zoom with cubic interpolation) on
/// the minimized objective. Returns (alpha, f, gradient) or None.
fn wolfe_search(
    trial: &mut Trial<'_>,
    f0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    alpha_max: f64,
) -> Option<(f64, f64, DVector<f64>)> {
    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut d_prev = dphi0;
    let mut alpha = 1.0f64.min(alpha_max);

    for i in 0..20 {
        let (f_a, d_a, g_a) = trial(alpha);
        if f_a > f0 + c1 * alpha * dphi0 || (i > 0 && f_a >= f_prev) || g_a.is_none() {
            return zoom(
                trial, f0, dphi0, c1, c2, alpha_prev, f_prev, d_prev, alpha, f_a, d_a,
            );
        }
        let g_a = g_a.unwrap();
        if d_a.abs() <= -c2 * dphi0 {
            return Some((alpha, f_a, g_a));
        }
        if d_a >= 0.0 {
            return zoom(
                trial, f0, dphi0, c1, c2, alpha, f_a, d_a, alpha_prev, f_prev, d_prev,
            );
        }
        if alpha >= alpha_max {
            if alpha_max < 1e3 {
                // Capped mode: the slope is still negative at the trust cap,
                // so take the full capped step and let the next iteration
                // continue from there.
                return Some((alpha, f_a, g_a));
            }
            break;
        }
        alpha_prev = alpha;
        f_prev = f_a;
        d_prev = d_a;
        alpha = (2.0 * alpha).min(alpha_max);
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom(
    trial: &mut Trial<'_>,
    f0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    mut lo: f64,
    mut f_lo: f64,
    mut d_lo: f64,
    mut hi: f64,
    mut f_hi: f64,
    mut d_hi: f64,
) -> Option<(f64, f64, DVector<f64>)> {
    for _ in 0..30 {
        if (hi - lo).abs() < 1e-16 * lo.abs().max(1.0) {
            return None;
        }
        let mut alpha = cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi);
        let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
        let margin = 0.1 * (b - a);
        if !alpha.is_finite() || alpha < a + margin || alpha > b - margin {
            alpha = 0.5 * (lo + hi);
        }
        let (f_a, d_a, g_a) = trial(alpha);
        if f_a > f0 + c1 * alpha * dphi0 || f_a >= f_lo || g_a.is_none() {
            hi = alpha;
            f_hi = f_a;
            d_hi = d_a;
        } else {
            let g_a = g_a.unwrap();
            if d_a.abs() <= -c2 * dphi0 {
                return Some((alpha, f_a, g_a));
            }
            if d_a * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
                d_hi = d_lo;
            }
            lo = alpha;
            f_lo = f_a;
            d_lo = d_a;
        }
    }
    None
}

/// Minimizer of the cubic interpolant through (a, fa, da) and (b, fb, db).
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    if !(da.is_finite() && db.is_finite() && fa.is_finite() && fb.is_finite()) {
        return f64::NAN;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let d2s = d1 * d1 - da * db;
    if d2s < 0.0 {
        return f64::NAN;
    }
    let d2 = d2s.sqrt() * (b - a).signum();
    b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concave_quadratic_is_immediate() {
        // f(x) = -(x - t)' A (x - t), A positive definite
        let t = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0],
        );
        let fg = |x: &DVector<f64>| {
            let d = x - &t;
            let ad = &a * &d;
            Ok((-d.dot(&ad), -2.0 * ad))
        };
        let out = maximize(
            fg,
            &DVector::zeros(3),
            &BfgsOptions {
                grad_tol: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 8, "{}", out.iterations);
        assert!((out.x - t).norm() < 1e-8);
    }

    #[test]
    fn negated_rosenbrock_reaches_optimum() {
        let fg = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = 100.0 * (b - a * a).powi(2) + (1.0 - a).powi(2);
            let g = DVector::from_vec(vec![
                -400.0 * a * (b - a * a) - 2.0 * (1.0 - a),
                200.0 * (b - a * a),
            ]);
            Ok((-f, -g))
        };
        let out = maximize(
            fg,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &BfgsOptions {
                grad_tol: 1e-8,
                max_iter: 500,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.converged, "grad norm {}", out.grad_norm);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn objective_history_is_nondecreasing() {
        let fg = |x: &DVector<f64>| {
            let f = -(x[0] - 0.3).powi(4) - (x[1] + 1.1).powi(2) - x[0] * x[0];
            let g = DVector::from_vec(vec![
                -4.0 * (x[0] - 0.3).powi(3) - 2.0 * x[0],
                -2.0 * (x[1] + 1.1),
            ]);
            Ok((f, g))
        };
        let out = maximize(fg, &DVector::from_vec(vec![2.0, 2.0]), &BfgsOptions::default())
            .unwrap();
        for w in out.f_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{:?}", out.f_history);
        }
    }

    #[test]
    fn looser_tolerance_never_needs_more_iterations() {
        let fg = |x: &DVector<f64>| {
            let f = -(x[0] - 2.0).powi(2) - 2.0 * (x[1] - 1.0).powi(2)
                - 0.3 * (x[0] * x[1]).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (x[0] - 2.0) - 0.6 * x[0] * x[1] * x[1],
                -4.0 * (x[1] - 1.0) - 0.6 * x[1] * x[0] * x[0],
            ]);
            Ok((f, g))
        };
        let x0 = DVector::from_vec(vec![-1.0, 3.0]);
        let mut last = usize::MAX;
        for tol in [0.5e-5, 0.5e-4, 0.5e-3] {
            let out = maximize(
                fg,
                &x0,
                &BfgsOptions {
                    grad_tol: tol,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(out.converged);
            assert!(out.iterations <= last);
            last = out.iterations;
        }
    }
}
