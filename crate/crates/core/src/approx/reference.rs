//! Reference distribution function for dimensions up to four: conditioning
//! on the first component reduces the problem by one dimension, so the
//! trivariate case is a single adaptive integral over the bivariate cdf and
//! the quadrivariate case nests one more integral on top.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gauss::{bvn_cdf_raw, bvn_pdf, std_normal_cdf, std_normal_pdf};

use super::{OrthantProblem, SurfaceGrad};

const MAX_REF_DIM: usize = 4;
/// Integration window; the normal mass outside +-8.5 is below 1e-17.
const CUTOFF: f64 = 8.5;
/// Requested tolerances are divided by this before being handed to the
/// quadrature, so the contract holds with room to spare.
const SAFETY: f64 = 0.1;

pub(crate) fn reference_cdf(p: &OrthantProblem, tol: f64) -> Result<f64> {
    let k = p.dim();
    if k > MAX_REF_DIM {
        return Err(Error::DimensionTooLarge {
            what: "reference_cdf",
            dim: k,
            max: MAX_REF_DIM,
        });
    }
    let b: Vec<f64> = p.limits().iter().copied().collect();
    let r: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| p.correlation()[(i, j)]).collect())
        .collect();
    Ok(ref_raw(&b, &r, tol * SAFETY))
}

/// Recursive evaluation on raw arrays. Components are first brought into a
/// canonical order (ascending limit), which makes the value exactly
/// invariant under relabeling and conditions on the tightest limit first.
pub(crate) fn ref_raw(b: &[f64], r: &[Vec<f64>], tol: f64) -> f64 {
    // +inf limits drop out; any -inf limit kills the probability.
    if b.iter().any(|&x| x == f64::NEG_INFINITY) {
        return 0.0;
    }
    if b.iter().any(|&x| x == f64::INFINITY) {
        let keep: Vec<usize> = (0..b.len()).filter(|&i| b[i].is_finite()).collect();
        if keep.is_empty() {
            return 1.0;
        }
        let bb: Vec<f64> = keep.iter().map(|&i| b[i]).collect();
        let rr: Vec<Vec<f64>> = keep
            .iter()
            .map(|&i| keep.iter().map(|&j| r[i][j]).collect())
            .collect();
        return ref_raw(&bb, &rr, tol);
    }

    let mut idx: Vec<usize> = (0..b.len()).collect();
    idx.sort_by(|&i, &j| b[i].partial_cmp(&b[j]).unwrap().then(i.cmp(&j)));
    let bb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let rr: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| idx.iter().map(|&j| r[i][j]).collect())
        .collect();
    ref_sorted(&bb, &rr, tol)
}

fn ref_sorted(b: &[f64], r: &[Vec<f64>], tol: f64) -> f64 {
    match b.len() {
        0 => 1.0,
        1 => std_normal_cdf(b[0]),
        2 => bvn_cdf_raw(b[0], b[1], r[0][1]),
        k => {
            let hi = b[0].min(CUTOFF);
            if hi <= -CUTOFF {
                return 0.0;
            }
            // Condition on X_1 = x: the remaining components have means
            // rho_1j x, scales s_j and a correlation matrix free of x.
            let m = k - 1;
            let s: Vec<f64> = (1..k).map(|j| (1.0 - r[0][j] * r[0][j]).sqrt()).collect();
            let mut rc = vec![vec![1.0; m]; m];
            for a in 0..m {
                for c in (a + 1)..m {
                    let v = (r[a + 1][c + 1] - r[0][a + 1] * r[0][c + 1]) / (s[a] * s[c]);
                    rc[a][c] = v;
                    rc[c][a] = v;
                }
            }
            let inner_tol = tol / 20.0;
            let mut f = |x: f64| {
                let limits: Vec<f64> = (0..m).map(|a| (b[a + 1] - r[0][a + 1] * x) / s[a]).collect();
                let inner = if m == 2 {
                    bvn_cdf_raw(limits[0], limits[1], rc[0][1])
                } else {
                    ref_sorted_no_reorder(&limits, &rc, inner_tol)
                };
                std_normal_pdf(x) * inner
            };
            adaptive_simpson(&mut f, -CUTOFF, hi, tol)
        }
    }
}

/// Same reduction without re-sorting; used for the inner integrals where the
/// conditional limits change with the outer variable but the correlation
/// structure is fixed.
fn ref_sorted_no_reorder(b: &[f64], r: &[Vec<f64>], tol: f64) -> f64 {
    match b.len() {
        1 => std_normal_cdf(b[0]),
        2 => bvn_cdf_raw(b[0], b[1], r[0][1]),
        _ => ref_sorted(b, r, tol),
    }
}

/// Value plus partial derivatives with respect to the limits and the
/// upper-triangle correlations, via the conditioning identities
/// d/db_t = phi(b_t) F_{K-1}(cond on X_t = b_t) and
/// d/drho_tu = f2(b_t, b_u; rho_tu) F_{K-2}(cond on both).
pub(crate) fn reference_cdf_grad(p: &OrthantProblem, tol: f64) -> Result<(f64, SurfaceGrad)> {
    let k = p.dim();
    let value = reference_cdf(p, tol)?;
    let b: Vec<f64> = p.limits().iter().copied().collect();
    let r: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| p.correlation()[(i, j)]).collect())
        .collect();
    let tol_in = tol * SAFETY;
    let mut db = vec![0.0; k];
    for t in 0..k {
        let (bc, rc) = condition_on_one(&b, &r, t);
        db[t] = std_normal_pdf(b[t]) * ref_raw(&bc, &rc, tol_in);
    }
    let mut drho = Vec::with_capacity(k * (k - 1) / 2);
    for t in 0..k {
        for u in (t + 1)..k {
            let (bc, rc) = condition_on_two(&b, &r, t, u);
            drho.push(bvn_pdf(b[t], b[u], r[t][u]) * ref_raw(&bc, &rc, tol_in));
        }
    }
    Ok((value, SurfaceGrad { db, drho }))
}

/// Limits and correlations of the remaining components given X_t = b_t.
pub(crate) fn condition_on_one(
    b: &[f64],
    r: &[Vec<f64>],
    t: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let rest: Vec<usize> = (0..b.len()).filter(|&i| i != t).collect();
    let s: Vec<f64> = rest
        .iter()
        .map(|&j| (1.0 - r[j][t] * r[j][t]).max(1e-14).sqrt())
        .collect();
    let bc: Vec<f64> = rest
        .iter()
        .zip(&s)
        .map(|(&j, &sj)| (b[j] - r[j][t] * b[t]) / sj)
        .collect();
    let m = rest.len();
    let mut rc = vec![vec![1.0; m]; m];
    for a in 0..m {
        for c in (a + 1)..m {
            let v = (r[rest[a]][rest[c]] - r[rest[a]][t] * r[rest[c]][t]) / (s[a] * s[c]);
            rc[a][c] = v;
            rc[c][a] = v;
        }
    }
    (bc, rc)
}

/// Limits and correlations of the remaining components given
/// (X_t, X_u) = (b_t, b_u).
pub(crate) fn condition_on_two(
    b: &[f64],
    r: &[Vec<f64>],
    t: usize,
    u: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let rest: Vec<usize> = (0..b.len()).filter(|&i| i != t && i != u).collect();
    let rho = r[t][u];
    let det = (1.0 - rho * rho).max(1e-14);
    let m = rest.len();
    let mut mean = vec![0.0; m];
    let mut sd = vec![1.0; m];
    let mut beta = vec![(0.0, 0.0); m];
    for (a, &j) in rest.iter().enumerate() {
        let b1 = (r[j][t] - rho * r[j][u]) / det;
        let b2 = (r[j][u] - rho * r[j][t]) / det;
        beta[a] = (b1, b2);
        mean[a] = b1 * b[t] + b2 * b[u];
        let var = (1.0 - (b1 * r[j][t] + b2 * r[j][u])).max(1e-14);
        sd[a] = var.sqrt();
    }
    let bc: Vec<f64> = rest
        .iter()
        .enumerate()
        .map(|(a, &j)| (b[j] - mean[a]) / sd[a])
        .collect();
    let mut rc = vec![vec![1.0; m]; m];
    for a in 0..m {
        for c in (a + 1)..m {
            let (ja, jc) = (rest[a], rest[c]);
            let cov = r[ja][jc] - (beta[a].0 * r[jc][t] + beta[a].1 * r[jc][u]);
            let v = cov / (sd[a] * sd[c]);
            rc[a][c] = v;
            rc[c][a] = v;
        }
    }
    (bc, rc)
}

/// Plain Monte Carlo estimate of the orthant probability; the independent
/// cross-check for the quadrature reference. The sampling loop is
/// allocation-free so billion-draw runs stay cheap.
pub fn mc_cdf<R: Rng + ?Sized>(p: &OrthantProblem, n: usize, rng: &mut R) -> f64 {
    let k = p.dim();
    let chol = p
        .correlation()
        .clone()
        .cholesky()
        .expect("orthant problem correlation must be positive definite");
    let l = chol.l();
    let lrows: Vec<Vec<f64>> = (0..k).map(|i| (0..=i).map(|j| l[(i, j)]).collect()).collect();
    let b: Vec<f64> = p.limits().iter().copied().collect();
    let mut hits = 0usize;
    let mut z = vec![0.0f64; k];
    for _ in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let mut inside = true;
        for i in 0..k {
            let mut x = 0.0;
            for (j, &lij) in lrows[i].iter().enumerate() {
                x += lij * z[j];
            }
            if x > b[i] {
                inside = false;
                break;
            }
        }
        if inside {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

// 15-point Gauss-Legendre half-rule on [-1, 1].
const GL15_W0: f64 = 0.2025782419255613;
const GL15: [(f64, f64); 7] = [
    (0.1984314853271116, 0.2011940939974345),
    (0.1861610000155622, 0.3941513470775634),
    (0.1662692058169939, 0.5709721726085388),
    (0.1395706779261543, 0.7244177313601701),
    (0.1071592204671719, 0.8482065834104272),
    (0.0703660474881081, 0.9372733924007060),
    (0.0307532419961173, 0.9879925180204854),
];

fn gl15(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut s = GL15_W0 * f(c);
    for &(w, x) in &GL15 {
        s += w * (f(c - h * x) + f(c + h * x));
    }
    s * h
}

/// Adaptive quadrature on Gauss-Legendre panels: a panel is accepted when
/// halving it moves the value by no more than its tolerance share. The rule's
/// order makes the halving estimate very conservative for the smooth
/// probability integrands this backs.
pub(crate) fn adaptive_simpson(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    let panels = 4usize;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let x0 = a + i as f64 * h;
        let x1 = x0 + h;
        let whole = gl15(f, x0, x1);
        total += gl_rec(f, x0, x1, whole, tol / panels as f64, 14);
    }
    total
}

fn gl_rec(
    f: &mut dyn FnMut(f64) -> f64,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let left = gl15(f, a, m);
    let right = gl15(f, m, b);
    let refined = left + right;
    if depth == 0 || (refined - whole).abs() <= tol {
        refined
    } else {
        gl_rec(f, a, m, left, tol / 2.0, depth - 1) + gl_rec(f, m, b, right, tol / 2.0, depth - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn equi(k: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho })
    }

    #[test]
    fn trivariate_orthant_closed_form() {
        for rho in [-0.4, 0.0, 0.3, 0.5, 0.9] {
            let p = OrthantProblem::new(vec![0.0; 3], equi(3, rho)).unwrap();
            let v = reference_cdf(&p, 1e-8).unwrap();
            let exact = 0.125 + 3.0 * rho.asin() / (4.0 * std::f64::consts::PI);
            assert!((v - exact).abs() < 1e-8, "rho={rho}: {v} vs {exact}");
        }
    }

    #[test]
    fn independent_components_are_a_product() {
        let b = vec![0.4, -0.7, 1.3, 0.1];
        let exact: f64 = b.iter().map(|&x| std_normal_cdf(x)).product();
        let p = OrthantProblem::new(b, DMatrix::identity(4, 4)).unwrap();
        let v = reference_cdf(&p, 1e-8).unwrap();
        assert!((v - exact).abs() < 1e-10);
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let r = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.35, -0.2, 0.35, 1.0, 0.5, -0.2, 0.5, 1.0],
        );
        let p = OrthantProblem::new(vec![0.3, -0.6, 1.0], r.clone()).unwrap();
        let v1 = reference_cdf(&p, 1e-8).unwrap();
        // relabel (2, 0, 1)
        let perm = [2usize, 0, 1];
        let b2: Vec<f64> = perm.iter().map(|&i| p.limits()[i]).collect();
        let r2 = DMatrix::from_fn(3, 3, |i, j| r[(perm[i], perm[j])]);
        let p2 = OrthantProblem::new(b2, r2).unwrap();
        let v2 = reference_cdf(&p2, 1e-8).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn infinite_limits_degenerate_cleanly() {
        let r = equi(3, 0.4);
        let p = OrthantProblem::new(vec![f64::INFINITY, 0.0, f64::NEG_INFINITY], r).unwrap();
        assert_eq!(reference_cdf(&p, 1e-8).unwrap(), 0.0);
    }
}
