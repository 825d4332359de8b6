//! Projection-based factorization: the orthant probability is written as a
//! bivariate leading factor times sequential conditional probabilities, each
//! conditional replaced by the linear projection of its indicator on the
//! indicators already conditioned on.

use crate::error::{Error, Result};
use crate::scal::Scal;

use super::ApproxOptions;

const COND_LIMIT: f64 = 1e12;

/// Evaluates the factorization on (already permuted) limit and correlation
/// arrays. For K = 1 this is the marginal, for K = 2 the exact bivariate cdf;
/// factors are clamped below at `opts.clamp_floor`, so the product can exceed
/// one but never reaches zero.
pub(crate) fn sj_eval<T: Scal>(b: &[T], r: &[Vec<T>], opts: &ApproxOptions) -> Result<T> {
    let k = b.len();
    let floor = opts.clamp_floor;
    if k == 1 {
        return Ok(b[0].norm_cdf().clamp_floor(floor));
    }
    let phis: Vec<T> = b.iter().map(|x| x.norm_cdf()).collect();
    // Pairwise cdf values, used by both the covariance matrix and the
    // cross-covariance vectors.
    let mut pairs: Vec<Vec<Option<T>>> = vec![vec![None; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let v = T::bvn(b[i], b[j], r[i][j]);
            pairs[i][j] = Some(v);
            pairs[j][i] = Some(v);
        }
    }
    let pair = |i: usize, j: usize| pairs[i][j].unwrap();

    let one = T::cst(1.0);
    let mut prod = pair(0, 1).clamp_floor(floor);
    for t in 2..k {
        let m = t;
        let mut q = vec![vec![T::cst(0.0); m]; m];
        for i in 0..m {
            for j in 0..m {
                q[i][j] = if i == j {
                    phis[i] * (one - phis[i])
                } else {
                    pair(i, j) - phis[i] * phis[j]
                };
            }
        }
        let rhs: Vec<T> = (0..m).map(|i| one - phis[i]).collect();
        let w = solve_spd(&q, &rhs, opts.ridge)?;
        let mut phat = phis[t];
        for i in 0..m {
            let qi = pair(i, t) - phis[t] * phis[i];
            phat = phat + qi * w[i];
        }
        prod = prod * phat.clamp_floor(floor);
    }
    Ok(prod)
}

/// Symmetric positive-definite solve with the ridge fallback: when the plain
/// Cholesky fails or its diagonal spread signals a condition estimate above
/// 1e12, the mean diagonal times `ridge` is added and the solve is retried.
///
/// Far in the tails entire indicator variances collapse to exactly zero; the
/// bump then falls back to the raw ridge so the solve stays defined. The
/// Frechet clamp in the bivariate cdf makes the matching cross-covariances
/// exactly zero there, so those components drop out of the projection
/// regardless of the bump size.
fn solve_spd<T: Scal>(a: &[Vec<T>], rhs: &[T], ridge: f64) -> Result<Vec<T>> {
    if let Some(l) = cholesky(a, 0.0) {
        if cond_estimate(&l) <= COND_LIMIT {
            return Ok(chol_solve(&l, rhs));
        }
    }
    let m = a.len();
    let trace: f64 = (0..m).map(|i| a[i][i].fval()).sum();
    let bump = (ridge * trace / m as f64).max(ridge);
    for bump in [bump, bump * 1e6] {
        if let Some(l) = cholesky(a, bump) {
            return Ok(chol_solve(&l, rhs));
        }
    }
    Err(Error::SingularQ)
}

fn cholesky<T: Scal>(a: &[Vec<T>], bump: f64) -> Option<Vec<Vec<T>>> {
    let m = a.len();
    let mut l = vec![vec![T::cst(0.0); m]; m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i][j];
            if i == j && bump > 0.0 {
                s = s + T::cst(bump);
            }
            for t in 0..j {
                s = s - l[i][t] * l[j][t];
            }
            if i == j {
                if s.fval() <= 0.0 {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn cond_estimate<T: Scal>(l: &[Vec<T>]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (i, row) in l.iter().enumerate() {
        let d = row[i].fval();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (hi / lo) * (hi / lo)
}

fn chol_solve<T: Scal>(l: &[Vec<T>], rhs: &[T]) -> Vec<T> {
    let m = rhs.len();
    let mut y = vec![T::cst(0.0); m];
    for i in 0..m {
        let mut s = rhs[i];
        for t in 0..i {
            s = s - l[i][t] * y[t];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![T::cst(0.0); m];
    for i in (0..m).rev() {
        let mut s = y[i];
        for t in (i + 1)..m {
            s = s - l[t][i] * x[t];
        }
        x[i] = s / l[i][i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_roundtrip() {
        let a = vec![
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ];
        let rhs = vec![1.0, -2.0, 0.5];
        let x = solve_spd(&a, &rhs, 1e-10).unwrap();
        for i in 0..3 {
            let got: f64 = (0..3).map(|j| a[i][j] * x[j]).sum();
            assert!((got - rhs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let rhs = vec![1.0, 1.0];
        // The ridge keeps this solvable; a genuinely indefinite matrix fails.
        assert!(solve_spd(&a, &rhs, 1e-10).is_ok());
        let bad = vec![vec![0.0, 0.0], vec![0.0, -1.0]];
        assert!(matches!(
            solve_spd(&bad, &rhs, 0.0),
            Err(Error::SingularQ)
        ));
    }
}
