//! Moment-matching recursions: after conditioning on a processed component
//! (or pair), the remaining truncated distribution is replaced by a normal
//! with matching first and second moments, standardized, and the recursion
//! continues.

use crate::error::{Error, Result};
use crate::gauss::trunc_moments_gen;
use crate::scal::Scal;

const VAR_FLOOR: f64 = 1e-14;

/// Recursion state: current standardized limits, conditional correlations,
/// the last hazard value and the per-variable conditional scales.
struct MeState<T> {
    z: Vec<T>,
    r: Vec<Vec<T>>,
    sigma: Vec<T>,
    a: T,
}

/// Univariate recursion: product of K marginal cdf factors, each evaluated
/// at limits standardized against the moments of the already-truncated
/// components. The conditional variance is 1 - r^2 a (a + z); its square
/// root is the scale that divides both the limit and the correlation
/// updates.
pub(crate) fn me_eval<T: Scal>(b: &[T], corr: &[Vec<T>]) -> Result<T> {
    let k = b.len();
    let mut st = MeState {
        z: b.to_vec(),
        r: corr.to_vec(),
        sigma: vec![T::cst(1.0); k],
        a: T::cst(0.0),
    };
    let one = T::cst(1.0);
    let mut prod = st.z[0].norm_cdf();
    for l in 0..k.saturating_sub(1) {
        st.a = st.z[l].mills();
        let c = st.a * (st.a + st.z[l]);
        for m in (l + 1)..k {
            let v = one - st.r[m][l] * st.r[m][l] * c;
            if v.fval() <= VAR_FLOOR {
                return Err(Error::NonPositiveConditionalVariance(v.fval()));
            }
            st.sigma[m] = v.sqrt();
        }
        for m in (l + 1)..k {
            st.z[m] = (st.z[m] + st.a * st.r[m][l]) / st.sigma[m];
        }
        for m in (l + 1)..k {
            for o in (m + 1)..k {
                let upd = (st.r[m][o] - st.r[m][l] * st.r[o][l] * c) / (st.sigma[m] * st.sigma[o]);
                st.r[m][o] = upd;
                st.r[o][m] = upd;
            }
        }
        prod = prod * st.z[l + 1].norm_cdf();
    }
    Ok(prod)
}

/// Bivariate recursion: components are consumed in consecutive pairs; each
/// pair contributes a bivariate cdf factor, and the remaining components are
/// re-standardized against the pair's truncated moments via the regression
/// coefficients beta = S_pp^{-1} rho_(t, pair). A final unpaired component
/// contributes a univariate factor. Exact for K <= 2.
pub(crate) fn bme_eval<T: Scal>(b: &[T], corr: &[Vec<T>]) -> Result<T> {
    let k = b.len();
    if k == 1 {
        return Ok(b[0].norm_cdf());
    }
    let mut z = b.to_vec();
    let mut r = corr.to_vec();
    let one = T::cst(1.0);
    let mut prod = one;
    let mut pos = 0usize;
    while k - pos >= 2 {
        let (p, q) = (pos, pos + 1);
        let rho12 = r[p][q];
        prod = prod * T::bvn(z[p], z[q], rho12);
        if k - pos == 2 {
            pos += 2;
            break;
        }
        let tm = trunc_moments_gen(z[p], z[q], rho12)?;
        let det = one - rho12 * rho12;
        if det.fval() <= VAR_FLOOR {
            return Err(Error::NonPositiveConditionalVariance(det.fval()));
        }
        // M = S_pp - C~, the covariance lost to truncation.
        let c12 = tm.corr * (tm.var1 * tm.var2).sqrt();
        let m11 = one - tm.var1;
        let m22 = one - tm.var2;
        let m12 = rho12 - c12;

        let rest: Vec<usize> = ((pos + 2)..k).collect();
        let mut beta1 = vec![one; k];
        let mut beta2 = vec![one; k];
        let mut sigma = vec![one; k];
        let mut mb1 = vec![one; k]; // M beta, first row
        let mut mb2 = vec![one; k];
        for &t in &rest {
            beta1[t] = (r[t][p] - rho12 * r[t][q]) / det;
            beta2[t] = (r[t][q] - rho12 * r[t][p]) / det;
            mb1[t] = m11 * beta1[t] + m12 * beta2[t];
            mb2[t] = m12 * beta1[t] + m22 * beta2[t];
            let var = one - (beta1[t] * mb1[t] + beta2[t] * mb2[t]);
            if var.fval() <= VAR_FLOOR {
                return Err(Error::NonPositiveConditionalVariance(var.fval()));
            }
            sigma[t] = var.sqrt();
        }
        for &t in &rest {
            let mean = beta1[t] * tm.mean1 + beta2[t] * tm.mean2;
            z[t] = (z[t] - mean) / sigma[t];
        }
        for (a_idx, &t) in rest.iter().enumerate() {
            for &u in &rest[(a_idx + 1)..] {
                let cov = r[t][u] - (beta1[t] * mb1[u] + beta2[t] * mb2[u]);
                let upd = cov / (sigma[t] * sigma[u]);
                r[t][u] = upd;
                r[u][t] = upd;
            }
        }
        pos += 2;
    }
    if pos < k {
        prod = prod * z[pos].norm_cdf();
    }
    Ok(prod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::std_normal_cdf;

    #[test]
    fn me_identity_correlation_is_exact() {
        let b = [0.5, -0.3, 1.1];
        let r = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let v = me_eval(&b, &r).unwrap();
        let exact: f64 = b.iter().map(|&x| std_normal_cdf(x)).product();
        assert!((v - exact).abs() < 1e-14);
    }

    #[test]
    fn me_degenerate_correlation_errors() {
        // Conditional correlations can drift slightly past 1 in deep
        // near-singular cascades; feed such a state directly and check the
        // variance guard fires instead of producing a NaN.
        let r = vec![vec![1.0, 1.02], vec![1.02, 1.0]];
        let b = [-5.0, 0.0];
        let err = me_eval(&b, &r).unwrap_err();
        assert!(matches!(err, Error::NonPositiveConditionalVariance(_)));
    }

    #[test]
    fn bme_identity_correlation_is_exact() {
        let b = [0.5, -0.3, 1.1, 0.2, -0.9];
        let n = b.len();
        let r: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let v = bme_eval(&b, &r).unwrap();
        let exact: f64 = b.iter().map(|&x| std_normal_cdf(x)).product();
        assert!((v - exact).abs() < 1e-12);
    }
}
