//! Analytic approximations of the multivariate normal distribution function
//! over an upper orthant, together with a high-accuracy quadrature reference
//! for dimensions up to four and a Monte Carlo cross-check.
//!
//! Four approximations are provided: the projection-based factorization with
//! a single ordering (`sj_single`), its average over all or random orderings,
//! the univariate moment-matching recursion (`me_univariate`) and the
//! bivariate variant (`me_bivariate`).

mod me;
mod reference;
mod sj;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scal::{rho_lane, Ad, Scal, AD_LANES};

pub use reference::mc_cdf;

/// Upper limits and correlation matrix of an orthant probability
/// P(X_1 <= b_1, ..., X_K <= b_K).
#[derive(Debug, Clone, PartialEq)]
pub struct OrthantProblem {
    b: DVector<f64>,
    r: DMatrix<f64>,
}

impl OrthantProblem {
    /// Validates symmetry, unit diagonal and positive definiteness
    /// (smallest eigenvalue above 1e-12).
    pub fn new(b: Vec<f64>, r: DMatrix<f64>) -> Result<Self> {
        let k = b.len();
        if r.nrows() != k || r.ncols() != k {
            return Err(Error::DimensionMismatch(format!(
                "limit vector has length {k} but correlation matrix is {}x{}",
                r.nrows(),
                r.ncols()
            )));
        }
        if k == 0 {
            return Err(Error::DimensionMismatch("empty problem".into()));
        }
        for i in 0..k {
            if (r[(i, i)] - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidCorrelation(format!(
                    "diagonal entry ({i},{i}) = {} is not 1",
                    r[(i, i)]
                )));
            }
            if b[i].is_nan() {
                return Err(Error::InvalidParameter(format!("limit {i} is NaN")));
            }
            for j in 0..i {
                if (r[(i, j)] - r[(j, i)]).abs() > 1e-10 {
                    return Err(Error::InvalidCorrelation(format!(
                        "entries ({i},{j}) and ({j},{i}) differ: {} vs {}",
                        r[(i, j)],
                        r[(j, i)]
                    )));
                }
                if r[(i, j)].abs() > 1.0 + 1e-12 {
                    return Err(Error::InvalidCorrelation(format!(
                        "entry ({i},{j}) = {} outside [-1, 1]",
                        r[(i, j)]
                    )));
                }
            }
        }
        let min_eig = r
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, &e| m.min(e));
        if min_eig <= 1e-12 {
            return Err(Error::InvalidCorrelation(format!(
                "matrix is not positive definite (smallest eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(Self {
            b: DVector::from_vec(b),
            r,
        })
    }

    /// Construction from a trusted source (internally derived covariances);
    /// skips the eigenvalue check.
    pub(crate) fn new_unchecked(b: DVector<f64>, r: DMatrix<f64>) -> Self {
        debug_assert_eq!(b.len(), r.nrows());
        Self { b, r }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn limits(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// A bijection on {0, .., K-1}; `order[t]` is the component processed at
/// position t.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let k = order.len();
        let mut seen = vec![false; k];
        for &i in &order {
            if i >= k || seen[i] {
                return Err(Error::InvalidParameter(format!(
                    "order {order:?} is not a permutation of 0..{k}"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { order })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            order: (0..k).collect(),
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Sort indices by descending value, ties broken by original index.
pub fn reorder_descending(values: &[f64]) -> Permutation {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    Permutation { order: idx }
}

/// Numerical safeguards shared by the approximations.
#[derive(Debug, Clone, Copy)]
pub struct ApproxOptions {
    /// Lower clamp applied to every projection factor before it enters the
    /// product, and to probabilities before logs.
    pub clamp_floor: f64,
    /// Ridge added (scaled by the mean diagonal) when the projection
    /// covariance is near singular.
    pub ridge: f64,
    /// Default draw count for the random-ordering average.
    pub n_random_perms: usize,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        Self {
            clamp_floor: 1e-12,
            ridge: 1e-10,
            n_random_perms: 100,
        }
    }
}

impl ApproxOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_floor > 0.0 && self.clamp_floor < 1e-6) {
            return Err(Error::InvalidParameter(format!(
                "clamp_floor {} outside (0, 1e-6)",
                self.clamp_floor
            )));
        }
        if self.ridge < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "ridge {} is negative",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Partial derivatives of an approximation with respect to the problem
/// surface: the K limits and the K(K-1)/2 upper-triangle correlations
/// (row-major order).
#[derive(Debug, Clone)]
pub struct SurfaceGrad {
    pub db: Vec<f64>,
    pub drho: Vec<f64>,
}

/// Row-major upper-triangle index of correlation (i, j), i < j.
pub fn rho_index(i: usize, j: usize, k: usize) -> usize {
    rho_lane(i, j, k) - k
}

const MAX_GRAD_DIM: usize = 8;
const MAX_ENUM_DIM: usize = 8;

fn check_perm(p: &OrthantProblem, perm: &Permutation) -> Result<()> {
    if perm.len() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "permutation length {} does not match problem dimension {}",
            perm.len(),
            p.dim()
        )));
    }
    Ok(())
}

fn arrays_f64(p: &OrthantProblem, order: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = order.len();
    let b: Vec<f64> = order.iter().map(|&i| p.b[i]).collect();
    let r: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| order.iter().map(|&j| p.r[(i, j)]).collect())
        .collect();
    let _ = k;
    (b, r)
}

/// Permuted dual arrays with gradient lanes tagged by the original
/// component indices, so extracted gradients need no un-permuting.
fn arrays_ad(p: &OrthantProblem, order: &[usize]) -> Result<(Vec<Ad>, Vec<Vec<Ad>>)> {
    let k = p.dim();
    if k > MAX_GRAD_DIM {
        return Err(Error::DimensionTooLarge {
            what: "analytic surface gradient",
            dim: k,
            max: MAX_GRAD_DIM,
        });
    }
    debug_assert!(k + k * (k - 1) / 2 <= AD_LANES);
    let b: Vec<Ad> = order.iter().map(|&i| Ad::var(p.b[i], i)).collect();
    let r: Vec<Vec<Ad>> = order
        .iter()
        .map(|&i| {
            order
                .iter()
                .map(|&j| {
                    if i == j {
                        Ad::cst(1.0)
                    } else {
                        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                        Ad::var(p.r[(i, j)], rho_lane(lo, hi, k))
                    }
                })
                .collect()
        })
        .collect();
    Ok((b, r))
}

fn extract_grad(v: Ad, k: usize) -> (f64, SurfaceGrad) {
    let db = v.g[..k].to_vec();
    let drho = v.g[k..k + k * (k - 1) / 2].to_vec();
    (v.v, SurfaceGrad { db, drho })
}

/// Projection-based factorization under a single ordering.
pub fn sj_single(p: &OrthantProblem, perm: &Permutation, opts: &ApproxOptions) -> Result<f64> {
    check_perm(p, perm)?;
    let (b, r) = arrays_f64(p, perm.order());
    sj::sj_eval(&b, &r, opts)
}

pub fn sj_single_grad(
    p: &OrthantProblem,
    perm: &Permutation,
    opts: &ApproxOptions,
) -> Result<(f64, SurfaceGrad)> {
    check_perm(p, perm)?;
    let (b, r) = arrays_ad(p, perm.order())?;
    Ok(extract_grad(sj::sj_eval(&b, &r, opts)?, p.dim()))
}

/// Mean of `sj_single` over all K! orderings (inner mean over probabilities).
pub fn sj_average_all(p: &OrthantProblem, opts: &ApproxOptions) -> Result<f64> {
    let k = p.dim();
    if k > MAX_ENUM_DIM {
        return Err(Error::DimensionTooLarge {
            what: "average over all orderings",
            dim: k,
            max: MAX_ENUM_DIM,
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for_each_permutation(k, |order| {
        let (b, r) = arrays_f64(p, order);
        sum += sj::sj_eval(&b, &r, opts)?;
        count += 1;
        Ok(())
    })?;
    Ok(sum / count as f64)
}

/// Value and surface gradient of the all-orderings mean.
pub fn sj_average_all_grad(
    p: &OrthantProblem,
    opts: &ApproxOptions,
) -> Result<(f64, SurfaceGrad)> {
    let k = p.dim();
    if k > MAX_ENUM_DIM {
        return Err(Error::DimensionTooLarge {
            what: "average over all orderings",
            dim: k,
            max: MAX_ENUM_DIM,
        });
    }
    let mut sum = Ad::cst(0.0);
    let mut count = 0usize;
    for_each_permutation(k, |order| {
        let (b, r) = arrays_ad(p, order)?;
        sum = sum + sj::sj_eval(&b, &r, opts)?;
        count += 1;
        Ok(())
    })?;
    let scale = Ad::cst(1.0 / count as f64);
    Ok(extract_grad(sum * scale, k))
}

/// Mean of `sj_single` over `n` orderings drawn uniformly (with replacement)
/// from the caller-owned stream.
pub fn sj_average_random<R: Rng + ?Sized>(
    p: &OrthantProblem,
    n: usize,
    rng: &mut R,
    opts: &ApproxOptions,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "random-ordering average needs at least one draw".into(),
        ));
    }
    let k = p.dim();
    let mut order: Vec<usize> = (0..k).collect();
    let mut sum = 0.0;
    for _ in 0..n {
        shuffle(&mut order, rng);
        let (b, r) = arrays_f64(p, &order);
        sum += sj::sj_eval(&b, &r, opts)?;
    }
    Ok(sum / n as f64)
}

fn shuffle<R: Rng + ?Sized>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Univariate moment-matching recursion under a single ordering.
pub fn me_univariate(p: &OrthantProblem, perm: &Permutation) -> Result<f64> {
    check_perm(p, perm)?;
    let (b, r) = arrays_f64(p, perm.order());
    me::me_eval(&b, &r)
}

pub fn me_univariate_grad(p: &OrthantProblem, perm: &Permutation) -> Result<(f64, SurfaceGrad)> {
    check_perm(p, perm)?;
    let (b, r) = arrays_ad(p, perm.order())?;
    Ok(extract_grad(me::me_eval(&b, &r)?, p.dim()))
}

/// Bivariate moment-matching recursion: consecutive pairs in the given
/// ordering, a univariate factor for an odd tail.
pub fn me_bivariate(p: &OrthantProblem, perm: &Permutation) -> Result<f64> {
    check_perm(p, perm)?;
    let (b, r) = arrays_f64(p, perm.order());
    me::bme_eval(&b, &r)
}

pub fn me_bivariate_grad(p: &OrthantProblem, perm: &Permutation) -> Result<(f64, SurfaceGrad)> {
    check_perm(p, perm)?;
    let (b, r) = arrays_ad(p, perm.order())?;
    Ok(extract_grad(me::bme_eval(&b, &r)?, p.dim()))
}

/// Reference distribution function via dimension reduction to adaptive
/// quadrature over the bivariate cdf; absolute error below `tol`.
pub fn reference_cdf(p: &OrthantProblem, tol: f64) -> Result<f64> {
    reference::reference_cdf(p, tol)
}

/// Reference value plus surface gradient (closed-form conditioning partials).
pub fn reference_cdf_grad(p: &OrthantProblem, tol: f64) -> Result<(f64, SurfaceGrad)> {
    reference::reference_cdf_grad(p, tol)
}

/// Approximation selector, including the quadrature reference as a method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Projection factorization, one ordering.
    Sj1,
    /// Projection factorization averaged over all orderings.
    SjA,
    /// Univariate moment-matching recursion.
    Me,
    /// Bivariate moment-matching recursion.
    BMe,
    /// Quadrature reference (dimensions up to four).
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Sj1, Method::SjA, Method::Me, Method::BMe, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sj1 => "SJ-1",
            Method::SjA => "SJ-A",
            Method::Me => "ME",
            Method::BMe => "bME",
            Method::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sj-1" | "sj1" => Ok(Method::Sj1),
            "sj-a" | "sja" => Ok(Method::SjA),
            "me" => Ok(Method::Me),
            "bme" | "b-me" => Ok(Method::BMe),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::InvalidParameter(format!(
                "unknown method '{other}' (expected SJ-1, SJ-A, ME, bME or oracle)"
            ))),
        }
    }
}

/// Options shared by method dispatch: approximation safeguards plus the
/// tolerance handed to the reference when it is used as a method.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub opts: ApproxOptions,
    pub oracle_tol: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            opts: ApproxOptions::default(),
            oracle_tol: 1e-8,
        }
    }
}

/// Evaluates the selected method. `perm` is honored by the ordering-sensitive
/// methods and ignored by the all-orderings average and the reference.
pub fn eval_method(
    method: Method,
    p: &OrthantProblem,
    perm: &Permutation,
    s: &EvalSettings,
) -> Result<f64> {
    match method {
        Method::Sj1 => sj_single(p, perm, &s.opts),
        Method::SjA => sj_average_all(p, &s.opts),
        Method::Me => me_univariate(p, perm),
        Method::BMe => me_bivariate(p, perm),
        Method::Oracle => reference_cdf(p, s.oracle_tol),
    }
}

pub fn eval_method_grad(
    method: Method,
    p: &OrthantProblem,
    perm: &Permutation,
    s: &EvalSettings,
) -> Result<(f64, SurfaceGrad)> {
    match method {
        Method::Sj1 => sj_single_grad(p, perm, &s.opts),
        Method::SjA => sj_average_all_grad(p, &s.opts),
        Method::Me => me_univariate_grad(p, perm),
        Method::BMe => me_bivariate_grad(p, perm),
        Method::Oracle => reference_cdf_grad(p, s.oracle_tol),
    }
}

/// Visits every permutation of 0..k (Heap's algorithm).
pub(crate) fn for_each_permutation<F>(k: usize, mut f: F) -> Result<()>
where
    F: FnMut(&[usize]) -> Result<()>,
{
    let mut order: Vec<usize> = (0..k).collect();
    let mut c = vec![0usize; k];
    f(&order)?;
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            f(&order)?;
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(())
}
