//! Pseudo-log-likelihood construction, analytic gradients, quasi-Newton
//! fitting, limiting pseudo-likelihoods and asymptotic-bias extraction.

mod bfgs;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub use crate::approx::Method;
use crate::approx::{
    eval_method, eval_method_grad, reference_cdf, reorder_descending, sj_single_grad,
    EvalSettings, OrthantProblem, Permutation, SurfaceGrad,
};
use crate::error::{Error, Result};
use crate::model::{
    differencing_matrix, orthant_from_moments, to_orthant, ChoiceDataset, MnpSpec, UtilityMoments,
};
pub use bfgs::{maximize as bfgs_maximize, BfgsOptions, BfgsOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Analytic,
    CentralDiff,
}

/// Component ordering used by the moment-matching recursions: descending
/// systematic utility of the competing alternative, or descending upper
/// integration limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingRule {
    AscDescending,
    LimitDescending,
    /// Keep the natural component order (no reordering).
    Natural,
}

impl OrderingRule {
    pub fn name(self) -> &'static str {
        match self {
            OrderingRule::AscDescending => "asc-descending",
            OrderingRule::LimitDescending => "limit-descending",
            OrderingRule::Natural => "natural",
        }
    }
}

impl std::str::FromStr for OrderingRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asc-descending" | "asc" => Ok(OrderingRule::AscDescending),
            "limit-descending" | "limit" => Ok(OrderingRule::LimitDescending),
            "natural" | "none" => Ok(OrderingRule::Natural),
            other => Err(Error::InvalidParameter(format!(
                "unknown ordering rule '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub method: Method,
    pub grad_mode: GradMode,
    /// Infinity-norm first-order tolerance.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Seed of the per-observation ordering stream for SJ-1.
    pub perm_seed: u64,
    pub ordering_rule: OrderingRule,
    pub settings: EvalSettings,
}

impl FitConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            grad_mode: GradMode::Analytic,
            grad_tol: 0.5e-5,
            max_iter: 300,
            perm_seed: 0,
            ordering_rule: OrderingRule::AscDescending,
            settings: EvalSettings::default(),
        }
    }
}

/// Packed free parameters: free constants (or coefficient means) plus the
/// row-major lower triangle of the mixing Cholesky factor when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub asc_part: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chol_part: Vec<f64>,
}

impl Theta {
    pub fn from_parts(asc_part: Vec<f64>, chol_part: Vec<f64>) -> Self {
        Self {
            asc_part,
            chol_part,
        }
    }

    pub fn dim(&self) -> usize {
        self.asc_part.len() + self.chol_part.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.asc_part);
        v.extend_from_slice(&self.chol_part);
        DVector::from_vec(v)
    }

    fn from_vector(v: &DVector<f64>, asc_dim: usize) -> Self {
        Self {
            asc_part: v.as_slice()[..asc_dim].to_vec(),
            chol_part: v.as_slice()[asc_dim..].to_vec(),
        }
    }
}

/// What the free parameters mean: a pure-ASC model around a known error
/// covariance, or the mixed model with estimated coefficient mean and
/// mixing Cholesky factor (error variance known).
#[derive(Debug, Clone)]
pub enum ModelContext {
    Asc { template: MnpSpec },
    Mixed { j: usize, m: usize, error_var: f64 },
}

impl ModelContext {
    pub fn theta_dim(&self) -> usize {
        match self {
            ModelContext::Asc { template } => template.alternatives() - 1,
            ModelContext::Mixed { m, .. } => m + m * (m + 1) / 2,
        }
    }

    pub fn asc_dim(&self) -> usize {
        match self {
            ModelContext::Asc { template } => template.alternatives() - 1,
            ModelContext::Mixed { m, .. } => *m,
        }
    }

    fn orthant_dim(&self) -> usize {
        match self {
            ModelContext::Asc { template } => template.alternatives() - 1,
            ModelContext::Mixed { j, .. } => j - 1,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            ModelContext::Asc { template } => (2..=template.alternatives())
                .map(|a| format!("b{a}"))
                .collect(),
            ModelContext::Mixed { m, .. } => {
                let mut names: Vec<String> = (1..=*m).map(|a| format!("b{a}")).collect();
                for r in 0..*m {
                    for c in 0..=r {
                        names.push(format!("l{}{}", r + 1, c + 1));
                    }
                }
                names
            }
        }
    }
}

/// Unpacks the row-major lower triangle into a square factor.
pub fn chol_from_packed(m: usize, packed: &[f64]) -> Result<DMatrix<f64>> {
    if packed.len() != m * (m + 1) / 2 {
        return Err(Error::DimensionMismatch(format!(
            "expected {} packed entries, got {}",
            m * (m + 1) / 2,
            packed.len()
        )));
    }
    let mut l = DMatrix::zeros(m, m);
    let mut t = 0;
    for r in 0..m {
        for c in 0..=r {
            l[(r, c)] = packed[t];
            t += 1;
        }
    }
    Ok(l)
}

pub fn chol_to_packed(l: &DMatrix<f64>) -> Vec<f64> {
    let m = l.nrows();
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for r in 0..m {
        for c in 0..=r {
            out.push(l[(r, c)]);
        }
    }
    out
}

/// Fit summary; serialized as JSON by the front end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: String,
    pub theta_hat: Theta,
    pub ll_value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub converged: bool,
    /// Probability clamps encountered across all objective evaluations.
    pub clamp_count: u64,
    pub n_obs: usize,
    pub perm_seed: u64,
    pub ordering_rule: String,
    /// Hash of the frozen per-observation orderings.
    pub frozen_perm_hash: u64,
}

/// Frozen per-observation orderings; built once per fit so the objective
/// stays smooth while the optimizer moves.
struct Plan {
    perms: Vec<Permutation>,
    identity: Permutation,
}

impl Plan {
    fn perm_for(&self, n: usize) -> &Permutation {
        if self.perms.is_empty() {
            &self.identity
        } else {
            &self.perms[n]
        }
    }

    fn hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.perms {
            for &i in p.order() {
                eat(i as u64);
            }
            eat(u64::MAX);
        }
        h
    }
}

fn build_plan(
    ctx: &ModelContext,
    data: &ChoiceDataset,
    cfg: &FitConfig,
    theta: &DVector<f64>,
) -> Result<Plan> {
    let k = ctx.orthant_dim();
    let identity = Permutation::identity(k);
    let n = data.len();
    let perms = match cfg.method {
        Method::SjA | Method::Oracle => Vec::new(),
        Method::Sj1 => {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.perm_seed);
            (0..n)
                .map(|_| {
                    let mut order: Vec<usize> = (0..k).collect();
                    for i in (1..k).rev() {
                        let j = rand::Rng::random_range(&mut rng, 0..=i);
                        order.swap(i, j);
                    }
                    Permutation::new(order).expect("shuffled identity is a permutation")
                })
                .collect()
        }
        Method::Me | Method::BMe => match cfg.ordering_rule {
            OrderingRule::Natural => Vec::new(),
            _ => {
                let mut perms = Vec::with_capacity(n);
                for nn in 0..n {
                    let values = ordering_values(ctx, data, cfg.ordering_rule, theta, nn)?;
                    perms.push(reorder_descending(&values));
                }
                perms
            }
        },
    };
    Ok(Plan { perms, identity })
}

/// Per-observation ordering criterion: the systematic utility of each
/// competing alternative, or the standardized upper limit of its component.
fn ordering_values(
    ctx: &ModelContext,
    data: &ChoiceDataset,
    rule: OrderingRule,
    theta: &DVector<f64>,
    n: usize,
) -> Result<Vec<f64>> {
    let i = data.choices[n];
    if rule == OrderingRule::Natural {
        return Err(Error::InvalidParameter(
            "natural ordering needs no ordering values".into(),
        ));
    }
    match ctx {
        ModelContext::Asc { template } => {
            let spec = template.with_free_ascs(&theta.as_slice()[..ctx.asc_dim()]);
            match rule {
                OrderingRule::AscDescending => Ok((1..=spec.alternatives())
                    .filter(|&a| a != i)
                    .map(|a| spec.ascs()[a - 1])
                    .collect()),
                _ => {
                    let p = to_orthant(&spec, i)?;
                    Ok(p.limits().iter().copied().collect())
                }
            }
        }
        ModelContext::Mixed { j, m, error_var } => {
            let designs = data
                .designs
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("mixed model needs designs".into()))?;
            let (mu, lmat) = unpack_mixed(theta, *m)?;
            let x = &designs[n];
            let u = x * &mu;
            match rule {
                OrderingRule::AscDescending => Ok((1..=*j)
                    .filter(|&a| a != i)
                    .map(|a| u[a - 1])
                    .collect()),
                _ => {
                    let moments = mixed_moments(x, &mu, &lmat, *error_var);
                    let p = orthant_from_moments(&moments, i)?;
                    Ok(p.limits().iter().copied().collect())
                }
            }
        }
    }
}

fn unpack_mixed(theta: &DVector<f64>, m: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mu = DVector::from_column_slice(&theta.as_slice()[..m]);
    let l = chol_from_packed(m, &theta.as_slice()[m..])?;
    Ok((mu, l))
}

fn mixed_moments(
    x: &DMatrix<f64>,
    mu: &DVector<f64>,
    lmat: &DMatrix<f64>,
    error_var: f64,
) -> UtilityMoments {
    let mean = x * mu;
    let xl = x * lmat;
    let mut cov = &xl * xl.transpose();
    for d in 0..cov.nrows() {
        cov[(d, d)] += error_var;
    }
    UtilityMoments { mean, cov }
}

struct EvalOut {
    ll: f64,
    grad: Option<DVector<f64>>,
    clamps: u64,
}

/// A probability whose leading mass underflows entirely (the bivariate
/// recursion reports degenerate mass) behaves like any other sub-floor
/// probability: it clamps. Every other failure propagates.
fn value_or_degenerate(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateMass(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn grad_or_degenerate(r: Result<(f64, SurfaceGrad)>) -> Result<Option<(f64, SurfaceGrad)>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateMass(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scaled pseudo-log-likelihood (and optionally its analytic gradient) under
/// the frozen plan. Probabilities below the clamp floor contribute the
/// constant log-floor with zero gradient.
fn eval(
    ctx: &ModelContext,
    data: &ChoiceDataset,
    plan: &Plan,
    cfg: &FitConfig,
    theta: &DVector<f64>,
    want_grad: bool,
) -> Result<EvalOut> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    match ctx {
        ModelContext::Asc { template } => {
            eval_asc(template, data, plan, cfg, theta, want_grad)
        }
        ModelContext::Mixed { j, m, error_var } => {
            eval_mixed(*j, *m, *error_var, data, plan, cfg, theta, want_grad)
        }
    }
}

fn eval_asc(
    template: &MnpSpec,
    data: &ChoiceDataset,
    plan: &Plan,
    cfg: &FitConfig,
    theta: &DVector<f64>,
    want_grad: bool,
) -> Result<EvalOut> {
    let j = template.alternatives();
    let k = j - 1;
    let spec = template.with_free_ascs(theta.as_slice());
    let floor = cfg.settings.opts.clamp_floor;

    // Observations sharing (choice, ordering) share a probability.
    let mut groups: BTreeMap<(usize, Vec<usize>), usize> = BTreeMap::new();
    for (n, &y) in data.choices.iter().enumerate() {
        let key = (y, plan.perm_for(n).order().to_vec());
        *groups.entry(key).or_insert(0) += 1;
    }

    let n_total = data.len() as f64;
    let mut ll = 0.0;
    let mut grad = if want_grad {
        Some(DVector::zeros(k))
    } else {
        None
    };
    let mut clamps = 0u64;

    for ((i, order), count) in groups {
        let weight = count as f64 / n_total;
        let problem = to_orthant(&spec, i)?;
        let perm = Permutation::new(order)?;
        if let Some(g) = grad.as_mut() {
            match grad_or_degenerate(eval_method_grad(cfg.method, &problem, &perm, &cfg.settings))? {
                Some((p, sg)) if p >= floor => {
                    ll += weight * p.ln();
                    let chain = asc_chain(&spec, i, &sg)?;
                    *g += chain * (weight / p);
                }
                _ => {
                    ll += weight * floor.ln();
                    clamps += count as u64;
                }
            }
        } else {
            match value_or_degenerate(eval_method(cfg.method, &problem, &perm, &cfg.settings))? {
                Some(p) if p >= floor => ll += weight * p.ln(),
                _ => {
                    ll += weight * floor.ln();
                    clamps += count as u64;
                }
            }
        }
    }
    Ok(EvalOut { ll, grad, clamps })
}

/// dP/dtheta for the pure-ASC model: db_k/dtheta_t = -Delta[k][t+1]/s_k with
/// the row scales of the differenced covariance (theta-independent).
fn asc_chain(spec: &MnpSpec, i: usize, sg: &SurfaceGrad) -> Result<DVector<f64>> {
    let j = spec.alternatives();
    let k = j - 1;
    let delta = differencing_matrix(i, j)?;
    let omega = &delta.matrix * spec.sigma() * delta.matrix.transpose();
    let mut out = DVector::zeros(k);
    for t in 0..k {
        let mut acc = 0.0;
        for kk in 0..k {
            let s = omega[(kk, kk)].sqrt();
            acc += sg.db[kk] * (-delta.matrix[(kk, t + 1)] / s);
        }
        out[t] = acc;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn eval_mixed(
    j: usize,
    m: usize,
    error_var: f64,
    data: &ChoiceDataset,
    plan: &Plan,
    cfg: &FitConfig,
    theta: &DVector<f64>,
    want_grad: bool,
) -> Result<EvalOut> {
    let designs = data
        .designs
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("mixed model needs designs".into()))?;
    let (mu, lmat) = unpack_mixed(theta, m)?;
    let k = j - 1;
    let floor = cfg.settings.opts.clamp_floor;
    let n_total = data.len() as f64;
    let dim = theta.len();

    let mut ll = 0.0;
    let mut grad = if want_grad {
        Some(DVector::zeros(dim))
    } else {
        None
    };
    let mut clamps = 0u64;

    for (n, &i) in data.choices.iter().enumerate() {
        let x = &designs[n];
        let moments = mixed_moments(x, &mu, &lmat, error_var);
        let delta = differencing_matrix(i, j)?;
        let v = &delta.matrix * &moments.mean;
        let omega = &delta.matrix * &moments.cov * delta.matrix.transpose();
        if omega.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite(format!(
                "differenced covariance at observation {n}"
            )));
        }
        let s = DVector::from_fn(k, |t, _| omega[(t, t)].sqrt());
        let b = DVector::from_fn(k, |t, _| -v[t] / s[t]);
        let r = DMatrix::from_fn(k, k, |t, u| {
            if t == u {
                1.0
            } else {
                omega[(t, u)] / (s[t] * s[u])
            }
        });
        let problem = OrthantProblem::new_unchecked(b.clone(), r.clone());
        let perm = plan.perm_for(n);
        let weight = 1.0 / n_total;

        if let Some(g) = grad.as_mut() {
            let (p, sg) = match grad_or_degenerate(eval_method_grad(
                cfg.method,
                &problem,
                perm,
                &cfg.settings,
            ))? {
                Some(pair) if pair.0 >= floor => pair,
                _ => {
                    ll += weight * floor.ln();
                    clamps += 1;
                    continue;
                }
            };
            ll += weight * p.ln();
            let w = &delta.matrix * x; // K x M
            let vmat = &w * &lmat; // K x M, columns W l_b
            let scale = weight / p;
            // mean part: db_k/dmu_a = -W[k][a]/s_k
            for a in 0..m {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += sg.db[kk] * (-w[(kk, a)] / s[kk]);
                }
                g[a] += scale * acc;
            }
            // Cholesky part via dOmega = w_a v_b' + v_b w_a'
            let mut ds = vec![0.0; k];
            let mut t_idx = m;
            for a in 0..m {
                for bcol in 0..=a {
                    for kk in 0..k {
                        ds[kk] = w[(kk, a)] * vmat[(kk, bcol)] / s[kk];
                    }
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += sg.db[kk] * (-b[kk] * ds[kk] / s[kk]);
                    }
                    let mut ridx = 0;
                    for kk in 0..k {
                        for uu in (kk + 1)..k {
                            let dom =
                                w[(kk, a)] * vmat[(uu, bcol)] + vmat[(kk, bcol)] * w[(uu, a)];
                            let term = dom / (s[kk] * s[uu])
                                - r[(kk, uu)] * (ds[kk] / s[kk] + ds[uu] / s[uu]);
                            acc += sg.drho[ridx] * term;
                            ridx += 1;
                        }
                    }
                    g[t_idx] += scale * acc;
                    t_idx += 1;
                }
            }
        } else {
            match value_or_degenerate(eval_method(cfg.method, &problem, perm, &cfg.settings))? {
                Some(p) if p >= floor => ll += weight * p.ln(),
                _ => {
                    ll += weight * floor.ln();
                    clamps += 1;
                }
            }
        }
    }
    Ok(EvalOut { ll, grad, clamps })
}

/// Scaled pseudo-log-likelihood at `theta`. Orderings are derived
/// deterministically from the configuration (and, for the ordering rules,
/// from `theta` itself), so repeated calls agree bit for bit.
pub fn pseudo_loglik(
    theta: &Theta,
    ctx: &ModelContext,
    data: &ChoiceDataset,
    cfg: &FitConfig,
) -> Result<f64> {
    let tv = theta.to_vector();
    let plan = build_plan(ctx, data, cfg, &tv)?;
    Ok(eval(ctx, data, &plan, cfg, &tv, false)?.ll)
}

/// Gradient of the pseudo-log-likelihood, analytic or central-difference
/// (step 1e-6 max(1, |theta_m|)) per the configuration.
pub fn pseudo_grad(
    theta: &Theta,
    ctx: &ModelContext,
    data: &ChoiceDataset,
    cfg: &FitConfig,
) -> Result<DVector<f64>> {
    let tv = theta.to_vector();
    let plan = build_plan(ctx, data, cfg, &tv)?;
    match cfg.grad_mode {
        GradMode::Analytic => Ok(eval(ctx, data, &plan, cfg, &tv, true)?
            .grad
            .expect("gradient requested")),
        GradMode::CentralDiff => central_diff(|x| Ok(eval(ctx, data, &plan, cfg, x, false)?.ll), &tv),
    }
}

fn central_diff<F>(mut f: F, theta: &DVector<f64>) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let dim = theta.len();
    let mut g = DVector::zeros(dim);
    for t in 0..dim {
        let h = 1e-6 * theta[t].abs().max(1.0);
        let mut plus = theta.clone();
        plus[t] += h;
        let mut minus = theta.clone();
        minus[t] -= h;
        g[t] = (f(&plus)? - f(&minus)?) / (2.0 * h);
    }
    Ok(g)
}

/// Maximizes the selected pseudo-log-likelihood from `theta0`. Orderings and
/// permutations are frozen at the starting point for the whole run.
pub fn fit(
    ctx: &ModelContext,
    data: &ChoiceDataset,
    theta0: &Theta,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let start = Instant::now();
    let tv0 = theta0.to_vector();
    if tv0.len() != ctx.theta_dim() {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} entries, model needs {}",
            tv0.len(),
            ctx.theta_dim()
        )));
    }
    let plan = build_plan(ctx, data, cfg, &tv0)?;
    let mut clamp_count = 0u64;
    let outcome = {
        let fg = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            match cfg.grad_mode {
                GradMode::Analytic => {
                    let out = eval(ctx, data, &plan, cfg, x, true)?;
                    clamp_count += out.clamps;
                    Ok((out.ll, out.grad.expect("gradient requested")))
                }
                GradMode::CentralDiff => {
                    let out = eval(ctx, data, &plan, cfg, x, false)?;
                    clamp_count += out.clamps;
                    let g =
                        central_diff(|y| Ok(eval(ctx, data, &plan, cfg, y, false)?.ll), x)?;
                    Ok((out.ll, g))
                }
            }
        };
        bfgs_maximize(
            fg,
            &tv0,
            &BfgsOptions {
                grad_tol: cfg.grad_tol,
                max_iter: cfg.max_iter,
                ..Default::default()
            },
        )?
    };
    Ok(FitResult {
        method: cfg.method.name().to_string(),
        theta_hat: Theta::from_vector(&outcome.x, ctx.asc_dim()),
        ll_value: outcome.f,
        grad_norm: outcome.grad_norm,
        iterations: outcome.iterations,
        wall_time_s: start.elapsed().as_secs_f64(),
        converged: outcome.converged,
        clamp_count,
        n_obs: data.len(),
        perm_seed: cfg.perm_seed,
        ordering_rule: cfg.ordering_rule.name().to_string(),
        frozen_perm_hash: plan.hash(),
    })
}

/// Options for the limiting (infinite-sample) pseudo-likelihood machinery.
#[derive(Debug, Clone, Copy)]
pub struct LimitingOptions {
    pub settings: EvalSettings,
    pub ordering_rule: OrderingRule,
    /// Tolerance of the oracle weights P_j at the true parameters.
    pub weight_tol: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Step cap for the bias search. Initialization at the truth makes the
    /// extracted bias a best-case (nearest stationary point) estimate; the
    /// cap keeps the ascent from crossing into remote parts of the box when
    /// a likelihood ridge runs that way.
    pub max_step: f64,
}

impl Default for LimitingOptions {
    fn default() -> Self {
        Self {
            settings: EvalSettings::default(),
            ordering_rule: OrderingRule::AscDescending,
            weight_tol: 1e-8,
            grad_tol: 0.5e-5,
            max_iter: 200,
            max_step: 0.25,
        }
    }
}

/// Limiting pseudo-likelihood evaluator for the pure-ASC model: oracle
/// weights at the true parameters, method probabilities at the queried
/// parameters, orderings frozen at the true model.
pub struct LimitingProblem<'a> {
    spec: &'a MnpSpec,
    method: Method,
    lo: LimitingOptions,
    weights: Vec<f64>,
    perms: Vec<Permutation>,
}

impl<'a> LimitingProblem<'a> {
    pub fn new(spec: &'a MnpSpec, method: Method, lo: &LimitingOptions) -> Result<Self> {
        let j = spec.alternatives();
        let k = j - 1;
        if matches!(method, Method::Sj1 | Method::SjA) && k > 8 {
            return Err(Error::DimensionTooLarge {
                what: "ordering enumeration",
                dim: k,
                max: 8,
            });
        }
        let mut weights = Vec::with_capacity(j);
        for i in 1..=j {
            let p = to_orthant(spec, i)?;
            weights.push(reference_cdf(&p, lo.weight_tol)?);
        }
        let mut perms = Vec::with_capacity(j);
        for i in 1..=j {
            let perm = match method {
                Method::Me | Method::BMe => match lo.ordering_rule {
                    OrderingRule::Natural => Permutation::identity(k),
                    OrderingRule::AscDescending => {
                        let vals: Vec<f64> = (1..=j)
                            .filter(|&a| a != i)
                            .map(|a| spec.ascs()[a - 1])
                            .collect();
                        reorder_descending(&vals)
                    }
                    OrderingRule::LimitDescending => {
                        let p = to_orthant(spec, i)?;
                        reorder_descending(p.limits().as_slice())
                    }
                },
                _ => Permutation::identity(k),
            };
            perms.push(perm);
        }
        Ok(Self {
            spec,
            method,
            lo: *lo,
            weights,
            perms,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Smallest oracle choice probability of the true model.
    pub fn min_weight(&self) -> f64 {
        self.weights.iter().fold(f64::INFINITY, |m, &w| m.min(w))
    }

    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.eval_impl(theta, false)?.0)
    }

    pub fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (v, g) = self.eval_impl(theta, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn eval_impl(&self, theta: &DVector<f64>, want_grad: bool) -> Result<(f64, Option<DVector<f64>>)> {
        let j = self.spec.alternatives();
        let k = j - 1;
        let floor = self.lo.settings.opts.clamp_floor;
        let spec = self.spec.with_free_ascs(theta.as_slice());
        let mut ll = 0.0;
        let mut grad = if want_grad {
            Some(DVector::zeros(k))
        } else {
            None
        };
        for i in 1..=j {
            let w = self.weights[i - 1];
            let problem = to_orthant(&spec, i)?;
            match self.method {
                // Outer mean: average of log-probabilities over all orderings.
                Method::Sj1 => {
                    let mut logp_sum = 0.0;
                    let mut grad_sum = DVector::zeros(k);
                    let mut count = 0usize;
                    let mut orders: Vec<Vec<usize>> = Vec::new();
                    crate::approx::for_each_permutation(k, |o| {
                        orders.push(o.to_vec());
                        Ok(())
                    })?;
                    for order in orders {
                        let perm = Permutation::new(order)?;
                        if want_grad {
                            let (p, sg) =
                                sj_single_grad(&problem, &perm, &self.lo.settings.opts)?;
                            if p < floor {
                                logp_sum += floor.ln();
                            } else {
                                logp_sum += p.ln();
                                grad_sum += asc_chain(&spec, i, &sg)? / p;
                            }
                        } else {
                            let p = crate::approx::sj_single(
                                &problem,
                                &perm,
                                &self.lo.settings.opts,
                            )?;
                            logp_sum += if p < floor { floor.ln() } else { p.ln() };
                        }
                        count += 1;
                    }
                    ll += w * logp_sum / count as f64;
                    if let Some(g) = grad.as_mut() {
                        *g += grad_sum * (w / count as f64);
                    }
                }
                _ => {
                    let perm = &self.perms[i - 1];
                    if want_grad {
                        match grad_or_degenerate(eval_method_grad(
                            self.method,
                            &problem,
                            perm,
                            &self.lo.settings,
                        ))? {
                            Some((p, sg)) if p >= floor => {
                                ll += w * p.ln();
                                if let Some(g) = grad.as_mut() {
                                    *g += asc_chain(&spec, i, &sg)? * (w / p);
                                }
                            }
                            _ => ll += w * floor.ln(),
                        }
                    } else {
                        match value_or_degenerate(eval_method(
                            self.method,
                            &problem,
                            perm,
                            &self.lo.settings,
                        ))? {
                            Some(p) if p >= floor => ll += w * p.ln(),
                            _ => ll += w * floor.ln(),
                        }
                    }
                }
            }
        }
        Ok((ll, grad))
    }
}

/// Almost-sure limit of the scaled pseudo-log-likelihood at `theta` when the
/// data come from `true_spec`.
pub fn limiting_loglik(
    theta: &Theta,
    true_spec: &MnpSpec,
    method: Method,
    lo: &LimitingOptions,
) -> Result<f64> {
    LimitingProblem::new(true_spec, method, lo)?.value(&theta.to_vector())
}

#[derive(Debug, Clone)]
pub struct BiasOutcome {
    /// Coordinate-wise maximizer shift away from the true parameters.
    pub bias: Vec<f64>,
    pub theta_hat: Theta,
    pub ll: f64,
    pub converged: bool,
    /// Solution was clipped to the [-2L, 2L] search box.
    pub at_boundary: bool,
    pub iterations: usize,
}

/// Maximizes the limiting pseudo-likelihood from the true parameters inside
/// the box [-2L, 2L] and reports the coordinate-wise bias. A solution that
/// leaves the box is clipped to it and flagged.
pub fn asymptotic_bias(
    true_spec: &MnpSpec,
    method: Method,
    l_bound: f64,
    lo: &LimitingOptions,
) -> Result<BiasOutcome> {
    let problem = LimitingProblem::new(true_spec, method, lo)?;
    let theta0 = DVector::from_iterator(
        true_spec.alternatives() - 1,
        true_spec.ascs().iter().skip(1).copied(),
    );
    let outcome = bfgs_maximize(
        |x| problem.value_grad(x),
        &theta0,
        &BfgsOptions {
            grad_tol: lo.grad_tol,
            max_iter: lo.max_iter,
            max_step: Some(lo.max_step),
            ..Default::default()
        },
    )?;
    let lim = 2.0 * l_bound;
    let mut theta_hat = outcome.x.clone();
    let mut at_boundary = false;
    for t in theta_hat.iter_mut() {
        if t.abs() > lim {
            *t = t.clamp(-lim, lim);
            at_boundary = true;
        }
    }
    let bias: Vec<f64> = theta_hat
        .iter()
        .zip(theta0.iter())
        .map(|(a, b)| a - b)
        .collect();
    Ok(BiasOutcome {
        bias,
        theta_hat: Theta::from_parts(theta_hat.as_slice().to_vec(), Vec::new()),
        ll: outcome.f,
        converged: outcome.converged,
        at_boundary,
        iterations: outcome.iterations,
    })
}
