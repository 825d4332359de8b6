//! Study harnesses: the asymptotic-bias study over random true models, the
//! finite-sample mixed-model study, the gradient-tolerance sweep, error
//! metrics and deterministic CSV emission.
//!
//! Replications run as independent work units (rayon) and are merged in
//! replication-index order, so the output is schedule-independent. Wall-time
//! summaries go to the run manifest, never into the metrics CSV, which keeps
//! the CSV byte-stable across reruns of the same seed.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{reference_cdf, ApproxOptions, EvalSettings, Method};
use crate::error::{Error, Result};
use crate::estimate::{
    asymptotic_bias, chol_to_packed, fit, FitConfig, LimitingOptions, ModelContext, OrderingRule,
    Theta,
};
use crate::model::{simulate_mixed_choices, to_orthant, MixedMnpSpec, MnpSpec};
use crate::randgen::{draw_true_model, substream, DgpConfig};

/// Transformation applied to an (estimate, truth) pair before error
/// aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMetric {
    /// Signed difference in one coordinate.
    CoordDiff(usize),
    /// Maximum absolute coordinate difference.
    MaxAbsCoord,
    /// Maximum absolute probability deviation (inputs are probability
    /// vectors).
    MaxProbDev,
    /// Difference of coefficient quotients num/denom.
    Quotient { num: usize, denom: usize },
}

/// RMSE and MAE of the transformation over replication pairs; absolute
/// values enter the MAE for the signed kinds.
pub fn compute_metrics(
    estimates: &[DVector<f64>],
    truths: &[DVector<f64>],
    tau: &TauMetric,
) -> Result<(f64, f64)> {
    if estimates.len() != truths.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates vs {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::InvalidParameter(
            "metrics need at least one replication".into(),
        ));
    }
    let mut sq = 0.0;
    let mut ab = 0.0;
    for (e, t) in estimates.iter().zip(truths) {
        let v = tau_value(e, t, tau)?;
        sq += v * v;
        ab += v.abs();
    }
    let b = estimates.len() as f64;
    Ok(((sq / b).sqrt(), ab / b))
}

fn tau_value(est: &DVector<f64>, tru: &DVector<f64>, tau: &TauMetric) -> Result<f64> {
    match *tau {
        TauMetric::CoordDiff(m) => Ok(est[m] - tru[m]),
        TauMetric::MaxAbsCoord | TauMetric::MaxProbDev => Ok(est
            .iter()
            .zip(tru.iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()))),
        TauMetric::Quotient { num, denom } => {
            if est[denom].abs() < 1e-12 || tru[denom].abs() < 1e-12 {
                return Err(Error::InvalidParameter(
                    "quotient metric needs a nonzero denominator coordinate".into(),
                ));
            }
            Ok(est[num] / est[denom] - tru[num] / tru[denom])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub slice: String,
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub slice: String,
    pub mean_s: f64,
    pub sd_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsTable {
    pub study: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    /// Wall-time summaries; reported through the manifest, not the CSV.
    pub timing: Vec<TimingRow>,
    pub n_failed: usize,
}

/// Writes the metric rows as CSV: `study,method,slice,metric,value,count,seed`.
/// Values use the shortest round-trip float representation, so identical
/// tables produce identical bytes.
pub fn write_table(table: &MetricsTable, path: &Path) -> Result<()> {
    let mut out = String::from("study,method,slice,metric,value,count,seed\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            table.study, r.method, r.slice, r.metric, r.value, r.count, table.seed
        );
    }
    std::fs::write(path, out).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a table written by [`write_table`]; values round-trip exactly.
pub fn read_table(path: &Path) -> Result<MetricsTable> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    lines.next();
    let mut study = String::new();
    let mut seed = 0u64;
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::CsvParse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("expected 7 fields, got {}", f.len()),
            });
        }
        let err = |msg: String| Error::CsvParse {
            path: path.display().to_string(),
            line: idx + 1,
            msg,
        };
        study = f[0].to_string();
        seed = f[6].parse().map_err(|e| err(format!("seed: {e}")))?;
        rows.push(MetricRow {
            method: f[1].to_string(),
            slice: f[2].to_string(),
            metric: f[3].to_string(),
            value: f[4].parse().map_err(|e| err(format!("value: {e}")))?,
            count: f[5].parse().map_err(|e| err(format!("count: {e}")))?,
        });
    }
    Ok(MetricsTable {
        study,
        seed,
        rows,
        timing: Vec::new(),
        n_failed: 0,
    })
}

/// Replication budget presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::InvalidParameter(format!(
                "unknown scale '{other}' (expected desk or paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "study")]
pub enum StudyConfig {
    #[serde(rename = "asymptotic")]
    Asymptotic(AsymptoticConfig),
    #[serde(rename = "finite-sample")]
    FiniteSample(FiniteSampleConfig),
    #[serde(rename = "tolerance-sweep")]
    ToleranceSweep(ToleranceSweepConfig),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymptoticConfig {
    pub seed: u64,
    #[serde(default)]
    pub j: Option<usize>,
    #[serde(default)]
    pub l_values: Option<Vec<f64>>,
    #[serde(default)]
    pub k_sd_values: Option<Vec<f64>>,
    #[serde(default)]
    pub eta_values: Option<Vec<f64>>,
    #[serde(default)]
    pub models_per_cell: Option<usize>,
    #[serde(default)]
    pub methods: Option<Vec<String>>,
    #[serde(default)]
    pub min_prob_thresholds: Option<Vec<f64>>,
    #[serde(default)]
    pub grad_tol: Option<f64>,
    #[serde(default)]
    pub ordering_rule: Option<String>,
    #[serde(default)]
    pub weight_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteSampleConfig {
    pub seed: u64,
    #[serde(default)]
    pub j: Option<usize>,
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default)]
    pub gamma: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub error_var: Option<f64>,
    #[serde(default)]
    pub n_obs: Option<usize>,
    #[serde(default)]
    pub n_datasets: Option<usize>,
    #[serde(default)]
    pub methods: Option<Vec<String>>,
    #[serde(default)]
    pub grad_tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub ordering_rule: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSweepConfig {
    #[serde(flatten)]
    pub base: FiniteSampleConfig,
    #[serde(default)]
    pub grad_tols: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AsymptoticResolved {
    pub seed: u64,
    pub j: usize,
    pub l_values: Vec<f64>,
    pub k_sd_values: Vec<f64>,
    pub eta_values: Vec<f64>,
    pub models_per_cell: usize,
    pub methods: Vec<Method>,
    pub min_prob_thresholds: Vec<f64>,
    pub grad_tol: f64,
    pub ordering_rule: OrderingRule,
    pub weight_tol: f64,
}

#[derive(Debug, Clone)]
pub struct FiniteSampleResolved {
    pub seed: u64,
    pub spec: MixedMnpSpec,
    pub n_obs: usize,
    pub n_datasets: usize,
    pub methods: Vec<Method>,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub ordering_rule: OrderingRule,
    pub grad_tols: Vec<f64>,
}

fn parse_methods(raw: &Option<Vec<String>>, default: &[Method], errors: &mut Vec<String>) -> Vec<Method> {
    match raw {
        None => default.to_vec(),
        Some(list) => {
            if list.is_empty() {
                errors.push("methods list is empty".into());
            }
            list.iter()
                .filter_map(|s| match s.parse::<Method>() {
                    Ok(m) => Some(m),
                    Err(e) => {
                        errors.push(e.to_string());
                        None
                    }
                })
                .collect()
        }
    }
}

fn parse_rule(raw: &Option<String>, errors: &mut Vec<String>) -> OrderingRule {
    match raw {
        None => OrderingRule::AscDescending,
        Some(s) => s.parse().unwrap_or_else(|e: Error| {
            errors.push(e.to_string());
            OrderingRule::AscDescending
        }),
    }
}

impl AsymptoticConfig {
    pub fn resolve(&self, scale: Scale) -> Result<AsymptoticResolved> {
        let mut errors = Vec::new();
        let j = self.j.unwrap_or(4);
        if !(2..=5).contains(&j) {
            errors.push(format!(
                "j = {j} unsupported: oracle weights need 2 <= j <= 5"
            ));
        }
        let defaults = [Method::SjA, Method::Sj1, Method::Me, Method::BMe];
        let methods = parse_methods(&self.methods, &defaults, &mut errors);
        let models_per_cell = self.models_per_cell.unwrap_or(match scale {
            Scale::Desk => 100,
            Scale::Paper => 1000,
        });
        if models_per_cell == 0 {
            errors.push("models_per_cell must be positive".into());
        }
        let l_values = self.l_values.clone().unwrap_or_else(|| vec![1.0, 2.0]);
        let k_sd_values = self
            .k_sd_values
            .clone()
            .unwrap_or_else(|| vec![1.0, 2.0, 3.0, 4.0]);
        let eta_values = self.eta_values.clone().unwrap_or_else(|| vec![1.0]);
        for &l in &l_values {
            if l <= 0.0 {
                errors.push(format!("bound L = {l} must be positive"));
            }
        }
        for &k in &k_sd_values {
            if k <= 0.0 {
                errors.push(format!("bound K = {k} must be positive"));
            }
        }
        for &e in &eta_values {
            if e < 1.0 {
                errors.push(format!("eta = {e} must be at least 1"));
            }
        }
        let min_prob_thresholds = self
            .min_prob_thresholds
            .clone()
            .unwrap_or_else(|| vec![0.0, 0.001, 0.01, 0.05]);
        let grad_tol = self.grad_tol.unwrap_or(0.5e-5);
        if grad_tol <= 0.0 {
            errors.push("grad_tol must be positive".into());
        }
        let ordering_rule = parse_rule(&self.ordering_rule, &mut errors);
        if !errors.is_empty() {
            return Err(Error::ConfigValidation(errors));
        }
        Ok(AsymptoticResolved {
            seed: self.seed,
            j,
            l_values,
            k_sd_values,
            eta_values,
            models_per_cell,
            methods,
            min_prob_thresholds,
            grad_tol,
            ordering_rule,
            weight_tol: self.weight_tol.unwrap_or(1e-8),
        })
    }
}

/// The published mixed-model coefficient mean.
pub fn default_mixed_mu() -> Vec<f64> {
    vec![1.5, -1.0, 2.0, 1.0, -2.0]
}

/// The published mixing covariance.
pub fn default_mixed_gamma() -> Vec<Vec<f64>> {
    vec![
        vec![1.0, -0.50, 0.25, 0.75, 0.0],
        vec![-0.50, 1.0, 0.25, -0.50, 0.0],
        vec![0.25, 0.25, 1.0, 0.33, 0.0],
        vec![0.75, -0.50, 0.33, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 1.0],
    ]
}

impl FiniteSampleConfig {
    pub fn resolve(&self, scale: Scale) -> Result<FiniteSampleResolved> {
        let mut errors = Vec::new();
        let j = self.j.unwrap_or(5);
        let mu = self.mu.clone().unwrap_or_else(default_mixed_mu);
        let gamma_rows = self.gamma.clone().unwrap_or_else(default_mixed_gamma);
        let m = mu.len();
        let mut gamma = DMatrix::zeros(m, m);
        if gamma_rows.len() != m || gamma_rows.iter().any(|r| r.len() != m) {
            errors.push(format!("gamma must be {m}x{m} to match mu"));
        } else {
            for (r, row) in gamma_rows.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    gamma[(r, c)] = v;
                }
            }
        }
        let error_var = self.error_var.unwrap_or(0.5);
        if error_var <= 0.0 {
            errors.push("error_var must be positive".into());
        }
        let n_obs = self.n_obs.unwrap_or(match scale {
            Scale::Desk => 2000,
            Scale::Paper => 5000,
        });
        let n_datasets = self.n_datasets.unwrap_or(match scale {
            Scale::Desk => 5,
            Scale::Paper => 20,
        });
        if n_obs == 0 {
            errors.push("n_obs must be positive".into());
        }
        let defaults = [Method::Sj1, Method::Me, Method::BMe];
        let methods = parse_methods(&self.methods, &defaults, &mut errors);
        let grad_tol = self.grad_tol.unwrap_or(0.5e-5);
        if grad_tol <= 0.0 {
            errors.push("grad_tol must be positive".into());
        }
        // The mixed model has no alternative-specific constants to sort by,
        // so the recursions default to the natural component order here;
        // ordering by fitted utilities couples the order to the parameters
        // and visibly biases the recovered coefficient scale.
        let ordering_rule = match &self.ordering_rule {
            None => OrderingRule::Natural,
            some => parse_rule(some, &mut errors),
        };
        let spec = if errors.is_empty() {
            match gamma.clone().cholesky() {
                Some(chol) => {
                    match MixedMnpSpec::new(j, mu.clone(), chol.l(), error_var) {
                        Ok(s) => Some(s),
                        Err(e) => {
                            errors.push(e.to_string());
                            None
                        }
                    }
                }
                None => {
                    errors.push("gamma is not positive definite".into());
                    None
                }
            }
        } else {
            None
        };
        if !errors.is_empty() {
            return Err(Error::ConfigValidation(errors));
        }
        Ok(FiniteSampleResolved {
            seed: self.seed,
            spec: spec.expect("validated"),
            n_obs,
            n_datasets,
            methods,
            grad_tol,
            max_iter: self.max_iter.unwrap_or(300),
            ordering_rule,
            grad_tols: vec![],
        })
    }
}

impl ToleranceSweepConfig {
    pub fn resolve(&self, scale: Scale) -> Result<FiniteSampleResolved> {
        let mut resolved = self.base.resolve(scale)?;
        resolved.grad_tols = self
            .grad_tols
            .clone()
            .unwrap_or_else(|| vec![0.5e-3, 0.5e-4, 0.5e-5]);
        if resolved.grad_tols.iter().any(|&t| t <= 0.0) {
            return Err(Error::ConfigValidation(vec![
                "grad_tols must be positive".into(),
            ]));
        }
        Ok(resolved)
    }
}

struct AsymptoticRecord {
    eta: f64,
    min_prob: f64,
    theta0: DVector<f64>,
    /// Per configured method: estimated parameters and the oracle choice
    /// probabilities at truth and at the estimate.
    per_method: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>,
    bias_converged: Vec<bool>,
}

/// Draws random true models over the (L, K, eta) grid, extracts the
/// asymptotic bias of every configured method, and aggregates max-coordinate
/// parameter and probability errors sliced by minimum-true-probability
/// thresholds and by eta. Models where any method fails are logged to stderr
/// and excluded as whole replications.
pub fn run_asymptotic_study(cfg: &AsymptoticResolved) -> Result<MetricsTable> {
    let mut cells = Vec::new();
    for &eta in &cfg.eta_values {
        for &l in &cfg.l_values {
            for &k in &cfg.k_sd_values {
                cells.push((l, k, eta));
            }
        }
    }
    let units: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.models_per_cell).map(move |r| (c, r)))
        .collect();

    let results: Vec<std::result::Result<AsymptoticRecord, String>> = units
        .par_iter()
        .map(|&(cell_idx, rep)| {
            let (l, k_sd, eta) = cells[cell_idx];
            let mut rng = substream(cfg.seed, cell_idx as u64, rep as u64);
            run_one_asymptotic(cfg, l, k_sd, eta, &mut rng)
                .map_err(|e| format!("cell {cell_idx} rep {rep}: {e}"))
        })
        .collect();

    let mut records = Vec::new();
    let mut n_failed = 0usize;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(msg) => {
                n_failed += 1;
                eprintln!("asymptotic study: excluded model ({msg})");
            }
        }
    }

    let mut rows = Vec::new();
    for &eta in &cfg.eta_values {
        let eta_records: Vec<&AsymptoticRecord> =
            records.iter().filter(|r| r.eta == eta).collect();
        for &x in &cfg.min_prob_thresholds {
            let slice_records: Vec<&&AsymptoticRecord> = eta_records
                .iter()
                .filter(|r| r.min_prob >= x)
                .collect();
            let slice = format!("eta={eta}|min_prob={x}");
            for (mi, method) in cfg.methods.iter().enumerate() {
                let n = slice_records.len();
                if n == 0 {
                    continue;
                }
                let est: Vec<DVector<f64>> = slice_records
                    .iter()
                    .map(|r| r.per_method[mi].0.clone())
                    .collect();
                let tru: Vec<DVector<f64>> =
                    slice_records.iter().map(|r| r.theta0.clone()).collect();
                let (rmse, mae) = compute_metrics(&est, &tru, &TauMetric::MaxAbsCoord)?;
                let pest: Vec<DVector<f64>> = slice_records
                    .iter()
                    .map(|r| r.per_method[mi].2.clone())
                    .collect();
                let ptru: Vec<DVector<f64>> = slice_records
                    .iter()
                    .map(|r| r.per_method[mi].1.clone())
                    .collect();
                let (prmse, pmae) = compute_metrics(&pest, &ptru, &TauMetric::MaxProbDev)?;
                let nonconv = slice_records
                    .iter()
                    .filter(|r| !r.bias_converged[mi])
                    .count();
                // Share of models with a sizable worst-coordinate bias; the
                // tail diagnostic behind the error-distribution discussion.
                let tail = est
                    .iter()
                    .zip(&tru)
                    .filter(|(e, t)| {
                        e.iter()
                            .zip(t.iter())
                            .any(|(a, b)| (a - b).abs() > 0.05)
                    })
                    .count() as f64
                    / n as f64;
                let name = method.name().to_string();
                for (metric, value) in [
                    ("max_param_mae", mae),
                    ("max_param_rmse", rmse),
                    ("max_prob_mae", pmae),
                    ("max_prob_rmse", prmse),
                    ("share_bias_gt_0.05", tail),
                ] {
                    rows.push(MetricRow {
                        method: name.clone(),
                        slice: slice.clone(),
                        metric: metric.into(),
                        value,
                        count: n,
                    });
                }
                rows.push(MetricRow {
                    method: name.clone(),
                    slice: slice.clone(),
                    metric: "n_nonconverged".into(),
                    value: nonconv as f64,
                    count: n,
                });
            }
            rows.push(MetricRow {
                method: "_all".into(),
                slice: slice.clone(),
                metric: "n_models".into(),
                value: slice_records.len() as f64,
                count: slice_records.len(),
            });
        }
    }
    Ok(MetricsTable {
        study: "asymptotic".into(),
        seed: cfg.seed,
        rows,
        timing: Vec::new(),
        n_failed,
    })
}

fn run_one_asymptotic(
    cfg: &AsymptoticResolved,
    l: f64,
    k_sd: f64,
    eta: f64,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<AsymptoticRecord> {
    let dgp = DgpConfig {
        l_bound: l,
        k_sd,
        eta,
        j: cfg.j,
    };
    let spec = draw_true_model(&dgp, rng)?;
    let lo = LimitingOptions {
        settings: EvalSettings {
            opts: ApproxOptions::default(),
            oracle_tol: cfg.weight_tol,
        },
        ordering_rule: cfg.ordering_rule,
        weight_tol: cfg.weight_tol,
        grad_tol: cfg.grad_tol,
        ..Default::default()
    };
    let truth_probs = oracle_choice_probs(&spec, cfg.weight_tol)?;
    let min_prob = truth_probs.iter().fold(f64::INFINITY, |m, &p| m.min(p));
    let theta0 = DVector::from_iterator(cfg.j - 1, spec.ascs().iter().skip(1).copied());

    let mut per_method = Vec::with_capacity(cfg.methods.len());
    let mut bias_converged = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let outcome = asymptotic_bias(&spec, method, l, &lo)?;
        let theta_hat = DVector::from_vec(outcome.theta_hat.asc_part.clone());
        let fitted_spec = spec.with_free_ascs(theta_hat.as_slice());
        let probs_hat = oracle_choice_probs(&fitted_spec, cfg.weight_tol)?;
        per_method.push((theta_hat, truth_probs.clone(), probs_hat));
        bias_converged.push(outcome.converged);
    }
    Ok(AsymptoticRecord {
        eta,
        min_prob,
        theta0,
        per_method,
        bias_converged,
    })
}

fn oracle_choice_probs(spec: &MnpSpec, tol: f64) -> Result<DVector<f64>> {
    let j = spec.alternatives();
    let mut p = DVector::zeros(j);
    for i in 1..=j {
        p[i - 1] = reference_cdf(&to_orthant(spec, i)?, tol)?;
    }
    Ok(p)
}

/// One fitted dataset within the finite-sample study.
struct FiniteRecord {
    theta_hat: DVector<f64>,
    converged: bool,
    wall_time_s: f64,
}

/// Simulates datasets from the mixed model, fits every configured method
/// from true-value initialization, and reports per-parameter mean estimates,
/// MAE, the standard deviation of absolute errors, coefficient-quotient
/// errors and (through the manifest) mean wall times.
pub fn run_finite_sample_study(cfg: &FiniteSampleResolved) -> Result<MetricsTable> {
    let theta0 = Theta::from_parts(
        cfg.spec.mu.as_slice().to_vec(),
        chol_to_packed(&cfg.spec.gamma_chol),
    );
    let (rows, timing, n_failed) = finite_fits(cfg, &[cfg.grad_tol], &theta0)?;
    Ok(MetricsTable {
        study: "finite-sample".into(),
        seed: cfg.seed,
        rows,
        timing,
        n_failed,
    })
}

/// Re-fits the same datasets under each gradient tolerance; dataset seeds are
/// fixed across tolerance levels so differences isolate the stopping rule.
pub fn run_tolerance_sweep(cfg: &FiniteSampleResolved) -> Result<MetricsTable> {
    let theta0 = Theta::from_parts(
        cfg.spec.mu.as_slice().to_vec(),
        chol_to_packed(&cfg.spec.gamma_chol),
    );
    let tols = if cfg.grad_tols.is_empty() {
        vec![0.5e-3, 0.5e-4, 0.5e-5]
    } else {
        cfg.grad_tols.clone()
    };
    let (rows, timing, n_failed) = finite_fits(cfg, &tols, &theta0)?;
    Ok(MetricsTable {
        study: "tolerance-sweep".into(),
        seed: cfg.seed,
        rows,
        timing,
        n_failed,
    })
}

type FitsByTol = Vec<Vec<Vec<Option<FiniteRecord>>>>; // [tol][dataset][method]

fn finite_fits(
    cfg: &FiniteSampleResolved,
    tols: &[f64],
    theta0: &Theta,
) -> Result<(Vec<MetricRow>, Vec<TimingRow>, usize)> {
    let ctx = ModelContext::Mixed {
        j: cfg.spec.j,
        m: cfg.spec.covariates(),
        error_var: cfg.spec.error_var,
    };
    let names = ctx.param_names();
    let theta0_vec = theta0.to_vector();
    let sweep = tols.len() > 1;

    // Simulate datasets once; fixed across tolerance levels.
    let datasets: Vec<_> = (0..cfg.n_datasets)
        .map(|d| {
            let mut rng = substream(cfg.seed, 0x5eed_da7a, d as u64);
            simulate_mixed_choices(&cfg.spec, cfg.n_obs, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut all: FitsByTol = Vec::with_capacity(tols.len());
    let mut n_failed = 0usize;
    for (ti, &tol) in tols.iter().enumerate() {
        let units: Vec<(usize, usize)> = (0..cfg.n_datasets)
            .flat_map(|d| (0..cfg.methods.len()).map(move |m| (d, m)))
            .collect();
        let fits: Vec<std::result::Result<FiniteRecord, String>> = units
            .par_iter()
            .map(|&(d, mi)| {
                let mut fc = FitConfig::new(cfg.methods[mi]);
                fc.grad_tol = tol;
                fc.max_iter = cfg.max_iter;
                fc.ordering_rule = cfg.ordering_rule;
                fc.perm_seed = derive_seed(cfg.seed, 0x9e37 + d as u64, mi as u64);
                fit(&ctx, &datasets[d], theta0, &fc)
                    .map(|fr| FiniteRecord {
                        theta_hat: fr.theta_hat.to_vector(),
                        converged: fr.converged,
                        wall_time_s: fr.wall_time_s,
                    })
                    .map_err(|e| format!("dataset {d} method {} tol {tol}: {e}", cfg.methods[mi]))
            })
            .collect();
        let mut grid: Vec<Vec<Option<FiniteRecord>>> = (0..cfg.n_datasets)
            .map(|_| (0..cfg.methods.len()).map(|_| None).collect())
            .collect();
        for (&(d, mi), outcome) in units.iter().zip(fits) {
            match outcome {
                Ok(rec) => grid[d][mi] = Some(rec),
                Err(msg) => {
                    n_failed += 1;
                    eprintln!("finite-sample study: fit failed ({msg})");
                }
            }
        }
        let _ = ti;
        all.push(grid);
    }

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for (ti, &tol) in tols.iter().enumerate() {
        let slice_base = if sweep {
            format!("grad_tol={tol}")
        } else {
            "all".to_string()
        };
        for (mi, method) in cfg.methods.iter().enumerate() {
            let recs: Vec<&FiniteRecord> = (0..cfg.n_datasets)
                .filter_map(|d| all[ti][d][mi].as_ref())
                .collect();
            let nd = recs.len();
            if nd == 0 {
                continue;
            }
            let name = method.name().to_string();
            let est: Vec<DVector<f64>> = recs.iter().map(|r| r.theta_hat.clone()).collect();
            let tru: Vec<DVector<f64>> = vec![theta0_vec.clone(); nd];

            // Per-parameter rows for the single-tolerance study.
            let mut mae_sum = 0.0;
            let mut sd_sum = 0.0;
            for (pi, pname) in names.iter().enumerate() {
                let mean_est = est.iter().map(|e| e[pi]).sum::<f64>() / nd as f64;
                let abs_errs: Vec<f64> =
                    est.iter().map(|e| (e[pi] - theta0_vec[pi]).abs()).collect();
                let mae = abs_errs.iter().sum::<f64>() / nd as f64;
                let sd = if nd > 1 {
                    let var = abs_errs.iter().map(|a| (a - mae) * (a - mae)).sum::<f64>()
                        / (nd - 1) as f64;
                    var.sqrt()
                } else {
                    0.0
                };
                mae_sum += mae;
                sd_sum += sd;
                if !sweep {
                    let slice = format!("param={pname}");
                    for (metric, value) in [
                        ("mean_estimate", mean_est),
                        ("mae", mae),
                        ("sd_mae", sd),
                    ] {
                        rows.push(MetricRow {
                            method: name.clone(),
                            slice: slice.clone(),
                            metric: metric.into(),
                            value,
                            count: nd,
                        });
                    }
                }
            }
            let p = names.len() as f64;
            rows.push(MetricRow {
                method: name.clone(),
                slice: slice_base.clone(),
                metric: "mean_mae".into(),
                value: mae_sum / p,
                count: nd,
            });
            if !sweep {
                rows.push(MetricRow {
                    method: name.clone(),
                    slice: slice_base.clone(),
                    metric: "mean_sd_mae".into(),
                    value: sd_sum / p,
                    count: nd,
                });
                // Coefficient quotients against the first mean coefficient.
                let m = cfg.spec.covariates();
                let mut qmae_sum = 0.0;
                let mut qcount = 0usize;
                for num in 1..m {
                    let tau = TauMetric::Quotient { num, denom: 0 };
                    let (_, qmae) = compute_metrics(&est, &tru, &tau)?;
                    let mean_q = est.iter().map(|e| e[num] / e[0]).sum::<f64>() / nd as f64;
                    let slice = format!("quotient=b{}/b1", num + 1);
                    rows.push(MetricRow {
                        method: name.clone(),
                        slice: slice.clone(),
                        metric: "mean_estimate".into(),
                        value: mean_q,
                        count: nd,
                    });
                    rows.push(MetricRow {
                        method: name.clone(),
                        slice,
                        metric: "mae".into(),
                        value: qmae,
                        count: nd,
                    });
                    qmae_sum += qmae;
                    qcount += 1;
                }
                if qcount > 0 {
                    rows.push(MetricRow {
                        method: name.clone(),
                        slice: "quotient=_all".into(),
                        metric: "mean_mae".into(),
                        value: qmae_sum / qcount as f64,
                        count: nd,
                    });
                }
            } else if ti > 0 {
                // Sum of absolute differences against the previous tolerance,
                // averaged over datasets with fits at both levels.
                let mut sad_sum = 0.0;
                let mut sad_n = 0usize;
                for d in 0..cfg.n_datasets {
                    if let (Some(cur), Some(prev)) = (&all[ti][d][mi], &all[ti - 1][d][mi]) {
                        sad_sum += cur
                            .theta_hat
                            .iter()
                            .zip(prev.theta_hat.iter())
                            .map(|(a, b)| (a - b).abs())
                            .sum::<f64>();
                        sad_n += 1;
                    }
                }
                if sad_n > 0 {
                    rows.push(MetricRow {
                        method: name.clone(),
                        slice: slice_base.clone(),
                        metric: "sad_vs_previous_tol".into(),
                        value: sad_sum / sad_n as f64,
                        count: sad_n,
                    });
                }
            }
            let nonconv = recs.iter().filter(|r| !r.converged).count();
            rows.push(MetricRow {
                method: name.clone(),
                slice: slice_base.clone(),
                metric: "n_nonconverged".into(),
                value: nonconv as f64,
                count: nd,
            });
            let mean_t = recs.iter().map(|r| r.wall_time_s).sum::<f64>() / nd as f64;
            let sd_t = if nd > 1 {
                (recs
                    .iter()
                    .map(|r| (r.wall_time_s - mean_t) * (r.wall_time_s - mean_t))
                    .sum::<f64>()
                    / (nd - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            timing.push(TimingRow {
                method: name,
                slice: slice_base.clone(),
                mean_s: mean_t,
                sd_s: sd_t,
            });
        }
    }
    Ok((rows, timing, n_failed))
}

/// SplitMix-style seed derivation for named substreams.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master;
    for t in [a, b] {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(t);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

/// Reproducibility record written next to every study CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub resolved_study: String,
    pub config: serde_json::Value,
    pub crate_version: String,
    pub wall_time_s: f64,
    pub n_failed: usize,
    pub timing: Vec<TimingRow>,
}

/// FNV-1a over the canonical JSON encoding of the configuration.
pub fn config_hash(cfg: &StudyConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    let mut h = 0xcbf29ce484222325u64;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

pub struct StudyOutput {
    pub table: MetricsTable,
    pub manifest: RunManifest,
}

/// Validates, resolves and runs the configured study.
pub fn run_study(cfg: &StudyConfig, scale: Scale) -> Result<StudyOutput> {
    let start = Instant::now();
    let table = match cfg {
        StudyConfig::Asymptotic(a) => run_asymptotic_study(&a.resolve(scale)?)?,
        StudyConfig::FiniteSample(f) => run_finite_sample_study(&f.resolve(scale)?)?,
        StudyConfig::ToleranceSweep(t) => run_tolerance_sweep(&t.resolve(scale)?)?,
    };
    let manifest = RunManifest {
        seed: table.seed,
        config_hash: config_hash(cfg)?,
        resolved_study: table.study.clone(),
        config: serde_json::to_value(cfg)?,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        n_failed: table.n_failed,
        timing: table.timing.clone(),
    };
    Ok(StudyOutput { table, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let e = vec![DVector::from_vec(vec![1.0, 2.0])];
        let t = vec![DVector::from_vec(vec![1.0, 2.0])];
        assert_eq!(
            compute_metrics(&e, &t, &TauMetric::MaxAbsCoord).unwrap(),
            (0.0, 0.0)
        );
        let e = vec![DVector::from_vec(vec![1.2, 2.0])];
        let (rmse, mae) = compute_metrics(&e, &t, &TauMetric::MaxAbsCoord).unwrap();
        assert!((rmse - 0.2).abs() < 1e-15 && (mae - 0.2).abs() < 1e-15);
        let e = vec![
            DVector::from_vec(vec![1.1, 2.0]),
            DVector::from_vec(vec![1.3, 2.0]),
        ];
        let t = vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![1.0, 2.0]),
        ];
        let (rmse, mae) = compute_metrics(&e, &t, &TauMetric::MaxAbsCoord).unwrap();
        assert!((mae - 0.2).abs() < 1e-15);
        assert!((rmse - 0.05f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn metric_error_paths() {
        assert!(compute_metrics(&[], &[], &TauMetric::MaxAbsCoord).is_err());
        let e = vec![DVector::from_vec(vec![1.0, 0.0])];
        let t = vec![DVector::from_vec(vec![1.0, 0.0])];
        assert!(
            compute_metrics(&e, &t, &TauMetric::Quotient { num: 0, denom: 1 }).is_err()
        );
    }

    #[test]
    fn empty_table_roundtrip() {
        let table = MetricsTable {
            study: "finite-sample".into(),
            seed: 1,
            rows: vec![],
            timing: vec![],
            n_failed: 0,
        };
        let path = std::env::temp_dir().join("macml_empty_table.csv");
        write_table(&table, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "study,method,slice,metric,value,count,seed\n");
        let back = read_table(&path).unwrap();
        assert!(back.rows.is_empty());
        let _ = std::fs::remove_file(&path);
    }

    #[test]
    fn table_roundtrip_exact() {
        let table = MetricsTable {
            study: "asymptotic".into(),
            seed: 99,
            rows: vec![MetricRow {
                method: "ME".into(),
                slice: "eta=1|min_prob=0".into(),
                metric: "max_param_mae".into(),
                value: 0.12345678901234567,
                count: 800,
            }],
            timing: vec![],
            n_failed: 0,
        };
        let path = std::env::temp_dir().join("macml_table_roundtrip.csv");
        write_table(&table, &path).unwrap();
        let back = read_table(&path).unwrap();
        assert_eq!(back.rows, table.rows);
        assert_eq!(back.seed, 99);
        let _ = std::fs::remove_file(&path);
    }

    #[test]
    fn config_validation_collects_errors() {
        let cfg = AsymptoticConfig {
            seed: 1,
            l_values: Some(vec![-1.0]),
            eta_values: Some(vec![0.5]),
            methods: Some(vec!["nope".into()]),
            ..Default::default()
        };
        let err = cfg.resolve(Scale::Desk).unwrap_err();
        match err {
            Error::ConfigValidation(msgs) => assert!(msgs.len() >= 3, "{msgs:?}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn zero_replications_is_empty_not_a_crash() {
        let cfg = FiniteSampleConfig {
            seed: 3,
            n_datasets: Some(0),
            n_obs: Some(50),
            ..Default::default()
        };
        let resolved = cfg.resolve(Scale::Desk).unwrap();
        let table = run_finite_sample_study(&resolved).unwrap();
        assert!(table.rows.is_empty());
    }
}
