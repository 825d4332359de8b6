//! Multinomial probit data model: utility differencing, reduction of choice
//! probabilities to orthant problems, log-likelihood, the mixed-coefficient
//! reduction, data simulation and dataset CSV I/O.
//!
//! Alternatives are indexed 1..=J throughout the public API.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::approx::{eval_method, EvalSettings, Method, OrthantProblem, Permutation};
use crate::error::{Error, Result};

/// Pure-ASC multinomial probit specification: alternative-specific constants
/// (the first fixed at 1 for identification) and a known error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MnpSpec {
    ascs: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl MnpSpec {
    pub fn new(ascs: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let j = ascs.len();
        if j < 2 {
            return Err(Error::InvalidParameter(
                "need at least two alternatives".into(),
            ));
        }
        if (ascs[0] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "first constant must be fixed at 1 for identification, got {}",
                ascs[0]
            )));
        }
        if sigma.nrows() != j || sigma.ncols() != j {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {}x{}, expected {j}x{j}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        for i in 0..j {
            for k in 0..i {
                if (sigma[(i, k)] - sigma[(k, i)]).abs() > 1e-10 {
                    return Err(Error::NotPositiveDefinite(
                        "error covariance is not symmetric".into(),
                    ));
                }
            }
        }
        let spec = Self {
            ascs: DVector::from_vec(ascs),
            sigma,
        };
        // The differenced covariance shares its row space for every pivot, so
        // one positive-definiteness check covers all of them.
        let delta = differencing_matrix(1, j)?;
        let omega = &delta.matrix * &spec.sigma * delta.matrix.transpose();
        if omega.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite(
                "differenced error covariance is singular".into(),
            ));
        }
        Ok(spec)
    }

    pub fn alternatives(&self) -> usize {
        self.ascs.len()
    }

    pub fn ascs(&self) -> &DVector<f64> {
        &self.ascs
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Same covariance, new constants (first entry forced back to 1).
    pub fn with_free_ascs(&self, free: &[f64]) -> Self {
        let mut ascs = DVector::zeros(self.ascs.len());
        ascs[0] = 1.0;
        for (t, &v) in free.iter().enumerate() {
            ascs[t + 1] = v;
        }
        Self {
            ascs,
            sigma: self.sigma.clone(),
        }
    }
}

/// The (J-1) x J differencing matrix against pivot alternative `i` (1-based):
/// a column of -1 entries inserted as the i-th column of the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferencingMatrix {
    pub i: usize,
    pub matrix: DMatrix<f64>,
}

pub fn differencing_matrix(i: usize, j: usize) -> Result<DifferencingMatrix> {
    if j < 2 {
        return Err(Error::InvalidParameter(
            "need at least two alternatives".into(),
        ));
    }
    if i < 1 || i > j {
        return Err(Error::AlternativeOutOfRange { index: i, count: j });
    }
    let mut m = DMatrix::zeros(j - 1, j);
    let mut row = 0;
    for col in 0..j {
        if col + 1 == i {
            continue;
        }
        m[(row, col)] = 1.0;
        m[(row, i - 1)] = -1.0;
        row += 1;
    }
    Ok(DifferencingMatrix { i, matrix: m })
}

/// Per-observation utility moments: mean vector and covariance of the J
/// latent utilities.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Upper-orthant reduction: with utility moments (mean, cov) and chosen
/// alternative `i`, the choice probability is the cdf of the differenced
/// utilities at zero. The returned problem is standardized so its cdf equals
/// P(all utility differences against i are negative): limits
/// b = D(s)^{-1} (-Delta_i mean), correlation D(s)^{-1} Omega D(s)^{-1}.
pub fn orthant_from_moments(moments: &UtilityMoments, i: usize) -> Result<OrthantProblem> {
    let j = moments.mean.len();
    let delta = differencing_matrix(i, j)?;
    let v = &delta.matrix * &moments.mean;
    let omega = &delta.matrix * &moments.cov * delta.matrix.transpose();
    if omega.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(format!(
            "differenced covariance for alternative {i} is not positive definite"
        )));
    }
    let k = j - 1;
    let mut s = DVector::zeros(k);
    for t in 0..k {
        s[t] = omega[(t, t)].sqrt();
    }
    let b = DVector::from_fn(k, |t, _| -v[t] / s[t]);
    let r = DMatrix::from_fn(k, k, |t, u| {
        if t == u {
            1.0
        } else {
            omega[(t, u)] / (s[t] * s[u])
        }
    });
    Ok(OrthantProblem::new_unchecked(b, r))
}

pub fn to_orthant(spec: &MnpSpec, i: usize) -> Result<OrthantProblem> {
    orthant_from_moments(
        &UtilityMoments {
            mean: spec.ascs.clone(),
            cov: spec.sigma.clone(),
        },
        i,
    )
}

/// Choice probability of alternative `i` under the selected approximation
/// (or the reference oracle). Ordering-sensitive methods use `perm` when
/// given, the natural order otherwise.
pub fn choice_probability(
    spec: &MnpSpec,
    i: usize,
    method: Method,
    perm: Option<&Permutation>,
    settings: &EvalSettings,
) -> Result<f64> {
    let problem = to_orthant(spec, i)?;
    let identity = Permutation::identity(problem.dim());
    eval_method(method, &problem, perm.unwrap_or(&identity), settings)
}

/// Mixed multinomial probit: coefficients are normal with mean `mu` and
/// covariance L L', utilities U = X beta + eps with homoskedastic normal
/// errors of variance `error_var`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedMnpSpec {
    pub j: usize,
    pub mu: DVector<f64>,
    pub gamma_chol: DMatrix<f64>,
    pub error_var: f64,
}

impl MixedMnpSpec {
    pub fn new(j: usize, mu: Vec<f64>, gamma_chol: DMatrix<f64>, error_var: f64) -> Result<Self> {
        let m = mu.len();
        if j < 2 || m == 0 {
            return Err(Error::InvalidParameter(
                "mixed specification needs J >= 2 and at least one covariate".into(),
            ));
        }
        if gamma_chol.nrows() != m || gamma_chol.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "Cholesky factor is {}x{}, expected {m}x{m}",
                gamma_chol.nrows(),
                gamma_chol.ncols()
            )));
        }
        for r in 0..m {
            for c in (r + 1)..m {
                if gamma_chol[(r, c)].abs() > 1e-12 {
                    return Err(Error::InvalidParameter(
                        "Cholesky factor must be lower triangular".into(),
                    ));
                }
            }
            if gamma_chol[(r, r)] < 0.0 {
                return Err(Error::InvalidParameter(
                    "Cholesky factor needs a nonnegative diagonal".into(),
                ));
            }
        }
        if error_var <= 0.0 {
            return Err(Error::InvalidParameter(
                "error variance must be positive".into(),
            ));
        }
        Ok(Self {
            j,
            mu: DVector::from_vec(mu),
            gamma_chol,
            error_var,
        })
    }

    pub fn covariates(&self) -> usize {
        self.mu.len()
    }
}

/// Analytic integration over the random coefficients: with design X the
/// utilities are jointly normal with mean X mu and covariance
/// X Gamma X' + error_var I.
pub fn mixed_to_spec(spec: &MixedMnpSpec, x: &DMatrix<f64>) -> Result<UtilityMoments> {
    if x.nrows() != spec.j || x.ncols() != spec.covariates() {
        return Err(Error::DimensionMismatch(format!(
            "design is {}x{}, expected {}x{}",
            x.nrows(),
            x.ncols(),
            spec.j,
            spec.covariates()
        )));
    }
    let mean = x * &spec.mu;
    let xl = x * &spec.gamma_chol;
    let mut cov = &xl * xl.transpose();
    for d in 0..spec.j {
        cov[(d, d)] += spec.error_var;
    }
    Ok(UtilityMoments { mean, cov })
}

/// Observed choices, with per-observation design matrices for the mixed
/// model (absent for the pure-ASC model).
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDataset {
    pub choices: Vec<usize>,
    pub designs: Option<Vec<DMatrix<f64>>>,
}

impl ChoiceDataset {
    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    /// CSV persistence. Pure-ASC datasets carry one `obs_id,choice` row per
    /// observation; mixed datasets carry one row per alternative with the
    /// alternative's covariates, columns `obs_id,choice,x_1..x_M`, rows
    /// grouped per observation in alternative order 1..J.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        match &self.designs {
            None => {
                out.push_str("obs_id,choice\n");
                for (n, &y) in self.choices.iter().enumerate() {
                    let _ = writeln!(out, "{},{y}", n + 1);
                }
            }
            Some(designs) => {
                let m = designs.first().map_or(0, |x| x.ncols());
                out.push_str("obs_id,choice");
                for c in 1..=m {
                    let _ = write!(out, ",x_{c}");
                }
                out.push('\n');
                for (n, (&y, x)) in self.choices.iter().zip(designs).enumerate() {
                    for alt in 0..x.nrows() {
                        let _ = write!(out, "{},{y}", n + 1);
                        for c in 0..m {
                            let _ = write!(out, ",{}", x[(alt, c)]);
                        }
                        out.push('\n');
                    }
                }
            }
        }
        std::fs::write(path, out).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::CsvParse {
            path: path.display().to_string(),
            line: 1,
            msg: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        let m = cols.iter().filter(|c| c.starts_with("x_")).count();
        let parse_err = |line: usize, msg: String| Error::CsvParse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + m {
                return Err(parse_err(
                    idx + 1,
                    format!("expected {} fields, got {}", 2 + m, fields.len()),
                ));
            }
            let obs: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(idx + 1, format!("obs_id: {e}")))?;
            let choice: usize = fields[1]
                .parse()
                .map_err(|e| parse_err(idx + 1, format!("choice: {e}")))?;
            let xs: Vec<f64> = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(idx + 1, format!("covariate: {e}")))?;
            rows.push((obs, choice, xs));
        }
        if m == 0 {
            let choices = rows.into_iter().map(|(_, y, _)| y).collect();
            return Ok(Self {
                choices,
                designs: None,
            });
        }
        let mut choices = Vec::new();
        let mut designs = Vec::new();
        let mut cursor = 0;
        while cursor < rows.len() {
            let obs = rows[cursor].0;
            let mut block = Vec::new();
            while cursor < rows.len() && rows[cursor].0 == obs {
                block.push(&rows[cursor]);
                cursor += 1;
            }
            let j = block.len();
            let mut x = DMatrix::zeros(j, m);
            for (alt, row) in block.iter().enumerate() {
                for c in 0..m {
                    x[(alt, c)] = row.2[c];
                }
            }
            choices.push(block[0].1);
            designs.push(x);
        }
        Ok(Self {
            choices,
            designs: Some(designs),
        })
    }
}

/// Scaled log-likelihood (1/N) sum of log chosen-alternative probabilities.
pub fn loglik(data: &ChoiceDataset, probs: &[f64]) -> Result<f64> {
    if data.len() != probs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations vs {} probabilities",
            data.len(),
            probs.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let mut sum = 0.0;
    for &p in probs {
        if p <= 0.0 {
            return Err(Error::NonPositiveProbability(p));
        }
        sum += p.ln();
    }
    Ok(sum / data.len() as f64)
}

fn argmax(u: &DVector<f64>) -> usize {
    let mut best = 0;
    for t in 1..u.len() {
        if u[t] > u[best] {
            best = t;
        }
    }
    best + 1
}

/// Simulates choices from the pure-ASC model: U = ascs + L z with
/// L the Cholesky factor of the error covariance; the chosen alternative is
/// the argmax utility.
pub fn simulate_asc_choices<R: Rng + ?Sized>(
    spec: &MnpSpec,
    n: usize,
    rng: &mut R,
) -> Result<ChoiceDataset> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one draw".into()));
    }
    let j = spec.alternatives();
    let l = spec
        .sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("error covariance".into()))?;
    let lmat = l.l();
    let mut choices = Vec::with_capacity(n);
    let mut z = DVector::zeros(j);
    for _ in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let u = &spec.ascs + &lmat * &z;
        choices.push(argmax(&u));
    }
    Ok(ChoiceDataset {
        choices,
        designs: None,
    })
}

/// Simulates the mixed model: per observation a fresh design with independent
/// standard normal entries, a coefficient draw beta = mu + L z and errors
/// with variance `error_var`; the chosen alternative is the argmax utility.
pub fn simulate_mixed_choices<R: Rng + ?Sized>(
    spec: &MixedMnpSpec,
    n: usize,
    rng: &mut R,
) -> Result<ChoiceDataset> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one draw".into()));
    }
    let (j, m) = (spec.j, spec.covariates());
    let err_sd = spec.error_var.sqrt();
    let mut choices = Vec::with_capacity(n);
    let mut designs = Vec::with_capacity(n);
    for _ in 0..n {
        let x = DMatrix::from_fn(j, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let zm = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta = &spec.mu + &spec.gamma_chol * zm;
        let eps = DVector::from_fn(j, |_, _| rng.sample::<f64, _>(StandardNormal)) * err_sd;
        let u = &x * beta + eps;
        choices.push(argmax(&u));
        designs.push(x);
    }
    Ok(ChoiceDataset {
        choices,
        designs: Some(designs),
    })
}
