//! Command-line front end: approximation evaluation on problem files, single
//! fits, study runs with CSV/manifest emission, and the oracle-vs-Monte-Carlo
//! cross check.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Deserialize;

use macml::approx::{
    eval_method, mc_cdf, reference_cdf, EvalSettings, Method, OrthantProblem, Permutation,
};
use macml::estimate::{
    chol_to_packed, fit, FitConfig, GradMode, ModelContext, Theta,
};
use macml::experiments::{config_hash, run_study, write_table, Scale, StudyConfig};
use macml::model::{
    simulate_asc_choices, simulate_mixed_choices, ChoiceDataset, MixedMnpSpec, MnpSpec,
};
use macml::randgen::substream;
use macml::Error;

#[derive(Parser)]
#[command(
    name = "macml",
    version,
    about = "Multinomial probit estimation with analytic orthant-probability approximations"
)]
struct Cli {
    /// Worker threads for study replications (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print progress notes to standard error
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every approximation (and the reference, for K <= 4) on an
    /// orthant problem file
    Approx {
        /// JSON file with fields "b" (limits) and "r" (correlation matrix)
        #[arg(long)]
        problem: PathBuf,
        /// Comma-separated subset of SJ-1,SJ-A,ME,bME
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Ordering seed for SJ-1
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate (or load) a dataset and run a single fit
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Override the simulation seed in the config
        #[arg(long)]
        seed: Option<u64>,
        /// Override the first-order tolerance
        #[arg(long)]
        grad_tol: Option<f64>,
        /// Output path for the fit result JSON
        #[arg(long, default_value = "fit_result.json")]
        out: PathBuf,
    },
    /// Run a configured study; writes a metrics CSV and a run manifest
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Override the seed in the config
        #[arg(long)]
        seed: Option<u64>,
        /// Override the methods list in the config
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Override the first-order tolerance
        #[arg(long)]
        grad_tol: Option<f64>,
        /// Replication budget preset for fields the config leaves open
        #[arg(long, default_value = "desk")]
        scale: String,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare the quadrature reference against plain Monte Carlo on random
    /// problems
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Problem dimension (at most 4)
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Monte Carlo draws per problem
        #[arg(long, default_value_t = 1_000_000)]
        draws: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for configuration problems, 3 for numerical failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::ConfigValidation(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::CsvParse { .. }
        | Error::InvalidParameter(_)
        | Error::InvalidCorrelation(_)
        | Error::DimensionMismatch(_)
        | Error::AlternativeOutOfRange { .. }
        | Error::DimensionTooLarge { .. } => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Approx {
            problem,
            methods,
            seed,
        } => cmd_approx(&problem, methods, seed),
        Command::Fit {
            config,
            seed,
            grad_tol,
            out,
        } => cmd_fit(&config, seed, grad_tol, &out, cli.verbose),
        Command::Study {
            config,
            seed,
            methods,
            grad_tol,
            scale,
            out,
        } => cmd_study(&config, seed, methods, grad_tol, &scale, &out, cli.verbose),
        Command::OracleCheck {
            count,
            dim,
            seed,
            draws,
        } => cmd_oracle_check(count, dim, seed, draws),
    }
}

#[derive(Deserialize)]
struct ProblemFile {
    b: Vec<f64>,
    r: Vec<Vec<f64>>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_approx(path: &Path, methods: Option<Vec<String>>, seed: u64) -> Result<(), Error> {
    let file: ProblemFile = read_json(path)?;
    let k = file.b.len();
    let rows = file.r.len();
    if file.r.iter().any(|row| row.len() != rows) || rows != k {
        return Err(Error::DimensionMismatch(format!(
            "correlation matrix must be {k}x{k} to match the {k} limits"
        )));
    }
    let r = DMatrix::from_fn(k, k, |i, j| file.r[i][j]);
    let problem = OrthantProblem::new(file.b, r)?;
    let wanted: Vec<Method> = match methods {
        None => vec![Method::Sj1, Method::SjA, Method::Me, Method::BMe],
        Some(list) => list.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
    };
    let settings = EvalSettings::default();
    let oracle = if k <= 4 {
        Some(reference_cdf(&problem, settings.oracle_tol)?)
    } else {
        None
    };
    println!("dimension {k}");
    match oracle {
        Some(v) => println!("oracle {v}"),
        None => println!("oracle unavailable (dimension above 4)"),
    }
    // SJ-1 evaluates one seeded random ordering, the recursions the
    // descending-limit ordering.
    let mut rng = substream(seed, 0, 0);
    let mut order: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let random_perm = Permutation::new(order).expect("shuffle yields a permutation");
    let sorted_perm = macml::approx::reorder_descending(problem.limits().as_slice());
    for m in wanted {
        let perm = match m {
            Method::Sj1 => &random_perm,
            _ => &sorted_perm,
        };
        let value = eval_method(m, &problem, perm, &settings)?;
        match oracle {
            Some(o) => println!("{m} {value} abs_error {}", (value - o).abs()),
            None => println!("{m} {value}"),
        }
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
enum ModelFile {
    Asc {
        ascs: Vec<f64>,
        sigma: Vec<Vec<f64>>,
    },
    Mixed {
        j: usize,
        mu: Vec<f64>,
        gamma: Vec<Vec<f64>>,
        #[serde(default = "default_error_var")]
        error_var: f64,
    },
}

fn default_error_var() -> f64 {
    0.5
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitFile {
    model: ModelFile,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    seed: u64,
    method: String,
    #[serde(default)]
    grad_tol: Option<f64>,
    #[serde(default)]
    max_iter: Option<usize>,
    #[serde(default)]
    perm_seed: Option<u64>,
    #[serde(default)]
    ordering_rule: Option<String>,
    #[serde(default)]
    grad_mode: Option<String>,
    /// Start vector; defaults to the true parameters
    #[serde(default)]
    init: Option<Vec<f64>>,
    /// Load observations from CSV instead of simulating
    #[serde(default)]
    data_csv: Option<PathBuf>,
}

fn square(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, Error> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(format!("{what} must be square")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn cmd_fit(
    path: &Path,
    seed_override: Option<u64>,
    grad_tol_override: Option<f64>,
    out: &Path,
    verbose: bool,
) -> Result<(), Error> {
    let file: FitFile = read_json(path)?;
    let seed = seed_override.unwrap_or(file.seed);
    let method: Method = file.method.parse()?;
    let (ctx, data, truth): (ModelContext, ChoiceDataset, Theta) = match &file.model {
        ModelFile::Asc { ascs, sigma } => {
            let spec = MnpSpec::new(ascs.clone(), square(sigma, "sigma")?)?;
            let data = match &file.data_csv {
                Some(p) => ChoiceDataset::read_csv(p)?,
                None => {
                    let n = file.n.ok_or_else(|| {
                        Error::ConfigValidation(vec!["need n or data_csv".into()])
                    })?;
                    simulate_asc_choices(&spec, n, &mut substream(seed, 0xda7a, 0))?
                }
            };
            let truth = Theta::from_parts(spec.ascs().iter().skip(1).copied().collect(), vec![]);
            (ModelContext::Asc { template: spec }, data, truth)
        }
        ModelFile::Mixed {
            j,
            mu,
            gamma,
            error_var,
        } => {
            let gamma = square(gamma, "gamma")?;
            let l = gamma
                .cholesky()
                .ok_or_else(|| {
                    Error::ConfigValidation(vec!["gamma is not positive definite".into()])
                })?
                .l();
            let spec = MixedMnpSpec::new(*j, mu.clone(), l, *error_var)?;
            let data = match &file.data_csv {
                Some(p) => ChoiceDataset::read_csv(p)?,
                None => {
                    let n = file.n.ok_or_else(|| {
                        Error::ConfigValidation(vec!["need n or data_csv".into()])
                    })?;
                    simulate_mixed_choices(&spec, n, &mut substream(seed, 0xda7a, 0))?
                }
            };
            let truth = Theta::from_parts(
                spec.mu.as_slice().to_vec(),
                chol_to_packed(&spec.gamma_chol),
            );
            let ctx = ModelContext::Mixed {
                j: spec.j,
                m: spec.covariates(),
                error_var: spec.error_var,
            };
            (ctx, data, truth)
        }
    };

    let mut cfg = FitConfig::new(method);
    cfg.grad_tol = grad_tol_override.or(file.grad_tol).unwrap_or(0.5e-5);
    cfg.max_iter = file.max_iter.unwrap_or(300);
    cfg.perm_seed = file.perm_seed.unwrap_or_else(|| seed.wrapping_add(1));
    if let Some(rule) = &file.ordering_rule {
        cfg.ordering_rule = rule.parse()?;
    }
    if let Some(mode) = &file.grad_mode {
        cfg.grad_mode = match mode.as_str() {
            "analytic" => GradMode::Analytic,
            "central-difference" => GradMode::CentralDiff,
            other => {
                return Err(Error::ConfigValidation(vec![format!(
                    "unknown grad_mode '{other}'"
                )]))
            }
        };
    }
    let theta0 = match &file.init {
        None => truth,
        Some(v) => {
            if v.len() != ctx.theta_dim() {
                return Err(Error::ConfigValidation(vec![format!(
                    "init has {} entries, model needs {}",
                    v.len(),
                    ctx.theta_dim()
                )]));
            }
            let asc = ctx.asc_dim();
            Theta::from_parts(v[..asc].to_vec(), v[asc..].to_vec())
        }
    };

    if verbose {
        eprintln!(
            "fitting {method} on {} observations ({} parameters)",
            data.len(),
            ctx.theta_dim()
        );
    }
    let result = fit(&ctx, &data, &theta0, &cfg)?;
    let json = serde_json::to_string_pretty(&result)?;
    std::fs::write(out, json).map_err(|source| Error::Io {
        path: out.display().to_string(),
        source,
    })?;
    println!(
        "method {} ll {} grad_norm {} iterations {} converged {} wall_time_s {:.3}",
        result.method,
        result.ll_value,
        result.grad_norm,
        result.iterations,
        result.converged,
        result.wall_time_s
    );
    println!("result written to {}", out.display());
    Ok(())
}

fn cmd_study(
    path: &Path,
    seed: Option<u64>,
    methods: Option<Vec<String>>,
    grad_tol: Option<f64>,
    scale: &str,
    out_dir: &Path,
    verbose: bool,
) -> Result<(), Error> {
    let scale: Scale = scale.parse()?;
    let mut cfg: StudyConfig = read_json(path)?;
    match &mut cfg {
        StudyConfig::Asymptotic(a) => {
            if let Some(s) = seed {
                a.seed = s;
            }
            if methods.is_some() {
                a.methods = methods.clone();
            }
            if grad_tol.is_some() {
                a.grad_tol = grad_tol;
            }
        }
        StudyConfig::FiniteSample(f) => {
            if let Some(s) = seed {
                f.seed = s;
            }
            if methods.is_some() {
                f.methods = methods.clone();
            }
            if grad_tol.is_some() {
                f.grad_tol = grad_tol;
            }
        }
        StudyConfig::ToleranceSweep(t) => {
            if let Some(s) = seed {
                t.base.seed = s;
            }
            if methods.is_some() {
                t.base.methods = methods.clone();
            }
        }
    }
    // Validate exhaustively before any compute.
    match &cfg {
        StudyConfig::Asymptotic(a) => {
            a.resolve(scale)?;
        }
        StudyConfig::FiniteSample(f) => {
            f.resolve(scale)?;
        }
        StudyConfig::ToleranceSweep(t) => {
            t.resolve(scale)?;
        }
    }
    if verbose {
        eprintln!(
            "running study from {} (hash {})",
            path.display(),
            config_hash(&cfg)?
        );
    }
    let output = run_study(&cfg, scale)?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let csv_path = out_dir.join(format!("{}_metrics.csv", output.table.study));
    let manifest_path = out_dir.join(format!("{}_manifest.json", output.table.study));
    write_table(&output.table, &csv_path)?;
    let manifest = serde_json::to_string_pretty(&output.manifest)?;
    std::fs::write(&manifest_path, manifest).map_err(|source| Error::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    println!(
        "study {} rows {} failed {} -> {}",
        output.table.study,
        output.table.rows.len(),
        output.table.n_failed,
        csv_path.display()
    );
    println!("manifest {}", manifest_path.display());
    if output.table.n_failed > 0 {
        return Err(Error::InvalidParameter(format!(
            "{} replications failed and were excluded",
            output.table.n_failed
        )));
    }
    Ok(())
}

fn cmd_oracle_check(count: usize, dim: usize, seed: u64, draws: usize) -> Result<(), Error> {
    if dim > 4 || dim == 0 {
        return Err(Error::DimensionTooLarge {
            what: "oracle-check",
            dim,
            max: 4,
        });
    }
    let mut worst_abs = 0.0f64;
    let mut worst_z = 0.0f64;
    for trial in 0..count {
        let mut rng = substream(seed, trial as u64, 0);
        let problem = loop {
            let b: Vec<f64> = (0..dim)
                .map(|_| rand::Rng::random_range(&mut rng, -2.0..=2.0))
                .collect();
            let r = macml::randgen::vine_correlation(dim, 1.0, &mut rng);
            if let Ok(p) = OrthantProblem::new(b, r) {
                break p;
            }
        };
        let quadrature = reference_cdf(&problem, 1e-8)?;
        let mut mc_rng = substream(seed, trial as u64, 1);
        let mc = mc_cdf(&problem, draws, &mut mc_rng);
        let sigma = (quadrature.max(1e-12) * (1.0 - quadrature).max(1e-12) / draws as f64)
            .sqrt()
            .max(1e-12);
        let z = (quadrature - mc).abs() / sigma;
        worst_abs = worst_abs.max((quadrature - mc).abs());
        worst_z = worst_z.max(z);
    }
    println!("checked {count} problems at dimension {dim} with {draws} draws each");
    println!("max_abs_discrepancy {worst_abs}");
    println!("max_z_score {worst_z}");
    if worst_z > 4.5 {
        return Err(Error::InvalidParameter(format!(
            "reference and Monte Carlo disagree beyond sampling noise (z = {worst_z:.2})"
        )));
    }
    Ok(())
}
