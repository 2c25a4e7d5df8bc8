//! `viglm` command line: synthetic data generation, fitting, Minty and
//! coverage diagnostics, and the Monte-Carlo benchmark grid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use viglm::harness::{run_grid, trajectory_run, write_grid_csv, write_trajectory_csv};
use viglm::inference::normality_check;
use viglm::operators::minty_check;
use viglm::solvers::{
    mle_gd_solve, vi_solve, StepSchedule, DEFAULT_EXPERIMENT_DECAY_RATE, DEFAULT_EXPERIMENT_ETA0,
};
use viglm::synth::generate;
use viglm::{
    BetaStar, Dataset, ExperimentConfig, Family, GridSpec, Link, ScheduleTemplate, SolverTrace,
};

#[derive(Parser)]
#[command(name = "viglm", version, about = "GLM estimation via the VI operator and the MLE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV plus a JSON config sidecar.
    Generate(GenerateArgs),
    /// Fit one estimator on a dataset and print the final coefficients.
    Fit(FitArgs),
    /// Print the Minty-condition report for a dataset/link as JSON.
    MintyCheck(MintyCheckArgs),
    /// Monte-Carlo coverage check of the sandwich confidence intervals.
    Covcheck(CovcheckArgs),
    /// Run a Monte-Carlo benchmark grid and write per-cell CSV.
    Benchmark(BenchmarkArgs),
    /// Emit per-iteration error trajectories for both methods on one dataset.
    Trajectory(TrajectoryArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Inverse link spec, e.g. `softplus`, `log`, `clipped_exp:c=0,C=2`,
    /// `gmmcdf:w=1.65,1.35;m=-0.5,1.2;s=0.7,0.5`.
    #[arg(long)]
    link: String,
    /// Response family: gaussian | bernoulli | poisson | exponential.
    #[arg(long)]
    family: String,
    /// Covariate dimension d.
    #[arg(long)]
    dim: usize,
    /// Sample size N.
    #[arg(long)]
    n: usize,
    /// True parameter layout: dense | sparse | custom:v1,v2,...
    #[arg(long, default_value = "dense")]
    beta_star: String,
    #[arg(long)]
    intercept: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; the config sidecar goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// vi | mle
    #[arg(long)]
    method: String,
    #[arg(long)]
    link: String,
    /// Required for --method mle; ignored by the VI estimator.
    #[arg(long)]
    family: Option<String>,
    /// Input CSV (as written by `generate`). When absent, data is
    /// synthesized from --family/--dim/--n/--beta-star/--seed.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value = "dense")]
    beta_star: String,
    #[arg(long)]
    intercept: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// theoretical | const:eta=.. | rm:mu=.. | decay:eta0=..,rate=..
    #[arg(long, default_value = "decay:eta0=0.01,rate=0.975")]
    schedule: String,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Early-stop tolerance on the operator norm; 0 runs the full budget.
    #[arg(long, default_value_t = 0.0)]
    stop_tol: f64,
    /// Optional CSV path for the full iterate trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct MintyCheckArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    link: String,
    #[arg(long)]
    intercept: bool,
}

#[derive(Args)]
struct CovcheckArgs {
    #[arg(long)]
    link: String,
    #[arg(long)]
    family: String,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value = "dense")]
    beta_star: String,
    #[arg(long)]
    intercept: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Grid spec JSON; see README for the schema.
    #[arg(long, required_unless_present = "full_grid")]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the replication count from the grid file.
    #[arg(long)]
    reps: Option<usize>,
    /// Rayon thread count (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Run the full reproduction grid (4 links, d up to 100, N up to 1000,
    /// 1000 replications). Long-running; intended for overnight runs.
    #[arg(long)]
    full_grid: bool,
}

#[derive(Args)]
struct TrajectoryArgs {
    #[arg(long)]
    link: String,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EXPERIMENT_ETA0)]
    eta0: f64,
    #[arg(long, default_value_t = DEFAULT_EXPERIMENT_DECAY_RATE)]
    decay_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

/// On-disk grid schema for `benchmark --grid`.
#[derive(Deserialize)]
struct GridFile {
    links: Vec<String>,
    dims: Vec<usize>,
    sample_sizes: Vec<usize>,
    iter_budgets: Vec<usize>,
    reps: usize,
    #[serde(default = "default_beta_star")]
    beta_star: String,
    #[serde(default = "default_eta0")]
    eta0: f64,
    #[serde(default = "default_decay_rate")]
    decay_rate: f64,
    #[serde(default)]
    base_seed: u64,
}

fn default_beta_star() -> String {
    "dense".into()
}

fn default_eta0() -> f64 {
    DEFAULT_EXPERIMENT_ETA0
}

fn default_decay_rate() -> f64 {
    DEFAULT_EXPERIMENT_DECAY_RATE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::MintyCheck(args) => cmd_minty_check(args),
        Command::Covcheck(args) => cmd_covcheck(args),
        Command::Benchmark(args) => return cmd_benchmark(args),
        Command::Trajectory(args) => cmd_trajectory(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn parse_beta_star(spec: &str) -> Result<BetaStar> {
    match spec {
        "dense" => Ok(BetaStar::Dense),
        "sparse" => Ok(BetaStar::Sparse),
        _ => {
            if let Some(list) = spec.strip_prefix("custom:") {
                let values: std::result::Result<Vec<f64>, _> =
                    list.split(',').map(str::parse::<f64>).collect();
                return Ok(BetaStar::Custom(values.context("bad custom beta* list")?));
            }
            bail!("unknown beta* spec `{spec}` (dense | sparse | custom:v1,v2,...)")
        }
    }
}

fn experiment_config(
    link: &str,
    family: &str,
    dim: usize,
    n: usize,
    beta_star: &str,
    intercept: bool,
    seed: u64,
) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig {
        dim,
        n,
        link: Link::from_str(link)?,
        family: Family::from_str(family)?,
        beta_star: parse_beta_star(beta_star)?,
        intercept,
        seed,
    })
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let cfg = experiment_config(
        &args.link,
        &args.family,
        args.dim,
        args.n,
        &args.beta_star,
        args.intercept,
        args.seed,
    )?;
    let data = generate(&cfg)?;
    let mut out = String::new();
    let header: Vec<String> = (1..=args.dim)
        .map(|j| format!("x_{j}"))
        .chain(std::iter::once("y".into()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..data.n() {
        for j in 0..args.dim {
            out.push_str(&data.covariates()[(i, j)].to_string());
            out.push(',');
        }
        out.push_str(&data.responses()[i].to_string());
        out.push('\n');
    }
    fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;

    let sidecar = serde_json::json!({
        "link": args.link,
        "family": args.family,
        "dim": args.dim,
        "n": args.n,
        "beta_star": args.beta_star,
        "intercept": args.intercept,
        "seed": args.seed,
    });
    let sidecar_path = sidecar_path(&args.out);
    fs::write(&sidecar_path, format!("{sidecar:#}\n"))
        .with_context(|| format!("writing {}", sidecar_path.display()))?;
    eprintln!(
        "wrote {} rows to {} (config in {})",
        data.n(),
        args.out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Reads the `x_1..x_d,y` CSV written by `generate`.
fn read_dataset(path: &Path, intercept: bool) -> Result<Dataset> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty data file")?;
    let cols = header.split(',').count();
    if cols < 1 || !header.ends_with("y") {
        bail!("expected a `x_1,...,x_d,y` header, got `{header}`");
    }
    let d = cols - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            bail!("row {} has {} fields, expected {cols}", lineno + 2, fields.len());
        }
        for f in &fields[..d] {
            xs.push(f.parse::<f64>().with_context(|| format!("row {}", lineno + 2))?);
        }
        ys.push(fields[d].parse::<f64>().with_context(|| format!("row {}", lineno + 2))?);
    }
    let n = ys.len();
    let covariates = DMatrix::from_row_slice(n, d, &xs);
    Ok(Dataset::from_matrix(covariates, DVector::from_vec(ys), intercept)?)
}

fn parse_schedule(spec: &str, link: &Link, data: &Dataset) -> Result<StepSchedule> {
    let (name, params) = match spec.split_once(':') {
        Some((n, p)) => (n, Some(p)),
        None => (spec, None),
    };
    let kv = |params: Option<&str>| -> Result<Vec<(String, f64)>> {
        params
            .unwrap_or("")
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|pair| {
                let (k, v) = pair
                    .split_once('=')
                    .with_context(|| format!("bad schedule parameter `{pair}`"))?;
                Ok((k.to_string(), v.parse::<f64>()?))
            })
            .collect()
    };
    let lookup = |pairs: &[(String, f64)], key: &str| -> Option<f64> {
        pairs.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    };
    match name {
        "theoretical" => {
            let lipschitz = link.lipschitz();
            if !lipschitz.is_finite() {
                bail!("link `{link}` has no finite Lipschitz constant; the theoretical step is undefined");
            }
            let report = minty_check(link, data)?;
            let mu = report
                .guaranteed_modulus
                .context("link has no known monotonicity modulus; pass an explicit schedule")?;
            if mu <= 0.0 {
                bail!("guaranteed Minty modulus is zero (singular design?)");
            }
            Ok(StepSchedule::theoretical_fixed_point(
                mu,
                lipschitz,
                data.dim(),
                data.m_bound(),
            )?)
        }
        "const" => {
            let pairs = kv(params)?;
            let eta = lookup(&pairs, "eta").context("const schedule needs eta=..")?;
            Ok(StepSchedule::constant(eta)?)
        }
        "rm" => {
            let pairs = kv(params)?;
            let mu = lookup(&pairs, "mu").context("rm schedule needs mu=..")?;
            Ok(StepSchedule::robbins_monro(mu)?)
        }
        "decay" => {
            let pairs = kv(params)?;
            let eta0 = lookup(&pairs, "eta0").unwrap_or(DEFAULT_EXPERIMENT_ETA0);
            let rate = lookup(&pairs, "rate").unwrap_or(DEFAULT_EXPERIMENT_DECAY_RATE);
            let scale = (data.n() as f64 / data.dim().max(1) as f64).sqrt();
            Ok(StepSchedule::experiment_decay(eta0, scale, rate)?)
        }
        _ => bail!("unknown schedule `{spec}`"),
    }
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let link = Link::from_str(&args.link)?;
    let data = match &args.data {
        Some(path) => read_dataset(path, args.intercept)?,
        None => {
            let dim = args.dim.context("--dim is required without --data")?;
            let n = args.n.context("--n is required without --data")?;
            let family = args.family.as_deref().unwrap_or("poisson");
            let cfg = experiment_config(
                &args.link,
                family,
                dim,
                n,
                &args.beta_star,
                args.intercept,
                args.seed,
            )?;
            generate(&cfg)?
        }
    };
    let schedule = parse_schedule(&args.schedule, &link, &data)?;
    let beta0 = DVector::zeros(data.param_dim());
    let trace = match args.method.as_str() {
        "vi" => vi_solve(&link, &data, &beta0, &schedule, args.iters, args.stop_tol)?,
        "mle" => {
            let family = Family::from_str(
                args.family
                    .as_deref()
                    .context("--family is required for --method mle")?,
            )?;
            mle_gd_solve(family, &link, &data, &beta0, &schedule, args.iters, args.stop_tol)?
        }
        other => bail!("unknown method `{other}` (vi | mle)"),
    };

    if let Some(path) = &args.trace {
        let mut out = String::from("t");
        for j in 0..data.param_dim() {
            out.push_str(&format!(",beta_{j}"));
        }
        out.push_str(",op_norm\n");
        for (t, (beta, norm)) in trace
            .recorded_iterations()
            .into_iter()
            .zip(trace.iterates.iter().zip(&trace.operator_norms))
        {
            out.push_str(&t.to_string());
            for v in beta.iter() {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push_str(&format!(",{norm}\n"));
        }
        fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    }

    let final_beta = trace.final_iterate();
    let header: Vec<String> = (0..final_beta.len()).map(|j| format!("beta_{j}")).collect();
    println!("{}", header.join(","));
    println!(
        "{}",
        final_beta
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    eprintln!(
        "{} iterations, final operator norm {:.3e}",
        trace.wall_iterations,
        trace.operator_norms.last().unwrap()
    );
    Ok(())
}

fn cmd_minty_check(args: MintyCheckArgs) -> Result<()> {
    let link = Link::from_str(&args.link)?;
    let data = read_dataset(&args.data, args.intercept)?;
    let report = minty_check(&link, &data)?;
    let json = serde_json::json!({
        "sigma_min": report.sigma_min,
        "modulus_lemma1": report.guaranteed_modulus,
        "grid_min_ratio": report.grid_min_ratio,
        "satisfied": report.satisfied,
    });
    println!("{json:#}");
    Ok(())
}

fn matrix_json(m: &DMatrix<f64>) -> serde_json::Value {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    serde_json::json!(rows)
}

fn cmd_covcheck(args: CovcheckArgs) -> Result<()> {
    let cfg = experiment_config(
        &args.link,
        &args.family,
        args.dim,
        args.n,
        &args.beta_star,
        args.intercept,
        args.seed,
    )?;
    let report = normality_check(&cfg, args.reps, args.n)?;
    let json = serde_json::json!({
        "coverage_per_coord": report.coverage_per_coord,
        "mean_sandwich": matrix_json(&report.mean_sandwich),
        "mc_covariance": matrix_json(&report.mc_covariance),
        "excluded_reps": report.excluded_reps,
    });
    println!("{json:#}");
    Ok(())
}

/// The full reproduction grid: all four experiment links, d ∈ {10,...,100},
/// N ∈ {100,...,1000}, k ∈ {20,50,100,200}, 1000 replications.
fn full_grid_spec() -> GridSpec {
    GridSpec {
        links: vec![
            Link::Exp,
            Link::Softplus,
            Link::ClippedExp { floor: 0.0, cap: 2.0 },
            Link::GmmCdf {
                weights: vec![1.65, 1.35],
                means: vec![-0.5, 1.2],
                scales: vec![0.7, 0.5],
            },
        ],
        dims: (1..=10).map(|i| 10 * i).collect(),
        sample_sizes: (1..=10).map(|i| 100 * i).collect(),
        iter_budgets: vec![20, 50, 100, 200],
        reps: 1000,
        beta_star: BetaStar::Dense,
        schedule: ScheduleTemplate::ExperimentDecay {
            eta0: DEFAULT_EXPERIMENT_ETA0,
            decay_rate: DEFAULT_EXPERIMENT_DECAY_RATE,
        },
        base_seed: 0,
    }
}

fn load_grid(args: &BenchmarkArgs) -> Result<GridSpec> {
    if args.full_grid {
        return Ok(full_grid_spec());
    }
    let path = args.grid.as_ref().expect("clap enforces --grid without --full-grid");
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: GridFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing grid spec {}", path.display()))?;
    let links: Result<Vec<Link>> = file
        .links
        .iter()
        .map(|s| Link::from_str(s).map_err(Into::into))
        .collect();
    Ok(GridSpec {
        links: links?,
        dims: file.dims,
        sample_sizes: file.sample_sizes,
        iter_budgets: file.iter_budgets,
        reps: file.reps,
        beta_star: parse_beta_star(&file.beta_star)?,
        schedule: ScheduleTemplate::ExperimentDecay {
            eta0: file.eta0,
            decay_rate: file.decay_rate,
        },
        base_seed: file.base_seed,
    })
}

fn cmd_benchmark(args: BenchmarkArgs) -> ExitCode {
    // Config problems exit with 2; runtime failures with 1.
    let mut spec = match load_grid(&args) {
        Ok(spec) => spec,
        Err(err) => {
            eprintln!("config error: {err:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(reps) = args.reps {
        spec.reps = reps;
    }
    if let Err(err) = spec.validate() {
        eprintln!("config error: {err:#}");
        return ExitCode::from(2);
    }
    if let Some(threads) = args.threads {
        if let Err(err) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("config error: {err:#}");
            return ExitCode::from(2);
        }
    }
    match run_benchmark(&spec, &args.out) {
        Ok(cells) => {
            eprintln!("wrote {cells} cells to {}", args.out.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_benchmark(spec: &GridSpec, out: &Path) -> Result<usize> {
    let records = run_grid(spec)?;
    let mut buf = Vec::new();
    write_grid_csv(&records, &mut buf)?;
    fs::write(out, buf).with_context(|| format!("writing {}", out.display()))?;
    Ok(records.len())
}

fn cmd_trajectory(args: TrajectoryArgs) -> Result<()> {
    let link = Link::from_str(&args.link)?;
    let scale = (args.n as f64 / args.dim as f64).sqrt();
    let schedule = StepSchedule::experiment_decay(args.eta0, scale, args.decay_rate)?;
    let (vi, mle): (SolverTrace, SolverTrace) =
        trajectory_run(&link, args.dim, args.n, &schedule, args.seed, args.iters)?;
    let mut buf = Vec::new();
    write_trajectory_csv(&vi, &mle, &mut buf)?;
    let mut file = fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    file.write_all(&buf)?;
    eprintln!(
        "wrote {} iterations to {}",
        vi.wall_iterations.max(mle.wall_iterations),
        args.out.display()
    );
    Ok(())
}
