use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clra::error::{Error, Result};
use clra::experiments::{
    derive_seed, diagonal_grid, lambda_gamma_grid, run_plan, single_penalty_grid, sweep_penalties,
    sweep_table, write_results, write_sweep, ExperimentPlan,
};
use clra::io::{
    load_measurement, load_offsets, load_scene, save_measurement, save_offsets, save_scene,
};
use clra::lowrank::{verify_properties, LowRankBlocks, RANK_REL_TOL};
use clra::metrics::{estimation_error, summarize_groups, SummaryRow};
use clra::scene::{
    add_noise, generate_scene, pseudo_toa_from_tdoa, tdoa_from_scene, toa_from_scene, SceneSpec,
    TimingOffsets,
};
use clra::solver::{
    init_offsets, jacobian_check, solve, Assembly, CaseLabel, Method, MethodSetup, PenaltyWeights,
    Problem, SolverConfig,
};

#[derive(Parser)]
#[command(
    name = "clra",
    version,
    about = "Start-time and emission-time estimation for asynchronous microphone arrays"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scene and write scene, measurement and truth files.
    Generate(GenerateArgs),
    /// Report numerical ranks of D+U and its variants.
    RankCheck(RankCheckArgs),
    /// Estimate offsets from a measurement file.
    Solve(SolveArgs),
    /// Compare the analytic Jacobian with finite differences.
    JacobianCheck(JacobianArgs),
    /// Run a Monte-Carlo plan and write the results CSV.
    MonteCarlo(MonteCarloArgs),
    /// Run a penalty-exponent sweep over a plan.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Toa,
    Tdoa,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives scene.toml, measurement.csv, truth.toml.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "toa")]
    kind: Kind,
    /// Gaussian noise standard deviation in seconds.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
}

#[derive(Args)]
struct RankCheckArgs {
    #[arg(long, requires = "n")]
    m: Option<usize>,
    #[arg(long, requires = "m")]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, conflicts_with_all = ["m", "measurement"])]
    scene: Option<PathBuf>,
    #[arg(long, requires = "offsets", conflicts_with = "m")]
    measurement: Option<PathBuf>,
    #[arg(long, requires = "measurement")]
    offsets: Option<PathBuf>,
    #[arg(long, default_value_t = RANK_REL_TOL)]
    tol: f64,
    /// Singular values to include per report.
    #[arg(long, default_value_t = 8)]
    top_k: usize,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WeightArgs {
    /// Base-10 exponents overriding the preset weights.
    #[arg(long)]
    lambda_exp: Option<f64>,
    #[arg(long)]
    alpha_exp: Option<f64>,
    #[arg(long)]
    beta_exp: Option<f64>,
    #[arg(long)]
    gamma_exp: Option<f64>,
}

impl WeightArgs {
    fn overrides(&self) -> Option<PenaltyWeights> {
        let any = self.lambda_exp.is_some()
            || self.alpha_exp.is_some()
            || self.beta_exp.is_some()
            || self.gamma_exp.is_some();
        any.then(|| {
            PenaltyWeights::from_exponents(
                self.lambda_exp,
                self.alpha_exp,
                self.beta_exp,
                self.gamma_exp,
            )
        })
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    measurement: PathBuf,
    #[arg(long, default_value = "clra")]
    method: Method,
    /// True offsets; enables the error field in the output.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Explicit starting offsets; otherwise drawn from `--seed`.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    case: Option<CaseLabel>,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [-1.0, 1.0])]
    time_range: Vec<f64>,
    #[arg(long)]
    m2: Option<usize>,
    #[arg(long)]
    d_p: Option<f64>,
    #[arg(long)]
    w_star: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct JacobianArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "clra")]
    method: Method,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Entries below this magnitude are compared in absolute terms.
    #[arg(long, default_value_t = 1e-9)]
    floor: f64,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MonteCarloArgs {
    /// TOML experiment plan.
    #[arg(long)]
    plan: PathBuf,
    /// Overrides the plan's master seed (and `CLRA_SEED`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Results CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-group summary CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    /// lambda* = gamma* for each exponent.
    Diagonal,
    /// Every (lambda*, gamma*) pair.
    LambdaGamma,
    /// lambda* = 10 with the method's extra penalty varied.
    Single,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    method: Method,
    #[arg(long, value_enum, default_value = "diagonal")]
    grid: GridKind,
    /// Exponents for diagonal or single grids.
    #[arg(long, value_delimiter = ',')]
    exponents: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    gammas: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Usage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::DegenerateScene(_) | Error::NumericalFailure(_) => {
                Failure::Validation(e.to_string())
            }
            other => Failure::Usage(other),
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn generate(args: &GenerateArgs) -> Result<(), Failure> {
    let scene = generate_scene(&SceneSpec::simulation(args.m, args.n), args.seed)?;
    let (meas, truth) = match args.kind {
        Kind::Toa => (toa_from_scene(&scene)?, scene.offsets()),
        Kind::Tdoa => {
            let (meas, gauge) = pseudo_toa_from_tdoa(&tdoa_from_scene(&scene)?, scene.c)?;
            (meas, gauge.truth(&scene))
        }
    };
    let meas = add_noise(&meas, args.sigma, derive_seed(args.seed, &[2]))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    save_scene(&scene, &args.out.join("scene.toml"))?;
    save_measurement(&meas, &args.out.join("measurement.csv"))?;
    save_offsets(&truth, &args.out.join("truth.toml"))?;
    eprintln!(
        "wrote scene.toml, measurement.csv ({}), truth.toml to {}",
        meas.kind.as_str(),
        args.out.display()
    );
    Ok(())
}

fn rank_check(args: &RankCheckArgs) -> Result<(), Failure> {
    let blocks = if let Some(path) = &args.scene {
        let scene = load_scene(path)?;
        LowRankBlocks::build(&toa_from_scene(&scene)?, &scene.offsets())?
    } else if let (Some(mp), Some(op)) = (&args.measurement, &args.offsets) {
        LowRankBlocks::build(&load_measurement(mp)?, &load_offsets(op)?)?
    } else if let (Some(m), Some(n)) = (args.m, args.n) {
        let scene = generate_scene(&SceneSpec::simulation(m, n), args.seed)?;
        LowRankBlocks::build(&toa_from_scene(&scene)?, &scene.offsets())?
    } else {
        return Err(Failure::Usage(Error::InvalidArgument(
            "give --m/--n, --scene, or --measurement with --offsets".into(),
        )));
    };
    let reports = verify_properties(&blocks, args.tol)?;
    let text = match args.format {
        Format::Json => reports
            .iter()
            .map(|r| r.to_json_line(args.top_k) + "\n")
            .collect::<String>(),
        Format::Csv => std::iter::once("name,rank,bound,holds,applicable\n".to_string())
            .chain(reports.iter().map(|r| {
                format!(
                    "{},{},{},{},{}\n",
                    r.matrix_name, r.numeric_rank, r.bound, r.holds, r.applicable
                )
            }))
            .collect(),
    };
    emit(&text, args.out.as_deref())?;
    let failed: Vec<_> = reports.iter().filter(|r| r.violated()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "rank bound violated for {}",
            failed
                .iter()
                .map(|r| r.matrix_name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )))
    }
}

fn solve_cmd(args: &SolveArgs) -> Result<(), Failure> {
    let meas = load_measurement(&args.measurement)?;
    let (m, n) = (meas.num_mics(), meas.num_sources());
    let setup = MethodSetup::resolve(args.method, m, n, args.case, args.weights.overrides())?;
    let mut config = SolverConfig::default();
    if let Some(v) = args.m2 {
        config.m2 = v;
    }
    if let Some(v) = args.d_p {
        config.d_p = v;
    }
    if let Some(v) = args.w_star {
        config.w_star = v;
    }
    config.validate()?;
    let init = match &args.init {
        Some(path) => load_offsets(path)?,
        None => init_offsets(m, n, [args.time_range[0], args.time_range[1]], args.seed)?,
    };
    let outcome = solve(&meas, &setup, &init, &config)?;
    let er = match &args.truth {
        Some(path) => Some(estimation_error(&outcome.offsets, &load_offsets(path)?)?),
        None => None,
    };
    let seed = args.init.is_none().then_some(args.seed);
    emit(
        &(to_json(&outcome.record(&setup, er, seed)) + "\n"),
        args.out.as_deref(),
    )?;
    Ok(())
}

fn jacobian_cmd(args: &JacobianArgs) -> Result<(), Failure> {
    if args.trials == 0 {
        return Err(Failure::Usage(Error::InvalidArgument(
            "--trials must be >= 1".into(),
        )));
    }
    let setup = MethodSetup::resolve(args.method, args.m, args.n, None, None)?;
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for trial in 0..args.trials {
        let scene = generate_scene(
            &SceneSpec::simulation(args.m, args.n),
            derive_seed(args.seed, &[1, trial as u64]),
        )?;
        let meas = toa_from_scene(&scene)?;
        let offsets: TimingOffsets = init_offsets(
            args.m,
            args.n,
            [-1.0, 1.0],
            derive_seed(args.seed, &[3, trial as u64]),
        )?;
        let prob = Problem::new(&meas, setup.weights, Assembly::Active)?;
        let p = prob.initial_point(&offsets)?;
        let check = jacobian_check(
            &prob.jacobian(&p)?,
            &prob.jacobian_fd(&p, args.step)?,
            args.floor,
        );
        worst = worst.max(check.max_rel_error);
        lines.push((trial, check));
    }
    let text = match args.format {
        Format::Json => lines
            .iter()
            .map(|(trial, c)| {
                to_json(&serde_json::json!({
                    "trial": trial,
                    "max_rel_error": c.max_rel_error,
                    "worst_row": c.worst_row,
                    "worst_col": c.worst_col,
                })) + "\n"
            })
            .collect::<String>(),
        Format::Csv => std::iter::once("trial,max_rel_error,worst_row,worst_col\n".to_string())
            .chain(lines.iter().map(|(trial, c)| {
                format!(
                    "{trial},{:e},{},{}\n",
                    c.max_rel_error, c.worst_row, c.worst_col
                )
            }))
            .collect(),
    };
    emit(&text, args.out.as_deref())?;
    if worst < args.tol {
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "max relative error {worst:e} >= {:e}",
            args.tol
        )))
    }
}

fn load_plan(path: &Path, seed: Option<u64>, jobs: Option<usize>) -> Result<ExperimentPlan> {
    let mut plan = ExperimentPlan::load(path)?;
    if let Some(s) = seed {
        plan.master_seed = s;
    }
    if jobs.is_some() {
        plan.jobs = jobs;
    }
    plan.validate()?;
    Ok(plan)
}

fn open_out(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn monte_carlo(args: &MonteCarloArgs) -> Result<(), Failure> {
    let plan = load_plan(&args.plan, args.seed, args.jobs)?;
    let records = run_plan(&plan)?;
    write_results(&records, open_out(args.out.as_deref())?)?;
    let groups = summarize_groups(&records)?;
    for (key, s) in &groups {
        eprintln!(
            "{} M={} N={} sigma={:e}: Rr={:.4} Cr={:.4}",
            key.method, key.m, key.n, key.sigma, s.recovery_rate, s.convergence_rate
        );
    }
    if let Some(path) = &args.summary {
        let mut w = csv::Writer::from_writer(open_out(Some(path))?);
        for (key, s) in &groups {
            w.serialize(SummaryRow::new(*key, s))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<(), Failure> {
    let plan = load_plan(&args.plan, args.seed, args.jobs)?;
    let grid = match args.grid {
        GridKind::Diagonal => diagonal_grid(args.exponents.iter().copied()),
        GridKind::LambdaGamma => lambda_gamma_grid(&args.lambdas, &args.gammas),
        GridKind::Single => single_penalty_grid(args.method, &args.exponents)?,
    };
    let records = sweep_penalties(&plan, args.method, &grid)?;
    write_sweep(&records, open_out(args.out.as_deref())?)?;
    for (point, rate) in sweep_table(&records)? {
        let exps: Vec<String> = [
            ("lambda", point.lambda),
            ("alpha", point.alpha),
            ("beta", point.beta),
            ("gamma", point.gamma),
        ]
        .iter()
        .filter_map(|(name, e)| e.map(|e| format!("{name}*={e}")))
        .collect();
        eprintln!("{}: Rr={rate:.4}", exps.join(" "));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::RankCheck(a) => rank_check(a),
        Command::Solve(a) => solve_cmd(a),
        Command::JacobianCheck(a) => jacobian_cmd(a),
        Command::MonteCarlo(a) => monte_carlo(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("clra: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("clra: {e}");
            ExitCode::from(2)
        }
    }
}
