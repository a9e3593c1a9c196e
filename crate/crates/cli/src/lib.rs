//! Command implementations behind the `tdlab` binary.

pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tdlab::bound_calculus::{self, BoundQuery, BoundReport, Horizon, PInitSource};
use tdlab::experiment_harness::{self, DFit};
use tdlab::rng;
use tdlab::td_dynamics::{self, RunSpec};
use tdlab::Error;

use config::{Format, Loaded, ProblemConfigFile};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "OUTPUT_DIR";

#[derive(Debug)]
pub enum CliError {
    /// Bad input; exit code 1.
    Validation(String),
    /// Failure during numerical work or while writing results; exit code 2.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() || matches!(e, Error::Io(_)) {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Numerical(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "tdlab", version, about = "TD(0) with linear features: analytic solution, simulation, bounds and experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the chain, features, schedule and bound hypotheses.
    Validate { config: PathBuf },
    /// Write the analytic solution and constants.
    Solve {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Write one TD(0) trajectory.
    Simulate {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
        /// Index of the random stream to use.
        #[arg(long, default_value_t = 0)]
        trajectory: u64,
    },
    /// Evaluate the all-time bound.
    Bound {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
        /// Sum the tail over all m > n0 instead of up to the horizon.
        #[arg(long)]
        infinite: bool,
    },
    /// Run the Monte Carlo all-time experiment.
    Experiment {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Override `experiment.master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `experiment.horizon`.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Output directory (takes precedence over OUTPUT_DIR and the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write only this format.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Worker threads for simulation; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

/// Runs a parsed command, printing reports to `stdout` and warnings to stderr.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { config } => cmd_validate(&config, stdout),
        Command::Solve { config, flags } => cmd_solve(&config, &flags),
        Command::Simulate { config, flags, trajectory } => cmd_simulate(&config, &flags, trajectory),
        Command::Bound { config, flags, infinite } => cmd_bound(&config, &flags, infinite),
        Command::Experiment { config, flags } => cmd_experiment(&config, &flags),
    }
}

/// Parses the file and applies flag overrides; usage errors surface here,
/// before any numerical work.
fn load(config: &Path, flags: &RunFlags) -> Result<Loaded, CliError> {
    let mut file = ProblemConfigFile::load(config)?;
    if let Some(seed) = flags.seed {
        file.experiment.master_seed = seed;
    }
    if let Some(h) = flags.horizon {
        file.experiment.horizon = h;
    }
    if file.experiment.horizon <= file.experiment.n0 {
        return Err(CliError::Validation(format!(
            "horizon {} must exceed n0 {}",
            file.experiment.horizon, file.experiment.n0
        )));
    }
    if flags.jobs == Some(0) {
        return Err(CliError::Validation("--jobs must be at least 1".into()));
    }
    Loaded::from_file(file)
}

fn output_dir(loaded: &Loaded, flags: &RunFlags) -> Result<PathBuf, CliError> {
    let dir = flags
        .out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| loaded.file.output.dir.clone());
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    Ok(dir)
}

fn wants(loaded: &Loaded, flags: &RunFlags, format: Format) -> bool {
    match flags.format {
        Some(FormatArg::Json) => format == Format::Json,
        Some(FormatArg::Csv) => format == Format::Csv,
        None => loaded.file.output.formats.contains(&format),
    }
}

/// Serializes with sorted keys and a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let v = serde_json::to_value(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| CliError::Numerical(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, canonical_json(value)?).map_err(|e| io_error(&path, e))?;
    Ok(path)
}

fn write_with<F>(dir: &Path, name: &str, f: F) -> Result<PathBuf, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> tdlab::Result<()>,
{
    let path = dir.join(name);
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(&path, buf).map_err(|e| io_error(&path, e))?;
    Ok(path)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Numerical(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn cmd_validate(config: &Path, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let mut line = |s: String| writeln!(out, "{s}").map_err(|e| CliError::Numerical(e.to_string()));
    let file = ProblemConfigFile::load(config)?;
    let problem = file.problem()?;
    let chain = problem.chain();
    line(format!(
        "chain: ok ({} states, stochastic, irreducible, aperiodic)",
        chain.n_states()
    ))?;
    line(format!(
        "stationary distribution: {:?}",
        problem.stationary().pi().as_slice()
    ))?;
    line(format!(
        "features: ok (d = {}, full column rank)",
        problem.dim()
    ))?;
    let schedule = file.schedule()?;
    line(format!(
        "schedule: ok ({:?}, d1 = {}, d2 = {}, d3 = {}, constraints from n = {})",
        file.schedule.kind,
        schedule.d1(),
        schedule.d2(),
        schedule.d3(),
        schedule.valid_from()
    ))?;
    let a = problem.assumption();
    line(format!(
        "feature condition: lambda_M = {:.6}, threshold = {:.6}, {}",
        a.lambda_m,
        a.threshold,
        if a.satisfied { "satisfied" } else { "VIOLATED" }
    ))?;
    if !a.satisfied {
        return Err(CliError::Validation(format!(
            "feature condition violated: lambda_M = {} >= {}; rescale the features by a factor below {:.6}",
            a.lambda_m, a.threshold, a.suggested_scale
        )));
    }
    let loaded = Loaded::from_file(file)?;
    let c = &loaded.solution.constants;
    line(format!("alpha = {:.6}", c.alpha))?;
    line(format!("x* = {:?}", loaded.solution.x_star.as_slice()))?;
    line(format!(
        "constants: c1 = {:.6}, c2 = {:.6}, c3 = {:.6}",
        c.c1, c.c2, c.c3
    ))?;
    let e = &loaded.file.experiment;
    let check = bound_calculus::check_n0(c, &loaded.schedule, e.n0)?;
    line(format!(
        "n0 = {}: alpha + a(n0) c1 = {:.6} ({}; smallest feasible n0 = {})",
        e.n0,
        1.0 - check.margin,
        if check.feasible { "feasible" } else { "INFEASIBLE" },
        check
            .smallest_feasible
            .map(|n| n.to_string())
            .unwrap_or_else(|| "none".into())
    ))?;
    loaded
        .file
        .experiment()
        .validate(&loaded.problem, &loaded.solution, &loaded.schedule)?;
    line("experiment: ok".into())?;
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput {
    analytic: tdlab::analytic::AnalyticReport,
    n0_check: bound_calculus::N0Check,
}

fn cmd_solve(config: &Path, flags: &RunFlags) -> Result<(), CliError> {
    let loaded = load(config, flags)?;
    let dir = output_dir(&loaded, flags)?;
    let report = SolveOutput {
        analytic: loaded.solution.report(&loaded.problem),
        n0_check: bound_calculus::check_n0(&loaded.solution.constants, &loaded.schedule, loaded.file.experiment.n0)?,
    };
    write_json(&dir, "analytic.json", &report)?;
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryJson<'a> {
    n0: usize,
    horizon: usize,
    states: &'a [usize],
    err_x: &'a [f64],
    err_xz: &'a [f64],
    x_prime: &'a [f64],
    final_x: Vec<f64>,
}

fn cmd_simulate(config: &Path, flags: &RunFlags, trajectory: u64) -> Result<(), CliError> {
    let loaded = load(config, flags)?;
    let dir = output_dir(&loaded, flags)?;
    let e = &loaded.file.experiment;
    let problem = &loaded.problem;
    let cfg = loaded.file.experiment();
    cfg.validate(problem, &loaded.solution, &loaded.schedule)?;
    let mut stream = rng::stream(e.master_seed, trajectory);
    let initial_state = experiment_harness::initial_state(cfg.initial_state_policy, problem, &mut stream);
    let spec = RunSpec {
        n0: 0,
        horizon: e.horizon,
        initial_x: e
            .initial_x
            .as_ref()
            .map(|x| nalgebra::DVector::from_column_slice(x))
            .unwrap_or_else(|| nalgebra::DVector::zeros(problem.dim())),
        initial_state,
    };
    let record = td_dynamics::run_online(problem, &loaded.solution, &loaded.schedule, &spec, &mut stream, false)?;
    if wants(&loaded, flags, Format::Csv) {
        write_with(&dir, "trajectory.csv", |buf| record.write_csv(buf, true))?;
    }
    if wants(&loaded, flags, Format::Json) {
        write_json(
            &dir,
            "trajectory.json",
            &TrajectoryJson {
                n0: record.n0,
                horizon: record.horizon,
                states: &record.states,
                err_x: &record.err_x,
                err_xz: &record.err_xz,
                x_prime: &record.x_prime,
                final_x: record.final_x.iter().copied().collect(),
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundOutput {
    report: BoundReport,
    d_const_source: &'static str,
    fitted_d: Option<DFit>,
    constants: tdlab::ConstantsBundle,
}

fn cmd_bound(config: &Path, flags: &RunFlags, infinite: bool) -> Result<(), CliError> {
    let loaded = load(config, flags)?;
    let dir = output_dir(&loaded, flags)?;
    let e = &loaded.file.experiment;
    let (problem, solution, schedule) = (&loaded.problem, &loaded.solution, &loaded.schedule);
    let cfg = loaded.file.experiment();
    cfg.validate(problem, solution, schedule)?;

    let (d_const, d_const_source, fitted_d) = match e.d_const {
        Some(d) => (d, "config", None),
        None => {
            let samples = with_jobs(flags.jobs, || {
                experiment_harness::collect_gamma_samples(problem, solution, schedule, &cfg)
            })??;
            let grid = match &cfg.fit_delta_grid {
                Some(g) => g.clone(),
                None => experiment_harness::default_fit_grid(&samples),
            };
            let fit = experiment_harness::fit_d(&samples, &grid, schedule, problem.dim())?;
            (fit.d_lsq, "fitted", Some(fit))
        }
    };
    let (p_init, source) = match e.p_init {
        Some(p) => (p, PInitSource::UserBound),
        None => {
            let pts = with_jobs(flags.jobs, || {
                experiment_harness::estimate_p_init(problem, solution, schedule, &cfg)
            })??;
            let p = pts
                .iter()
                .find(|p| p.epsilon == e.epsilon)
                .map(|p| p.estimate.estimate)
                .unwrap_or(0.0);
            (p, PInitSource::Empirical)
        }
    };
    let horizon = if infinite { Horizon::Infinite } else { Horizon::Finite(e.horizon) };
    let query = BoundQuery::new(
        e.epsilon,
        e.delta,
        e.n0,
        horizon,
        d_const,
        p_init,
        source,
        &solution.constants,
        schedule,
    )?;
    let report = BoundReport::evaluate(&query, &solution.constants, schedule, e.horizon)?;
    if report.tail.vacuous {
        eprintln!(
            "warning: vacuous bound (tail sum {:.6e}, probability lower bound {:.6})",
            report.tail.tail_sum, report.tail.prob_lower_bound
        );
    }
    if wants(&loaded, flags, Format::Csv) {
        write_with(&dir, "bound.csv", |buf| report.write_csv(buf, &solution.constants, schedule))?;
    }
    if wants(&loaded, flags, Format::Json) {
        write_json(
            &dir,
            "bound.json",
            &BoundOutput {
                report,
                d_const_source,
                fitted_d,
                constants: solution.constants.clone(),
            },
        )?;
    }
    Ok(())
}

fn cmd_experiment(config: &Path, flags: &RunFlags) -> Result<(), CliError> {
    let loaded = load(config, flags)?;
    let dir = output_dir(&loaded, flags)?;
    let cfg = loaded.file.experiment();
    let result = with_jobs(flags.jobs, || {
        experiment_harness::run_alltime_experiment(&loaded.problem, &loaded.solution, &loaded.schedule, &cfg)
    })??;
    eprintln!("wall time: {:.3} s", result.wall_time);
    if let Some(msg) = &result.fit_error {
        eprintln!("warning: D could not be fitted: {msg}");
    }
    if let Some(lb) = result.theoretical_lower_bound {
        if lb <= 0.0 {
            eprintln!("warning: vacuous bound (theoretical lower bound {lb:.6})");
        }
    }
    if wants(&loaded, flags, Format::Json) {
        write_json(&dir, "experiment.json", &result.to_json()?)?;
    }
    if wants(&loaded, flags, Format::Csv) {
        write_with(&dir, "experiment_curve.csv", |buf| result.write_curve_csv(buf))?;
        write_with(&dir, "experiment_summary.csv", |buf| result.write_summary_csv(buf))?;
    }
    Ok(())
}
