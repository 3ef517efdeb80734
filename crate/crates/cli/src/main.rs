use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use bode_core::bench::{evaluate_builtin, true_qoi_oracle, OracleMethod, OracleSpec, BUILTIN_NAMES};
use bode_core::config::{ProblemSpec, RunConfig};
use bode_core::engine::{run, Acquisition, RunFailure, RunRecord};
use bode_core::problem::Problem;
use bode_core::report::write_outputs;
use bode_core::Error;

#[derive(Parser, Debug)]
#[command(name = "bode", version, about = "Sequential design for estimating the expectation of a black-box function")]
struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute one run and write its trace, summary and config echo.
    Run(RunArgs),
    /// Compute the reference expectation of a problem by brute force.
    Oracle(OracleArgs),
    /// Run EKLD and uncertainty sampling over several seeds and aggregate the errors.
    Compare(CompareArgs),
    /// Run every built-in problem with its default budget.
    Bench(BenchArgs),
    /// Evaluate a built-in function at one point read from standard input.
    Eval {
        #[arg(long)]
        problem: String,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in problem name; replaces the problem of the config file.
    #[arg(long)]
    problem: Option<String>,
    /// Use the wide [-2,6]^3 domain for f3.
    #[arg(long)]
    wide_domain: bool,
    /// Total number of observations.
    #[arg(long)]
    budget: Option<usize>,
    /// Per-evaluation timeout for external commands, in seconds.
    #[arg(long)]
    timeout: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    acquisition: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "auto")]
    method: String,
    /// Sample size for the sampling oracle.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated master seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "compare")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = BUILTIN_NAMES.map(String::from))]
    problems: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value = "bench")]
    out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Builds the run configuration from the config file and the flag overrides.
fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut config = match (&common.config, &common.problem) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(_)) => RunConfig::new(ProblemSpec::builtin("f1"), Default::default()),
        (None, None) => return Err(CliError::Config("either --config or --problem is required".into())),
    };
    if let Some(name) = &common.problem {
        config.problem = ProblemSpec::Builtin { name: name.clone(), wide_domain: common.wide_domain };
    } else if common.wide_domain {
        if let ProblemSpec::Builtin { wide_domain, .. } = &mut config.problem {
            *wide_domain = true;
        }
    }
    if let Some(n) = common.budget {
        config.engine.n_max = Some(n);
    }
    if let Some(t) = common.timeout {
        config.problem.set_timeout(t);
    }
    Ok(config)
}

fn execute(problem: &Problem, config: &RunConfig, out: &Path) -> CliResult<RunRecord> {
    match run(problem, &config.engine) {
        Ok(record) => {
            write_outputs(&record, config, out)?;
            Ok(record)
        }
        Err(RunFailure { partial, cause }) => {
            if let Some(record) = partial {
                write_outputs(&record, config, out)?;
                eprintln!("partial results written to {}", out.display());
            }
            Err(cause.into())
        }
    }
}

fn cmd_run(args: RunArgs) -> CliResult {
    let mut config = load_config(&args.common)?;
    if let Some(seed) = args.seed {
        config.engine.master_seed = seed;
    }
    if let Some(acq) = &args.acquisition {
        config.engine.acquisition = acq.parse::<Acquisition>()?;
    }
    let problem = config.problem.build()?;
    let record = execute(&problem, &config, &args.out)?;
    let (mean, var) = record.final_belief().unwrap_or((f64::NAN, f64::NAN));
    println!(
        "{}: {} observations, Q = {mean} ± {} (sd), stopped by {:?}",
        record.problem.name,
        record.final_design.len(),
        var.sqrt(),
        record.termination
    );
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> CliResult {
    let config = load_config(&args.common)?;
    let problem = config.problem.build()?;
    let method = match args.method.as_str() {
        "auto" => OracleMethod::Auto,
        "quadrature" => OracleMethod::Quadrature,
        "lhs" => OracleMethod::Lhs,
        other => return Err(CliError::Config(format!("unknown oracle method `{other}`"))),
    };
    let mut spec = OracleSpec { method, seed: args.seed, ..Default::default() };
    if let Some(n) = args.points {
        spec.lhs_points = n;
    }
    let r = true_qoi_oracle(&problem, &spec)?;
    println!("{}", r.value);
    eprintln!(
        "{}: error estimate {:e}, {:?}, {} evaluations{}",
        problem.name,
        r.error_estimate,
        r.method,
        r.evaluations,
        if r.partial { ", PARTIAL: evaluation cap reached" } else { "" }
    );
    Ok(())
}

/// Per-iteration mean absolute error and mean posterior sd over a set of runs.
fn aggregate(records: &[RunRecord], truth: f64) -> Vec<(usize, f64, f64)> {
    let mut rows = Vec::new();
    let longest = records.iter().map(|r| r.iterations.len()).max().unwrap_or(0);
    for k in 0..=longest {
        let beliefs: Vec<(usize, f64, f64)> = records
            .iter()
            .filter_map(|r| {
                if k == 0 {
                    r.initial.as_ref().map(|b| (b.n, b.qoi_mean, b.qoi_variance))
                } else {
                    r.iterations
                        .get(k - 1)
                        .map(|it| (r.initial_design.len() + k, it.qoi_mean, it.qoi_variance))
                }
            })
            .collect();
        if beliefs.is_empty() {
            continue;
        }
        let m = beliefs.len() as f64;
        let err = beliefs.iter().map(|b| (b.1 - truth).abs()).sum::<f64>() / m;
        let sd = beliefs.iter().map(|b| b.2.sqrt()).sum::<f64>() / m;
        rows.push((beliefs[0].0, err, sd));
    }
    rows
}

fn cmd_compare(args: CompareArgs) -> CliResult {
    let config = load_config(&args.common)?;
    let problem = config.problem.build()?;
    let truth = true_qoi_oracle(&problem, &OracleSpec::default())?;
    if truth.partial {
        log::warn!("oracle hit its evaluation cap; errors are relative to a partial value");
    }
    let mut curves = Vec::new();
    for acq in [Acquisition::Ekld, Acquisition::Us] {
        let records: Vec<RunRecord> = args
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut c = config.clone();
                c.engine.acquisition = acq;
                c.engine.master_seed = seed;
                execute(&problem, &c, &args.out.join(acq.to_string()).join(format!("seed_{seed}")))
            })
            .collect::<CliResult<_>>()?;
        curves.push(aggregate(&records, truth.value));
    }
    fs::create_dir_all(&args.out)?;
    let mut csv = String::from("n,ekld_abs_error,ekld_sd,us_abs_error,us_sd\n");
    for (e, u) in curves[0].iter().zip(&curves[1]) {
        csv.push_str(&format!("{},{},{},{},{}\n", e.0, e.1, e.2, u.1, u.2));
    }
    fs::write(args.out.join("compare.csv"), &csv)?;
    println!("# {}: oracle {}, {} seeds", problem.name, truth.value, args.seeds.len());
    print!("{csv}");
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> CliResult {
    println!("problem,n,qoi_mean,qoi_sd,oracle,abs_error");
    for name in &args.problems {
        let mut config = RunConfig::new(ProblemSpec::builtin(name), Default::default());
        config.engine.master_seed = args.seed;
        config.engine.n_max = args.budget;
        let problem = config.problem.build()?;
        let truth = true_qoi_oracle(&problem, &OracleSpec::default())?;
        let record = execute(&problem, &config, &args.out.join(name))?;
        let (m, v) = record.final_belief().unwrap_or((f64::NAN, f64::NAN));
        println!(
            "{name},{},{m},{},{},{}",
            record.final_design.len(),
            v.sqrt(),
            truth.value,
            (m - truth.value).abs()
        );
    }
    Ok(())
}

fn cmd_eval(problem: &str) -> CliResult {
    let mut line = String::new();
    io::stdin().lock().read_line(&mut line)?;
    let x = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| CliError::Runtime(format!("bad coordinate `{t}`"))))
        .collect::<CliResult<Vec<f64>>>()?;
    println!("{}", evaluate_builtin(problem, &x)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Eval { problem } => cmd_eval(&problem),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
