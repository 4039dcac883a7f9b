//! Command-line front end: validate / simulate / scale / regulate /
//! limit / compare.
//!
//! Exit codes: 0 success, 1 validation or usage failure, 2 numerical
//! failure (no convergence, indefinite covariance), 3 I/O failure. All
//! randomness derives from `--seed`, and repeating an invocation
//! produces byte-identical output files. `HTNET_THREADS` caps the worker
//! pool (default: machine parallelism).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::harness::{self, stream_seed, HarnessError};
use crate::io::{self, IoError, RunConfig};
use crate::limitproc::{self, CovMode, LimitError, LimitPath};
use crate::netmodel::{ModelError, NetworkParams};
use crate::regulator::{self, RegulatorError, RegulatorInput, RegulatorOutput, SolveMode};
use crate::scaling::{scale_path, ScaledBundle};
use crate::simulator::{simulate_path, InitialState, PathRecord, SimError};

// Seed blocks for the standalone subcommands; `compare` derives its own
// phase blocks inside the harness.
const BLOCK_SIMULATE: u64 = 0;
const BLOCK_LIMIT: u64 = 1;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Regulator(#[from] RegulatorError),
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Usage(String),
}

fn regulator_code(e: &RegulatorError) -> i32 {
    match e {
        RegulatorError::NoConvergence { .. } | RegulatorError::NonFinite { .. } => 2,
        _ => 1,
    }
}

fn limit_code(e: &LimitError) -> i32 {
    match e {
        LimitError::IndefiniteMatrix { .. } => 2,
        LimitError::Regulator(r) => regulator_code(r),
        _ => 1,
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(_) | CliError::Sim(_) | CliError::Usage(_) => 1,
            CliError::Regulator(e) => regulator_code(e),
            CliError::Limit(e) => limit_code(e),
            CliError::Harness(e) => match e {
                HarnessError::Limit(l) => limit_code(l),
                HarnessError::Regulator(r) => regulator_code(r),
                _ => 1,
            },
            CliError::Io(e) => match e {
                IoError::Io(_) => 3,
                _ => 1,
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "htnet",
    version,
    about = "Closed two-level queueing networks: simulation and diffusion-limit verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network config against the critical-loading conditions.
    Validate(ValidateArgs),
    /// Simulate replications of the Markov chain onto a snapshot grid.
    Simulate(SimulateArgs),
    /// Apply fluid and diffusion scalings to simulated paths.
    Scale(ScaleArgs),
    /// Solve the discrete regulator system on scaled free processes.
    Regulate(RegulateArgs),
    /// Sample the regulated Brownian limit triple.
    Limit(LimitArgs),
    /// Compare prelimit marginals against limit samples across n.
    Compare(CompareArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Network config (JSON).
    config: PathBuf,
    /// Residual tolerance for the critical-loading check.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Renormalize routing rows that do not sum to one.
    #[arg(long)]
    renormalize: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Network config (JSON).
    config: PathBuf,
    /// Job population.
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    /// Snapshot grid step.
    #[arg(long, default_value_t = 0.01)]
    grid: f64,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "paths.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ScaleArgs {
    /// Simulated paths (kind=paths CSV).
    input: PathBuf,
    #[arg(long, default_value = "scaled.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct RegulateArgs {
    /// Scaled paths (kind=scaled CSV).
    input: PathBuf,
    /// Solver: forward or picard.
    #[arg(long, default_value = "forward")]
    mode: String,
    /// Fixed-point tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Iteration cap for picard mode; 0 picks a horizon-based default.
    #[arg(long, default_value_t = 0)]
    max_iter: usize,
    /// Also require the free processes to conserve total mass.
    #[arg(long)]
    strict: bool,
    /// Mass-conservation tolerance under --strict.
    #[arg(long, default_value_t = 1e-9)]
    strict_tol: f64,
    #[arg(long, default_value = "regulated.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct LimitArgs {
    /// Network config (JSON).
    config: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    /// Driver grid step.
    #[arg(long, default_value_t = 0.005)]
    grid: f64,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Covariance mode: projected or as-written.
    #[arg(long, default_value = "projected")]
    cov_mode: String,
    /// Regulator tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value = "limit.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Network config (JSON).
    config: PathBuf,
    /// Increasing population sizes.
    #[arg(long, value_delimiter = ',', default_value = "25,100,400")]
    n: Vec<u64>,
    #[arg(long, default_value_t = 2000)]
    reps: usize,
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0.005)]
    grid: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Covariance mode: auto (empirically validated), projected, or as-written.
    #[arg(long, default_value = "auto")]
    cov_mode: String,
    /// Report path; a long-form CSV lands next to it with extension .csv.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

fn init_threads() {
    if let Ok(v) = std::env::var("HTNET_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                // Errors only mean the global pool already exists.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn parse_cov_mode(s: &str) -> Result<CovMode, CliError> {
    match s {
        "projected" | "consistency_projected" | "consistency-projected" => Ok(CovMode::Projected),
        "as_written" | "as-written" => Ok(CovMode::AsWritten),
        other => Err(CliError::Usage(format!(
            "unknown covariance mode `{}` (expected projected or as-written)",
            other
        ))),
    }
}

fn create_out(path: &PathBuf) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(IoError::from)?))
}

fn open_in(path: &PathBuf) -> Result<BufReader<File>, CliError> {
    Ok(BufReader::new(File::open(path).map_err(IoError::from)?))
}

fn cmd_validate(args: ValidateArgs) -> Result<i32, CliError> {
    let network = io::read_config(&args.config)?;
    let params = NetworkParams::from_config(&network, args.renormalize)?;
    let report = params.heavy_traffic_report(args.tol);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(IoError::from)?
    );
    Ok(if report.passes { 0 } else { 1 })
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32, CliError> {
    let network = io::read_config(&args.config)?;
    let mut config = RunConfig::new("simulate", network);
    config.n = Some(args.n);
    config.horizon = Some(args.horizon);
    config.grid = Some(args.grid);
    config.reps = Some(args.reps);
    config.seed = Some(args.seed);
    // Same envelope the readers enforce, so the output is re-readable.
    let (params, n, horizon, grid, _) = io::resolve_config(&config)?;
    let records: Vec<PathRecord> = (0..args.reps)
        .into_par_iter()
        .map(|r| {
            let s = stream_seed(args.seed, BLOCK_SIMULATE, r as u64);
            simulate_path(&params, n, horizon, grid, s, &InitialState::Fluid)
        })
        .collect::<Result<_, _>>()?;

    let mut w = create_out(&args.out)?;
    io::write_paths_csv(&mut w, &config, &records)?;
    w.flush().map_err(IoError::from)?;
    println!(
        "wrote {} replications to {}",
        records.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_scale(args: ScaleArgs) -> Result<i32, CliError> {
    let (records, mut config) = io::read_paths_csv(open_in(&args.input)?)?;
    config.command = "scale".to_string();
    config.version = env!("CARGO_PKG_VERSION").to_string();
    let bundles: Vec<(u64, ScaledBundle)> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| (i as u64, scale_path(r)))
        .collect();
    let mut w = create_out(&args.out)?;
    io::write_scaled_csv(&mut w, &config, &bundles)?;
    w.flush().map_err(IoError::from)?;
    println!("scaled {} replications to {}", bundles.len(), args.out.display());
    Ok(0)
}

fn cmd_regulate(args: RegulateArgs) -> Result<i32, CliError> {
    let mode = match args.mode.as_str() {
        "forward" => SolveMode::Forward,
        "picard" => SolveMode::Picard,
        other => {
            return Err(CliError::Usage(format!(
                "unknown solve mode `{}` (expected forward or picard)",
                other
            )))
        }
    };
    let (frames, mut config) = io::read_scaled_csv(open_in(&args.input)?)?;
    let params = NetworkParams::from_config(&config.network, false)?;
    config.command = "regulate".to_string();
    config.version = env!("CARGO_PKG_VERSION").to_string();
    config.tol = Some(args.tol);

    let outputs: Vec<(u64, RegulatorOutput)> = frames
        .par_iter()
        .map(|f| {
            let input = RegulatorInput::new(&f.xi, &f.zeta, &params)?;
            if args.strict {
                input.validate_strict(args.strict_tol)?;
            }
            let max_iter = if args.max_iter == 0 {
                regulator::default_max_iter(&params, input.horizon())
            } else {
                args.max_iter
            };
            regulator::regulate(&input, mode, args.tol, max_iter).map(|o| (f.rep, o))
        })
        .collect::<Result<_, _>>()?;
    let mut w = create_out(&args.out)?;
    io::write_regulated_csv(&mut w, &config, &outputs)?;
    w.flush().map_err(IoError::from)?;
    println!(
        "regulated {} replications to {}",
        outputs.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_limit(args: LimitArgs) -> Result<i32, CliError> {
    let network = io::read_config(&args.config)?;
    let params = NetworkParams::from_config(&network, false)?;
    io::resolve_grid(args.horizon, args.grid)?;
    let mode = parse_cov_mode(&args.cov_mode)?;
    let cov = limitproc::build_covariance(&params, mode)?;
    let initial = vec![0.0; cov.dim()];
    let paths: Vec<(u64, LimitPath)> = (0..args.reps)
        .into_par_iter()
        .map(|r| {
            let s = stream_seed(args.seed, BLOCK_LIMIT, r as u64);
            limitproc::simulate_limit(
                &params,
                &cov,
                &initial,
                args.horizon,
                args.grid,
                s,
                args.tol,
            )
            .map(|p| (r as u64, p))
        })
        .collect::<Result<_, _>>()?;

    let mut config = RunConfig::new("limit", network);
    config.horizon = Some(args.horizon);
    config.grid = Some(args.grid);
    config.reps = Some(args.reps);
    config.seed = Some(args.seed);
    config.tol = Some(args.tol);
    config.cov_mode = Some(mode);
    let mut w = create_out(&args.out)?;
    io::write_limit_csv(&mut w, &config, &paths)?;
    w.flush().map_err(IoError::from)?;
    println!(
        "sampled {} limit paths (mode {}, ones_quadratic {:.3e}, eigen_min {:.3e}) to {}",
        paths.len(),
        cov.mode,
        cov.ones_quadratic,
        cov.eigen_min,
        args.out.display()
    );
    Ok(0)
}

fn cmd_compare(args: CompareArgs) -> Result<i32, CliError> {
    let network = io::read_config(&args.config)?;
    let params = NetworkParams::from_config(&network, false)?;
    io::resolve_grid(args.horizon, args.grid)?;
    let forced = match args.cov_mode.as_str() {
        "auto" => None,
        other => Some(parse_cov_mode(other)?),
    };
    let report = harness::convergence_experiment(
        &params,
        &args.n,
        args.reps,
        args.horizon,
        args.grid,
        args.seed,
        forced,
    )?;

    let mut w = create_out(&args.out)?;
    io::write_report_json(&mut w, &report)?;
    w.flush().map_err(IoError::from)?;
    let csv_path = args.out.with_extension("csv");
    let mut w = create_out(&csv_path)?;
    io::write_report_csv(&mut w, &report)?;
    w.flush().map_err(IoError::from)?;

    println!(
        "compared n = {:?} with {} replications (covariance mode {}, {})",
        report.n_values, report.reps, report.cov_mode_compared, report.cov_mode_source
    );
    println!(
        "flags: ks_monotone={} ks_last_below={} moments_monotone={} fluid_decreasing={} idle_bounded={} all={}",
        report.flags.ks_monotone,
        report.flags.ks_last_below,
        report.flags.moments_monotone,
        report.flags.fluid_decreasing,
        report.flags.idle_bounded,
        report.flags.all
    );
    println!(
        "wrote {} and {}",
        args.out.display(),
        csv_path.display()
    );
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Scale(args) => cmd_scale(args),
        Command::Regulate(args) => cmd_regulate(args),
        Command::Limit(args) => cmd_limit(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

/// Parses `args` (including the program name) and runs one subcommand.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator,
    I::Item: Into<OsString> + Clone,
{
    init_threads();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests route through here as non-errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}
