use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qbm_core::bath::tabulate_kernels;
use qbm_core::coefficients::trajectory_with_kernels;
use qbm_core::dynamics::{evolve_with_substeps, WignerGaussian};
use qbm_core::elementary::elementary;
use qbm_core::verify::run_verify;
use qbm_core::{Mode, QbmError, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_VERIFY: u8 = 4;

/// Wigner snapshot resolution and half-width in standard deviations.
const WIGNER_POINTS: usize = 41;
const WIGNER_WIDTH: f64 = 4.0;

#[derive(Parser)]
#[command(name = "qbm", version, about = "Exact master-equation coefficients and Gaussian dynamics for quantum Brownian motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configured one
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Tabulate γ and ν: kernels.csv
    Kernels,
    /// Boundary-value solutions at t_max: elementary.csv
    Elementary,
    /// Coefficient trajectory: coefficients.csv, coefficients.json
    Coeffs,
    /// Moment evolution: coefficients.csv, moments.csv, wigner_final.csv
    Evolve,
    /// Checks against the closed-system reference: verify.json and series
    Verify,
}

enum Failure {
    Core(QbmError),
    VerifyFailed,
}

impl From<QbmError> for Failure {
    fn from(e: QbmError) -> Self {
        Failure::Core(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::VerifyFailed) => {
            eprintln!("verification failed");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERICAL })
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| QbmError::Config("--config <path> is required".into()))?;
    let cfg = RunConfig::from_file(path)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(QbmError::Config("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| QbmError::Config(e.to_string()))?;
    }
    let dir = cfg.output_dir(cli.out.as_deref());
    std::fs::create_dir_all(&dir)
        .map_err(|e| QbmError::Io(format!("cannot create {}: {e}", dir.display())))?;
    match cli.command {
        Command::Kernels => cmd_kernels(&cfg, &dir),
        Command::Elementary => cmd_elementary(&cfg, &dir),
        Command::Coeffs => cmd_coeffs(&cfg, &dir).map(|_| ()),
        Command::Evolve => cmd_evolve(&cfg, &dir),
        Command::Verify => cmd_verify(&cfg, &dir),
    }
}

fn emit(path: &Path) {
    println!("{}", path.display());
}

fn cmd_kernels(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let bath = cfg.bath_spec()?;
    let k = tabulate_kernels(&bath, cfg.grid.ds, cfg.grid.t_max.max(cfg.grid.ds))?;
    let path = dir.join("kernels.csv");
    k.write_csv_file(&path)?;
    emit(&path);
    Ok(())
}

fn cmd_elementary(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let bath = cfg.bath_spec()?;
    let ds = cfg.grid.ds;
    let k = tabulate_kernels(&bath, ds, cfg.grid.t_max + ds)?;
    let sol = elementary(&cfg.system_params(), &k, cfg.grid.t_max, ds, &cfg.solver_options())?;
    let path = dir.join("elementary.csv");
    sol.write_csv_file(&path)?;
    emit(&path);
    Ok(())
}

/// Writes the coefficient files and returns the trajectory with γ(0).
fn cmd_coeffs(cfg: &RunConfig, dir: &Path) -> Result<(qbm_core::CoefficientTrajectory, f64), Failure> {
    let bath = cfg.bath_spec()?;
    let sys = cfg.system_params();
    let grid = cfg.time_grid()?;
    let mode = cfg.mode();
    let kernels = match mode {
        Mode::OhmicFp => None,
        _ => Some(tabulate_kernels(&bath, cfg.grid.ds, grid.t_max() + cfg.grid.ds)?),
    };
    let traj = trajectory_with_kernels(&sys, &bath, kernels.as_ref(), mode, &grid, &cfg.solver_options())?;
    let csv = dir.join("coefficients.csv");
    traj.write_csv_file(&csv)?;
    let json = dir.join("coefficients.json");
    std::fs::write(&json, traj.to_json()?).map_err(QbmError::from)?;
    emit(&csv);
    emit(&json);
    for row in traj.flagged() {
        eprintln!("warning: coefficient singularity at t = {}", row.t);
    }
    Ok((traj, kernels.map_or(0.0, |k| k.gamma0())))
}

fn cmd_evolve(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let (traj, gamma0) = cmd_coeffs(cfg, dir)?;
    let initial = cfg.initial_state()?;
    let series = evolve_with_substeps(
        &initial,
        &traj,
        &cfg.system_params(),
        gamma0,
        cfg.grid.dt_out,
        cfg.grid.substeps,
    )?;
    let path = dir.join("moments.csv");
    series.write_csv_file(&path)?;
    emit(&path);
    let last = *series.states.last().expect("series starts at t = 0");
    let wigner = WignerGaussian::new(last)?;
    let path = dir.join("wigner_final.csv");
    wigner.write_grid_csv(std::fs::File::create(&path).map_err(QbmError::from)?, WIGNER_WIDTH, WIGNER_POINTS, WIGNER_POINTS)?;
    emit(&path);
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let out = run_verify(cfg)?;
    out.coefficients.write_csv_file(&dir.join("coefficients.csv"))?;
    out.oracle_moments.write_csv_file(&dir.join("oracle_moments.csv"))?;
    if let Some(m) = &out.moments {
        m.write_csv_file(&dir.join("moments.csv"))?;
    }
    let json = out.report.to_json();
    std::fs::write(dir.join("verify.json"), &json).map_err(QbmError::from)?;
    println!("{json}");
    for c in out.report.checks.iter().filter(|c| !c.passed) {
        eprintln!("check {} failed: measured {:e}, tolerance {:e}", c.name, c.measured, c.tolerance);
    }
    if out.report.passed {
        Ok(())
    } else {
        Err(Failure::VerifyFailed)
    }
}
