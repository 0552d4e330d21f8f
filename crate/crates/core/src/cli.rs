//! The `tlqr` command line.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 non-convergence
//! or a failed verification, 3 I/O failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::experiment::Experiment;
use crate::export::{exit_csv, gains_csv, sweep_csv, timestamp_now, trajectory_csv, RunManifest};
use crate::large_deviations::{ExitEstimate, RateFit};
use crate::planner::PlannerReport;
use crate::simulator::{noise_scale, SweepModes};
use crate::verify::{run_suite, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NONCONVERGED: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tlqr", version, about = "Trajectory planning with time-varying LQR tracking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (JSON). The bundled car experiment if omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `master_seed` from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for Monte Carlo work. Results do not depend on it.
    #[arg(long, env = "TLQR_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize the nominal trajectory and synthesize tracking gains.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average NMSE of closed- and open-loop execution over a noise grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        /// Use the fine grid 0.001:0.001:0.1501 instead of the configured one.
        #[arg(long)]
        full_grid: bool,
    },
    /// Run verification suites: lemmas, theorem3, ldp, riccati or all.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Directory for the JSON report; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Tube-exit probabilities over the configured noise levels and the rate fit.
    Ldp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Both,
    Closed,
    Open,
}

impl From<ModeArg> for SweepModes {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Both => SweepModes::Both,
            ModeArg::Closed => SweepModes::Closed,
            ModeArg::Open => SweepModes::Open,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Compute(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Compute(_) => EXIT_NONCONVERGED,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Compute(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) => Failure::Config(e.to_string()),
            _ => Failure::Compute(e.to_string()),
        }
    }
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.write(name, &text)
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig, started_at: String) -> Result<(), Failure> {
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            master_seed: cfg.master_seed,
            started_at,
            finished_at: timestamp_now(),
            nmse_norm: "euclidean norm of the stacked trajectory x_0..x_K".to_string(),
            files: self.files.clone(),
        };
        self.write_json("manifest.json", &manifest)
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_car(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::Compute(format!("cannot start thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Serialize)]
struct PlanSummary<'a> {
    #[serde(flatten)]
    report: &'a PlannerReport,
    nominal_cost: Option<f64>,
    noise_scale: f64,
}

#[derive(Serialize)]
struct RateReport<'a> {
    delta: f64,
    horizon_index: usize,
    fit: Option<RateFit>,
    fit_error: Option<String>,
    estimates: &'a [ExitEstimate],
}

fn nonconverged(exp: &Experiment) -> Option<Failure> {
    (!exp.report.converged).then(|| {
        Failure::Compute(format!(
            "planner did not converge after {} iterations (gradient norm {:.3e})",
            exp.report.iterations, exp.report.gradient_norm
        ))
    })
}

fn cmd_plan(common: &Common, out: &Path) -> Result<(), Failure> {
    let started = timestamp_now();
    let cfg = load_config(common)?;
    let exp = with_threads(common.threads, || Experiment::prepare(&cfg))??;
    let mut files = Artifacts::new(out)?;
    files.write("trajectory.csv", &trajectory_csv(&exp.model, &exp.policy.nominal))?;
    files.write("gains.csv", &gains_csv(&exp.policy))?;
    files.write_json(
        "report.json",
        &PlanSummary {
            report: &exp.report,
            nominal_cost: exp.policy.nominal.nominal_cost,
            noise_scale: noise_scale(&exp.policy.nominal.controls)?,
        },
    )?;
    files.finish("plan", &cfg, started)?;
    println!(
        "plan: {} iterations, cost {:.6}, terminal position error {:.3e} m, heading error {:.3e} rad",
        exp.report.iterations,
        exp.report.final_cost,
        exp.report.terminal_position_error,
        exp.report.terminal_heading_error
    );
    nonconverged(&exp).map_or(Ok(()), Err)
}

fn cmd_sweep(common: &Common, out: &Path, mode: ModeArg, full_grid: bool) -> Result<(), Failure> {
    let started = timestamp_now();
    let cfg = load_config(common)?;
    let (exp, result) = with_threads(common.threads, || -> Result<_, Error> {
        let exp = Experiment::prepare(&cfg)?;
        let result = exp.sweep(mode.into(), full_grid)?;
        Ok((exp, result))
    })??;
    let mut files = Artifacts::new(out)?;
    files.write("sweep.csv", &sweep_csv(&result))?;
    files.finish("sweep", &cfg, started)?;
    println!("sweep: {} noise levels x {} runs", result.rows.len(), cfg.sweep.n_runs);
    nonconverged(&exp).map_or(Ok(()), Err)
}

fn cmd_verify(common: &Common, out: Option<&Path>, suite: &str) -> Result<(), Failure> {
    let started = timestamp_now();
    let suite: Suite = suite.parse()?;
    let cfg = load_config(common)?;
    let report = with_threads(common.threads, || -> Result<_, Error> {
        let exp = Experiment::prepare(&cfg)?;
        run_suite(suite, &exp)
    })??;
    for check in &report.checks {
        eprintln!("{check}");
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if let Some(dir) = out {
        let mut files = Artifacts::new(dir)?;
        files.write_json("verify.json", &report)?;
        files.finish("verify", &cfg, started)?;
    }
    if report.passed {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(Failure::Compute(format!("{failed} verification check(s) failed")))
    }
}

fn cmd_ldp(common: &Common, out: &Path) -> Result<(), Failure> {
    let started = timestamp_now();
    let cfg = load_config(common)?;
    let run = with_threads(common.threads, || -> Result<_, Error> { Experiment::prepare(&cfg)?.ldp() })??;
    let mut files = Artifacts::new(out)?;
    files.write("exit.csv", &exit_csv(&run.estimates))?;
    let (fit, fit_error) = match &run.fit {
        Ok(f) => (Some(*f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    files.write_json(
        "rate_fit.json",
        &RateReport {
            delta: cfg.ldp.delta,
            horizon_index: cfg.ldp_horizon_index(),
            fit,
            fit_error,
            estimates: &run.estimates,
        },
    )?;
    files.finish("ldp", &cfg, started)?;
    match run.fit {
        Ok(f) => {
            println!("ldp: slope {:.6e}, intercept {:.6}, r^2 {:.4}", f.slope, f.intercept, f.r_squared);
            Ok(())
        }
        Err(e) => Err(Failure::Compute(e.to_string())),
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Plan { common, out } => cmd_plan(common, out),
        Command::Sweep {
            common,
            out,
            mode,
            full_grid,
        } => cmd_sweep(common, out, *mode, *full_grid),
        Command::Verify { common, out, suite } => cmd_verify(common, out.as_deref(), suite),
        Command::Ldp { common, out } => cmd_ldp(common, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}
