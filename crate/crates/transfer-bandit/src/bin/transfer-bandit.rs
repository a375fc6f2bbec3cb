//! Experiment harness CLI: `run`, `sweep`, `diag`, `selftest`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transfer_bandit::harness;
use transfer_bandit::Error;

/// Seed override honored above both config files and `--seed`.
const SEED_ENV: &str = "TRANSFER_BANDIT_SEED";

#[derive(Parser)]
#[command(
    name = "transfer-bandit",
    version,
    about = "Linear contextual bandit simulator with offline-data pooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of runs per (scenario, policy).
    #[arg(long)]
    runs: Option<usize>,
    /// Override the horizon T.
    #[arg(long)]
    horizon: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the SVG regret plot.
    #[arg(long)]
    no_svg: bool,
    /// Maximum concurrent runs.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the base scenario of a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the full scenario sweep of a config file.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Recompute and verify diagnostics over a directory of trace CSVs.
    Diag { trace_dir: PathBuf },
    /// Reduced-scale property and trajectory verification (d <= 6, T <= 500).
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config { .. } | Error::Input(_) | Error::Io { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, flags } => execute(&config, flags, false),
        Command::Sweep { config, flags } => execute(&config, flags, true),
        Command::Diag { trace_dir } => {
            let report = harness::diag_dir(&trace_dir)?;
            print!("{report}");
            Ok(())
        }
        Command::Selftest => {
            let started = std::time::Instant::now();
            harness::selftest(std::io::stdout())?;
            println!("selftest: all suites passed in {:.1?}", started.elapsed());
            Ok(())
        }
    }
}

fn execute(config_path: &PathBuf, flags: RunFlags, sweep: bool) -> Result<(), Error> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Error::io(config_path.display().to_string(), e))?;
    let mut cfg = harness::load_experiment(&text, sweep)?;
    if let Some(seed) = flags.seed {
        cfg.base_seed = seed;
    }
    if let Some(runs) = flags.runs {
        cfg.n_runs = runs.max(1);
    }
    if let Some(t) = flags.horizon {
        if t == 0 {
            return Err(Error::config("run.t", "horizon must be >= 1"));
        }
        cfg.t_horizon = t;
    }
    if let Some(out) = flags.out {
        cfg.out_dir = out;
    }
    if let Some(threads) = flags.threads {
        cfg.threads = threads.max(1);
    }
    cfg.svg = !flags.no_svg;
    if let Ok(value) = std::env::var(SEED_ENV) {
        cfg.base_seed = value
            .parse()
            .map_err(|e| Error::config(SEED_ENV, format!("not a seed: {e}")))?;
    }
    let result = harness::run_experiment(&cfg)?;
    let cells = cfg.scenarios.len() * cfg.policies.len() * cfg.n_runs;
    println!(
        "completed {} runs across {} scenarios x {} policies -> {}",
        cells,
        cfg.scenarios.len(),
        cfg.policies.len(),
        cfg.out_dir.display()
    );
    if result.failures > 0 {
        return Err(Error::InvariantViolation(format!(
            "{} run(s) failed mid-simulation; see diagnostics.json",
            result.failures
        )));
    }
    Ok(())
}
