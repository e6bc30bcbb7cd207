mod commands;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qhedge_core::config::MethodName;

use crate::output::Setup;

#[derive(Parser)]
#[command(name = "qhedge", version, about = "Quantile hedging: Monte Carlo, dual PDE and supersolution checks")]
struct Cli {
    /// TOML run configuration with [model], [payoff], [grid] and [run] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `run.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["mc", "pde", "pipeline"])]
    method: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantile-hedging price curve V(0, x0, p).
    Price,
    /// Dual curve w(0, x0, q), plus per-epsilon gaps when `run.epsilons` is set.
    Dual,
    /// Dual and primal surfaces from the finite-difference solver.
    Solve,
    /// Supersolution check of a primal surface file.
    Verify {
        surface: PathBuf,
        /// Also require the surface to dominate this reference surface.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Sup-norm regularization gaps against the unregularized baseline.
    StudyEpsilon,
    /// Compares the configured method with the closed-form references.
    CompareOracle,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::config(format!("{}: {e}", path.display()))
    }
}

impl From<qhedge_core::Error> for CliError {
    fn from(e: qhedge_core::Error) -> Self {
        Self { code: if e.is_config_error() { 2 } else { 3 }, message: e.to_string() }
    }
}

/// Whether the checks of a command passed; failures exit with 1.
pub enum Outcome {
    Pass,
    Fail,
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    let path = cli.config.ok_or_else(|| CliError::config("--config is required"))?;
    let mut setup = Setup::load(&path)?;
    if let Some(seed) = cli.seed {
        setup.config.run.seed = seed;
    }
    if let Some(m) = &cli.method {
        setup.config.run.method = m.parse::<MethodName>()?;
    }
    if let Some(out) = cli.out {
        setup.config.run.out_dir = out.clone();
        setup.out = out;
    }
    setup.prepare_out()?;
    match cli.command {
        Command::Price => commands::price(&setup),
        Command::Dual => commands::dual(&setup),
        Command::Solve => commands::solve(&setup),
        Command::Verify { surface, reference } => commands::verify(&setup, &surface, reference.as_deref()),
        Command::StudyEpsilon => commands::study_epsilon(&setup),
        Command::CompareOracle => commands::compare_oracle(&setup),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
