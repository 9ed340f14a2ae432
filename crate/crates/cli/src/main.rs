//! `equichk` command line: run experiment configurations, list the catalog.
//!
//! Exit codes: 0 every check passed, 1 a check failed, 2 configuration
//! error, 3 runtime fault.

mod catalog;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime};

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime fault: {0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "equichk", version, about = "Check equivariance-induced gradient and Hessian identities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON configuration.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the configuration.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// List models, transformations, losses and checks.
    Catalog {
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
        /// Only entries related to this transformation.
        #[arg(long)]
        transform: Option<String>,
    },
    /// Print the tool version.
    Version,
}

/// Caps rayon's worker count from `EQUICHK_THREADS`.
fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("EQUICHK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("EQUICHK_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(config: PathBuf, output_dir: Option<PathBuf>) -> Result<bool, CliError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let loaded = config::load(&config)?;
    let output = run::execute(&loaded)?;
    let dir = output_dir.unwrap_or_else(|| loaded.config.output_dir.clone());
    let failed: Vec<String> = output
        .reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| {
            format!(
                "FAIL {} [{}] rel {:e} > {:e}",
                r.check_name,
                r.context.transform.as_deref().unwrap_or(&r.context.model),
                r.rel_residual,
                r.tolerance
            )
        })
        .collect();
    let total = output.reports.len();
    let ok = run::write_outputs(&dir, &loaded, output, started, clock)?;
    for line in &failed {
        eprintln!("{line}");
    }
    println!(
        "{} checks, {} passed, {} failed; reports in {}",
        total,
        total - failed.len(),
        failed.len(),
        dir.display()
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("{e}");
        return ExitCode::from(e.code());
    }
    match cli.command {
        Command::Version => {
            println!("equichk {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
        Command::Catalog { json, transform } => {
            let cat = match transform.as_deref() {
                Some(name) => match catalog::filtered(name) {
                    Some(c) => c,
                    None => {
                        eprintln!("configuration error: unknown transformation {name}");
                        return ExitCode::from(2);
                    }
                },
                None => catalog::catalog(),
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&cat).expect("catalog serializes"));
            } else {
                print!("{}", catalog::render_text(&cat));
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, output_dir } => match run(config, output_dir) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(e.code())
            }
        },
    }
}
