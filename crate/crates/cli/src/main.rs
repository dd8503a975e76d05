//! `ipss-lab`: runs JSON experiment configs against the ipss-core toolkit.
//!
//! Exit status: 0 when every check passes, 2 when a violation is found, 1 on
//! any error (including schema errors).

mod config;
mod ops;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::ops::{RunContext, Status};
use crate::output::ArtifactSet;

#[derive(Parser)]
#[command(name = "ipss-lab", version, about = "Stability experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config against the schema without running it.
    Validate { config: PathBuf },
    /// List the built-in systems.
    ListSystems,
}

#[derive(Serialize)]
struct RunReport<'a> {
    name: &'a str,
    operation: String,
    seed: u64,
    status: Status,
    summary: &'a str,
    artifacts: &'a [String],
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("IPSS_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("IPSS_LAB_THREADS must be a positive integer (got {raw:?})"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot configure the thread pool")?;
    Ok(())
}

fn run(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<Status> {
    let loaded = config::load(config)?;
    let cfg = &loaded.config;
    let seed = seed.unwrap_or(cfg.seed);
    let dir = out
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("ipss-lab-out").join(&cfg.name));
    let mut artifacts = ArtifactSet::create(&dir)?;
    let ctx = RunContext {
        config: cfg,
        base_dir: &loaded.base_dir,
        seed,
    };
    let outcome = ops::run(&ctx, &mut artifacts)?;
    let mut files = artifacts.files().to_vec();
    files.push("report.json".into());
    artifacts.json(
        "report.json",
        &RunReport {
            name: &cfg.name,
            operation: cfg.operation.to_string(),
            seed,
            status: outcome.status,
            summary: &outcome.summary,
            artifacts: &files,
        },
    )?;
    let label = match outcome.status {
        Status::Pass => "pass",
        Status::Violation => "violation",
    };
    println!("{}: {label}: {}", cfg.name, outcome.summary);
    println!("artifacts in {}", artifacts.dir().display());
    Ok(outcome.status)
}

fn validate(config: &Path) -> Result<()> {
    let loaded = config::load(config)?;
    let cfg = &loaded.config;
    ops::preflight(cfg, &loaded.base_dir).context("config is well formed but cannot be set up")?;
    println!("{}: valid {} experiment (seed {})", cfg.name, cfg.operation, cfg.seed);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Run { config, out, seed } => run(&config, out, seed),
        Command::Validate { config } => validate(&config).map(|()| Status::Pass),
        Command::ListSystems => {
            for (name, description) in ipss_core::simulator::list_systems() {
                println!("{name:<16} {description}");
            }
            Ok(Status::Pass)
        }
    });
    match result {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Violation) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
