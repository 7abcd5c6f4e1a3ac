//! Command-line experiment runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use config::{validate, Diagnostics, Experiment, ExperimentConfig};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "sqrtlab", version, about = "Monte Carlo experiments for square-root diffusions on the orthant")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Experiment document (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the document's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; also read from SQRTLAB_WORKERS.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; also read from SQRTLAB_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated output formats. JSON is always written.
    #[arg(long, value_delimiter = ',', default_value = "json")]
    pub format: Vec<String>,
    /// Estimate the uniform lower bound over a start grid (hitprob only).
    #[arg(long)]
    pub uniform: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a document without simulating; prints diagnostics as JSON.
    Validate(RunArgs),
    /// Run whatever experiment the document describes.
    Run(RunArgs),
    Simulate(RunArgs),
    Hitprob(RunArgs),
    Smallcube(RunArgs),
    Czd(RunArgs),
    Holder(RunArgs),
    Martingale(RunArgs),
    Invariant(RunArgs),
    RescaleCheck(RunArgs),
}

impl Command {
    fn split(&self) -> (Option<&'static str>, &RunArgs) {
        match self {
            Command::Validate(a) | Command::Run(a) => (None, a),
            Command::Simulate(a) => (Some("simulate"), a),
            Command::Hitprob(a) => (Some("hitprob"), a),
            Command::Smallcube(a) => (Some("smallcube"), a),
            Command::Czd(a) => (Some("czd"), a),
            Command::Holder(a) => (Some("holder"), a),
            Command::Martingale(a) => (Some("martingale"), a),
            Command::Invariant(a) => (Some("invariant"), a),
            Command::RescaleCheck(a) => (Some("rescale-check"), a),
        }
    }
}

pub fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn env_value(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

/// The document after flag and environment overrides (flag, then
/// environment, then file), plus the worker count and output directory.
pub fn effective(args: &RunArgs, mut cfg: ExperimentConfig) -> anyhow::Result<(ExperimentConfig, usize, PathBuf)> {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let workers = match (args.workers, env_value("SQRTLAB_WORKERS")) {
        (Some(w), _) => w,
        (None, Some(v)) => v.parse().with_context(|| format!("SQRTLAB_WORKERS={v} is not a worker count"))?,
        (None, None) => cfg.workers.unwrap_or(1),
    };
    cfg.workers = Some(workers);
    let out = match (&args.out, env_value("SQRTLAB_OUT")) {
        (Some(o), _) => o.clone(),
        (None, Some(v)) => PathBuf::from(v),
        (None, None) => PathBuf::from(cfg.output.clone().unwrap_or_else(|| ".".into())),
    };
    cfg.output = Some(out.display().to_string());
    if args.uniform {
        match &mut cfg.experiment {
            Experiment::Hitprob(e) => e.uniform = true,
            other => bail!("--uniform only applies to hitprob, not {}", other.name()),
        }
    }
    Ok((cfg, workers, out))
}

fn print_diagnostics(d: &Diagnostics) {
    for w in &d.warnings {
        eprintln!("warning: {w}");
    }
    for e in &d.errors {
        eprintln!("error: {e}");
    }
}

/// Runs the parsed command line and returns the process exit code.
pub fn dispatch(cli: &Cli) -> i32 {
    match try_dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

fn try_dispatch(cli: &Cli) -> anyhow::Result<i32> {
    let (expected, args) = cli.command.split();
    let (cfg, workers, out) = effective(args, load_config(&args.config)?)?;
    let name = cfg.experiment.name();
    if let Some(want) = expected {
        if want != name {
            bail!("the document describes `{name}`, not `{want}`");
        }
    }
    let diag = validate(&cfg, workers);
    if let Command::Validate(_) = cli.command {
        println!("{}", serde_json::to_string_pretty(&diag)?);
        return Ok(if diag.is_ok() { EXIT_PASS } else { EXIT_USAGE });
    }
    print_diagnostics(&diag);
    if !diag.is_ok() {
        return Ok(EXIT_USAGE);
    }
    let formats = commands::parse_formats(&args.format)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = commands::execute(&cfg, workers, &out, formats.contains(&commands::Format::Csv))?;
    let value = serde_json::to_value(&cfg)?;
    let path = commands::emit(name, &value, cfg.seed, &outcome, &out, &formats)?;
    println!("{name}: {} ({})", if outcome.pass { "PASS" } else { "FAIL" }, path.display());
    Ok(if outcome.pass { EXIT_PASS } else { EXIT_FAIL })
}
