//! The `conscientia` command line: `run`, `replay-check` and `validate`.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid scenario or
//! bad usage.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::kernel::VirtualTime;
use crate::metrics::{summarize, write_outputs, MetricsError, MetricsReport};
use crate::scenario::{parse_scenario, validate_scenario, Scenario, ScenarioError};
use crate::sim::{SimError, Simulation};

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_INVALID: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "conscientia",
    version,
    about = "Deterministic peer-group simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its trace and metrics.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop at this virtual time (ms) instead of the scenario's end.
        #[arg(long)]
        until: Option<u64>,
        /// Trace output; defaults to `<scenario>.trace.jsonl`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Metrics output; defaults to `<scenario>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run a scenario several times and compare the traces byte for byte.
    ReplayCheck {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        until: Option<u64>,
    },
    /// Parse and validate a scenario without running it.
    Validate { scenario: PathBuf },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        source: ScenarioError,
    },
    #[error("{}: invalid scenario:\n  {}", path.display(), violations.join("\n  "))]
    Invalid {
        path: PathBuf,
        violations: Vec<String>,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Metrics(_) => EXIT_RUNTIME,
            CliError::Parse { .. } | CliError::Invalid { .. } | CliError::Usage(_) => EXIT_INVALID,
        }
    }
}

/// First line at which two traces differ (1-based), with both versions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub run: usize,
    pub line: usize,
    pub expected: String,
    pub found: String,
}

pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })?;
    let s = parse_scenario(&text).map_err(|source| CliError::Parse {
        path: path.to_owned(),
        source,
    })?;
    validate_scenario(&s).map_err(|violations| CliError::Invalid {
        path: path.to_owned(),
        violations,
    })?;
    Ok(s)
}

/// Runs a validated scenario to `until` (or its own end).
pub fn simulate(
    s: &Scenario,
    seed: Option<u64>,
    until: Option<u64>,
) -> Result<Simulation, SimError> {
    let mut sim = Simulation::with_seed(s, seed.unwrap_or(s.seed))?;
    sim.run_until(VirtualTime(until.unwrap_or(s.duration_ms)));
    Ok(sim)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn invalid(path: &Path, e: SimError) -> CliError {
    let SimError::Invalid(violations) = e;
    CliError::Invalid {
        path: path.to_owned(),
        violations,
    }
}

pub fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    until: Option<u64>,
    trace_out: Option<PathBuf>,
    metrics_out: Option<PathBuf>,
) -> Result<MetricsReport, CliError> {
    let s = load_scenario(path)?;
    let sim = simulate(&s, seed, until).map_err(|e| invalid(path, e))?;
    let report = summarize(sim.trace())?;
    let trace_path = trace_out.unwrap_or_else(|| sibling(path, ".trace.jsonl"));
    let metrics_path = metrics_out.unwrap_or_else(|| sibling(path, ".metrics.csv"));
    write_outputs(sim.trace(), &report, &trace_path, &metrics_path).map_err(|source| {
        CliError::Io {
            path: trace_path.clone(),
            source,
        }
    })?;
    Ok(report)
}

/// Compares traces produced by `produce(run)` for `runs` runs against the
/// first one.
pub fn replay_traces(
    runs: usize,
    mut produce: impl FnMut(usize) -> Result<String, CliError>,
) -> Result<Option<Divergence>, CliError> {
    if runs < 2 {
        return Err(CliError::Usage(format!(
            "replay-check needs at least 2 runs, got {runs}"
        )));
    }
    let first = produce(0)?;
    for run in 1..runs {
        let other = produce(run)?;
        if other == first {
            continue;
        }
        let mut a = first.lines();
        let mut b = other.lines();
        let mut line = 1;
        loop {
            match (a.next(), b.next()) {
                (Some(x), Some(y)) if x == y => line += 1,
                (x, y) => {
                    return Ok(Some(Divergence {
                        run,
                        line,
                        expected: x.unwrap_or("<end of trace>").to_owned(),
                        found: y.unwrap_or("<end of trace>").to_owned(),
                    }))
                }
            }
        }
    }
    Ok(None)
}

pub fn cmd_replay_check(
    path: &Path,
    seed: Option<u64>,
    runs: usize,
    until: Option<u64>,
) -> Result<Option<Divergence>, CliError> {
    let s = load_scenario(path)?;
    replay_traces(runs, |_| {
        simulate(&s, seed, until)
            .map(|sim| sim.trace().to_text())
            .map_err(|e| invalid(path, e))
    })
}

pub fn cmd_validate(path: &Path) -> Result<Scenario, CliError> {
    load_scenario(path)
}

/// Executes a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            until,
            trace,
            metrics,
            quiet,
        } => cmd_run(&scenario, seed, until, trace, metrics).map(|r| {
            if !quiet {
                print!("{r}");
            }
        }),
        Command::ReplayCheck {
            scenario,
            seed,
            runs,
            until,
        } => cmd_replay_check(&scenario, seed, runs, until).map(|d| match d {
            None => println!("{runs} runs, traces identical"),
            Some(d) => {
                println!("run {} diverges at line {}", d.run, d.line);
                println!("- {}", d.expected);
                println!("+ {}", d.found);
            }
        }),
        Command::Validate { scenario } => {
            cmd_validate(&scenario).map(|s| println!("{}: ok", s.name))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_is_usage_error() {
        let e = replay_traces(1, |_| Ok(String::new())).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_INVALID);
    }

    #[test]
    fn divergence_reports_first_differing_line() {
        let d = replay_traces(3, |run| {
            Ok(if run == 2 { "a\nb\nX\n" } else { "a\nb\nc\n" }.to_owned())
        })
        .unwrap()
        .unwrap();
        assert_eq!((d.run, d.line), (2, 3));
        assert_eq!((d.expected.as_str(), d.found.as_str()), ("c", "X"));
    }

    #[test]
    fn shorter_trace_diverges_at_its_end() {
        let d = replay_traces(2, |run| Ok(if run == 0 { "a\nb" } else { "a" }.to_owned()))
            .unwrap()
            .unwrap();
        assert_eq!(d.line, 2);
        assert_eq!(d.found, "<end of trace>");
    }

    #[test]
    fn sibling_paths() {
        let p = Path::new("/tmp/x/baseline.toml");
        assert_eq!(
            sibling(p, ".trace.jsonl"),
            Path::new("/tmp/x/baseline.trace.jsonl")
        );
    }
}
