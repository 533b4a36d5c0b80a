//! Command line driver: `heatbound <study> [--config cfg.json] [...]`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use heatbound::harness::{run_study, StudyConfig, StudyKind};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StudyArg {
    /// One solve at the configured resolution with a full report
    Solve,
    /// Refinement sweep with EOC bookkeeping
    Convergence,
    /// Refinement sweep asserting the guaranteed upper bound
    UpperBound,
    /// Refinement sweep asserting the effectivity budget
    Effectivity,
    /// Single-mode efficiency counterexample sweep over lambda
    AppendixOde,
    /// Randomized semi-discrete identity suite
    Hypercircle,
    /// Residual identity check with seeded test fields
    ResidualIdentity,
}

impl From<StudyArg> for StudyKind {
    fn from(value: StudyArg) -> StudyKind {
        match value {
            StudyArg::Solve => StudyKind::Solve,
            StudyArg::Convergence => StudyKind::Convergence,
            StudyArg::UpperBound => StudyKind::UpperBound,
            StudyArg::Effectivity => StudyKind::Effectivity,
            StudyArg::AppendixOde => StudyKind::AppendixOde,
            StudyArg::Hypercircle => StudyKind::Hypercircle,
            StudyArg::ResidualIdentity => StudyKind::ResidualIdentity,
        }
    }
}

const CONFIG_HELP: &str = r#"CONFIG FILE (single JSON document; every field optional):
  {
    "study": "upper-bound",                    // overridden by the positional argument
    "mesh": { "family": "interval" | "unit_square",
              "resolution": 4,                 // cells per side at level 0 (default 4)
              "refinements": 0 },              // extra uniform refinement levels
    "time": { "T": 1.0,                        // final time (alias: t_final)
              "steps": 4,                      // used by rule "uniform"
              "rule": "uniform" | "tau_eq_h" | "tau_eq_h_sq",
              "grading": 1.0 },                // geometric step ratio (1 = uniform)
    "problem": "sin1d_decay" | {"lambda": 1.0},// catalog entry or single-mode surrogate
    "flux_degree": 2,                          // RTN degree, at least 2
    "solver": { "tol": 1e-14, "max_iters": null },
    "output": { "csv": "path", "json": "path" },
    "threads": 0,                              // 0 = library default
    "lambdas": [0.001, ..., 1000.0],           // appendix-ode sweep values
    "hypercircle": { "instances": 200, "seed": 20240801, "max_steps": 16, "tol": 1e-11 },
    "residual":    { "fields": 20, "seed": 20240801, "tol": 1e-8 },
    "effectivity": { "budget": [1.0, 10.0], "growth_factor": 1.5 }
  }

Catalog problems: sin1d_decay, sin2d_decay, poly1d, zero.
Exit status is nonzero iff a study assertion fails."#;

#[derive(Debug, Parser)]
#[command(
    name = "heatbound",
    about = "Heat-equation FEM studies with equilibrated-flux error bounds",
    after_help = CONFIG_HELP
)]
struct Cli {
    /// Which study to run
    #[arg(value_enum)]
    study: StudyArg,

    /// JSON configuration file (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Worker threads (overrides the config; needs the `parallel` feature)
    #[arg(long)]
    threads: Option<usize>,

    /// CSV output path (overrides the config)
    #[arg(long)]
    csv: Option<PathBuf>,

    /// JSON report path (overrides the config)
    #[arg(long)]
    json: Option<PathBuf>,

    /// Include per-interval flux coefficient rows in the JSON report
    #[arg(long)]
    dump_flux: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(passed) => {
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> heatbound::Result<bool> {
    let mut config = match &cli.config {
        Some(path) => StudyConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => StudyConfig::default(),
    };
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    if let Some(csv) = &cli.csv {
        config.output.csv = Some(csv.display().to_string());
    }
    if let Some(json) = &cli.json {
        config.output.json = Some(json.display().to_string());
    }
    let study: StudyKind = cli.study.into();

    let outcome = run_study(study, &config, cli.dump_flux)?;
    if let (Some(path), Some(csv)) = (&config.output.csv, &outcome.csv) {
        std::fs::write(path, csv)?;
    }
    if let (Some(path), Some(json)) = (&config.output.json, &outcome.json) {
        std::fs::write(path, json)?;
    }
    print!("{}", outcome.summary);
    println!(
        "study {}: {}",
        study.name(),
        if outcome.passed { "PASS" } else { "FAIL" }
    );
    Ok(outcome.passed)
}
