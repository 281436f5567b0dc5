//! Scenario runner CLI.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use faas_sim::config::{self, Overrides, ScenarioConfig};
use faas_sim::output::{
    comparison_csv, render_comparison_table, summary_csv, summary_json, write_run_outputs,
    ComparisonRow,
};
use faas_sim::simulation::{RunOutput, SimError, Simulation};
use faas_sim::workload::WorkloadError;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "faas-sim",
    about = "Deterministic discrete-event simulator for serverless clusters",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SummaryFormat {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its outputs.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: scenario setting, then $FAAS_SIM_OUT, then ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Truncate the arrival window at this virtual time.
        #[arg(long = "end-time")]
        end_time: Option<f64>,
        /// Summary format echoed to stdout.
        #[arg(long, value_enum, default_value_t = SummaryFormat::Json)]
        format: SummaryFormat,
        /// Write the ordered dispatch log (events.log) for determinism diffing.
        #[arg(long)]
        log_events: bool,
    },
    /// Run several scenarios and print a side-by-side comparison.
    Compare {
        #[arg(num_args = 2.., required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            out,
            end_time,
            format,
            log_events,
        } => {
            let overrides = Overrides {
                seed,
                end_time_s: end_time,
                output_dir: out,
                log_events: log_events.then_some(true),
            };
            run_one(&scenario, &overrides, format)
        }
        Command::Compare { scenarios, seed, out } => compare(&scenarios, seed, out),
    }
}

fn run_one(scenario: &Path, overrides: &Overrides, format: SummaryFormat) -> ExitCode {
    let cfg = match config::load_scenario(scenario, overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out = match execute(&cfg) {
        Ok(out) => out,
        Err((code, message)) => {
            eprintln!("error: {message}");
            return ExitCode::from(code);
        }
    };
    let dir = resolve_out_dir(&cfg, scenario);
    if let Err(e) = write_run_outputs(&dir, &out) {
        eprintln!("error: cannot write outputs to `{}`: {e}", dir.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    match format {
        SummaryFormat::Json => match summary_json(&out.summary) {
            Ok(text) => print!("{text}"),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_RUNTIME);
            }
        },
        SummaryFormat::Csv => print!("{}", summary_csv(&out.summary)),
    }
    ExitCode::SUCCESS
}

fn compare(scenarios: &[PathBuf], seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let base = out
        .or_else(|| std::env::var_os("FAAS_SIM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut rows = Vec::new();
    let mut failed = false;
    for path in scenarios {
        let name = scenario_name(path);
        let overrides = Overrides {
            seed,
            output_dir: Some(base.join(&name)),
            ..Default::default()
        };
        let result = match config::load_scenario(path, &overrides) {
            Ok(cfg) => match execute(&cfg) {
                Ok(run) => {
                    let dir = resolve_out_dir(&cfg, path);
                    if let Err(e) = write_run_outputs(&dir, &run) {
                        Err(format!("cannot write outputs: {e}"))
                    } else {
                        Ok(run.summary)
                    }
                }
                Err((_, message)) => Err(message),
            },
            Err(e) => Err(e.to_string()),
        };
        failed |= result.is_err();
        rows.push(ComparisonRow {
            scenario: name,
            result,
        });
    }
    print!("{}", render_comparison_table(&rows));
    if let Err(e) = std::fs::create_dir_all(&base)
        .and_then(|_| std::fs::write(base.join("comparison.csv"), comparison_csv(&rows)))
    {
        eprintln!("error: cannot write comparison.csv: {e}");
        return ExitCode::from(EXIT_RUNTIME);
    }
    if failed {
        ExitCode::from(EXIT_RUNTIME)
    } else {
        ExitCode::SUCCESS
    }
}

fn execute(cfg: &ScenarioConfig) -> Result<RunOutput, (u8, String)> {
    let mut sim = Simulation::from_config(cfg).map_err(classify)?;
    sim.run().map_err(classify)
}

/// Input problems exit with the config code; everything else is a runtime error.
fn classify(e: SimError) -> (u8, String) {
    let code = match &e {
        SimError::Workload(WorkloadError::Parse { .. }) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    };
    (code, e.to_string())
}

fn scenario_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Precedence: CLI/scenario setting, then $FAAS_SIM_OUT, then ./out; the
/// scenario name is appended so sibling runs never collide.
fn resolve_out_dir(cfg: &ScenarioConfig, scenario: &Path) -> PathBuf {
    match &cfg.output.directory {
        Some(dir) => dir.clone(),
        None => std::env::var_os("FAAS_SIM_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out"))
            .join(scenario_name(scenario)),
    }
}
