//! `mtlab` — train, sweep, repeat and analyze multi-task experiments
//! described by TOML configs.
//!
//! Results go under the directory named by `MTLAB_OUT` (default
//! `./mtlab-out`). Failures exit nonzero and print one JSON object to
//! stderr: `{"error": {"kind": "...", "message": "..."}}`.

use clap::{Parser, Subcommand};
use mtlab_core::config::RunConfig;
use mtlab_core::runner::{
    self, analyze_checkpoint, analyze_json, repeat, repeat_json, sweep, sweep_csv, sweep_json,
    sweep_svg, write_artifacts, AnalyzeReport, ExperimentReport, GridSpec, RepeatReport,
    SweepReport,
};
use mtlab_core::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mtlab",
    about = "Desk-scale multi-task optimization laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method plus single-task baselines and write
    /// metrics, report, checkpoint and charts.
    Run {
        /// Experiment TOML file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the config once per grid value (times the grid's seeds) and
    /// aggregate the improvement metrics.
    Sweep {
        /// Experiment TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Grid TOML file (parameter, optional values, optional seeds).
        #[arg(long)]
        grid: PathBuf,
    },
    /// Run the config under N consecutive seeds and report mean and
    /// population std of the improvement metrics.
    Repeat {
        /// Experiment TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds (seed, seed+1, ...).
        #[arg(long)]
        seeds: usize,
    },
    /// Fit spectral exponents to a saved checkpoint and print the audit
    /// as JSON.
    Analyze {
        /// Checkpoint file (.mtck).
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Prints without panicking when stdout is a closed pipe (`mtlab ... | head`).
fn say(line: impl std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_run(config_path: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let report: ExperimentReport<f64> = runner::run(&config)?;
    let paths = write_artifacts(&report, &runner::output_root())?;
    say(format!(
        "method {}: delta_p_task {:+.4}%, delta_p_metric {:+.4}%",
        report.method_name, report.delta_p_task, report.delta_p_metric
    ));
    if let Some(spread) = report.audit.head_spread {
        say(format!("head alpha spread {spread:.4}"));
    }
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    say(format!("wrote {}", paths.metrics.display()));
    say(format!("wrote {}", paths.diagnostics.display()));
    say(format!("wrote {}", paths.report.display()));
    say(format!("wrote {}", paths.config.display()));
    say(format!("wrote {}", paths.checkpoint.display()));
    if let Some(curves) = &paths.curves {
        say(format!("wrote {}", curves.display()));
    }
    Ok(())
}

fn cmd_sweep(config_path: &Path, grid_path: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let grid = GridSpec::load(grid_path)?;
    let report: SweepReport<f64> = sweep(&config, &grid)?;
    let dir = runner::output_root().join(&config.output.dir);
    ensure_dir(&dir)?;
    let csv = dir.join(format!("sweep-{}.csv", report.parameter));
    write_text(&csv, &sweep_csv(&report))?;
    let json = dir.join(format!("sweep-{}.json", report.parameter));
    write_text(&json, &sweep_json(&report))?;
    for point in &report.points {
        say(format!(
            "{} = {}: delta_p_task {:+.4}% ± {:.4}",
            report.parameter, point.value, point.mean_task, point.std_task
        ));
    }
    say(format!("wrote {}", csv.display()));
    say(format!("wrote {}", json.display()));
    if config.output.svg {
        let svg = dir.join(format!("sweep-{}.svg", report.parameter));
        write_text(&svg, &sweep_svg(&report))?;
        say(format!("wrote {}", svg.display()));
    }
    Ok(())
}

fn cmd_repeat(config_path: &Path, seeds: usize) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let report: RepeatReport<f64> = repeat(&config, seeds)?;
    let dir = runner::output_root().join(&config.output.dir);
    ensure_dir(&dir)?;
    let json = dir.join("repeat.json");
    write_text(&json, &repeat_json(&report))?;
    for outcome in &report.outcomes {
        say(format!(
            "seed {}: delta_p_task {:+.4}%, delta_p_metric {:+.4}%",
            outcome.seed, outcome.delta_p_task, outcome.delta_p_metric
        ));
    }
    say(format!(
        "delta_p_task mean {:+.4}% ± {:.4}; delta_p_metric mean {:+.4}% ± {:.4}",
        report.mean_task, report.std_task, report.mean_metric, report.std_metric
    ));
    say(format!("wrote {}", json.display()));
    Ok(())
}

fn cmd_analyze(checkpoint: &Path) -> Result<()> {
    let report: AnalyzeReport<f64> = analyze_checkpoint(checkpoint)?;
    say(analyze_json(&report));
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => cmd_run(config),
        Command::Sweep { config, grid } => cmd_sweep(config, grid),
        Command::Repeat { config, seeds } => cmd_repeat(config, *seeds),
        Command::Analyze { checkpoint } => cmd_analyze(checkpoint),
    };
    if let Err(error) = result {
        let payload = serde_json::json!({
            "error": {
                "kind": error.kind(),
                "message": error.to_string(),
            }
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
