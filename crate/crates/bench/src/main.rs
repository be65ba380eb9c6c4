use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covbench::selftest::{invariant_checks, oracle_checks, Check};
use covbench::{emit_plots, emit_report, read_records, run_matrix, BenchConfig, BenchError, RunOptions};
use covbench_core::tasks::TaskName;

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_DIAGNOSTIC: u8 = 3;

#[derive(Parser)]
#[command(name = "covbench", version, about = "Expected-coverage benchmark for simulation-based inference under misspecification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the configured matrix.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Render SVG panel grids from a finished run.
    Plot {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the deviation table and the digest.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-tests of a task's reference oracle.
    Oracle { task: String },
    /// Fast invariant suite.
    Selftest,
}

fn fail(e: &BenchError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        BenchError::Config(_) | BenchError::Toml(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_PARTIAL),
    }
}

fn report_checks(checks: &[Check]) -> ExitCode {
    for c in checks {
        println!("{c}");
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_DIAGNOSTIC)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            resume,
            quiet,
        } => {
            let cfg = match BenchConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let Some(out) = out.or_else(|| cfg.output_dir.clone()) else {
                eprintln!("error: no output directory (pass --out or set output_dir)");
                return ExitCode::from(EXIT_CONFIG);
            };
            let opts = RunOptions {
                resume,
                stop_after: None,
                verbose: !quiet,
            };
            match run_matrix(&cfg, &out, &opts) {
                Ok(summary) => {
                    println!(
                        "{} cells run, {} skipped, {} curves written, {} failed",
                        summary.cells_run,
                        summary.cells_skipped,
                        summary.records.len() - summary.failures(),
                        summary.failures()
                    );
                    if summary.failures() > 0 {
                        ExitCode::from(EXIT_PARTIAL)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => fail(&e),
            }
        }
        Command::Plot { out } => {
            let records = match read_records(&out) {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            match emit_plots(&records, &out) {
                Ok(o) => {
                    for f in &o.files {
                        println!("{}", f.display());
                    }
                    if o.incomplete {
                        eprintln!("some panels are missing curves");
                        ExitCode::from(EXIT_PARTIAL)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => fail(&e),
            }
        }
        Command::Report { out } => {
            let records = match read_records(&out) {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            match emit_report(&records, &out) {
                Ok(o) => {
                    println!("{} ({} rows)", o.summary.display(), o.rows);
                    println!("{}", o.digest.display());
                    if o.flagged > 0 {
                        ExitCode::from(EXIT_PARTIAL)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => fail(&e),
            }
        }
        Command::Oracle { task } => match task.parse::<TaskName>() {
            Ok(t) => report_checks(&oracle_checks(t)),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Selftest => report_checks(&invariant_checks()),
    }
}
