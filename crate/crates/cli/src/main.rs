use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedhet::config::ConfigError;
use fedhet::report::read_metrics;
use fedhet::{emit_report, parse_config, run_experiment, write_outputs, ReportFormat, RunError};
use fedhet_core::synthdata::{generate_cohort, write_cohort};

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_TOTAL: u8 = 3;

#[derive(Parser)]
#[command(name = "fedhet", version, about = "Federated learning under density heterogeneity on synthetic mammograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic cohort and write it as an archive.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full experiment and write metrics, histories and a report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Render tables from a finished run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
}

fn config_failure(e: ConfigError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn failure(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_TOTAL)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Generate { config, out } => {
            let cfg = match parse_config(&config) {
                Ok(c) => c,
                Err(e) => return config_failure(e),
            };
            let seed = fedhet_core::rng::derive_seed(&[cfg.seed, fedhet_core::rng::label_key("cohort")]);
            match generate_cohort(&cfg.generator, seed).and_then(|c| write_cohort(&c, &out).map(|()| c)) {
                Ok(c) => {
                    println!("wrote {} patients ({} images) to {}", c.len(), c.image_count(), out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => failure(e.into()),
            }
        }
        Command::Run { config, out, jobs } => {
            let cfg = match parse_config(&config) {
                Ok(c) => c,
                Err(e) => return config_failure(e),
            };
            let Some(dir) = out.or_else(|| cfg.output_dir.clone()) else {
                return config_failure(ConfigError::Invalid("no output directory: pass --out or set output_dir".into()));
            };
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(n) = jobs {
                pool = pool.num_threads(n.max(1));
            }
            let pool = match pool.build() {
                Ok(p) => p,
                Err(e) => return failure(RunError::Other(e.to_string())),
            };
            let result = match pool.install(|| run_experiment(&cfg)) {
                Ok(r) => r,
                Err(RunError::Config(e)) => return config_failure(e),
                Err(e) => return failure(e),
            };
            if result.rows.is_empty() {
                for f in &result.failures {
                    eprintln!("failed: {} {} fold {} {} {}: {}", f.task, f.model, f.fold, f.subset, f.metric, f.reason);
                }
                return failure(RunError::Other("every cell failed".into()));
            }
            if let Err(e) = write_outputs(&result, &dir) {
                return failure(e);
            }
            println!(
                "{} metric rows, {} failed cells; results in {}",
                result.rows.len(),
                result.failures.len(),
                dir.display()
            );
            if result.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_PARTIAL)
            }
        }
        Command::Report { input, format } => {
            let Some(fmt) = ReportFormat::from_name(&format) else {
                return config_failure(ConfigError::Invalid(format!("unknown report format {format:?}; use md or csv")));
            };
            let rows = match read_metrics(&input.join("metrics.csv")) {
                Ok(r) => r,
                Err(e) => return failure(e),
            };
            match emit_report(&rows, fmt) {
                Ok(text) => {
                    let name = if fmt == ReportFormat::Csv { "report.csv" } else { "report.md" };
                    if let Err(e) = std::fs::write(input.join(name), &text) {
                        return failure(e.into());
                    }
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => failure(e),
            }
        }
    }
}
