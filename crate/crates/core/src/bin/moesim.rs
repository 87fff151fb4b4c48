use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moesim::runner::{self, Ablation, OutputFormat};
use moesim::Error;

#[derive(Parser)]
#[command(name = "moesim", version, about = "MoE self-speculative decoding and HB memory cost sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario in a config file.
    Run {
        config: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(short, long, default_value = "csv", value_parser = parse_format)]
        format: OutputFormat,
        /// Evaluate scenarios one at a time.
        #[arg(long)]
        sequential: bool,
    },
    /// Run a bundled ablation: hotness_vs_random, bit_axis, or cache_capacity.
    Ablate {
        #[arg(value_parser = parse_ablation)]
        suite: Ablation,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(short, long, default_value = "csv", value_parser = parse_format)]
        format: OutputFormat,
    },
    /// Parse and validate a config file without running it.
    Validate { config: PathBuf },
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn write_rows(rows: &[runner::ResultRow], format: OutputFormat, output: Option<PathBuf>) -> moesim::Result<()> {
    match output {
        Some(path) => runner::emit(rows, format, path),
        None => {
            print!("{}", runner::render(rows, format)?);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> moesim::Result<()> {
    match cli.command {
        Command::Run {
            config,
            output,
            format,
            sequential,
        } => {
            let scenarios = runner::load_config(&config).map_err(as_config_error)?;
            let rows = runner::run_scenarios(&scenarios, !sequential)?;
            write_rows(&rows, format, output)
        }
        Command::Ablate { suite, output, format } => {
            let rows = runner::ablation_suite(suite)?;
            write_rows(&rows, format, output)
        }
        Command::Validate { config } => {
            let scenarios = runner::load_config(&config).map_err(as_config_error)?;
            for s in &scenarios {
                println!("{}: ok", s.id);
            }
            Ok(())
        }
    }
}

/// An unreadable config file is a config error, not a runtime one.
fn as_config_error(e: Error) -> Error {
    match e {
        Error::Io(io) => Error::ConfigValidation {
            key: "<file>".into(),
            message: io.to_string(),
        },
        other => other,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
