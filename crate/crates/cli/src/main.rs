use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fcvi_cli::config::{parse_modes, parse_seeds, Overrides, ScenarioFile};
use fcvi_cli::{report, run, CliError};
use fcvi_core::Execution;

#[derive(Parser)]
#[command(name = "fcvi", version, about = "Federated semi-supervised learning under class-count churn")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every mode and seed of a scenario.
    Run {
        config: PathBuf,
        /// Comma-separated modes, overriding the file.
        #[arg(long)]
        modes: Option<String>,
        /// Seeds such as `0..10` or `1,4,9`, overriding the file.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Run the monitor every round from round 2 (diagnostics).
        #[arg(long)]
        monitor_every_round: bool,
        /// Run clients and seeds on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Print the metrics table of a finished run directory.
    Report { dir: PathBuf },
    /// Check a scenario file and print its resolved form.
    Validate { config: PathBuf },
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            config,
            modes,
            seeds,
            out,
            monitor_every_round,
            sequential,
        } => {
            let overrides = Overrides {
                modes: modes.as_deref().map(parse_modes).transpose()?,
                seeds: seeds.as_deref().map(parse_seeds).transpose()?,
                monitor_every_round,
            };
            let resolved = ScenarioFile::load(&config)?.apply(&overrides).resolve()?;
            let execution = if sequential { Execution::Sequential } else { Execution::Parallel };
            let started = std::time::Instant::now();
            let rows = run::run(&resolved, &out, execution)?;
            log::info!("{} curve rows in {:.1?}", rows.len(), started.elapsed());
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Report { dir } => {
            print!("{}", report::load(&dir)?.render());
            Ok(())
        }
        Command::Validate { config } => {
            let resolved = ScenarioFile::load(&config)?.resolve()?;
            print!("{}", resolved.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
