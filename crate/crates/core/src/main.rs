use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedbayes::config::{parse_config_with, Overrides};
use fedbayes::output::run_one;

#[derive(Parser)]
#[command(name = "fedbayes", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a config file and write CSV/JSON artifacts.
    Run {
        /// Path to the experiment config file.
        config: PathBuf,
        /// Directory for result files, overriding the config.
        #[arg(long)]
        output_dir: Option<String>,
        /// Master seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse a config file and report problems without running anything.
    Validate {
        /// Path to the experiment config file.
        config: PathBuf,
    },
    /// Print the version and exit.
    Version,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> fedbayes::Result<()> {
    match cli.command {
        Command::Run { config, output_dir, seed } => {
            let overrides = Overrides { master_seed: seed, output_dir };
            let file = parse_config_with(&config, &overrides)?;
            if file.experiments.is_empty() {
                eprintln!("warning: no experiments defined in {}", config.display());
                return Ok(());
            }
            for experiment in &file.experiments {
                let artifacts = run_one(experiment)?;
                let final_acc = artifacts.final_record.clean_accuracy;
                println!(
                    "{} [{}]: {} rounds, final clean accuracy {:.4}, results in {}",
                    artifacts.name,
                    artifacts.strategy,
                    experiment.rounds,
                    final_acc,
                    artifacts.csv_path.display(),
                );
            }
            Ok(())
        }
        Command::Validate { config } => {
            let file = parse_config_with(&config, &Overrides::default())?;
            if file.experiments.is_empty() {
                eprintln!("warning: no experiments defined in {}", config.display());
            } else {
                for experiment in &file.experiments {
                    println!(
                        "{}: strategy {}, {} clients, {} rounds",
                        experiment.name,
                        experiment.strategy,
                        experiment.client_count,
                        experiment.rounds,
                    );
                }
            }
            println!("{} OK", config.display());
            Ok(())
        }
        Command::Version => {
            println!("fedbayes {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}
