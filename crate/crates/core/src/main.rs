use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cds::corpus::{load_corpus, TaskKind};
use cds::curriculum::partition;
use cds::runner::{compare, Experiment, ExperimentConfig, Report, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "cds", version, about = "Curriculum demonstration selection for in-context learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a training corpus into k difficulty partitions.
    Partition {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        kind: TaskKind,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Print the demonstration set for every (seed, test instance) as JSONL.
    Select {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the rendered prompt for one test instance.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        test_id: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run (or resume) an experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Print a report, either from a report.json or re-aggregated from a run's records.
    Report {
        /// A report.json file.
        report: Option<PathBuf>,
        #[arg(long, conflicts_with = "report")]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Compare reports over the same test set against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
    },
}

fn read_report(path: &PathBuf) -> Result<Report, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    Report::from_json(&text)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Partition { train, kind, k } => {
            let corpus = load_corpus(&train, kind)?;
            let set = partition(&corpus, k)?;
            println!("{}", serde_json::to_string_pretty(&set).expect("serializable"));
        }
        Command::Select { config } => {
            let exp = Experiment::prepare(ExperimentConfig::load(config)?)?;
            for record in exp.selections()? {
                println!("{}", json(&record));
            }
        }
        Command::Render { config, test_id, seed } => {
            let exp = Experiment::prepare(ExperimentConfig::load(config)?)?;
            let seed = seed.unwrap_or(exp.config.seeds[0]);
            let (_, prompt) = exp.render(&test_id, seed)?;
            print!("{prompt}");
        }
        Command::Run { config, concurrency } => {
            let exp = Experiment::prepare(ExperimentConfig::load(config)?)?;
            let client = exp.client()?;
            let report = exp.run(client.as_ref(), &RunOptions { concurrency, stop_after: None })?;
            print!("{}", report.to_table());
            log::info!("report written to {}", exp.config.output_dir.display());
        }
        Command::Report { report, config, json } => {
            let report = match (report, config) {
                (Some(path), _) => read_report(&path)?,
                (None, Some(config)) => {
                    let exp = Experiment::prepare(ExperimentConfig::load(config)?)?;
                    let report = exp.report()?;
                    exp.write_report(&report)?;
                    report
                }
                (None, None) => return Err(RunError::Config("pass a report file or --config".into())),
            };
            if json {
                print!("{}", report.to_json());
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Compare { reports } => {
            let loaded = reports.iter().map(read_report).collect::<Result<Vec<_>, _>>()?;
            print!("{}", compare(&loaded)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
