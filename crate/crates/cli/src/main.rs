//! `lml`: generate bag datasets, train counting networks and their ablations,
//! evaluate checkpoints and assemble ablation reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lml_core::bagsynth::Scenario;
use lml_core::countnet::Variant;

use config::{annotated_defaults, ExperimentConfig, Overrides};

#[derive(Parser, Debug)]
#[command(
    name = "lml",
    version,
    about = "Learning instance classifiers from bag majority labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate bag datasets (one per seed) with manifests.
    GenData(CommonArgs),
    /// Train one checkpoint per (method, seed).
    Train(CommonArgs),
    /// Score checkpoints and write metrics, quartiles and predictions.
    Evaluate(CommonArgs),
    /// Run all three variants on identical data and write a comparison table.
    Ablation {
        #[command(flatten)]
        common: CommonArgs,
        /// Rebuild the report from stored checkpoints instead of training.
        #[arg(long)]
        skip_train: bool,
    },
    /// Print the effective configuration as TOML.
    ShowConfig(CommonArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed; repeat for several runs.
    #[arg(long = "seed", value_name = "N")]
    seeds: Vec<u64>,
    /// small, various or large. For ablation, limits the report to one scenario.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// counting, nocount or outputmean; repeatable.
    #[arg(long = "method", value_name = "METHOD")]
    methods: Vec<Variant>,
    /// Fixed number of instances per bag.
    #[arg(long, value_name = "N")]
    bag_size: Option<usize>,
    /// Instance-level softmax temperature.
    #[arg(long, value_name = "REAL", allow_negative_numbers = true)]
    temperature: Option<f64>,
    /// Bag-level softmax temperature.
    #[arg(long, value_name = "REAL", allow_negative_numbers = true)]
    bag_temperature: Option<f64>,
    /// Epoch budget for training.
    #[arg(long, value_name = "N")]
    max_epochs: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seeds: self.seeds.clone(),
            scenario: self.scenario,
            methods: self.methods.clone(),
            bag_size: self.bag_size,
            temperature: self.temperature,
            bag_temperature: self.bag_temperature,
            max_epochs: self.max_epochs,
            out: self.out.clone(),
        }
    }

    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides())
    }
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let usage = Failure::Usage;
    let runtime = Failure::Runtime;
    match cli.command {
        Command::ShowConfig(args) => {
            let config = args.load().map_err(usage)?;
            print!("{}", annotated_defaults(&config));
        }
        Command::GenData(args) => {
            let config = validated(&args)?;
            commands::gen_data(&config).map_err(runtime)?;
        }
        Command::Train(args) => {
            let config = validated(&args)?;
            commands::train(&config).map_err(runtime)?;
        }
        Command::Evaluate(args) => {
            let config = validated(&args)?;
            commands::evaluate(&config).map_err(runtime)?;
        }
        Command::Ablation { common, skip_train } => {
            let config = validated(&common)?;
            let scenarios = match common.scenario {
                Some(s) => vec![s],
                None => Scenario::ALL.to_vec(),
            };
            for &s in &scenarios {
                config.with_scenario(s).validate().map_err(usage)?;
            }
            commands::ablation(&config, &scenarios, skip_train).map_err(runtime)?;
        }
    }
    Ok(())
}

fn validated(args: &CommonArgs) -> Result<ExperimentConfig, Failure> {
    let config = args.load().map_err(Failure::Usage)?;
    config.validate().map_err(Failure::Usage)?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
