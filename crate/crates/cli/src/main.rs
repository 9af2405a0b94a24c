use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use ftbal::config::ExperimentConfig;
use ftbal::pipeline::Pipeline;

/// Traffic forecasting and DQN load balancing on a simulated fat-tree network.
#[derive(Parser, Debug)]
#[command(name = "ftbal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). Omitted sections and keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root directory for run outputs; the run lives in `<out>/<name>`.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate (or ingest) the traffic trace.
    Synth,
    /// Train the TFT and the LSTM baseline.
    TrainForecaster,
    /// Score both forecasters and export forecasts, importances and attention.
    EvalForecaster,
    /// Train the DQN link selector.
    TrainAgent,
    /// Compare DQN, RR and WRR on paired traffic.
    Evaluate,
    /// Assemble the comparison table and plot-ready CSVs.
    Report,
}

fn print<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let pipeline = Pipeline::new(cfg, &cli.out)?;
    log::info!("run directory {}", pipeline.paths.root.display());
    match cli.command {
        Command::Synth => print(&pipeline.synth()?),
        Command::TrainForecaster => print(&pipeline.train_forecaster()?),
        Command::EvalForecaster => print(&pipeline.eval_forecaster()?),
        Command::TrainAgent => print(&pipeline.train_agent()?),
        Command::Evaluate => print(&pipeline.evaluate()?),
        Command::Report => print(&pipeline.report()?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<ftbal::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
