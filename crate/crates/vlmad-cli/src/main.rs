mod commands;
mod config;

use clap::{Parser, Subcommand};
use serde_json::Value;
use std::path::PathBuf;
use std::process::ExitCode;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "vlmad", about = "Distillation pipeline tools for driving planners")]
struct Cli {
    /// Flat dotted-key JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override (mandatory for train-toy and eval).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Teacher client mode.
    #[arg(long, global = true, value_parser = ["mock", "replay", "live"])]
    client: Option<String>,

    /// Abort on the first per-item error instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,

    /// Output path (file or directory, per subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Extra key=value overrides on top of the config file.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render trajectory overlays onto front-view images.
    Project,
    /// Query the teacher for annotations and append them to a store.
    Annotate,
    /// Encode an annotation store into supervision features.
    Encode,
    /// Train the toy planner with and without auxiliary supervision.
    TrainToy,
    /// Evaluate a planner checkpoint on a regenerated validation set.
    Eval,
    /// Word-length and label-frequency statistics over a store.
    Stats,
    /// Aggregate a questionnaire file into the summary table.
    Report,
}

fn run(cli: &Cli) -> vlmad_core::Result<u32> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", Value::from(seed));
    }
    if let Some(client) = &cli.client {
        cfg.set("client", Value::from(client.as_str()));
    }
    if let Some(out) = &cli.out {
        cfg.set("out", Value::from(out.display().to_string()));
    }
    eprintln!("config: {}", cfg.resolved());
    let strict = cli.strict;
    match cli.command {
        Command::Project => commands::cmd_project(&cfg, strict),
        Command::Annotate => commands::cmd_annotate(&cfg, strict),
        Command::Encode => commands::cmd_encode(&cfg, strict),
        Command::TrainToy => commands::cmd_train_toy(&cfg, strict),
        Command::Eval => commands::cmd_eval(&cfg, strict),
        Command::Stats => commands::cmd_stats(&cfg, strict),
        Command::Report => commands::cmd_report(&cfg, strict),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(item_errors) => {
            if item_errors > 0 {
                eprintln!("completed with {item_errors} skipped items");
                if cli.strict {
                    return ExitCode::FAILURE;
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
