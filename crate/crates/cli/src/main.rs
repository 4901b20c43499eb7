mod common;
mod config;
mod data;
mod eval;
mod model;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Resolver;

/// Fused task-oriented and open-domain dialog workbench.
#[derive(Parser, Debug)]
#[command(name = "chatfuse", version)]
struct Cli {
    /// TOML file with option values; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a small synthetic world for trying the pipeline.
    MakeFixtures(data::MakeFixturesArgs),
    /// Insert open-domain snippets into a TOD corpus.
    Synthesize(data::SynthesizeArgs),
    /// Corpus statistics per split.
    Stats(data::StatsArgs),
    /// Turn a fused corpus into supervised examples.
    BuildExamples(model::BuildExamplesArgs),
    /// Train the toy two-task model.
    TrainToy(model::TrainToyArgs),
    /// Score predictions over one or more seeds.
    Evaluate(eval::EvaluateArgs),
    /// Train-setting by eval-setting matrix.
    CrossEval(eval::CrossEvalArgs),
    /// Run the human-evaluation HTTP service.
    Serve(serve::ServeArgs),
    /// Chat with a model on stdin.
    Chat(model::ChatArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli.config.as_deref();
    let resolver = |name: &str| Resolver::load(config, name);
    match cli.command {
        Command::MakeFixtures(a) => data::make_fixtures(resolver("make-fixtures")?, a),
        Command::Synthesize(a) => data::synthesize(resolver("synthesize")?, a),
        Command::Stats(a) => data::stats(resolver("stats")?, a),
        Command::BuildExamples(a) => model::build_examples(resolver("build-examples")?, a),
        Command::TrainToy(a) => model::train_toy(resolver("train-toy")?, a),
        Command::Evaluate(a) => eval::evaluate(resolver("evaluate")?, a),
        Command::CrossEval(a) => eval::cross_eval(resolver("cross-eval")?, a),
        Command::Serve(a) => serve::serve(resolver("serve")?, a),
        Command::Chat(a) => model::chat(resolver("chat")?, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
