use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use anyhow::{bail, Result};
use chatfuse_core::backends::{ToyConfig, TrainConfig};
use chatfuse_core::corpus::load_fused_corpus;
use chatfuse_core::pivot::{
    append_traces, chat_turn, load_examples, make_training_examples, save_examples, train_rounds, Session, ToyPivot,
    DEFAULT_WINDOW_K,
};
use clap::Args;

use crate::common::{existing, load_detector, load_registry, out_dir, pivot_model, router, write_json, SearchArgs};
use crate::config::Resolver;

#[derive(Args, Debug)]
pub struct BuildExamplesArgs {
    /// Fused JSONL corpus.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub window_k: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

pub fn build_examples(mut r: Resolver, a: BuildExamplesArgs) -> Result<()> {
    let input: PathBuf = r.required("input", a.input)?;
    let window_k: usize = r.value("window_k", a.window_k, DEFAULT_WINDOW_K)?;
    let dir: PathBuf = r.required("out_dir", a.out_dir)?;
    existing(&input)?;
    let router = router(&mut r, a.db, &a.search)?;
    eprintln!("{}", r.banner());
    let dialogs = load_fused_corpus(&input)?;
    let mut examples = Vec::new();
    for d in &dialogs {
        examples.extend(make_training_examples(d, &router, window_k)?);
    }
    let dir = out_dir(&dir)?;
    save_examples(&examples, &dir.join("examples.jsonl"))?;
    println!("{} examples from {} dialogs", examples.len(), dialogs.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// Training examples JSONL.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs per round.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Stop once state exact match on the training set reaches this value.
    #[arg(long)]
    pub target_exact_match: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn train_toy(mut r: Resolver, a: TrainToyArgs) -> Result<()> {
    let examples: PathBuf = r.required("examples", a.examples)?;
    let seed: u64 = r.required("seed", a.seed)?;
    let defaults = TrainConfig::default();
    let toy_defaults = ToyConfig::default();
    let config = TrainConfig {
        epochs: r.value("epochs", a.epochs, defaults.epochs)?,
        learning_rate: r.value("learning_rate", a.learning_rate, defaults.learning_rate)?,
        batch_size: r.value("batch_size", a.batch_size, defaults.batch_size)?,
        seed,
        ..defaults
    };
    let toy = ToyConfig {
        embed_dim: r.value("embed_dim", a.embed_dim, toy_defaults.embed_dim)?,
        hidden_dim: r.value("hidden_dim", a.hidden_dim, toy_defaults.hidden_dim)?,
        ..toy_defaults
    };
    let rounds: usize = r.value("rounds", a.rounds, 1)?;
    let target: Option<f64> = r.optional("target_exact_match", a.target_exact_match, None)?;
    let dir: PathBuf = r.required("out_dir", a.out_dir)?;
    eprintln!("{}", r.banner());
    let examples = load_examples(existing(&examples)?)?;
    if examples.is_empty() {
        bail!("no training examples");
    }
    let mut pivot = ToyPivot::build(&examples, toy, seed);
    let initial = pivot.mean_loss(&examples)?;
    let progress = train_rounds(&examples, &mut pivot, &config, rounds, target)?;
    for p in &progress {
        eprintln!(
            "round {} epochs {} loss {:.4} state exact match {:.3}",
            p.round, p.epochs, p.loss, p.state_exact_match
        );
    }
    let dir = out_dir(&dir)?;
    pivot.model.save(&dir.join("model.json"))?;
    write_json(&dir.join("train_report.json"), &serde_json::json!({ "initial_loss": initial, "rounds": progress }))?;
    println!("saved {}", dir.join("model.json").display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ChatArgs {
    /// `name=path` of a saved toy model, or a backend name from --registry.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub window_k: Option<usize>,
    /// Receives `traces.jsonl`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

/// Reads user utterances from stdin, one per line, until EOF or `/quit`.
pub fn chat(mut r: Resolver, a: ChatArgs) -> Result<()> {
    let spec: String = r.required("model", a.model)?;
    let registry: Option<PathBuf> = r.optional("registry", a.registry, None)?;
    let detector: PathBuf = r.required("detector", a.detector)?;
    let seed: u64 = r.required("seed", a.seed)?;
    let window_k: usize = r.value("window_k", a.window_k, DEFAULT_WINDOW_K)?;
    let dir: PathBuf = r.required("out_dir", a.out_dir)?;
    let router = router(&mut r, a.db, &a.search)?;
    eprintln!("{}", r.banner());
    let registry = registry.map(|p| load_registry(&p)).transpose()?;
    let (_, model) = pivot_model(&spec, registry.as_ref(), seed)?;
    let detector = load_detector(&detector)?;
    let traces = out_dir(&dir)?.join("traces.jsonl");

    let mut session = Session::new(format!("cli-{seed}"));
    session.window_k = window_k;
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    for line in stdin.lock().lines() {
        let line = line?;
        let text = line.trim();
        if text == "/quit" {
            break;
        }
        if text.is_empty() {
            continue;
        }
        let trace = chat_turn(&mut session, text, model.as_ref(), &router, &detector)?;
        if let Some(e) = &trace.knowledge_error {
            log::warn!("knowledge lookup failed: {e}");
        }
        writeln!(stdout, "[{}] {}", chatfuse_core::pivot::encode_state(&trace.state), trace.display_response)?;
        stdout.flush()?;
        append_traces(&traces, std::slice::from_ref(&trace))?;
    }
    Ok(())
}
