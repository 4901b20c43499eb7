use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chatfuse_core::backends::RegistryFile;
use chatfuse_core::corpus::{compute_stats, load_fused_corpus, load_tod_corpus, save_corpus, CorpusStats, Ontology};
use chatfuse_core::fixtures;
use chatfuse_core::synthesis::{synthesize_corpus, Setting, SynthesisBackends, SynthesisConfig};
use clap::Args;

use crate::common::{existing, load_detector, load_registry, out_dir, search_provider, write_json, SearchArgs};
use crate::config::Resolver;

#[derive(Args, Debug)]
pub struct MakeFixturesArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of TOD dialogs to generate.
    #[arg(long)]
    pub dialogs: Option<usize>,
}

/// Writes a self-contained toy world: TOD corpus, ontology, database, intent
/// detector, search index and a template backend registry.
pub fn make_fixtures(mut r: Resolver, a: MakeFixturesArgs) -> Result<()> {
    let dir: PathBuf = r.required("out_dir", a.out_dir)?;
    let seed: u64 = r.required("seed", a.seed)?;
    let n: usize = r.value("dialogs", a.dialogs, 60)?;
    eprintln!("{}", r.banner());
    let dir = out_dir(&dir)?;
    save_corpus(&fixtures::tod_corpus(n, seed), &dir.join("tod.jsonl"))?;
    fixtures::ontology().save(&dir.join("ontology.json"))?;
    fixtures::database().save(&dir.join("db.json"))?;
    fixtures::intent_detector().save(&dir.join("detector.json"))?;
    write_json(&dir.join("search.json"), &fixtures::search_table())?;
    let registry = RegistryFile { backend: fixtures::backend_configs() };
    fs::write(dir.join("backends.toml"), toml::to_string(&registry)?)?;
    println!("wrote fixtures to {}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// TOD corpus: JSONL dialogs or a MultiWOZ data.json.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// initial, transition or multiple.
    #[arg(long)]
    pub setting: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Backend registry defining `chat`, `user`, `system` and `transition`.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Only the first N dialogs of the input.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub max_odd_turns: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

pub fn synthesize(mut r: Resolver, a: SynthesizeArgs) -> Result<()> {
    let input: PathBuf = r.required("input", a.input)?;
    let ontology: PathBuf = r.required("ontology", a.ontology)?;
    let setting: Setting = r.required::<String>("setting", a.setting)?.parse().map_err(anyhow::Error::msg)?;
    let seed: u64 = r.required("seed", a.seed)?;
    let registry: PathBuf = r.required("registry", a.registry)?;
    let detector: PathBuf = r.required("detector", a.detector)?;
    let workers: usize = r.value("workers", a.workers, 1)?;
    let limit: Option<usize> = r.optional("limit", a.limit, None)?;
    let max_odd: usize = r.value("max_odd_turns", a.max_odd_turns, setting.default_max_odd_turns())?;
    let dir: PathBuf = r.required("out_dir", a.out_dir)?;
    let search = search_provider(&mut r, &a.search)?;
    eprintln!("{}", r.banner());
    for p in [&input, &ontology, &registry, &detector] {
        existing(p)?;
    }

    let ontology = Ontology::load(&ontology)?;
    let mut dialogs = load_tod_corpus(&input, &ontology).with_context(|| format!("loading {}", input.display()))?;
    if let Some(n) = limit {
        dialogs.truncate(n);
    }
    let registry = load_registry(&registry)?;
    let backends = SynthesisBackends {
        chat: registry.get("chat")?,
        user: registry.get("user")?,
        system: registry.get("system")?,
        transition: registry.get("transition")?,
        search: Some(Arc::from(search)),
    };
    let detector = load_detector(&detector)?;
    let mut config = SynthesisConfig::new(setting, seed);
    config.max_odd_turns = max_odd;
    let out = synthesize_corpus(&dialogs, &config, &backends, &detector, &ontology, workers)?;

    let dir = out_dir(&dir)?;
    save_corpus(&out.dialogs, &dir.join("fused.jsonl"))?;
    write_json(&dir.join("skipped.json"), &out.skipped)?;
    let traces: Vec<String> = out.traces.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    fs::write(dir.join("traces.jsonl"), traces.iter().map(|t| format!("{t}\n")).collect::<String>())?;
    write_json(&dir.join("stats.json"), &out.stats)?;
    println!("{}", CorpusStats::HEADER);
    println!("{}", out.stats.table_row(setting.as_str()));
    println!("synthesized {} dialogs, skipped {}", out.dialogs.len(), out.skipped.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// `label=path` of a fused JSONL corpus; repeatable.
    #[arg(long = "split", required = true)]
    pub splits: Vec<String>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

pub fn stats(r: Resolver, a: StatsArgs) -> Result<()> {
    eprintln!("{}", r.banner());
    let mut rows = Vec::new();
    for spec in &a.splits {
        let Some((label, path)) = spec.split_once('=') else { bail!("--split expects label=path, got `{spec}`") };
        let dialogs = load_fused_corpus(existing(path.as_ref())?)?;
        rows.push((label.to_string(), compute_stats(&dialogs)?));
    }
    if a.json {
        let map: indexmap::IndexMap<_, _> = rows.into_iter().collect();
        println!("{}", serde_json::to_string_pretty(&map)?);
    } else {
        println!("{}", CorpusStats::HEADER);
        for (label, s) in &rows {
            println!("{}", s.table_row(label));
        }
    }
    Ok(())
}
