use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chatfuse_core::corpus::{load_fused_corpus, Dialog};
use chatfuse_core::evalkit::{
    aggregate_runs, baseline_predictions, cross_setting_eval, evaluate as evaluate_corpus, predict_corpus,
    render_aggregate_table, render_cross_matrix, Baseline, CrossRuns, DialogPrediction, EvalOptions, EvalReport,
};
use chatfuse_core::knowledge::{Database, DefaultRouter};
use chatfuse_core::pivot::DEFAULT_WINDOW_K;
use chatfuse_core::synthesis::Setting;
use clap::Args;

use crate::common::{existing, load_db, load_toy, out_dir, search_provider, write_json, SearchArgs};
use crate::config::Resolver;

fn save_predictions(path: &Path, preds: &[DialogPrediction]) -> Result<()> {
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fill(pattern: &str, train: Option<Setting>, seed: u64) -> PathBuf {
    let mut s = pattern.replace("{seed}", &seed.to_string());
    if let Some(t) = train {
        s = s.replace("{train}", &t.as_str().to_ascii_lowercase());
    }
    PathBuf::from(s)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Gold fused JSONL corpus.
    #[arg(long)]
    pub golds: Option<PathBuf>,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub setting: Option<String>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Saved toy model path; `{seed}` is replaced by each run seed.
    #[arg(long, conflicts_with = "baseline")]
    pub model: Option<String>,
    /// gold, always-tod or always-odd.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Row label in the printed table.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub window_k: Option<usize>,
    /// Leave transition turns out of ODD BLEU.
    #[arg(long)]
    pub exclude_transitions_from_odd_bleu: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

enum Predictor {
    Model { pattern: String, router: DefaultRouter, window_k: usize },
    Baseline(Baseline),
}

impl Predictor {
    fn predict(&self, golds: &[Dialog], seed: u64) -> Result<Vec<DialogPrediction>> {
        Ok(match self {
            Predictor::Model { pattern, router, window_k } => {
                let model = load_toy(&fill(pattern, None, seed))?;
                predict_corpus(golds, &model, router, *window_k)?
            }
            Predictor::Baseline(b) => baseline_predictions(golds, *b)?,
        })
    }
}

fn predictor(
    r: &mut Resolver,
    model: Option<String>,
    baseline: Option<String>,
    db: &Database,
    search: &SearchArgs,
    window_k: Option<usize>,
) -> Result<(String, Predictor)> {
    let model: Option<String> = r.optional("model", model, None)?;
    let baseline: Option<String> = r.optional("baseline", baseline, None)?;
    match (model, baseline) {
        (Some(pattern), None) => {
            let window_k = r.value("window_k", window_k, DEFAULT_WINDOW_K)?;
            let router = DefaultRouter::new(db.clone(), search_provider(r, search)?);
            Ok(("model".into(), Predictor::Model { pattern, router, window_k }))
        }
        (None, Some(b)) => Ok((b.clone(), Predictor::Baseline(b.parse().map_err(anyhow::Error::msg)?))),
        _ => bail!("give exactly one of --model or --baseline"),
    }
}

fn print_single(name: &str, report: &EvalReport) {
    println!("{name} (seed {})", report.seed);
    for (metric, value) in report.metrics() {
        println!("  {metric:<18} {value:8.2}");
    }
}

pub fn evaluate(mut r: Resolver, a: EvaluateArgs) -> Result<()> {
    let golds_path: PathBuf = r.required("golds", a.golds)?;
    let db_path: PathBuf = r.required("db", a.db)?;
    let setting: Setting = r.required::<String>("setting", a.setting)?.parse().map_err(anyhow::Error::msg)?;
    let seeds: Vec<u64> = r.required("seeds", a.seeds)?;
    if seeds.is_empty() {
        bail!("--seeds must name at least one seed");
    }
    let dir: PathBuf = r.required("out_dir", a.out_dir)?;
    let exclude: bool =
        r.value("exclude_transitions_from_odd_bleu", a.exclude_transitions_from_odd_bleu.then_some(true), false)?;
    existing(&golds_path)?;
    let db = load_db(&db_path)?;
    let (label, predictor) = predictor(&mut r, a.model, a.baseline, &db, &a.search, a.window_k)?;
    let name: String = r.value("name", a.name, label)?;
    eprintln!("{}", r.banner());

    let golds = load_fused_corpus(&golds_path)?;
    let options = EvalOptions { transition_in_odd_bleu: !exclude };
    let dir = out_dir(&dir)?;
    let mut reports = Vec::new();
    for &seed in &seeds {
        let preds = predictor.predict(&golds, seed)?;
        save_predictions(&dir.join(format!("predictions-{seed}.jsonl")), &preds)?;
        let report = evaluate_corpus(&golds, &preds, &db, setting, seed, options)?;
        report.save(&dir.join(format!("report-{seed}.json")))?;
        reports.push(report);
    }
    if reports.len() == 1 {
        print_single(&name, &reports[0]);
        return Ok(());
    }
    let agg = aggregate_runs(&reports)?;
    write_json(&dir.join("aggregate.json"), &agg)?;
    let table = render_aggregate_table(&[(name, agg)]);
    fs::write(dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct CrossEvalArgs {
    /// `SETTING=path` of a gold fused corpus; repeatable.
    #[arg(long = "golds")]
    pub golds: Vec<String>,
    /// Saved toy model path with `{train}` and `{seed}` placeholders.
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated training settings; all three when omitted.
    #[arg(long, value_delimiter = ',')]
    pub train_settings: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub window_k: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

pub fn cross_eval(mut r: Resolver, a: CrossEvalArgs) -> Result<()> {
    let gold_specs: Vec<String> = r.required("golds", (!a.golds.is_empty()).then_some(a.golds))?;
    let pattern: String = r.required("model", a.model)?;
    let all: Vec<String> = Setting::ALL.iter().map(|s| s.as_str().to_string()).collect();
    let train: Vec<String> = r.value("train_settings", a.train_settings, all)?;
    let seeds: Vec<u64> = r.required("seeds", a.seeds)?;
    if seeds.is_empty() {
        bail!("--seeds must name at least one seed");
    }
    let db_path: PathBuf = r.required("db", a.db)?;
    let window_k: usize = r.value("window_k", a.window_k, DEFAULT_WINDOW_K)?;
    let dir: PathBuf = r.required("out_dir", a.out_dir)?;
    let db = load_db(&db_path)?;
    let router = DefaultRouter::new(db.clone(), search_provider(&mut r, &a.search)?);
    eprintln!("{}", r.banner());

    let mut golds: BTreeMap<Setting, Vec<Dialog>> = BTreeMap::new();
    for spec in &gold_specs {
        let Some((s, path)) = spec.split_once('=') else { bail!("--golds expects SETTING=path, got `{spec}`") };
        let setting: Setting = s.parse().map_err(anyhow::Error::msg)?;
        golds.insert(setting, load_fused_corpus(existing(path.as_ref())?)?);
    }
    let train: Vec<Setting> =
        train.iter().map(|s| s.parse()).collect::<Result<_, String>>().map_err(anyhow::Error::msg)?;
    let mut runs = CrossRuns::new();
    for &t in &train {
        for &seed in &seeds {
            let model = load_toy(&fill(&pattern, Some(t), seed))?;
            for (&e, gold) in &golds {
                let preds = predict_corpus(gold, &model, &router, window_k)?;
                runs.entry((t, e)).or_default().push((seed, preds));
            }
        }
    }
    let matrix = cross_setting_eval(&runs, &golds, &db, EvalOptions::default());
    let dir = out_dir(&dir)?;
    write_json(&dir.join("cross.json"), &matrix)?;
    let table = render_cross_matrix(&matrix);
    fs::write(dir.join("cross.txt"), &table)?;
    print!("{table}");
    Ok(())
}
