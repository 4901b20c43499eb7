use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chatfuse_core::corpus::load_fused_corpus;
use chatfuse_core::evalkit::DEFAULT_BOOTSTRAP_RESAMPLES;
use chatfuse_core::pivot::PivotModel;
use chatfuse_service::{serve as serve_http, AppState, GoalSampler, Registry, ServiceConfig};
use clap::Args;
use indexmap::IndexMap;

use crate::common::{existing, load_detector, load_registry, out_dir, pivot_model, router, SearchArgs};
use crate::config::Resolver;

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub addr: Option<String>,
    /// `name=path` of a saved toy model, or a backend name from --registry;
    /// repeatable.
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// Dialog corpus whose goal cards seed the session goals.
    #[arg(long)]
    pub goals: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub idle_timeout_secs: Option<u64>,
    #[arg(long)]
    pub bootstrap_resamples: Option<usize>,
    /// Receives the record log `records.jsonl`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

pub fn serve(mut r: Resolver, a: ServeArgs) -> Result<()> {
    let addr: String = r.value("addr", a.addr, "127.0.0.1:8080".to_string())?;
    let specs: Vec<String> = r.required("model", (!a.models.is_empty()).then_some(a.models))?;
    let registry: Option<PathBuf> = r.optional("registry", a.registry, None)?;
    let detector: PathBuf = r.required("detector", a.detector)?;
    let goals: PathBuf = r.required("goals", a.goals)?;
    let seed: u64 = r.required("seed", a.seed)?;
    let idle: Option<u64> = r.optional("idle_timeout_secs", a.idle_timeout_secs, None)?;
    let resamples: usize = r.value("bootstrap_resamples", a.bootstrap_resamples, DEFAULT_BOOTSTRAP_RESAMPLES)?;
    let dir: PathBuf = r.required("out_dir", a.out_dir)?;
    existing(&goals)?;
    let router = router(&mut r, a.db, &a.search)?;
    eprintln!("{}", r.banner());

    let backends = registry.map(|p| load_registry(&p)).transpose()?;
    let mut models: IndexMap<String, Arc<dyn PivotModel>> = IndexMap::new();
    for spec in &specs {
        let (name, model) = pivot_model(spec, backends.as_ref(), seed)?;
        if models.insert(name.clone(), model).is_some() {
            bail!("model `{name}` registered twice");
        }
    }
    let goals = GoalSampler::from_dialogs(&load_fused_corpus(&goals)?)
        .with_context(|| format!("{} has no single-domain goal cards", goals.display()))?;
    let registry = Registry { models, router: Arc::new(router), detector: Arc::new(load_detector(&detector)?), goals };
    let config = ServiceConfig {
        store_path: Some(out_dir(&dir)?.join("records.jsonl")),
        idle_timeout: idle.map(Duration::from_secs),
        seed,
        bootstrap_resamples: resamples,
    };
    let state = AppState::new(registry, config)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        serve_http(listener, state).await?;
        Ok(())
    })
}
