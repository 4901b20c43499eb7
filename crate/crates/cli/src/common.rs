use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chatfuse_core::backends::{BackendRegistry, ToyModel};
use chatfuse_core::intent::IntentDetector;
use chatfuse_core::knowledge::{
    CachedSearchProvider, Database, DefaultRouter, HttpSearchConfig, HttpSearchProvider, KnowledgeError,
    MockSearchProvider, SearchProvider,
};
use chatfuse_core::pivot::{BackendPivot, PivotModel, ToyPivot};
use clap::Args;

use crate::config::Resolver;

/// The only environment variable read: the search API key.
pub const SEARCH_KEY_ENV: &str = "CHATFUSE_SEARCH_KEY";

#[derive(Args, Debug, Default, Clone)]
pub struct SearchArgs {
    /// JSON object mapping queries to snippet lists.
    #[arg(long)]
    pub search_map: Option<PathBuf>,
    /// Cache directory for search results; offline misses are errors.
    #[arg(long)]
    pub search_cache: Option<PathBuf>,
    /// JSON search endpoint taking `{query, limit}`.
    #[arg(long)]
    pub search_endpoint: Option<String>,
}

/// Fails every query. Used when no search source is configured so that
/// ODD lookups are reported instead of silently returning nothing.
struct NoSearch;

impl SearchProvider for NoSearch {
    fn search(&self, query: &str, _limit: usize) -> Result<Vec<String>, KnowledgeError> {
        Err(KnowledgeError::Protocol(format!(
            "no search provider configured for query `{query}` (use --search-map, --search-cache or --search-endpoint)"
        )))
    }
}

pub fn search_provider(r: &mut Resolver, args: &SearchArgs) -> Result<Box<dyn SearchProvider>> {
    let map: Option<PathBuf> = r.optional("search_map", args.search_map.clone(), None)?;
    let cache: Option<PathBuf> = r.optional("search_cache", args.search_cache.clone(), None)?;
    let endpoint: Option<String> = r.optional("search_endpoint", args.search_endpoint.clone(), None)?;
    if map.is_some() && (cache.is_some() || endpoint.is_some()) {
        bail!("--search-map cannot be combined with --search-cache or --search-endpoint");
    }
    if let Some(path) = map {
        let raw = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let table: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(Box::new(MockSearchProvider::from_map(table)));
    }
    let http = endpoint.map(|endpoint| {
        Box::new(HttpSearchProvider::new(&HttpSearchConfig {
            endpoint,
            api_key_env: Some(SEARCH_KEY_ENV.to_string()),
            timeout_ms: 10_000,
            max_concurrency: 4,
        })) as Box<dyn SearchProvider>
    });
    Ok(match (cache, http) {
        (Some(dir), upstream) => Box::new(CachedSearchProvider::new(dir, upstream)?),
        (None, Some(h)) => h,
        (None, None) => Box::new(NoSearch),
    })
}

pub fn existing(path: &Path) -> Result<&Path> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    Ok(path)
}

pub fn load_db(path: &Path) -> Result<Database> {
    Database::load(existing(path)?).with_context(|| format!("loading database {}", path.display()))
}

pub fn router(r: &mut Resolver, db_flag: Option<PathBuf>, search: &SearchArgs) -> Result<DefaultRouter> {
    let db: PathBuf = r.required("db", db_flag)?;
    let db = load_db(&db)?;
    Ok(DefaultRouter::new(db, search_provider(r, search)?))
}

pub fn load_detector(path: &Path) -> Result<IntentDetector> {
    IntentDetector::load(existing(path)?).with_context(|| format!("loading intent detector {}", path.display()))
}

pub fn load_toy(path: &Path) -> Result<ToyPivot> {
    let model = ToyModel::load(existing(path)?).with_context(|| format!("loading model {}", path.display()))?;
    Ok(ToyPivot::from_model(model))
}

pub fn load_registry(path: &Path) -> Result<BackendRegistry> {
    BackendRegistry::load(existing(path)?).with_context(|| format!("loading backend registry {}", path.display()))
}

/// `name=path` for a saved toy model, or `name` alone for a registry
/// backend driven through [`BackendPivot`].
pub fn pivot_model(spec: &str, registry: Option<&BackendRegistry>, seed: u64) -> Result<(String, Arc<dyn PivotModel>)> {
    if let Some((name, path)) = spec.split_once('=') {
        return Ok((name.to_string(), Arc::new(load_toy(Path::new(path))?)));
    }
    let Some(registry) = registry else { bail!("model `{spec}` is not `name=path` and no --registry was given") };
    Ok((spec.to_string(), Arc::new(BackendPivot::new(registry.get(spec)?, seed))))
}

/// Creates `dir` and returns it; refuses a path that is an existing file.
pub fn out_dir(dir: &Path) -> Result<&Path> {
    if dir.is_file() {
        bail!("output directory {} is a file", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
