//! Knowledge acquisition: database lookup from belief states and web search
//! through a pluggable provider.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{normalize_slot, BeliefState, DONTCARE};
use crate::pivot::State;

/// Number of snippets requested when no limit is configured.
pub const DEFAULT_SNIPPET_LIMIT: usize = 3;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("unknown database domain `{0}`")]
    UnknownDomain(String),
    #[error("search query is empty")]
    EmptyQuery,
    #[error("search provider unreachable: {0}")]
    Transport(String),
    #[error("search provider quota exhausted: {0}")]
    Quota(String),
    #[error("search provider returned malformed payload: {0}")]
    Protocol(String),
    #[error("no cached result for `{0}` and no upstream provider")]
    CacheMiss(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl KnowledgeError {
    /// Whether retrying the same call may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, KnowledgeError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DBRecord {
    pub domain: String,
    pub attributes: BTreeMap<String, String>,
}

impl DBRecord {
    pub fn new(domain: &str) -> Self {
        DBRecord { domain: domain.to_string(), attributes: BTreeMap::new() }
    }

    pub fn with(mut self, slot: &str, value: &str) -> Self {
        self.attributes.insert(slot.to_string(), value.to_string());
        self
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.attributes.get(slot).map(String::as_str)
    }

    /// Whether this record satisfies every constraint. `dontcare` matches
    /// anything; other values compare case-insensitively and exactly. A
    /// constraint on an attribute the record lacks does not match.
    pub fn satisfies(&self, constraints: &BTreeMap<String, String>) -> bool {
        constraints.iter().filter(|(slot, _)| !slot.starts_with("book_")).all(|(slot, want)| {
            want.eq_ignore_ascii_case(DONTCARE)
                || self.attributes.get(slot).is_some_and(|have| have.trim().eq_ignore_ascii_case(want.trim()))
        })
    }
}

/// Per-domain record tables in canonical (file) order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Database {
    pub tables: BTreeMap<String, Vec<DBRecord>>,
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.to_ascii_lowercase()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: DBRecord) {
        self.tables.entry(record.domain.clone()).or_default().push(record);
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.tables.contains_key(domain)
    }

    pub fn records(&self, domain: &str) -> Result<&[DBRecord], KnowledgeError> {
        self.tables.get(domain).map(Vec::as_slice).ok_or_else(|| KnowledgeError::UnknownDomain(domain.to_string()))
    }

    /// Loads either one JSON object `{domain: [record, ...]}` or a directory of
    /// MultiWOZ-style `<domain>_db.json` arrays. Non-scalar attributes are
    /// dropped and attribute names are normalized.
    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let io = |e: std::io::Error| KnowledgeError::Io { path: path.to_path_buf(), message: e.to_string() };
        let mut db = Database::new();
        if path.is_dir() {
            let mut entries: Vec<PathBuf> =
                fs::read_dir(path).map_err(io)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            entries.sort();
            for file in entries {
                let Some(stem) = file.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix("_db.json"))
                else {
                    continue;
                };
                let raw = fs::read_to_string(&file).map_err(io)?;
                let rows: Vec<Value> = serde_json::from_str(&raw)
                    .map_err(|e| KnowledgeError::Io { path: file.clone(), message: e.to_string() })?;
                db.add_rows(stem, &rows);
            }
        } else {
            let raw = fs::read_to_string(path).map_err(io)?;
            let tables: BTreeMap<String, Vec<Value>> = serde_json::from_str(&raw)
                .map_err(|e| KnowledgeError::Io { path: path.to_path_buf(), message: e.to_string() })?;
            for (domain, rows) in tables {
                db.add_rows(&domain, &rows);
            }
        }
        Ok(db)
    }

    fn add_rows(&mut self, domain: &str, rows: &[Value]) {
        let table = self.tables.entry(domain.to_string()).or_default();
        for row in rows {
            let Some(obj) = row.as_object() else { continue };
            let attributes: BTreeMap<String, String> =
                obj.iter().filter_map(|(k, v)| scalar(v).map(|v| (normalize_slot(k), v))).collect();
            if !attributes.is_empty() {
                table.push(DBRecord { domain: domain.to_string(), attributes });
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), KnowledgeError> {
        let tables: BTreeMap<&str, Vec<&BTreeMap<String, String>>> =
            self.tables.iter().map(|(d, rows)| (d.as_str(), rows.iter().map(|r| &r.attributes).collect())).collect();
        let json = serde_json::to_string_pretty(&tables).expect("database serializes");
        fs::write(path, json).map_err(|e| KnowledgeError::Io { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Retrieved knowledge conditioning a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KnowledgeResult {
    Empty,
    DbState { domain: String, db_match_count: usize, top_record: Option<DBRecord> },
    Search { snippets: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KnowledgeKind {
    Empty,
    DbState,
    Search,
}

impl KnowledgeResult {
    pub fn kind(&self) -> KnowledgeKind {
        match self {
            KnowledgeResult::Empty => KnowledgeKind::Empty,
            KnowledgeResult::DbState { .. } => KnowledgeKind::DbState,
            KnowledgeResult::Search { .. } => KnowledgeKind::Search,
        }
    }

    pub fn db_match_count(&self) -> Option<usize> {
        match self {
            KnowledgeResult::DbState { db_match_count, .. } => Some(*db_match_count),
            _ => None,
        }
    }

    /// Text form fed to response generation.
    pub fn render(&self) -> String {
        match self {
            KnowledgeResult::Empty => String::new(),
            KnowledgeResult::DbState { domain, db_match_count, .. } => format!("{domain} matches {db_match_count}"),
            KnowledgeResult::Search { snippets } => snippets.join(" | "),
        }
    }
}

/// Records of `domain` satisfying the belief constraints for that domain.
pub fn matching_records<'a>(
    belief: &BeliefState,
    domain: &str,
    db: &'a Database,
) -> Result<Vec<&'a DBRecord>, KnowledgeError> {
    let records = db.records(domain)?;
    let empty = BTreeMap::new();
    let constraints = belief.constraints(domain).unwrap_or(&empty);
    Ok(records.iter().filter(|r| r.satisfies(constraints)).collect())
}

/// Database state for `domain` under `belief`.
pub fn db_lookup(belief: &BeliefState, domain: &str, db: &Database) -> Result<KnowledgeResult, KnowledgeError> {
    let matches = matching_records(belief, domain, db)?;
    Ok(KnowledgeResult::DbState {
        domain: domain.to_string(),
        db_match_count: matches.len(),
        top_record: matches.first().map(|r| (*r).clone()),
    })
}

/// Single-call search interface: `{query, limit} -> {snippets}`.
pub trait SearchProvider: Send + Sync {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<String>, KnowledgeError>;
}

/// Searches `query` and wraps at most `limit` snippets.
pub fn web_search(query: &str, provider: &dyn SearchProvider, limit: usize) -> Result<KnowledgeResult, KnowledgeError> {
    if limit == 0 {
        return Ok(KnowledgeResult::Empty);
    }
    let query = query.trim();
    if query.is_empty() {
        return Err(KnowledgeError::EmptyQuery);
    }
    let mut snippets = provider.search(query, limit)?;
    snippets.truncate(limit);
    Ok(KnowledgeResult::Search { snippets })
}

/// Offline provider backed by a fixed query table. Lookup is case-insensitive.
#[derive(Debug, Clone, Default)]
pub struct MockSearchProvider {
    table: BTreeMap<String, Vec<String>>,
}

impl MockSearchProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, query: &str, snippets: &[&str]) -> Self {
        self.table.insert(query.trim().to_lowercase(), snippets.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn from_map(table: BTreeMap<String, Vec<String>>) -> Self {
        MockSearchProvider { table: table.into_iter().map(|(k, v)| (k.trim().to_lowercase(), v)).collect() }
    }
}

impl SearchProvider for MockSearchProvider {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<String>, KnowledgeError> {
        Ok(self
            .table
            .get(&query.trim().to_lowercase())
            .map(|s| s.iter().take(limit).cloned().collect())
            .unwrap_or_default())
    }
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpSearchConfig {
    pub endpoint: String,
    /// Environment variable holding the API key, sent as a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_concurrency() -> usize {
    4
}

#[derive(Serialize)]
struct SearchRequest<'a> {
    query: &'a str,
    limit: usize,
}

#[derive(Deserialize)]
struct SearchResponse {
    snippets: Vec<String>,
}

/// JSON-over-HTTP search client with bounded in-flight requests.
pub struct HttpSearchProvider {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    permits: Permits,
}

impl HttpSearchProvider {
    pub fn new(config: &HttpSearchConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build();
        HttpSearchProvider {
            agent: ureq::Agent::new_with_config(agent_config),
            endpoint: config.endpoint.clone(),
            api_key: config.api_key_env.as_ref().and_then(|var| std::env::var(var).ok()),
            permits: Permits { free: Mutex::new(config.max_concurrency.max(1)), cv: Condvar::new() },
        }
    }
}

impl SearchProvider for HttpSearchProvider {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<String>, KnowledgeError> {
        let _permit = self.permits.acquire();
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response =
            request.send_json(SearchRequest { query, limit }).map_err(|e| KnowledgeError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            429 | 402 => return Err(KnowledgeError::Quota(format!("HTTP {status}"))),
            500..=599 => return Err(KnowledgeError::Transport(format!("HTTP {status}"))),
            _ => return Err(KnowledgeError::Protocol(format!("HTTP {status}"))),
        }
        let body: SearchResponse =
            response.body_mut().read_json().map_err(|e| KnowledgeError::Protocol(e.to_string()))?;
        Ok(body.snippets.into_iter().take(limit).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    query: String,
    limit: usize,
    snippets: Vec<String>,
}

/// On-disk cache in front of another provider. Each `(query, limit)` pair maps
/// to `<dir>/<sha256>.json`; writes are serialized. Without an upstream
/// provider a miss is an error, which makes offline runs fail loudly.
pub struct CachedSearchProvider {
    dir: PathBuf,
    upstream: Option<Box<dyn SearchProvider>>,
    write_lock: Mutex<()>,
}

impl CachedSearchProvider {
    pub fn new(dir: impl Into<PathBuf>, upstream: Option<Box<dyn SearchProvider>>) -> Result<Self, KnowledgeError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| KnowledgeError::Io { path: dir.clone(), message: e.to_string() })?;
        Ok(CachedSearchProvider { dir, upstream, write_lock: Mutex::new(()) })
    }

    pub fn cache_path(&self, query: &str, limit: usize) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(query.trim().to_lowercase().as_bytes());
        hasher.update([0u8]);
        hasher.update(limit.to_le_bytes());
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.dir.join(format!("{hex}.json"))
    }
}

impl SearchProvider for CachedSearchProvider {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<String>, KnowledgeError> {
        let path = self.cache_path(query, limit);
        if let Ok(raw) = fs::read_to_string(&path) {
            if let Ok(entry) = serde_json::from_str::<CacheEntry>(&raw) {
                return Ok(entry.snippets);
            }
        }
        let upstream = self.upstream.as_ref().ok_or_else(|| KnowledgeError::CacheMiss(query.to_string()))?;
        let snippets = upstream.search(query, limit)?;
        let entry = CacheEntry { query: query.to_string(), limit, snippets: snippets.clone() };
        let _guard = self.write_lock.lock().expect("cache lock");
        let tmp = path.with_extension("json.tmp");
        let io = |e: std::io::Error| KnowledgeError::Io { path: path.clone(), message: e.to_string() };
        fs::write(&tmp, serde_json::to_vec(&entry).expect("cache entry serializes")).map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)?;
        Ok(snippets)
    }
}

/// Routes a predicted state to the matching knowledge source.
pub trait KnowledgeRouter: Send + Sync {
    fn route(&self, state: &State) -> Result<KnowledgeResult, KnowledgeError>;
}

/// TOD states query the database for the active domain; ODD states with a
/// query go to web search. An empty belief, an empty query, or a domain with
/// no database table yields [`KnowledgeResult::Empty`].
pub struct DefaultRouter {
    pub db: Database,
    pub search: Box<dyn SearchProvider>,
    pub limit: usize,
}

impl DefaultRouter {
    pub fn new(db: Database, search: Box<dyn SearchProvider>) -> Self {
        DefaultRouter { db, search, limit: DEFAULT_SNIPPET_LIMIT }
    }
}

impl KnowledgeRouter for DefaultRouter {
    fn route(&self, state: &State) -> Result<KnowledgeResult, KnowledgeError> {
        match state {
            State::Tod(belief) => match belief.active_domain() {
                Some(domain) if !belief.is_empty() && self.db.has_domain(domain) => db_lookup(belief, domain, &self.db),
                _ => Ok(KnowledgeResult::Empty),
            },
            State::Odd(query) if query.trim().is_empty() => Ok(KnowledgeResult::Empty),
            State::Odd(query) => web_search(query, self.search.as_ref(), self.limit),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn restaurants() -> Database {
        let mut db = Database::new();
        for (name, area, price) in [
            ("curry garden", "centre", "expensive"),
            ("pizza hut", "centre", "cheap"),
            ("golden wok", "north", "moderate"),
            ("the eagle", "centre", "moderate"),
        ] {
            db.insert(DBRecord::new("restaurant").with("name", name).with("area", area).with("pricerange", price));
        }
        db
    }

    #[test]
    fn lookup_counts_and_first_record() {
        let db = restaurants();
        let belief = BeliefState::new().with("restaurant", "area", "Centre");
        let r = db_lookup(&belief, "restaurant", &db).unwrap();
        assert_eq!(r.db_match_count(), Some(3));
        match r {
            KnowledgeResult::DbState { top_record: Some(rec), .. } => assert_eq!(rec.get("name"), Some("curry garden")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dontcare_and_unsatisfiable() {
        let db = restaurants();
        let none = BeliefState::new();
        let dc = BeliefState::new().with("restaurant", "area", "dontcare");
        assert_eq!(
            db_lookup(&dc, "restaurant", &db).unwrap().db_match_count(),
            db_lookup(&none, "restaurant", &db).unwrap().db_match_count()
        );
        let bad = BeliefState::new().with("restaurant", "area", "mars");
        let r = db_lookup(&bad, "restaurant", &db).unwrap();
        assert_eq!(r.kind(), KnowledgeKind::DbState);
        assert_eq!(r, KnowledgeResult::DbState { domain: "restaurant".into(), db_match_count: 0, top_record: None });
        assert!(matches!(db_lookup(&none, "spaceport", &db), Err(KnowledgeError::UnknownDomain(_))));
    }

    #[test]
    fn book_slots_are_ignored() {
        let db = restaurants();
        let belief = BeliefState::new().with("restaurant", "area", "north").with("restaurant", "book_people", "4");
        assert_eq!(db_lookup(&belief, "restaurant", &db).unwrap().db_match_count(), Some(1));
    }

    #[test]
    fn web_search_contract() {
        let mock = MockSearchProvider::new().with("norwich", &["Norwich is a cathedral city in Norfolk, England"]);
        assert_eq!(
            web_search("Norwich", &mock, 3).unwrap(),
            KnowledgeResult::Search { snippets: vec!["Norwich is a cathedral city in Norfolk, England".into()] }
        );
        assert_eq!(web_search("norwich", &mock, 0).unwrap(), KnowledgeResult::Empty);
        assert!(matches!(web_search("  ", &mock, 3), Err(KnowledgeError::EmptyQuery)));
    }

    struct Counting(AtomicUsize);

    impl SearchProvider for Counting {
        fn search(&self, query: &str, _limit: usize) -> Result<Vec<String>, KnowledgeError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(vec![format!("about {query}")])
        }
    }

    #[test]
    fn cache_serves_repeat_queries_offline() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachedSearchProvider::new(dir.path(), Some(Box::new(Counting(AtomicUsize::new(0))))).unwrap();
        assert_eq!(cached.search("jazz", 3).unwrap(), vec!["about jazz"]);
        assert_eq!(cached.search("jazz", 3).unwrap(), vec!["about jazz"]);
        let offline = CachedSearchProvider::new(dir.path(), None).unwrap();
        assert_eq!(offline.search("JAZZ", 3).unwrap(), vec!["about jazz"]);
        assert!(matches!(offline.search("opera", 3), Err(KnowledgeError::CacheMiss(_))));
    }

    #[test]
    fn router_branches() {
        let router =
            DefaultRouter::new(restaurants(), Box::new(MockSearchProvider::new().with("jazz", &["jazz is music"])));
        assert_eq!(router.route(&State::Tod(BeliefState::new())).unwrap(), KnowledgeResult::Empty);
        assert_eq!(router.route(&State::Odd(String::new())).unwrap(), KnowledgeResult::Empty);
        assert_eq!(router.route(&State::Odd("jazz".into())).unwrap().kind(), KnowledgeKind::Search);
        let taxi = BeliefState::new().with("taxi", "destination", "norwich");
        assert_eq!(router.route(&State::Tod(taxi)).unwrap(), KnowledgeResult::Empty);
        let rest = BeliefState::new().with("restaurant", "area", "centre");
        assert_eq!(router.route(&State::Tod(rest)).unwrap().db_match_count(), Some(3));
    }

    #[test]
    fn result_json_shape() {
        let r = KnowledgeResult::DbState { domain: "train".into(), db_match_count: 2, top_record: None };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["kind"], "DB_STATE");
        assert_eq!(serde_json::to_value(KnowledgeResult::Empty).unwrap(), serde_json::json!({"kind": "EMPTY"}));
    }

    fn arb_db() -> impl Strategy<Value = Database> {
        proptest::collection::vec((0u8..3, 0u8..3, 0u8..4), 0..200).prop_map(|rows| {
            let mut db = Database::new();
            db.tables.insert("hotel".into(), Vec::new());
            for (a, p, s) in rows {
                db.insert(
                    DBRecord::new("hotel")
                        .with("area", ["north", "south", "centre"][a as usize])
                        .with("pricerange", ["cheap", "moderate", "expensive"][p as usize])
                        .with("stars", &s.to_string()),
                );
            }
            db
        })
    }

    fn arb_constraint() -> impl Strategy<Value = Option<String>> {
        proptest::option::of(prop_oneof![
            Just("north".to_string()),
            Just("CENTRE".to_string()),
            Just("cheap".to_string()),
            Just("2".to_string()),
            Just("dontcare".to_string()),
        ])
    }

    proptest! {
        #[test]
        fn lookup_matches_filter_and_is_monotone(db in arb_db(), a in arb_constraint(), p in arb_constraint(), s in arb_constraint()) {
            let mut belief = BeliefState::new();
            for (slot, v) in [("area", &a), ("pricerange", &p)] {
                if let Some(v) = v { belief.set("hotel", slot, v.as_str()); }
            }
            let oracle: Vec<&DBRecord> = db.tables["hotel"].iter().filter(|r| {
                belief.canonical_slots("hotel").iter().all(|(slot, want)| {
                    *want == "dontcare" || r.attributes.get(*slot).map(|h| h.to_lowercase()) == Some(want.to_lowercase())
                })
            }).collect();
            let got = matching_records(&belief, "hotel", &db).unwrap();
            prop_assert_eq!(&got, &oracle);
            let base = got.len();
            if let Some(s) = s {
                belief.set("hotel", "stars", s);
                prop_assert!(matching_records(&belief, "hotel", &db).unwrap().len() <= base);
            }
        }
    }
}
