use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use chatfuse_core::corpus::{GoalCard, Speaker, Turn};
use chatfuse_core::pivot::{chat_turn, PivotError, Session, State as PivotState, TurnTrace};
use chatfuse_core::text::contains_word;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::aggregate::{aggregate_records, summarize, HumanEvalTables, ResolvedJudgment};
use crate::store::{PairwiseJudgment, Preference, Rating, Record, SessionStatus, Store, StoredTurn};
use crate::{Registry, ServiceConfig, ServiceError, RATER_HEADER, SCHEMA_VERSION};

type ApiResult<T> = Result<T, ServiceError>;

struct SessionEntry {
    id: String,
    model_name: String,
    goal_card: GoalCard,
    created_at: u64,
    status: SessionStatus,
    turns: Vec<StoredTurn>,
    chat: Session,
    last_activity: u64,
    ratings: Vec<Rating>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub model_name: String,
    pub goal_card: GoalCard,
    pub status: SessionStatus,
    pub created_at: u64,
    pub turns: Vec<StoredTurn>,
    pub ratings: Vec<Rating>,
    /// `domain.slot` of each informable goal constraint, true once a user
    /// turn mentions its value.
    pub goal_coverage: BTreeMap<String, bool>,
}

/// Which goal values the user has mentioned so far.
pub fn goal_coverage(goal: &GoalCard, turns: &[StoredTurn]) -> BTreeMap<String, bool> {
    let mut out = BTreeMap::new();
    for (domain, dg) in &goal.domains {
        for (slot, value) in &dg.informable {
            let hit = turns.iter().any(|t| t.speaker == Speaker::User && contains_word(&t.text, value));
            out.insert(format!("{domain}.{slot}"), hit);
        }
    }
    out
}

impl SessionEntry {
    fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            model_name: self.model_name.clone(),
            goal_card: self.goal_card.clone(),
            status: self.status,
            created_at: self.created_at,
            turns: self.turns.clone(),
            ratings: self.ratings.clone(),
            goal_coverage: goal_coverage(&self.goal_card, &self.turns),
        }
    }
}

#[derive(Default)]
struct RatingIndex {
    model_of: BTreeMap<String, String>,
    ratings: Vec<(String, Rating)>,
    judgments: Vec<ResolvedJudgment>,
}

struct Inner {
    registry: Registry,
    config: ServiceConfig,
    store: Store,
    sessions: Mutex<IndexMap<String, Arc<tokio::sync::Mutex<SessionEntry>>>>,
    index: Mutex<RatingIndex>,
    cache: Mutex<Option<HumanEvalTables>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Chat turns rebuilt from stored utterances. User turns take the mode of
/// the reply that followed them.
fn rebuild_turns(stored: &[StoredTurn]) -> Vec<Turn> {
    let mut turns = Vec::with_capacity(stored.len());
    for pair in stored.chunks(2) {
        let [user, system] = pair else { break };
        let state = system.state.clone().unwrap_or(PivotState::Odd(String::new()));
        let mode = state.mode();
        turns.push(Turn::user(user.text.clone(), mode));
        let mut t = Turn::system(system.text.clone(), mode);
        if let Some(r) = &system.response {
            t = t.with_delex(r.clone());
        }
        if let PivotState::Tod(belief) = &state {
            t = t.with_belief(belief.clone());
            if let Some(d) = belief.active_domain() {
                t = t.with_domain(d);
            }
        }
        turns.push(t);
    }
    turns
}

impl AppState {
    /// Opens the store and replays it.
    pub fn new(registry: Registry, config: ServiceConfig) -> ApiResult<Self> {
        let (store, records) = Store::open(config.store_path.as_deref())?;
        let mut sessions: IndexMap<String, SessionEntry> = IndexMap::new();
        let mut index = RatingIndex::default();
        for record in records {
            match record {
                Record::SessionCreated { session_id, model_name, goal_card, created_at } => {
                    index.model_of.insert(session_id.clone(), model_name.clone());
                    let entry = SessionEntry {
                        id: session_id.clone(),
                        model_name,
                        goal_card,
                        created_at,
                        status: SessionStatus::Open,
                        turns: Vec::new(),
                        chat: Session::new(session_id.clone()),
                        last_activity: created_at,
                        ratings: Vec::new(),
                    };
                    sessions.insert(session_id, entry);
                }
                Record::Exchange { session_id, at, user, system } => {
                    if let Some(e) = sessions.get_mut(&session_id) {
                        e.turns.push(user);
                        e.turns.push(system);
                        e.last_activity = at;
                    }
                }
                Record::StatusChanged { session_id, status, .. } => {
                    if let Some(e) = sessions.get_mut(&session_id) {
                        e.status = status;
                    }
                }
                Record::Rating(r) => {
                    if let Some(e) = sessions.get_mut(&r.session_id) {
                        e.status = SessionStatus::Rated;
                        e.ratings.push(r.clone());
                        index.ratings.push((e.model_name.clone(), r));
                    }
                }
                Record::Pairwise(j) => {
                    if let (Some(a), Some(b)) = (index.model_of.get(&j.dialog_a_id), index.model_of.get(&j.dialog_b_id))
                    {
                        let rj = ResolvedJudgment { model_a: a.clone(), model_b: b.clone(), judgment: j };
                        index.judgments.push(rj);
                    }
                }
            }
        }
        let sessions = sessions
            .into_iter()
            .map(|(id, mut e)| {
                e.chat.turns = rebuild_turns(&e.turns);
                (id, Arc::new(tokio::sync::Mutex::new(e)))
            })
            .collect();
        Ok(AppState(Arc::new(Inner {
            registry,
            config,
            store,
            sessions: Mutex::new(sessions),
            index: Mutex::new(index),
            cache: Mutex::new(None),
        })))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<SessionEntry>>> {
        let sessions = self.0.sessions.lock().expect("sessions lock");
        sessions.get(id).cloned().ok_or_else(|| ServiceError::NotFound(format!("unknown session `{id}`")))
    }

    /// Marks an open session ABANDONED once its idle period has passed.
    fn expire(&self, entry: &mut SessionEntry) -> ApiResult<()> {
        let Some(timeout) = self.0.config.idle_timeout else { return Ok(()) };
        let now = now_millis();
        if entry.status == SessionStatus::Open && now.saturating_sub(entry.last_activity) > timeout.as_millis() as u64 {
            let status = SessionStatus::Abandoned;
            self.0.store.append(&Record::StatusChanged { session_id: entry.id.clone(), at: now, status })?;
            entry.status = status;
        }
        Ok(())
    }

    /// Tables from the in-memory index, cached until the next submission.
    pub fn cached_tables(&self) -> HumanEvalTables {
        let mut cache = self.0.cache.lock().expect("cache lock");
        if let Some(t) = cache.as_ref() {
            return t.clone();
        }
        let index = self.0.index.lock().expect("index lock");
        let t = summarize(&index.ratings, &index.judgments, self.0.config.bootstrap_resamples, self.0.config.seed);
        *cache = Some(t.clone());
        t
    }

    /// Tables rebuilt from the raw record log.
    pub fn recomputed_tables(&self) -> ApiResult<HumanEvalTables> {
        let records = self.0.store.records()?;
        Ok(aggregate_records(&records, self.0.config.bootstrap_resamples, self.0.config.seed))
    }

    fn invalidate(&self) {
        *self.0.cache.lock().expect("cache lock") = None;
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(t)| t).map_err(|e| ServiceError::Validation(e.body_text()))
}

fn rater_id(field: Option<String>, headers: &HeaderMap) -> ApiResult<String> {
    field
        .or_else(|| headers.get(RATER_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ServiceError::Validation(format!("rater_id missing from body and `{RATER_HEADER}` header")))
}

fn likert(name: &str, value: i64) -> ApiResult<u8> {
    if (1..=5).contains(&value) {
        Ok(value as u8)
    } else {
        Err(ServiceError::Validation(format!("{name} must be an integer in 1..=5, got {value}")))
    }
}

#[derive(Deserialize)]
struct CreateSession {
    model_name: String,
}

async fn create_session(
    State(state): State<AppState>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let req = body(payload)?;
    let inner = &state.0;
    if !inner.registry.models.contains_key(&req.model_name) {
        return Err(ServiceError::NotFound(format!("unknown model `{}`", req.model_name)));
    }
    let mut sessions = inner.sessions.lock().expect("sessions lock");
    let n = sessions.len() as u64 + 1;
    let id = format!("s{n:06}");
    let goal_card = inner.registry.goals.sample(inner.config.seed, n);
    let created_at = now_millis();
    inner.store.append(&Record::SessionCreated {
        session_id: id.clone(),
        model_name: req.model_name.clone(),
        goal_card: goal_card.clone(),
        created_at,
    })?;
    inner.index.lock().expect("index lock").model_of.insert(id.clone(), req.model_name.clone());
    let entry = SessionEntry {
        id: id.clone(),
        model_name: req.model_name,
        goal_card,
        created_at,
        status: SessionStatus::Open,
        turns: Vec::new(),
        chat: Session::new(id.clone()),
        last_activity: created_at,
        ratings: Vec::new(),
    };
    let view = entry.view();
    sessions.insert(id, Arc::new(tokio::sync::Mutex::new(entry)));
    log::info!("session {} opened for model {}", view.id, view.model_name);
    Ok((StatusCode::CREATED, Json(json!({ "schema_version": SCHEMA_VERSION, "session": view }))))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let entry = state.session(&id)?;
    let mut entry = entry.lock().await;
    state.expire(&mut entry)?;
    Ok(Json(json!({ "schema_version": SCHEMA_VERSION, "session": entry.view() })))
}

#[derive(Deserialize)]
struct PostMessage {
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageReply {
    pub schema_version: u32,
    pub session_id: String,
    pub turn_index: usize,
    pub reply: String,
    pub trace: TurnTrace,
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<PostMessage>, JsonRejection>,
) -> ApiResult<Json<MessageReply>> {
    let entry = state.session(&id)?;
    let req = body(payload)?;
    // Held across generation so turns of one session run in arrival order.
    let mut entry = entry.lock().await;
    state.expire(&mut entry)?;
    if entry.status != SessionStatus::Open {
        return Err(ServiceError::Conflict(format!("session `{id}` is {:?}", entry.status)));
    }
    let model = state
        .0
        .registry
        .models
        .get(&entry.model_name)
        .cloned()
        .ok_or_else(|| ServiceError::NotFound(format!("model `{}` is no longer registered", entry.model_name)))?;
    let inner = state.0.clone();
    let mut chat = entry.chat.clone();
    let (chat, trace) = tokio::task::spawn_blocking(move || {
        let trace =
            chat_turn(&mut chat, &req.text, model.as_ref(), inner.registry.router.as_ref(), &inner.registry.detector);
        (chat, trace)
    })
    .await
    .map_err(|e| ServiceError::Internal(format!("generation task failed: {e}")))?;
    let trace = trace.map_err(|e| match e {
        PivotError::Precondition(m) => ServiceError::Validation(m),
        other => ServiceError::Internal(other.to_string()),
    })?;
    let user = StoredTurn {
        speaker: Speaker::User,
        text: trace.user.clone(),
        response: None,
        state: None,
        knowledge_kind: None,
        fallback_state: false,
    };
    let system = StoredTurn {
        speaker: Speaker::System,
        text: trace.display_response.clone(),
        response: Some(trace.response.clone()),
        state: Some(trace.state.clone()),
        knowledge_kind: Some(trace.knowledge.kind()),
        fallback_state: trace.fallback_state,
    };
    let at = now_millis();
    state.0.store.append(&Record::Exchange {
        session_id: id.clone(),
        at,
        user: user.clone(),
        system: system.clone(),
    })?;
    entry.turns.push(user);
    entry.turns.push(system);
    entry.chat = chat;
    entry.last_activity = at;
    if trace.fallback_state {
        log::debug!("session {id}: state fell back to detector");
    }
    Ok(Json(MessageReply {
        schema_version: SCHEMA_VERSION,
        session_id: id,
        turn_index: entry.turns.len() - 1,
        reply: trace.display_response.clone(),
        trace,
    }))
}

#[derive(Deserialize)]
struct PostRating {
    success: bool,
    appropriateness: i64,
    engagingness: i64,
    #[serde(default)]
    rater_id: Option<String>,
}

async fn post_rating(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    payload: Result<Json<PostRating>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let entry = state.session(&id)?;
    let req = body(payload)?;
    let rating = Rating {
        session_id: id.clone(),
        success: req.success,
        appropriateness: likert("appropriateness", req.appropriateness)?,
        engagingness: likert("engagingness", req.engagingness)?,
        rater_id: rater_id(req.rater_id, &headers)?,
    };
    let mut entry = entry.lock().await;
    state.expire(&mut entry)?;
    if entry.status == SessionStatus::Abandoned {
        return Err(ServiceError::Conflict(format!("session `{id}` was abandoned")));
    }
    if entry.ratings.iter().any(|r| r.rater_id == rating.rater_id) {
        return Err(ServiceError::Conflict(format!("rater `{}` already rated session `{id}`", rating.rater_id)));
    }
    let mut index = state.0.index.lock().expect("index lock");
    state.0.store.append(&Record::Rating(rating.clone()))?;
    index.ratings.push((entry.model_name.clone(), rating.clone()));
    drop(index);
    state.invalidate();
    entry.ratings.push(rating.clone());
    entry.status = SessionStatus::Rated;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "schema_version": SCHEMA_VERSION, "status": entry.status, "rating": rating })),
    ))
}

#[derive(Deserialize)]
struct PostPairwise {
    dialog_a_id: String,
    dialog_b_id: String,
    overall: Preference,
    a_appropriateness: i64,
    a_engagingness: i64,
    b_appropriateness: i64,
    b_engagingness: i64,
    #[serde(default)]
    rater_id: Option<String>,
}

async fn post_pairwise(
    State(state): State<AppState>,
    headers: HeaderMap,
    payload: Result<Json<PostPairwise>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let req = body(payload)?;
    if req.dialog_a_id == req.dialog_b_id {
        return Err(ServiceError::Validation("dialog_a_id and dialog_b_id must differ".into()));
    }
    let judgment = PairwiseJudgment {
        a_appropriateness: likert("a_appropriateness", req.a_appropriateness)?,
        a_engagingness: likert("a_engagingness", req.a_engagingness)?,
        b_appropriateness: likert("b_appropriateness", req.b_appropriateness)?,
        b_engagingness: likert("b_engagingness", req.b_engagingness)?,
        rater_id: rater_id(req.rater_id, &headers)?,
        dialog_a_id: req.dialog_a_id,
        dialog_b_id: req.dialog_b_id,
        overall: req.overall,
    };
    let mut index = state.0.index.lock().expect("index lock");
    let model = |id: &str| {
        index.model_of.get(id).cloned().ok_or_else(|| ServiceError::NotFound(format!("unknown session `{id}`")))
    };
    let (model_a, model_b) = (model(&judgment.dialog_a_id)?, model(&judgment.dialog_b_id)?);
    let same_pair = |j: &PairwiseJudgment| {
        let mut x = [j.dialog_a_id.as_str(), j.dialog_b_id.as_str()];
        let mut y = [judgment.dialog_a_id.as_str(), judgment.dialog_b_id.as_str()];
        x.sort_unstable();
        y.sort_unstable();
        x == y
    };
    if index.judgments.iter().any(|rj| rj.judgment.rater_id == judgment.rater_id && same_pair(&rj.judgment)) {
        return Err(ServiceError::Conflict(format!("rater `{}` already judged this pair", judgment.rater_id)));
    }
    state.0.store.append(&Record::Pairwise(judgment.clone()))?;
    index.judgments.push(ResolvedJudgment { model_a, model_b, judgment: judgment.clone() });
    drop(index);
    state.invalidate();
    Ok((StatusCode::CREATED, Json(json!({ "schema_version": SCHEMA_VERSION, "judgment": judgment }))))
}

#[derive(Deserialize)]
struct AggregateQuery {
    #[serde(default)]
    recompute: bool,
}

async fn get_aggregates(State(state): State<AppState>, Query(q): Query<AggregateQuery>) -> ApiResult<Json<Value>> {
    let (source, tables) = if q.recompute {
        let s = state.clone();
        let tables = tokio::task::spawn_blocking(move || s.recomputed_tables())
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))??;
        ("raw", tables)
    } else {
        let s = state.clone();
        (
            "cache",
            tokio::task::spawn_blocking(move || s.cached_tables())
                .await
                .map_err(|e| ServiceError::Internal(e.to_string()))?,
        )
    };
    Ok(Json(json!({ "schema_version": SCHEMA_VERSION, "source": source, "tables": tables })))
}

async fn list_models(State(state): State<AppState>) -> Json<Value> {
    let names: Vec<&String> = state.0.registry.models.keys().collect();
    Json(json!({ "schema_version": SCHEMA_VERSION, "models": names }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/rating", post(post_rating))
        .route("/pairwise", post(post_pairwise))
        .route("/aggregates", get(get_aggregates))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use chatfuse_core::corpus::DomainGoal;

    fn turn(speaker: Speaker, text: &str) -> StoredTurn {
        StoredTurn {
            speaker,
            text: text.into(),
            response: None,
            state: None,
            knowledge_kind: None,
            fallback_state: false,
        }
    }

    #[test]
    fn coverage_tracks_user_mentions_only() {
        let mut goal = GoalCard::default();
        goal.domains.insert(
            "train".into(),
            DomainGoal {
                informable: [
                    ("destination".to_string(), "norwich".to_string()),
                    ("day".to_string(), "friday".to_string()),
                ]
                .into(),
                requestable: vec![],
            },
        );
        let turns = [turn(Speaker::User, "a train to Norwich please"), turn(Speaker::System, "on friday?")];
        let cov = goal_coverage(&goal, &turns);
        assert!(cov["train.destination"]);
        assert!(!cov["train.day"]);
    }
}
