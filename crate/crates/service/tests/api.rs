use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chatfuse_core::fixtures;
use chatfuse_core::knowledge::KnowledgeResult;
use chatfuse_core::pivot::{HistoryWindow, PivotError, PivotModel, State};
use chatfuse_service::{serve, AppState, GoalSampler, Registry, ServiceConfig};
use indexmap::IndexMap;
use serde_json::{json, Value};

/// Replies "<name>: <user text>" after a short delay. Mentions of trains and
/// Norwich select TOD and search states.
struct EchoModel(&'static str);

impl PivotModel for EchoModel {
    fn predict_state(&self, history: &HistoryWindow) -> Result<String, PivotError> {
        let current = history.current();
        Ok(if current.contains("train") {
            "tod: train destination=norwich".into()
        } else if current.contains("norwich") {
            "odd: norwich".into()
        } else {
            "odd:".into()
        })
    }

    fn generate_response(&self, history: &HistoryWindow, _: &State, _: &KnowledgeResult) -> Result<String, PivotError> {
        std::thread::sleep(Duration::from_millis(15));
        Ok(format!("{}: {}", self.0, history.current()))
    }
}

fn registry() -> Registry {
    let mut models: IndexMap<String, Arc<dyn PivotModel>> = IndexMap::new();
    models.insert("pivot".into(), Arc::new(EchoModel("pivot")));
    models.insert("task".into(), Arc::new(EchoModel("task")));
    Registry {
        models,
        router: Arc::new(fixtures::router()),
        detector: Arc::new(fixtures::intent_detector()),
        goals: GoalSampler::from_dialogs(&fixtures::tod_corpus(30, 2)).unwrap(),
    }
}

struct Server {
    base: String,
    agent: ureq::Agent,
    _rt: tokio::runtime::Runtime,
}

impl Server {
    fn start(config: ServiceConfig) -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let state = AppState::new(registry(), config).unwrap();
        rt.spawn(serve(listener, state));
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Server { base, agent, _rt: rt }
    }

    fn with_store(path: &Path) -> Self {
        Server::start(ServiceConfig {
            store_path: Some(path.to_path_buf()),
            bootstrap_resamples: 500,
            ..Default::default()
        })
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut r = self.agent.post(format!("{}{path}", self.base)).send_json(&body).unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn post_as(&self, path: &str, rater: &str, body: Value) -> (u16, Value) {
        let mut r =
            self.agent.post(format!("{}{path}", self.base)).header("x-rater-id", rater).send_json(&body).unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn open(&self, model: &str) -> String {
        let (status, body) = self.post("/sessions", json!({"model_name": model}));
        assert_eq!(status, 201, "{body}");
        body["session"]["id"].as_str().unwrap().to_string()
    }

    fn rate(&self, id: &str, rater: &str, success: bool, a: i64, e: i64) -> (u16, Value) {
        self.post(
            &format!("/sessions/{id}/rating"),
            json!({"success": success, "appropriateness": a, "engagingness": e, "rater_id": rater}),
        )
    }
}

fn memory() -> Server {
    Server::start(ServiceConfig { bootstrap_resamples: 500, ..Default::default() })
}

#[test]
fn session_lifecycle() {
    let s = memory();
    let (status, body) = s.post("/sessions", json!({"model_name": "pivot"}));
    assert_eq!(status, 201);
    assert_eq!(body["schema_version"], 1);
    let session = &body["session"];
    assert_eq!(session["status"], "OPEN");
    assert_eq!(session["goal_card"]["domains"].as_object().unwrap().len(), 1);
    let id = session["id"].as_str().unwrap();

    let (status, reply) = s.post(&format!("/sessions/{id}/messages"), json!({"text": "i need a train to norwich"}));
    assert_eq!(status, 200, "{reply}");
    assert_eq!(reply["reply"], "pivot: i need a train to norwich");
    assert_eq!(reply["turn_index"], 1);
    let (_, reply) = s.post(&format!("/sessions/{id}/messages"), json!({"text": "i love norwich"}));
    assert_eq!(reply["trace"]["knowledge"]["kind"], "SEARCH");

    let (_, got) = s.get(&format!("/sessions/{id}"));
    let turns = got["session"]["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 4);
    assert_eq!(turns[1]["state"]["mode"], "tod");
    assert_eq!(turns[1]["knowledge_kind"], "DB_STATE");
    assert_eq!(turns[3]["state"], json!({"mode": "odd", "query": "norwich"}));
    assert_eq!(turns[3]["knowledge_kind"], "SEARCH");
    assert!(turns.iter().skip(1).step_by(2).all(|t| t.get("state").is_some()));

    let (status, body) = s.rate(id, "r1", true, 4, 5);
    assert_eq!(status, 201, "{body}");
    assert_eq!(body["status"], "RATED");
    let (_, got) = s.get(&format!("/sessions/{id}"));
    assert_eq!(got["session"]["status"], "RATED");
    assert_eq!(got["session"]["ratings"][0]["appropriateness"], 4);
    assert_eq!(got["session"]["ratings"][0]["engagingness"], 5);

    let (status, body) = s.post(&format!("/sessions/{id}/messages"), json!({"text": "hello again"}));
    assert_eq!(status, 409);
    assert_eq!(body["code"], "conflict");
}

#[test]
fn unknown_model_and_session_are_not_found() {
    let s = memory();
    let (status, body) = s.post("/sessions", json!({"model_name": "nope"}));
    assert_eq!(status, 404);
    assert_eq!(body["code"], "not_found");
    assert!(body["message"].as_str().unwrap().contains("nope"));
    assert_eq!(s.get("/sessions/s999999").0, 404);
    assert_eq!(s.post("/sessions/s999999/messages", json!({"text": "hi"})).0, 404);
}

#[test]
fn malformed_bodies_are_validation_errors() {
    let s = memory();
    let (status, body) = s.post("/sessions", json!({"model": "pivot"}));
    assert_eq!(status, 422);
    assert_eq!(body["code"], "validation");
    let id = s.open("pivot");
    let (status, body) = s.post(&format!("/sessions/{id}/messages"), json!({"text": "   "}));
    assert_eq!((status, body["code"].as_str()), (422, Some("validation")));
}

#[test]
fn rating_validation_and_conflicts() {
    let s = memory();
    let id = s.open("task");
    for (a, e) in [(6, 3), (0, 3), (3, 6), (-1, 2)] {
        let (status, body) = s.rate(&id, "r1", true, a, e);
        assert_eq!(status, 422, "({a}, {e})");
        assert_eq!(body["code"], "validation");
    }
    let (status, _) =
        s.post(&format!("/sessions/{id}/rating"), json!({"success": true, "appropriateness": 3, "engagingness": 3}));
    assert_eq!(status, 422, "rater id is required");
    let (_, got) = s.get(&format!("/sessions/{id}"));
    assert_eq!(got["session"]["status"], "OPEN");

    let rating = json!({"success": false, "appropriateness": 3, "engagingness": 2});
    assert_eq!(s.post_as(&format!("/sessions/{id}/rating"), "r1", rating.clone()).0, 201);
    let (status, body) = s.post_as(&format!("/sessions/{id}/rating"), "r1", rating.clone());
    assert_eq!(status, 409);
    assert_eq!(body["code"], "conflict");
    assert_eq!(s.post_as(&format!("/sessions/{id}/rating"), "r2", rating).0, 201);
    let (_, got) = s.get(&format!("/sessions/{id}"));
    assert_eq!(got["session"]["ratings"].as_array().unwrap().len(), 2);
}

#[test]
fn concurrent_posts_to_one_session_are_serialized() {
    let s = Arc::new(memory());
    let id = s.open("pivot");
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let s = s.clone();
            let id = id.clone();
            std::thread::spawn(move || {
                s.post(&format!("/sessions/{id}/messages"), json!({"text": format!("message {i}")}))
            })
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().0, 200);
    }
    let (_, got) = s.get(&format!("/sessions/{id}"));
    let turns = got["session"]["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 16);
    for pair in turns.chunks(2) {
        assert_eq!(pair[0]["speaker"], "user");
        assert_eq!(pair[1]["speaker"], "system");
        assert_eq!(pair[1]["text"].as_str().unwrap(), format!("pivot: {}", pair[0]["text"].as_str().unwrap()));
    }
}

#[test]
fn independent_sessions_progress_concurrently() {
    let s = Arc::new(memory());
    let ids: Vec<String> = (0..4).map(|i| s.open(if i % 2 == 0 { "pivot" } else { "task" })).collect();
    let handles: Vec<_> = ids
        .iter()
        .cloned()
        .map(|id| {
            let s = s.clone();
            std::thread::spawn(move || {
                for k in 0..3 {
                    assert_eq!(
                        s.post(&format!("/sessions/{id}/messages"), json!({"text": format!("{id} {k}")})).0,
                        200
                    );
                }
            })
        })
        .collect();
    handles.into_iter().for_each(|h| h.join().unwrap());
    for id in &ids {
        let (_, got) = s.get(&format!("/sessions/{id}"));
        let texts: Vec<&str> = got["session"]["turns"]
            .as_array()
            .unwrap()
            .iter()
            .step_by(2)
            .map(|t| t["text"].as_str().unwrap())
            .collect();
        assert_eq!(texts, vec![format!("{id} 0"), format!("{id} 1"), format!("{id} 2")]);
    }
}

fn judge(s: &Server, a: &str, b: &str, overall: &str, rater: &str) -> (u16, Value) {
    s.post(
        "/pairwise",
        json!({
            "dialog_a_id": a, "dialog_b_id": b, "overall": overall,
            "a_appropriateness": 4, "a_engagingness": 5, "b_appropriateness": 3, "b_engagingness": 3,
            "rater_id": rater,
        }),
    )
}

#[test]
fn aggregates_match_recomputation_from_raw_log() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let s = Server::with_store(&path);
    let (status, body) = s.get("/aggregates");
    assert_eq!(status, 200);
    assert_eq!(body["tables"], json!({"models": {}, "pairwise": []}));

    let p1 = s.open("pivot");
    let p2 = s.open("pivot");
    let t1 = s.open("task");
    let t2 = s.open("task");
    assert_eq!(s.rate(&p1, "r1", true, 4, 3).0, 201);
    assert_eq!(s.rate(&p2, "r1", false, 5, 4).0, 201);
    assert_eq!(s.rate(&t1, "r2", true, 2, 2).0, 201);

    // pivot sits on side B in two judgments; the table orients pairs by name.
    assert_eq!(judge(&s, &p1, &t1, "A", "r1").0, 201);
    assert_eq!(judge(&s, &t2, &p2, "B", "r1").0, 201);
    assert_eq!(judge(&s, &p1, &t2, "TIE", "r1").0, 201);
    assert_eq!(judge(&s, &t1, &p2, "A", "r1").0, 201);

    let (_, cached) = s.get("/aggregates");
    let (_, raw) = s.get("/aggregates?recompute=true");
    assert_eq!(cached["source"], "cache");
    assert_eq!(raw["source"], "raw");
    assert_eq!(cached["tables"], raw["tables"]);

    let pivot = &cached["tables"]["models"]["pivot"];
    assert_eq!(pivot["n"], 2);
    assert_eq!(pivot["appropriateness"]["mean"], 4.5);
    assert!((pivot["appropriateness"]["std"].as_f64().unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    assert_eq!(pivot["success"]["mean"], 0.5);
    let row = &cached["tables"]["pairwise"][0];
    assert_eq!((row["model_a"].as_str(), row["model_b"].as_str()), (Some("pivot"), Some("task")));
    assert_eq!((row["win"].as_f64(), row["tie"].as_f64(), row["loss"].as_f64()), (Some(50.0), Some(25.0), Some(25.0)));
    let p = row["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
    assert_eq!(row["a_appropriateness"]["mean"], 3.5);

    // A restarted instance replays the same log into the same tables.
    drop(s);
    let s = Server::with_store(&path);
    let (_, replayed) = s.get("/aggregates");
    assert_eq!(replayed["tables"], raw["tables"]);
    assert_eq!(s.rate(&p1, "r1", true, 1, 1).0, 409);
}

#[test]
fn pairwise_validation() {
    let s = memory();
    let a = s.open("pivot");
    let b = s.open("task");
    assert_eq!(judge(&s, &a, &a, "A", "r").0, 422);
    assert_eq!(judge(&s, &a, "s424242", "A", "r").0, 404);
    assert_eq!(judge(&s, &a, &b, "BOTH", "r").0, 422);
    assert_eq!(judge(&s, &a, &b, "A", "r").0, 201);
    assert_eq!(judge(&s, &b, &a, "B", "r").0, 409);
    assert_eq!(judge(&s, &b, &a, "B", "other").0, 201);
    let mut bad = json!({
        "dialog_a_id": a, "dialog_b_id": b, "overall": "A",
        "a_appropriateness": 4, "a_engagingness": 5, "b_appropriateness": 6, "b_engagingness": 3,
        "rater_id": "z",
    });
    assert_eq!(s.post("/pairwise", bad.clone()).0, 422);
    bad["b_appropriateness"] = json!(3);
    bad.as_object_mut().unwrap().remove("rater_id");
    assert_eq!(s.post_as("/pairwise", "z", bad).0, 201);
}

#[test]
fn idle_sessions_are_abandoned() {
    let s = Server::start(ServiceConfig { idle_timeout: Some(Duration::from_millis(150)), ..Default::default() });
    let id = s.open("pivot");
    assert_eq!(s.post(&format!("/sessions/{id}/messages"), json!({"text": "hi"})).0, 200);
    std::thread::sleep(Duration::from_millis(300));
    let (_, got) = s.get(&format!("/sessions/{id}"));
    assert_eq!(got["session"]["status"], "ABANDONED");
    assert_eq!(s.post(&format!("/sessions/{id}/messages"), json!({"text": "still there?"})).0, 409);
    assert_eq!(s.rate(&id, "r", true, 3, 3).0, 409);
}

#[test]
fn restart_resumes_open_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let s = Server::with_store(&path);
    let id = s.open("task");
    s.post(&format!("/sessions/{id}/messages"), json!({"text": "first"}));
    let (_, before) = s.get(&format!("/sessions/{id}"));
    drop(s);

    let s = Server::with_store(&path);
    let (_, after) = s.get(&format!("/sessions/{id}"));
    assert_eq!(before, after);
    let (status, reply) = s.post(&format!("/sessions/{id}/messages"), json!({"text": "second"}));
    assert_eq!(status, 200);
    let history = reply["trace"]["response"].as_str().unwrap();
    assert_eq!(history, "task: second");
    assert_ne!(s.open("task"), id, "session ids continue after replay");
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    assert_eq!(lines, 4);
}
