use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{encode_state, parse_state, HistoryWindow, PivotError, State, ToyPivot, DEFAULT_WINDOW_K};
use crate::backends::{Backend, GenRequest, SegmentTag};
use crate::corpus::{lexicalize, Mode, Turn};
use crate::intent::IntentDetector;
use crate::knowledge::{KnowledgeResult, KnowledgeRouter};

/// The two model calls of a turn.
pub trait PivotModel: Send + Sync {
    /// Raw state text; parsing happens in [`chat_turn`].
    fn predict_state(&self, history: &HistoryWindow) -> Result<String, PivotError>;

    fn generate_response(
        &self,
        history: &HistoryWindow,
        state: &State,
        knowledge: &KnowledgeResult,
    ) -> Result<String, PivotError>;
}

impl PivotModel for ToyPivot {
    fn predict_state(&self, history: &HistoryWindow) -> Result<String, PivotError> {
        Ok(self.predict_state_text(history))
    }

    fn generate_response(
        &self,
        history: &HistoryWindow,
        state: &State,
        knowledge: &KnowledgeResult,
    ) -> Result<String, PivotError> {
        Ok(self.generate_response_text(history, state, knowledge))
    }
}

/// Drives both calls through a [`Backend`]. State requests carry only
/// CONTEXT segments; response requests add STATE and KNOWLEDGE.
pub struct BackendPivot {
    backend: Arc<dyn Backend>,
    seed: u64,
}

impl BackendPivot {
    pub fn new(backend: Arc<dyn Backend>, seed: u64) -> Self {
        BackendPivot { backend, seed }
    }

    fn context(&self, history: &HistoryWindow, salt: u64) -> GenRequest {
        let seed = self.seed.wrapping_add((history.utterances.len() as u64) << 1 | salt);
        GenRequest::new(seed).context(history.utterances.iter().map(|(_, t)| t.as_str()))
    }
}

impl PivotModel for BackendPivot {
    fn predict_state(&self, history: &HistoryWindow) -> Result<String, PivotError> {
        Ok(self.backend.generate(&self.context(history, 0))?)
    }

    fn generate_response(
        &self,
        history: &HistoryWindow,
        state: &State,
        knowledge: &KnowledgeResult,
    ) -> Result<String, PivotError> {
        let request = self
            .context(history, 1)
            .segment(SegmentTag::State, encode_state(state))
            .segment(SegmentTag::Knowledge, knowledge.render());
        Ok(self.backend.generate(&request)?)
    }
}

/// Turns of one conversation; turns are processed strictly in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub turns: Vec<Turn>,
    pub window_k: usize,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Session { id: id.into(), turns: Vec::new(), window_k: DEFAULT_WINDOW_K }
    }
}

/// Everything produced by one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub user: String,
    pub raw_state: String,
    pub state: State,
    pub knowledge: KnowledgeResult,
    /// Model output; delexicalized for TOD states.
    pub response: String,
    /// `response` with placeholders filled from the top database record.
    pub display_response: String,
    pub fallback_state: bool,
    pub knowledge_error: Option<String>,
}

/// Predicts a state, routes it to knowledge, generates a response and
/// appends both utterances to the session. Unparseable state text falls back
/// to the detector's mode with an empty query. A failed knowledge lookup
/// proceeds with empty knowledge and is recorded in the trace.
pub fn chat_turn(
    session: &mut Session,
    user_utterance: &str,
    model: &dyn PivotModel,
    router: &dyn KnowledgeRouter,
    detector: &IntentDetector,
) -> Result<TurnTrace, PivotError> {
    let user_utterance = user_utterance.trim();
    if user_utterance.is_empty() {
        return Err(PivotError::Precondition("empty user utterance".into()));
    }
    let mut turns = session.turns.clone();
    turns.push(Turn::user(user_utterance, Mode::Odd));
    let history = HistoryWindow::from_turns(&turns, session.window_k)?;
    let raw_state = model.predict_state(&history)?;
    let (state, fallback_state) = match parse_state(&raw_state) {
        Ok(s) => (s, false),
        Err(_) => {
            let (mode, _) = detector.detect(user_utterance).map_err(|e| PivotError::Intent(e.to_string()))?;
            let s = match mode {
                Mode::Tod => State::Tod(Default::default()),
                Mode::Odd => State::Odd(String::new()),
            };
            (s, true)
        }
    };
    let (knowledge, knowledge_error) = match router.route(&state) {
        Ok(k) => (k, None),
        Err(e) => (KnowledgeResult::Empty, Some(e.to_string())),
    };
    let response = model.generate_response(&history, &state, &knowledge)?;
    // Counts left after entity filling are the number of matches.
    let display_response = match &knowledge {
        KnowledgeResult::DbState { top_record, db_match_count, .. } => {
            let filled = top_record.as_ref().map_or_else(|| response.clone(), |r| lexicalize(&response, r));
            filled.replace("[value_count]", &db_match_count.to_string())
        }
        _ => response.clone(),
    };
    let mode = state.mode();
    turns.last_mut().expect("user turn pushed").mode = mode;
    let mut system = Turn::system(display_response.clone(), mode).with_delex(response.clone());
    if let State::Tod(belief) = &state {
        system = system.with_belief(belief.clone());
        if let Some(d) = belief.active_domain() {
            system = system.with_domain(d);
        }
    }
    turns.push(system);
    session.turns = turns;
    Ok(TurnTrace {
        user: user_utterance.to_string(),
        raw_state,
        state,
        knowledge,
        response,
        display_response,
        fallback_state,
        knowledge_error,
    })
}

/// Appends one JSON line per trace.
pub fn append_traces(path: &Path, traces: &[TurnTrace]) -> Result<(), PivotError> {
    let io = |e: std::io::Error| PivotError::Io(format!("{}: {e}", path.display()));
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    for t in traces {
        writeln!(f, "{}", serde_json::to_string(t).expect("trace serializes")).map_err(io)?;
    }
    Ok(())
}
