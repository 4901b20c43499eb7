//! Enrichment of task-oriented dialogs with simulated open-domain snippets.
//!
//! Each insertion runs three stages:
//!
//! 1. initialization: a persona-conditioned opener (INITIAL) or a
//!    chatbot-proposed user turn that the intent detector must label ODD;
//! 2. simulation: system and user backends alternate until a user utterance
//!    mentions the goal value taken from the next TOD user turn, or the
//!    turn cap is reached;
//! 3. transition: a system turn conditioned on exactly the last ODD user
//!    utterance and the next TOD user utterance.
//!
//! The original TOD turns are never modified; snippets are only spliced in
//! between them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{Backend, BackendError, GenRequest, SegmentTag, DEFAULT_MAX_TOKENS};
use crate::corpus::{
    compute_stats, CorpusError, CorpusStats, Dialog, DialogSource, Mode, Ontology, Speaker, Turn, DONTCARE,
};
use crate::intent::IntentDetector;
use crate::knowledge::{web_search, KnowledgeResult, SearchProvider, DEFAULT_SNIPPET_LIMIT};
use crate::text::{contains_word, find_word};

/// Slots whose values may serve as goals.
pub const GOAL_SLOTS: [&str; 8] =
    ["name", "area", "pricerange", "type", "departure", "destination", "department", "day"];

/// First-person personas for INITIAL openers.
pub const DEFAULT_PERSONAS: &[&str] = &[
    "I love trying new cuisines.",
    "I am a history teacher and I collect old maps.",
    "I just moved here and I do not know anyone yet.",
    "I play the violin in a community orchestra.",
    "I am training for my first marathon.",
    "I have two dogs and a very lazy cat.",
    "I work night shifts at a hospital.",
    "I am saving up to travel around Europe.",
    "I grew up on a farm near the coast.",
    "I spend my weekends rowing on the river.",
    "I am studying architecture at university.",
    "I love old churches and cathedrals.",
    "I am a huge football fan.",
    "I bake bread every Sunday morning.",
    "I am learning to speak Italian.",
    "I volunteer at the local museum.",
    "I read at least one novel a week.",
    "I enjoy cycling through the countryside.",
    "I recently retired from teaching.",
    "I collect vinyl records from the seventies.",
    "I am allergic to cats but I still love them.",
    "I go to every jazz concert in town.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Setting {
    Initial,
    Transition,
    Multiple,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Initial, Setting::Transition, Setting::Multiple];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Initial => "INITIAL",
            Setting::Transition => "TRANSITION",
            Setting::Multiple => "MULTIPLE",
        }
    }

    pub fn default_max_odd_turns(self) -> usize {
        match self {
            Setting::Initial => 5,
            Setting::Transition | Setting::Multiple => 3,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "INITIAL" => Ok(Setting::Initial),
            "TRANSITION" => Ok(Setting::Transition),
            "MULTIPLE" => Ok(Setting::Multiple),
            other => Err(format!("unknown setting `{other}` (expected INITIAL, TRANSITION or MULTIPLE)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("no goal value in turn {turn}")]
    NoGoal { turn: usize },
    #[error("initial utterance at turn {turn} classified as TOD: `{utterance}`")]
    InitRejected { turn: usize, utterance: String },
    #[error("setting not applicable: {0}")]
    SettingInapplicable(String),
    #[error("backend failed at snippet turn {turn}: {source}")]
    Backend {
        turn: usize,
        #[source]
        source: BackendError,
    },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub value: String,
    pub slot: String,
    pub domain: String,
    pub source_turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub setting: Setting,
    /// Cap on user turns in one snippet, counting the initial utterance.
    pub max_odd_turns: usize,
    pub personas: Vec<String>,
    pub seed: u64,
    /// Contextual initialization tries this many candidates before rejecting.
    pub init_attempts: usize,
    /// Close MULTIPLE snippets with a transition turn rather than a plain
    /// system reply.
    pub multiple_transition: bool,
    /// Record the search query used to ground ODD system turns.
    pub annotate_search_queries: bool,
    pub snippet_limit: usize,
    /// Number of preceding utterances passed as CONTEXT.
    pub context_window: usize,
    pub max_tokens: usize,
}

impl SynthesisConfig {
    pub fn new(setting: Setting, seed: u64) -> Self {
        SynthesisConfig {
            setting,
            max_odd_turns: setting.default_max_odd_turns(),
            personas: DEFAULT_PERSONAS.iter().map(|s| s.to_string()).collect(),
            seed,
            init_attempts: 1,
            multiple_transition: true,
            annotate_search_queries: true,
            snippet_limit: DEFAULT_SNIPPET_LIMIT,
            context_window: 6,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.max_odd_turns == 0 {
            return Err(SynthesisError::Config("max_odd_turns must be at least 1".into()));
        }
        if self.setting == Setting::Initial && self.personas.is_empty() {
            return Err(SynthesisError::Config("INITIAL needs a nonempty persona set".into()));
        }
        if self.init_attempts == 0 {
            return Err(SynthesisError::Config("init_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Backends used by the pipeline.
#[derive(Clone)]
pub struct SynthesisBackends {
    /// Proposes opening user utterances.
    pub chat: Arc<dyn Backend>,
    /// Target-guided user simulator, conditioned on the goal.
    pub user: Arc<dyn Backend>,
    /// Knowledge-grounded system simulator.
    pub system: Arc<dyn Backend>,
    pub transition: Arc<dyn Backend>,
    pub search: Option<Arc<dyn SearchProvider>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddSnippet {
    pub turns: Vec<Turn>,
    pub goal: Goal,
    pub terminated_by_goal: bool,
    pub transition_turn: Option<Turn>,
}

impl OddSnippet {
    pub fn user_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.is_user()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Accepted { goal: Goal, user_turns: usize, terminated_by_goal: bool },
    NoGoal,
    InitRejected { utterance: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionAttempt {
    /// Index in the source dialog of the TOD user turn the snippet precedes.
    pub boundary: usize,
    #[serde(flatten)]
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisTrace {
    pub dialog_id: String,
    pub setting: Setting,
    pub dialog_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<String>,
    pub attempts: Vec<InsertionAttempt>,
}

impl SynthesisTrace {
    pub fn accepted(&self) -> usize {
        self.attempts.iter().filter(|a| matches!(a.outcome, AttemptOutcome::Accepted { .. })).count()
    }
}

/// Derives the per-dialog seed from the corpus seed and dialog id.
pub fn dialog_seed(corpus_seed: u64, dialog_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(corpus_seed.to_le_bytes());
    h.update(dialog_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

/// Picks the goal value mentioned in the user turn at `boundary`.
///
/// Candidates are ontology values of [`GOAL_SLOTS`] found as whole words.
/// Ties are broken by: earliest position, longest value, agreement with the
/// belief of the following system turn, agreement with the turn's domain,
/// then slot order.
type GoalRank = (usize, std::cmp::Reverse<usize>, bool, bool, usize);

pub fn extract_goal(tod: &Dialog, boundary: usize, ontology: &Ontology) -> Result<Goal, SynthesisError> {
    let turn =
        tod.turns.get(boundary).ok_or_else(|| SynthesisError::Precondition(format!("turn {boundary} out of range")))?;
    if turn.speaker != Speaker::User {
        return Err(SynthesisError::Precondition(format!("turn {boundary} is not a user turn")));
    }
    let next_belief = tod.turns.get(boundary + 1).and_then(|t| t.belief.as_ref());
    let mut best: Option<(GoalRank, Goal)> = None;
    for (domain, slot, value) in ontology.triples() {
        let Some(rank) = GOAL_SLOTS.iter().position(|s| *s == slot) else { continue };
        if value.len() < 2 || value == DONTCARE {
            continue;
        }
        let Some(pos) = find_word(&turn.text, value) else { continue };
        let in_belief = next_belief.and_then(|b| b.get(domain, slot)).is_some_and(|v| v.eq_ignore_ascii_case(value));
        let in_domain = turn.domain.as_deref() == Some(domain);
        let key = (pos, std::cmp::Reverse(value.len()), !in_belief, !in_domain, rank);
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((
                key,
                Goal {
                    value: value.to_string(),
                    slot: slot.to_string(),
                    domain: domain.to_string(),
                    source_turn_index: boundary,
                },
            ));
        }
    }
    best.map(|(_, g)| g).ok_or(SynthesisError::NoGoal { turn: boundary })
}

/// Request seeds for one dialog: the dialog seed plus a call counter.
struct Calls {
    seed: u64,
    n: u64,
}

impl Calls {
    fn next(&mut self) -> u64 {
        let s = self.seed.wrapping_add(self.n);
        self.n += 1;
        s
    }
}

fn context_request(context: &[&str], window: usize, seed: u64, max_tokens: usize) -> GenRequest {
    let start = context.len().saturating_sub(window);
    GenRequest { max_tokens, ..GenRequest::new(seed).context(context[start..].iter().copied()) }
}

/// Stage 1. INITIAL returns a persona-conditioned opener; the other settings
/// return a chatbot-proposed user turn that the detector labels ODD.
/// `context` is the dialog so far; `boundary` is used for error reporting.
pub fn initialize_odd(
    config: &SynthesisConfig,
    context: &[Turn],
    boundary: usize,
    chat: &dyn Backend,
    detector: &IntentDetector,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Turn>, Option<String>), SynthesisError> {
    let mut calls = Calls { seed: rng.gen(), n: 0 };
    let wrap = |source| SynthesisError::Backend { turn: 0, source };
    if config.setting == Setting::Initial {
        if boundary != 0 {
            return Err(SynthesisError::Precondition("INITIAL inserts at turn 0".into()));
        }
        let persona = config.personas[rng.gen_range(0..config.personas.len())].clone();
        let req = GenRequest { max_tokens: config.max_tokens, ..GenRequest::new(calls.next()) }
            .segment(SegmentTag::Persona, persona.clone());
        let text = chat.generate(&req).map_err(wrap)?;
        return Ok((vec![Turn::user(text, Mode::Odd)], Some(persona)));
    }
    if context.last().is_some_and(|t| t.speaker != Speaker::System) {
        return Err(SynthesisError::Precondition(format!("boundary {boundary} does not follow a system turn")));
    }
    let texts: Vec<&str> = context.iter().map(|t| t.text.as_str()).collect();
    let mut last = String::new();
    for _ in 0..config.init_attempts {
        let mut req = context_request(&texts, config.context_window, calls.next(), config.max_tokens);
        if req.segments.is_empty() {
            req = req.segment(SegmentTag::Context, "");
        }
        let text = chat.generate(&req).map_err(wrap)?;
        let (label, _) = detector
            .detect(&text)
            .map_err(|e| SynthesisError::Precondition(format!("detector rejected input: {e}")))?;
        if label == Mode::Odd {
            return Ok((vec![Turn::user(text, Mode::Odd)], None));
        }
        last = text;
    }
    Err(SynthesisError::InitRejected { turn: boundary, utterance: last })
}

/// Ontology value of a goal slot mentioned in `utterance`, used as the web
/// search query for the system reply.
fn search_query_for(utterance: &str, goal: &Goal, ontology: Option<&Ontology>) -> Option<String> {
    if contains_word(utterance, &goal.value) {
        return Some(goal.value.clone());
    }
    let onto = ontology?;
    let mut best: Option<(usize, std::cmp::Reverse<usize>, String)> = None;
    for (_, slot, value) in onto.triples() {
        if !GOAL_SLOTS.contains(&slot) || value.len() < 3 || value == DONTCARE {
            continue;
        }
        if let Some(pos) = find_word(utterance, value) {
            let key = (pos, std::cmp::Reverse(value.len()), value.to_string());
            if best.as_ref().is_none_or(|b| key < *b) {
                best = Some(key);
            }
        }
    }
    best.map(|(_, _, v)| v)
}

/// Per-call simulation inputs.
pub struct SimulationContext<'a> {
    pub config: &'a SynthesisConfig,
    pub backends: &'a SynthesisBackends,
    pub ontology: Option<&'a Ontology>,
    /// Utterances preceding the snippet.
    pub history: Vec<String>,
    pub seed: u64,
}

fn system_turn(
    ctx: &SimulationContext<'_>,
    turns: &[Turn],
    goal: &Goal,
    calls: &mut Calls,
) -> Result<Turn, SynthesisError> {
    let idx = turns.len();
    let all: Vec<&str> = ctx.history.iter().map(String::as_str).chain(turns.iter().map(|t| t.text.as_str())).collect();
    let mut req = context_request(&all, ctx.config.context_window, calls.next(), ctx.config.max_tokens);
    let last_user = turns.iter().rev().find(|t| t.is_user()).map(|t| t.text.as_str()).unwrap_or("");
    let query = search_query_for(last_user, goal, ctx.ontology);
    if let (Some(q), Some(search)) = (&query, &ctx.backends.search) {
        let k = web_search(q, search.as_ref(), ctx.config.snippet_limit).unwrap_or(KnowledgeResult::Empty).render();
        if !k.is_empty() {
            req = req.segment(SegmentTag::Knowledge, k);
        }
    }
    let text = ctx.backends.system.generate(&req).map_err(|source| SynthesisError::Backend { turn: idx, source })?;
    let mut t = Turn::system(text, Mode::Odd);
    if ctx.config.annotate_search_queries {
        t.search_query = query;
    }
    Ok(t)
}

/// Stage 2: alternate system and user turns until a user utterance mentions
/// the goal or `max_odd_turns` user turns exist. `seed_turns` may be empty, in
/// which case the user simulator opens.
pub fn simulate_odd(
    seed_turns: Vec<Turn>,
    goal: &Goal,
    ctx: &SimulationContext<'_>,
) -> Result<OddSnippet, SynthesisError> {
    let mut calls = Calls { seed: ctx.seed, n: 0 };
    let mut turns = seed_turns;
    let mentions = |turns: &[Turn]| turns.last().is_some_and(|t| t.is_user() && contains_word(&t.text, &goal.value));
    let mut users = turns.iter().filter(|t| t.is_user()).count();
    let mut done = mentions(&turns);
    while !done && users < ctx.config.max_odd_turns {
        if turns.last().is_some_and(Turn::is_user) {
            let sys = system_turn(ctx, &turns, goal, &mut calls)?;
            turns.push(sys);
        }
        let idx = turns.len();
        let all: Vec<&str> =
            ctx.history.iter().map(String::as_str).chain(turns.iter().map(|t| t.text.as_str())).collect();
        let mut req = context_request(&all, ctx.config.context_window, calls.next(), ctx.config.max_tokens)
            .segment(SegmentTag::Goal, goal.value.clone());
        if req.segments.len() == 1 {
            req.segments.insert(0, crate::backends::Segment::new(SegmentTag::Context, ""));
        }
        let text = ctx.backends.user.generate(&req).map_err(|source| SynthesisError::Backend { turn: idx, source })?;
        turns.push(Turn::user(text, Mode::Odd));
        users += 1;
        done = mentions(&turns);
    }
    Ok(OddSnippet { turns, goal: goal.clone(), terminated_by_goal: done, transition_turn: None })
}

/// Stage 3: a system turn bridging the last ODD user turn and the next TOD
/// user turn. The request carries exactly those two utterances.
pub fn generate_transition(
    last_odd_user: &Turn,
    next_tod_user: &Turn,
    backend: &dyn Backend,
    seed: u64,
) -> Result<Turn, SynthesisError> {
    if !last_odd_user.is_user() || !next_tod_user.is_user() {
        return Err(SynthesisError::Precondition("transition inputs must be user turns".into()));
    }
    if last_odd_user.text.trim().is_empty() || next_tod_user.text.trim().is_empty() {
        return Err(SynthesisError::Precondition("transition inputs must be nonempty".into()));
    }
    let req = GenRequest::new(seed)
        .segment(SegmentTag::Context, last_odd_user.text.clone())
        .segment(SegmentTag::Context, next_tod_user.text.clone());
    let text = backend.generate(&req).map_err(|source| SynthesisError::Backend { turn: 0, source })?;
    Ok(Turn::system(text, Mode::Odd).transition())
}

struct Inserter<'a> {
    config: &'a SynthesisConfig,
    backends: &'a SynthesisBackends,
    detector: &'a IntentDetector,
    ontology: &'a Ontology,
    rng: ChaCha8Rng,
    last: Option<AttemptOutcome>,
}

impl Inserter<'_> {
    /// Builds the snippet to place before `tod.turns[boundary]`, with `prefix`
    /// as the dialog so far.
    fn snippet(
        &mut self,
        tod: &Dialog,
        boundary: usize,
        prefix: &[Turn],
        persona: &mut Option<String>,
    ) -> Result<Vec<Turn>, SynthesisError> {
        let goal = extract_goal(tod, boundary, self.ontology)?;
        let (seed_turns, p) =
            initialize_odd(self.config, prefix, boundary, self.backends.chat.as_ref(), self.detector, &mut self.rng)?;
        if p.is_some() {
            *persona = p;
        }
        let ctx = SimulationContext {
            config: self.config,
            backends: self.backends,
            ontology: Some(self.ontology),
            history: prefix.iter().map(|t| t.text.clone()).collect(),
            seed: self.rng.gen(),
        };
        let mut snippet = simulate_odd(seed_turns, &goal, &ctx)?;
        let next = &tod.turns[boundary];
        let closing = if self.config.setting != Setting::Multiple || self.config.multiple_transition {
            let last_user = snippet.turns.iter().rev().find(|t| t.is_user()).expect("snippet has a user turn");
            generate_transition(last_user, next, self.backends.transition.as_ref(), self.rng.gen())?
        } else {
            let mut calls = Calls { seed: self.rng.gen(), n: 0 };
            system_turn(&ctx, &snippet.turns, &goal, &mut calls)?
        };
        snippet.transition_turn = Some(closing.clone());
        self.last = Some(AttemptOutcome::Accepted {
            goal,
            user_turns: snippet.user_turns(),
            terminated_by_goal: snippet.terminated_by_goal,
        });
        let mut out = snippet.turns;
        out.push(closing);
        Ok(out)
    }
}

/// Enriches one TOD dialog according to `config.setting`.
pub fn enrich(
    tod: &Dialog,
    config: &SynthesisConfig,
    backends: &SynthesisBackends,
    detector: &IntentDetector,
    ontology: &Ontology,
) -> Result<(Dialog, SynthesisTrace), SynthesisError> {
    config.validate()?;
    tod.validate()?;
    let seed = dialog_seed(config.seed, &tod.id);
    let mut ins = Inserter { config, backends, detector, ontology, rng: ChaCha8Rng::seed_from_u64(seed), last: None };
    let mut trace = SynthesisTrace {
        dialog_id: tod.id.clone(),
        setting: config.setting,
        dialog_seed: seed,
        persona: None,
        attempts: Vec::new(),
    };
    let mut persona = None;
    let turns = match config.setting {
        Setting::Initial => {
            let mut out = ins.snippet(tod, 0, &[], &mut persona)?;
            trace.attempts.push(InsertionAttempt { boundary: 0, outcome: ins.last.take().expect("accepted") });
            out.extend(tod.turns.iter().cloned());
            out
        }
        Setting::Transition => {
            let domains = tod.domains();
            if domains.len() < 2 {
                return Err(SynthesisError::SettingInapplicable(format!(
                    "dialog `{}` has {} domain(s)",
                    tod.id,
                    domains.len()
                )));
            }
            let second = domains[1];
            let boundary = tod
                .turns
                .iter()
                .enumerate()
                .position(|(i, t)| i > 0 && t.is_user() && t.domain.as_deref() == Some(second))
                .ok_or_else(|| SynthesisError::SettingInapplicable(format!("no user turn opens domain `{second}`")))?;
            let snippet = ins.snippet(tod, boundary, &tod.turns[..boundary], &mut persona)?;
            trace.attempts.push(InsertionAttempt { boundary, outcome: ins.last.take().expect("accepted") });
            let mut out = tod.turns[..boundary].to_vec();
            out.extend(snippet);
            out.extend(tod.turns[boundary..].iter().cloned());
            out
        }
        Setting::Multiple => {
            let mut out: Vec<Turn> = Vec::new();
            for (i, turn) in tod.turns.iter().enumerate() {
                out.push(turn.clone());
                if !turn.is_system() {
                    continue;
                }
                let boundary = i + 1;
                if boundary >= tod.turns.len() {
                    trace.attempts.push(InsertionAttempt { boundary, outcome: AttemptOutcome::NoGoal });
                    continue;
                }
                match ins.snippet(tod, boundary, &out, &mut persona) {
                    Ok(snippet) => {
                        trace.attempts.push(InsertionAttempt { boundary, outcome: ins.last.take().expect("accepted") });
                        out.extend(snippet);
                    }
                    Err(SynthesisError::NoGoal { .. }) => {
                        trace.attempts.push(InsertionAttempt { boundary, outcome: AttemptOutcome::NoGoal });
                    }
                    Err(SynthesisError::InitRejected { utterance, .. }) => {
                        trace
                            .attempts
                            .push(InsertionAttempt { boundary, outcome: AttemptOutcome::InitRejected { utterance } });
                    }
                    Err(e) => return Err(e),
                }
            }
            out
        }
    };
    trace.persona = persona;
    let fused =
        Dialog { id: tod.id.clone(), source: DialogSource::Synthesized, goal_card: tod.goal_card.clone(), turns };
    fused.validate()?;
    Ok((fused, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub dialog_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutput {
    pub dialogs: Vec<Dialog>,
    pub stats: CorpusStats,
    pub skipped: Vec<SkipEntry>,
    pub traces: Vec<SynthesisTrace>,
}

/// Runs [`enrich`] over every dialog on `workers` threads. Output order
/// follows input order; per-dialog failures go to the skip report.
pub fn synthesize_corpus(
    dialogs: &[Dialog],
    config: &SynthesisConfig,
    backends: &SynthesisBackends,
    detector: &IntentDetector,
    ontology: &Ontology,
    workers: usize,
) -> Result<SynthesisOutput, SynthesisError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SynthesisError::Config(e.to_string()))?;
    let results: Vec<Result<(Dialog, SynthesisTrace), SynthesisError>> =
        pool.install(|| dialogs.par_iter().map(|d| enrich(d, config, backends, detector, ontology)).collect());
    let mut out =
        SynthesisOutput { dialogs: Vec::new(), stats: CorpusStats::default(), skipped: Vec::new(), traces: Vec::new() };
    for (d, r) in dialogs.iter().zip(results) {
        match r {
            Ok((fused, trace)) => {
                out.dialogs.push(fused);
                out.traces.push(trace);
            }
            Err(e) => out.skipped.push(SkipEntry { dialog_id: d.id.clone(), reason: e.to_string() }),
        }
    }
    out.stats = compute_stats(&out.dialogs)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{RecordingBackend, ScriptedStub, TemplateStub};
    use crate::corpus::BeliefState;
    use crate::intent::{ConstantClassifier, KeywordClassifier};

    fn ontology() -> Ontology {
        let mut o = Ontology::default();
        for slot in ["departure", "destination"] {
            o.insert("train", slot, vec!["norwich".into(), "cambridge".into()]);
        }
        o.insert("train", "day", vec!["thursday".into()]);
        o.insert("restaurant", "area", vec!["centre".into()]);
        o
    }

    fn tod(text: &str) -> Dialog {
        Dialog::new(
            "t",
            vec![
                Turn::user(text, Mode::Tod).with_domain("train"),
                Turn::system("ok", Mode::Tod).with_domain("train").with_belief(BeliefState::new().with(
                    "train",
                    "destination",
                    "norwich",
                )),
            ],
        )
    }

    fn odd_detector() -> IntentDetector {
        IntentDetector::from_classifier(Arc::new(ConstantClassifier(0.9)))
    }

    fn backends(user: Arc<dyn Backend>) -> SynthesisBackends {
        SynthesisBackends {
            chat: Arc::new(TemplateStub::new(["I like {last} a lot", "hello there {persona}"])),
            user,
            system: Arc::new(TemplateStub::new(["tell me more"])),
            transition: Arc::new(TemplateStub::new(["speaking of that, {last}"])),
            search: None,
        }
    }

    #[test]
    fn goal_examples() {
        let o = ontology();
        let g = extract_goal(&tod("Can you find me one that will arrive in Norwich please?"), 0, &o).unwrap();
        assert_eq!((g.value.as_str(), g.slot.as_str()), ("norwich", "destination"));
        let g = extract_goal(&tod("in the centre on thursday"), 0, &o).unwrap();
        assert_eq!(g.value, "centre");
        assert!(matches!(extract_goal(&tod("Thanks, goodbye."), 0, &o), Err(SynthesisError::NoGoal { turn: 0 })));
        assert!(matches!(extract_goal(&tod("x"), 1, &o), Err(SynthesisError::Precondition(_))));
    }

    fn goal() -> Goal {
        Goal { value: "norwich".into(), slot: "destination".into(), domain: "train".into(), source_turn_index: 0 }
    }

    #[test]
    fn stop_rule_and_cap() {
        let cfg = SynthesisConfig { max_odd_turns: 3, ..SynthesisConfig::new(Setting::Transition, 0) };
        let b = backends(Arc::new(ScriptedStub::new(["norwich is lovely"])));
        let ctx = SimulationContext { config: &cfg, backends: &b, ontology: None, history: vec![], seed: 0 };
        let s = simulate_odd(vec![], &goal(), &ctx).unwrap();
        assert_eq!((s.user_turns(), s.terminated_by_goal), (1, true));

        let b = backends(Arc::new(ScriptedStub::new(["nice weather"]).cycling()));
        let ctx = SimulationContext { config: &cfg, backends: &b, ontology: None, history: vec![], seed: 0 };
        let s = simulate_odd(vec![], &goal(), &ctx).unwrap();
        assert_eq!((s.user_turns(), s.terminated_by_goal), (3, false));
        assert_eq!(s.turns.len(), 5);
    }

    #[test]
    fn transition_conditions_on_two_utterances() {
        let rec = RecordingBackend::new(ScriptedStub::new(["Norwich is a cathedral city. Shall we book?"]));
        let t = generate_transition(
            &Turn::user("I love norwich", Mode::Odd),
            &Turn::user("train to norwich", Mode::Tod),
            &rec,
            1,
        )
        .unwrap();
        assert!(t.is_transition && t.is_system() && t.mode == Mode::Odd);
        let reqs = rec.requests();
        assert_eq!(reqs[0].segments.len(), 2);
        assert!(reqs[0].segments.iter().all(|s| s.tag == SegmentTag::Context));
        assert!(generate_transition(&Turn::user("a", Mode::Odd), &Turn::user(" ", Mode::Tod), &rec, 1).is_err());
    }

    #[test]
    fn contextual_init_gate() {
        let cfg = SynthesisConfig::new(Setting::Transition, 0);
        let det = IntentDetector::from_classifier(Arc::new(KeywordClassifier { odd_markers: vec!["love".into()] }));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = [Turn::user("a", Mode::Tod), Turn::system("b", Mode::Tod)];
        let stub = ScriptedStub::new(["What time is my train?"]);
        assert!(matches!(
            initialize_odd(&cfg, &ctx, 2, &stub, &det, &mut rng),
            Err(SynthesisError::InitRejected { .. })
        ));
        let stub = ScriptedStub::new(["I love jazz"]);
        let (turns, _) = initialize_odd(&cfg, &ctx, 2, &stub, &det, &mut rng).unwrap();
        assert_eq!(turns[0].mode, Mode::Odd);
    }

    #[test]
    fn persona_sampling_is_seeded() {
        let cfg = SynthesisConfig::new(Setting::Initial, 0);
        let stub = TemplateStub::new(["{persona}"]);
        let pick = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            initialize_odd(&cfg, &[], 0, &stub, &odd_detector(), &mut rng).unwrap().1
        };
        assert_eq!(pick(4), pick(4));
    }

    #[test]
    fn initial_has_one_switch() {
        let b = backends(Arc::new(TemplateStub::new(["have you been to {goal}?"])));
        let cfg = SynthesisConfig::new(Setting::Initial, 1);
        let (d, trace) = enrich(&tod("a train to norwich"), &cfg, &b, &odd_detector(), &ontology()).unwrap();
        assert_eq!(d.mode_switches(), 1);
        assert!(d.turns[d.turns.len() - 3].is_transition);
        assert_eq!(trace.accepted(), 1);
        assert_eq!(&d.turns[d.turns.len() - 2..], &tod("a train to norwich").turns[..]);
    }
}
