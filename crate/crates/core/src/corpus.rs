//! Dialog data model, corpus ingestion, delexicalization, persistence and
//! Table-style corpus statistics.
//!
//! # On-disk format
//!
//! Fused corpora are stored as JSON Lines, one [`Dialog`] per line:
//!
//! ```json
//! {"id":"PMUL0001","source":"synthesized","goal_card":{...},
//!  "turns":[{"speaker":"user","text":"...","mode":"odd"},
//!           {"speaker":"system","text":"...","mode":"odd","is_transition":true},
//!           {"speaker":"user","text":"...","mode":"tod","domain":"train"},
//!           {"speaker":"system","text":"...","delex_text":"...","mode":"tod",
//!            "domain":"train","belief":{"train":{"destination":"norwich"}}}]}
//! ```
//!
//! Every turn must carry an explicit `mode`. Optional fields are omitted when
//! absent.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::knowledge::DBRecord;
use crate::text::{find_all_words, whitespace_len};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in dialog `{dialog}`: {message}")]
    Parse { dialog: String, message: String },
    #[error("dialog `{dialog}`: unknown slot `{domain}-{slot}`")]
    UnknownSlot { dialog: String, domain: String, slot: String },
    #[error("dialog `{dialog}`: {message}")]
    Validation { dialog: String, message: String },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

/// Dialog mode of a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Tod,
    Odd,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Tod => "tod",
            Mode::Odd => "odd",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tod" => Ok(Mode::Tod),
            "odd" => Ok(Mode::Odd),
            other => Err(format!("unknown dialog mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogSource {
    #[default]
    OriginalTod,
    Synthesized,
    Collected,
}

/// Canonical slot order used when serializing belief states. Slots not in the
/// table sort after it, alphabetically.
pub const CANONICAL_SLOT_ORDER: &[&str] = &[
    "name",
    "area",
    "pricerange",
    "type",
    "food",
    "stars",
    "parking",
    "internet",
    "departure",
    "destination",
    "department",
    "day",
    "leaveat",
    "arriveby",
    "book_people",
    "book_day",
    "book_stay",
    "book_time",
];

fn slot_rank(slot: &str) -> (usize, &str) {
    let rank = CANONICAL_SLOT_ORDER.iter().position(|s| *s == slot).unwrap_or(CANONICAL_SLOT_ORDER.len());
    (rank, slot)
}

/// The value that matches any database entry.
pub const DONTCARE: &str = "dontcare";

/// Accumulated `(domain, slot) -> value` constraints.
///
/// Domains keep insertion order (the most recently activated domain is last);
/// slots are reported in [`CANONICAL_SLOT_ORDER`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefState(IndexMap<String, BTreeMap<String, String>>);

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, domain: impl Into<String>, slot: impl Into<String>, value: impl Into<String>) {
        self.0.entry(domain.into()).or_default().insert(slot.into(), value.into());
    }

    pub fn with(mut self, domain: &str, slot: &str, value: &str) -> Self {
        self.set(domain, slot, value);
        self
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.0.get(domain)?.get(slot).map(String::as_str)
    }

    pub fn constraints(&self, domain: &str) -> Option<&BTreeMap<String, String>> {
        self.0.get(domain)
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// The most recently activated domain.
    pub fn active_domain(&self) -> Option<&str> {
        self.0.keys().last().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.values().all(BTreeMap::is_empty)
    }

    pub fn slot_count(&self) -> usize {
        self.0.values().map(BTreeMap::len).sum()
    }

    /// Slots of `domain` in canonical order.
    pub fn canonical_slots(&self, domain: &str) -> Vec<(&str, &str)> {
        let mut slots: Vec<(&str, &str)> =
            self.0.get(domain).map(|m| m.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect()).unwrap_or_default();
        slots.sort_by(|a, b| slot_rank(a.0).cmp(&slot_rank(b.0)));
        slots
    }

    /// Folds `update` into `self`; later values win. If `active` is given and
    /// present, that domain moves to the end of the domain order.
    pub fn merge(&mut self, update: &BeliefState, active: Option<&str>) {
        for (domain, slots) in &update.0 {
            let entry = self.0.entry(domain.clone()).or_default();
            for (slot, value) in slots {
                entry.insert(slot.clone(), value.clone());
            }
        }
        self.0.retain(|_, slots| !slots.is_empty());
        if let Some(active) = active {
            if let Some(slots) = self.0.shift_remove(active) {
                self.0.insert(active.to_string(), slots);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, String>)> {
        self.0.iter().map(|(d, s)| (d.as_str(), s))
    }
}

/// Per-domain information-seeking goal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    /// Informable constraints the offered entity must satisfy.
    #[serde(default)]
    pub informable: BTreeMap<String, String>,
    /// Attributes the user asks for.
    #[serde(default)]
    pub requestable: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalCard {
    pub domains: IndexMap<String, DomainGoal>,
}

impl GoalCard {
    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delex_text: Option<String>,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub belief: Option<BeliefState>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_transition: bool,
    /// Search query annotation for knowledge-grounded ODD system turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_query: Option<String>,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>, mode: Mode) -> Self {
        Turn {
            speaker,
            text: text.into(),
            delex_text: None,
            mode,
            domain: None,
            belief: None,
            is_transition: false,
            search_query: None,
        }
    }

    pub fn user(text: impl Into<String>, mode: Mode) -> Self {
        Self::new(Speaker::User, text, mode)
    }

    pub fn system(text: impl Into<String>, mode: Mode) -> Self {
        Self::new(Speaker::System, text, mode)
    }

    pub fn with_domain(mut self, domain: &str) -> Self {
        self.domain = Some(domain.to_string());
        self
    }

    pub fn with_belief(mut self, belief: BeliefState) -> Self {
        self.belief = Some(belief);
        self
    }

    pub fn with_delex(mut self, delex: impl Into<String>) -> Self {
        self.delex_text = Some(delex.into());
        self
    }

    pub fn with_search_query(mut self, query: impl Into<String>) -> Self {
        self.search_query = Some(query.into());
        self
    }

    pub fn transition(mut self) -> Self {
        self.is_transition = true;
        self
    }

    pub fn is_user(&self) -> bool {
        self.speaker == Speaker::User
    }

    pub fn is_system(&self) -> bool {
        self.speaker == Speaker::System
    }

    /// Delexicalized text when available, otherwise the surface text.
    pub fn response_text(&self) -> &str {
        self.delex_text.as_deref().unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    #[serde(default)]
    pub source: DialogSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_card: Option<GoalCard>,
    pub turns: Vec<Turn>,
}

pub type DialogSet = Vec<Dialog>;

impl Dialog {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Self {
        Dialog { id: id.into(), source: DialogSource::OriginalTod, goal_card: None, turns }
    }

    /// Checks speaker alternation and per-turn invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |message: String| CorpusError::Validation { dialog: self.id.clone(), message };
        if self.turns.is_empty() {
            return Err(fail("dialog has no turns".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::System };
            if turn.speaker != expected {
                return Err(fail(format!("turn {i}: speakers must alternate starting with user")));
            }
            if turn.is_transition && turn.speaker != Speaker::System {
                return Err(fail(format!("turn {i}: only system turns can be transitions")));
            }
            if turn.mode == Mode::Odd && turn.belief.is_some() {
                return Err(fail(format!("turn {i}: belief annotation on an ODD turn")));
            }
        }
        Ok(())
    }

    /// Number of user/system exchanges (a trailing user-only turn counts).
    pub fn n_turn_pairs(&self) -> usize {
        self.turns.len().div_ceil(2)
    }

    /// Distinct turn domains in order of first appearance.
    pub fn domains(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for d in self.turns.iter().filter_map(|t| t.domain.as_deref()) {
            if !seen.contains(&d) {
                seen.push(d);
            }
        }
        seen
    }

    /// Adjacent utterance pairs whose modes differ.
    pub fn mode_switches(&self) -> usize {
        self.turns.windows(2).filter(|w| w[0].mode != w[1].mode).count()
    }

    pub fn system_turn_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns.iter().enumerate().filter(|(_, t)| t.is_system()).map(|(i, _)| i)
    }
}

/// Valid `(domain, slot)` pairs with their admissible values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    pub slots: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

/// Maps MultiWOZ slot spellings onto the names used here
/// (`arriveBy` -> `arriveby`, `book people` -> `book_people`).
pub fn normalize_slot(slot: &str) -> String {
    let s = slot.trim().to_ascii_lowercase();
    let s = s.strip_prefix("semi-").unwrap_or(&s).to_string();
    if let Some(rest) = s.strip_prefix("book ").or_else(|| s.strip_prefix("book-")) {
        return format!("book_{}", rest.trim());
    }
    match s.as_str() {
        "price range" => "pricerange".into(),
        "arrive by" => "arriveby".into(),
        "leave at" => "leaveat".into(),
        _ => s.replace(' ', "_"),
    }
}

impl Ontology {
    /// Reads the MultiWOZ `ontology.json` layout:
    /// `{"train-destination": ["norwich", ...], "hotel-book people": [...]}`.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let raw = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(&raw)
            .map_err(|e| CorpusError::Parse { dialog: path.display().to_string(), message: e.to_string() })?;
        let mut onto = Ontology::default();
        for (key, values) in map {
            let (domain, slot) = key.split_once('-').ok_or_else(|| CorpusError::Parse {
                dialog: path.display().to_string(),
                message: format!("ontology key `{key}` is not of the form domain-slot"),
            })?;
            onto.insert(domain, &normalize_slot(slot), values.iter().map(|v| v.to_ascii_lowercase()));
        }
        Ok(onto)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut flat = BTreeMap::new();
        for (domain, slots) in &self.slots {
            for (slot, values) in slots {
                flat.insert(format!("{domain}-{slot}"), values.clone());
            }
        }
        let json = serde_json::to_string_pretty(&flat).expect("ontology serializes");
        fs::write(path, json).map_err(|e| CorpusError::io(path, e))
    }

    pub fn insert(&mut self, domain: &str, slot: &str, values: impl IntoIterator<Item = String>) {
        let entry = self.slots.entry(domain.to_string()).or_default().entry(slot.to_string()).or_default();
        for v in values {
            if !entry.contains(&v) {
                entry.push(v);
            }
        }
    }

    pub fn has_slot(&self, domain: &str, slot: &str) -> bool {
        self.slots.get(domain).is_some_and(|s| s.contains_key(slot))
    }

    pub fn values(&self, domain: &str, slot: &str) -> &[String] {
        self.slots.get(domain).and_then(|s| s.get(slot)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    /// Every `(domain, slot, value)` triple.
    pub fn triples(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.slots.iter().flat_map(|(d, slots)| {
            slots.iter().flat_map(move |(s, vals)| vals.iter().map(move |v| (d.as_str(), s.as_str(), v.as_str())))
        })
    }

    pub fn validate_belief(&self, dialog: &str, belief: &BeliefState) -> Result<(), CorpusError> {
        for (domain, slots) in belief.iter() {
            for (slot, value) in slots {
                if !self.has_slot(domain, slot) {
                    return Err(CorpusError::UnknownSlot {
                        dialog: dialog.to_string(),
                        domain: domain.to_string(),
                        slot: slot.clone(),
                    });
                }
                if value.trim().is_empty() {
                    return Err(CorpusError::Validation {
                        dialog: dialog.to_string(),
                        message: format!("empty value for `{domain}-{slot}`"),
                    });
                }
            }
        }
        Ok(())
    }
}

// --- placeholders -----------------------------------------------------------

/// Placeholder vocabulary: slots rendered with a domain prefix
/// (`[restaurant_phone]`) versus generic value placeholders (`[value_time]`).
pub const PLACEHOLDER_TABLE: &[(&str, &str)] = &[
    ("name", "[{domain}_name]"),
    ("trainid", "[train_id]"),
    ("id", "[{domain}_id]"),
    ("phone", "[{domain}_phone]"),
    ("address", "[{domain}_address]"),
    ("postcode", "[{domain}_postcode]"),
    ("reference", "[{domain}_reference]"),
    ("arriveby", "[value_time]"),
    ("leaveat", "[value_time]"),
    ("book_time", "[value_time]"),
    ("departure", "[value_place]"),
    ("destination", "[value_place]"),
    ("day", "[value_day]"),
    ("book_day", "[value_day]"),
    ("area", "[value_area]"),
    ("food", "[value_food]"),
    ("pricerange", "[value_pricerange]"),
    ("price", "[value_price]"),
    ("type", "[value_type]"),
    ("stars", "[value_count]"),
    ("book_people", "[value_count]"),
    ("book_stay", "[value_count]"),
    ("duration", "[value_count]"),
    ("choice", "[value_count]"),
];

/// Placeholder token for `slot` in `domain`.
pub fn placeholder(domain: &str, slot: &str) -> String {
    match PLACEHOLDER_TABLE.iter().find(|(s, _)| *s == slot) {
        Some((_, pattern)) => pattern.replace("{domain}", domain),
        None => format!("[value_{slot}]"),
    }
}

/// Placeholders that name the offered entity of a domain.
pub fn entity_placeholders(domain: &str) -> Vec<String> {
    let mut out = vec![placeholder(domain, "name")];
    if domain == "train" {
        out.push(placeholder(domain, "trainid"));
    } else {
        out.push(placeholder(domain, "id"));
    }
    out
}

/// Replaces every mention of one of `entity`'s attribute values with its
/// placeholder. Matching is case-insensitive, word-boundary anchored and
/// longest-value-first; existing placeholders are never touched, which makes
/// the operation idempotent.
pub fn delexicalize(text: &str, entity: &DBRecord) -> String {
    let mut values: Vec<(&str, String)> = entity
        .attributes
        .iter()
        .filter(|(_, v)| !v.trim().is_empty() && v.as_str() != DONTCARE)
        .map(|(slot, v)| (v.trim(), placeholder(&entity.domain, slot)))
        .collect();
    values.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)));

    let mut taken: Vec<(usize, usize, &str)> = Vec::new();
    for (value, ph) in &values {
        for start in find_all_words(text, value) {
            let end = start + value.len();
            if taken.iter().all(|&(a, b, _)| end <= a || start >= b) {
                taken.push((start, end, ph.as_str()));
            }
        }
    }
    taken.sort_by_key(|t| t.0);
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for (start, end, ph) in taken {
        out.push_str(&text[cursor..start]);
        out.push_str(ph);
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Fills placeholders in a delexicalized response from `entity`.
pub fn lexicalize(text: &str, entity: &DBRecord) -> String {
    let mut out = text.to_string();
    for (slot, value) in &entity.attributes {
        let ph = placeholder(&entity.domain, slot);
        if out.contains(&ph) {
            out = out.replacen(&ph, value, 1);
        }
    }
    out
}

// --- ingestion ----------------------------------------------------------------

fn parse_error(dialog: &str, message: impl fmt::Display) -> CorpusError {
    CorpusError::Parse { dialog: dialog.to_string(), message: message.to_string() }
}

fn read_jsonl(path: &Path) -> Result<DialogSet, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut dialogs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fallback = format!("{}:{}", path.display(), lineno + 1);
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_error(&fallback, e))?;
        let id = value.get("id").and_then(Value::as_str).map(str::to_string).unwrap_or(fallback);
        if let Some(turns) = value.get("turns").and_then(Value::as_array) {
            if let Some(i) = turns.iter().position(|t| t.get("mode").is_none()) {
                return Err(CorpusError::Validation { dialog: id, message: format!("turn {i} has no mode tag") });
            }
        }
        let dialog: Dialog = serde_json::from_value(value).map_err(|e| parse_error(&id, e))?;
        dialog.validate()?;
        dialogs.push(dialog);
    }
    Ok(dialogs)
}

/// Writes `dialogs` as JSON Lines.
pub fn save_corpus(dialogs: &[Dialog], path: &Path) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dialogs {
        let line = serde_json::to_string(d).expect("dialog serializes");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

/// Serializes `dialogs` to the JSONL byte representation used by [`save_corpus`].
pub fn to_jsonl(dialogs: &[Dialog]) -> String {
    let mut out = String::new();
    for d in dialogs {
        out.push_str(&serde_json::to_string(d).expect("dialog serializes"));
        out.push('\n');
    }
    out
}

/// Loads a fused JSONL corpus.
pub fn load_fused_corpus(path: &Path) -> Result<DialogSet, CorpusError> {
    read_jsonl(path)
}

/// Loads a task-oriented corpus, either in the JSONL dialog format or as a
/// MultiWOZ 2.1 `data.json` object. All turns are forced to TOD mode and every
/// belief slot is checked against `ontology`.
pub fn load_tod_corpus(path: &Path, ontology: &Ontology) -> Result<DialogSet, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let trimmed = raw.trim();
    let mut dialogs = if trimmed.is_empty() || trimmed == "[]" || trimmed == "{}" {
        Vec::new()
    } else {
        match serde_json::from_str::<Value>(trimmed) {
            Ok(Value::Object(map)) if map.values().any(|v| v.get("log").is_some()) => read_multiwoz(&map, ontology)?,
            _ => read_jsonl(path)?,
        }
    };
    for dialog in &mut dialogs {
        for turn in &mut dialog.turns {
            turn.mode = Mode::Tod;
            turn.is_transition = false;
            if let Some(belief) = &turn.belief {
                ontology.validate_belief(&dialog.id, belief)?;
            }
        }
        dialog.source = DialogSource::OriginalTod;
    }
    Ok(dialogs)
}

const MULTIWOZ_DOMAINS: &[&str] = &["attraction", "hospital", "hotel", "police", "restaurant", "taxi", "train"];

fn read_multiwoz(map: &serde_json::Map<String, Value>, ontology: &Ontology) -> Result<DialogSet, CorpusError> {
    let mut dialogs = Vec::with_capacity(map.len());
    for (raw_id, body) in map {
        let id = raw_id.trim_end_matches(".json").to_string();
        let log = body.get("log").and_then(Value::as_array).ok_or_else(|| parse_error(&id, "missing `log`"))?;
        let mut turns = Vec::with_capacity(log.len());
        let mut current_domain: Option<String> = None;
        let mut previous = BeliefState::new();
        for (i, entry) in log.iter().enumerate() {
            let text = entry
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| parse_error(&id, format!("turn {i} has no text")))?;
            let speaker = if i % 2 == 0 { Speaker::User } else { Speaker::System };
            let mut turn = Turn::new(speaker, text.trim(), Mode::Tod);
            if let Some(acts) = entry.get("dialog_act").and_then(Value::as_object) {
                if let Some(d) = acts
                    .keys()
                    .filter_map(|k| k.split('-').next())
                    .map(str::to_ascii_lowercase)
                    .find(|d| MULTIWOZ_DOMAINS.contains(&d.as_str()))
                {
                    current_domain = Some(d);
                }
            }
            if speaker == Speaker::System {
                let metadata = entry.get("metadata").and_then(Value::as_object);
                let belief = metadata.map(|m| multiwoz_belief(m, ontology)).unwrap_or_default();
                if current_domain.is_none() {
                    current_domain =
                        belief.domains().find(|d| previous.constraints(d) != belief.constraints(d)).map(str::to_string);
                }
                previous = belief.clone();
                turn.belief = Some(belief);
            }
            turn.domain = current_domain.clone();
            turns.push(turn);
        }
        // Label the user turn with the domain of the system reply when acts were missing.
        for i in (0..turns.len()).step_by(2) {
            if let Some(next) = turns.get(i + 1).and_then(|t| t.domain.clone()) {
                turns[i].domain.get_or_insert(next);
            }
        }
        let goal_card = body.get("goal").and_then(Value::as_object).map(multiwoz_goal);
        let dialog = Dialog { id, source: DialogSource::OriginalTod, goal_card, turns };
        dialog.validate()?;
        dialogs.push(dialog);
    }
    Ok(dialogs)
}

fn multiwoz_belief(metadata: &serde_json::Map<String, Value>, ontology: &Ontology) -> BeliefState {
    let mut belief = BeliefState::new();
    for (domain, body) in metadata {
        let mut push = |slot: String, value: &str| {
            let value = value.trim().to_ascii_lowercase();
            if value.is_empty() || value == "not mentioned" || value == "none" {
                return;
            }
            let value = if value == "dont care" || value == "don't care" { DONTCARE.to_string() } else { value };
            if ontology.slots.is_empty() || ontology.has_slot(domain, &slot) || !slot.starts_with("book_") {
                belief.set(domain.as_str(), slot, value);
            }
        };
        if let Some(semi) = body.get("semi").and_then(Value::as_object) {
            for (slot, v) in semi {
                if let Some(v) = v.as_str() {
                    push(normalize_slot(slot), v);
                }
            }
        }
        if let Some(book) = body.get("book").and_then(Value::as_object) {
            for (slot, v) in book {
                if let Some(v) = v.as_str() {
                    push(format!("book_{}", normalize_slot(slot)), v);
                }
            }
        }
    }
    belief
}

fn multiwoz_goal(goal: &serde_json::Map<String, Value>) -> GoalCard {
    let mut card = GoalCard::default();
    for domain in MULTIWOZ_DOMAINS {
        let Some(body) = goal.get(*domain).and_then(Value::as_object) else { continue };
        if body.is_empty() {
            continue;
        }
        let mut dg = DomainGoal::default();
        if let Some(info) = body.get("info").and_then(Value::as_object) {
            for (slot, v) in info {
                if let Some(v) = v.as_str() {
                    dg.informable.insert(normalize_slot(slot), v.to_ascii_lowercase());
                }
            }
        }
        if let Some(reqt) = body.get("reqt").and_then(Value::as_array) {
            dg.requestable = reqt.iter().filter_map(Value::as_str).map(normalize_slot).collect();
        }
        card.domains.insert(domain.to_string(), dg);
    }
    card
}

// --- statistics ---------------------------------------------------------------

/// Per-split corpus statistics.
///
/// A "turn" is one user/system exchange whose mode is that of its user
/// utterance; utterance lengths are whitespace token counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_dialogs: usize,
    pub total_mode_switches: usize,
    pub avg_mode_switch: f64,
    pub total_odd_turns: usize,
    pub total_tod_turns: usize,
    pub avg_odd_turns_per_dialog: f64,
    pub avg_tod_turns_per_dialog: f64,
    pub odd_utterances: usize,
    pub tod_utterances: usize,
    pub odd_tokens: usize,
    pub tod_tokens: usize,
    pub avg_odd_utterance_length_tokens: f64,
    pub avg_tod_utterance_length_tokens: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_stats(dialogs: &[Dialog]) -> Result<CorpusStats, CorpusError> {
    let mut s = CorpusStats { n_dialogs: dialogs.len(), ..Default::default() };
    for d in dialogs {
        d.validate()?;
        s.total_mode_switches += d.mode_switches();
        for pair in d.turns.chunks(2) {
            match pair[0].mode {
                Mode::Odd => s.total_odd_turns += 1,
                Mode::Tod => s.total_tod_turns += 1,
            }
        }
        for t in &d.turns {
            let len = whitespace_len(&t.text);
            match t.mode {
                Mode::Odd => {
                    s.odd_utterances += 1;
                    s.odd_tokens += len;
                }
                Mode::Tod => {
                    s.tod_utterances += 1;
                    s.tod_tokens += len;
                }
            }
        }
    }
    s.avg_mode_switch = ratio(s.total_mode_switches, s.n_dialogs);
    s.avg_odd_turns_per_dialog = ratio(s.total_odd_turns, s.n_dialogs);
    s.avg_tod_turns_per_dialog = ratio(s.total_tod_turns, s.n_dialogs);
    s.avg_odd_utterance_length_tokens = ratio(s.odd_tokens, s.odd_utterances);
    s.avg_tod_utterance_length_tokens = ratio(s.tod_tokens, s.tod_utterances);
    Ok(s)
}

impl CorpusStats {
    pub const HEADER: &'static str =
        "Split | Avg. mode switch | Total ODD turn | Total TOD turn | Avg. ODD turn | Avg. TOD turn | Avg. ODD length | Avg. TOD length";

    /// One table row, averages rounded to two decimals.
    pub fn table_row(&self, split: &str) -> String {
        format!(
            "{split} | {:.2} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2}",
            self.avg_mode_switch,
            self.total_odd_turns,
            self.total_tod_turns,
            self.avg_odd_turns_per_dialog,
            self.avg_tod_turns_per_dialog,
            self.avg_odd_utterance_length_tokens,
            self.avg_tod_utterance_length_tokens
        )
    }
}
