//! Generation backends.
//!
//! A [`Backend`] turns a tagged conditioning request into one utterance. Three
//! families exist: scripted stubs for deterministic tests, a JSON-over-HTTP
//! adapter for externally hosted models, and [`toy::ToyModel`], a small
//! conditional sequence model trained in-process.

mod registry;
mod remote;
mod stub;
pub mod toy;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use registry::{BackendConfig, BackendDescriptor, BackendKind, BackendRegistry, RegistryFile};
pub use remote::RemoteBackend;
pub use stub::{RecordingBackend, ScriptedStub, TemplateStub};
pub use toy::{LocalToyBackend, ToyConfig, ToyModel, TrainConfig, TrainReport, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SegmentTag {
    Context,
    Goal,
    State,
    Knowledge,
    Persona,
}

impl SegmentTag {
    pub const ALL: [SegmentTag; 5] =
        [SegmentTag::Context, SegmentTag::Goal, SegmentTag::State, SegmentTag::Knowledge, SegmentTag::Persona];

    /// Marker token placed before the segment text by token-level backends.
    pub fn marker(self) -> &'static str {
        match self {
            SegmentTag::Context => "<context>",
            SegmentTag::Goal => "<goal>",
            SegmentTag::State => "<state>",
            SegmentTag::Knowledge => "<knowledge>",
            SegmentTag::Persona => "<persona>",
        }
    }
}

impl fmt::Display for SegmentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SegmentTag::Context => "CONTEXT",
            SegmentTag::Goal => "GOAL",
            SegmentTag::State => "STATE",
            SegmentTag::Knowledge => "KNOWLEDGE",
            SegmentTag::Persona => "PERSONA",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub tag: SegmentTag,
    pub text: String,
}

impl Segment {
    pub fn new(tag: SegmentTag, text: impl Into<String>) -> Self {
        Segment { tag, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenRequest {
    pub segments: Vec<Segment>,
    pub max_tokens: usize,
    pub seed: u64,
}

pub const DEFAULT_MAX_TOKENS: usize = 64;

impl GenRequest {
    pub fn new(seed: u64) -> Self {
        GenRequest { segments: Vec::new(), max_tokens: DEFAULT_MAX_TOKENS, seed }
    }

    pub fn segment(mut self, tag: SegmentTag, text: impl Into<String>) -> Self {
        self.segments.push(Segment::new(tag, text));
        self
    }

    pub fn context<I, S>(mut self, utterances: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        for u in utterances {
            self.segments.push(Segment::new(SegmentTag::Context, u));
        }
        self
    }

    pub fn first(&self, tag: SegmentTag) -> Option<&str> {
        self.segments.iter().find(|s| s.tag == tag).map(|s| s.text.as_str())
    }

    pub fn last(&self, tag: SegmentTag) -> Option<&str> {
        self.segments.iter().rev().find(|s| s.tag == tag).map(|s| s.text.as_str())
    }

    pub fn count(&self, tag: SegmentTag) -> usize {
        self.segments.iter().filter(|s| s.tag == tag).count()
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.segments.is_empty() {
            return Err(BackendError::InvalidRequest("request has no segments".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Transport(String),
    #[error("script exhausted after {0} calls")]
    ScriptExhausted(usize),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend produced an empty utterance")]
    EmptyOutput,
    #[error("remote backend error: {0}")]
    Remote(String),
    #[error("token `{token}` is not in the vocabulary")]
    VocabularyOverflow { token: String },
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no backend named `{0}`")]
    UnknownBackend(String),
    #[error("{0}")]
    Io(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// Produces one utterance for a conditioning request. Implementations must be
/// callable concurrently.
pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenRequest) -> Result<String, BackendError>;

    fn name(&self) -> &str {
        "backend"
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn generate(&self, request: &GenRequest) -> Result<String, BackendError> {
        (**self).generate(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn generate(&self, request: &GenRequest) -> Result<String, BackendError> {
        (**self).generate(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Rejects empty outputs uniformly across backends.
pub(crate) fn non_empty(text: String) -> Result<String, BackendError> {
    let text = text.trim().to_string();
    if text.is_empty() {
        Err(BackendError::EmptyOutput)
    } else {
        Ok(text)
    }
}
