use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{non_empty, Backend, BackendError, GenRequest, SegmentTag};

/// Replays a fixed script, one entry per call. The call index advances
/// atomically, so output depends only on (script, call index).
#[derive(Debug)]
pub struct ScriptedStub {
    name: String,
    script: Vec<String>,
    cursor: AtomicUsize,
    cycle: bool,
}

impl ScriptedStub {
    pub fn new<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        ScriptedStub {
            name: "scripted".into(),
            script: script.into_iter().map(Into::into).collect(),
            cursor: AtomicUsize::new(0),
            cycle: false,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    /// Restart from the first entry instead of failing when exhausted.
    pub fn cycling(mut self) -> Self {
        self.cycle = true;
        self
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedStub {
    fn generate(&self, request: &GenRequest) -> Result<String, BackendError> {
        request.validate()?;
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        let line = if self.cycle && !self.script.is_empty() {
            self.script.get(i % self.script.len())
        } else {
            self.script.get(i)
        };
        match line {
            Some(text) => non_empty(text.clone()),
            None => Err(BackendError::ScriptExhausted(self.script.len())),
        }
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Pure function of the request: picks `templates[(seed + #CONTEXT) % len]`
/// and substitutes `{goal}`, `{persona}`, `{last}` and `{knowledge}` with the
/// matching segments (`{last}` is the final CONTEXT segment). Useful when a
/// stub is shared across threads and call order is not fixed.
#[derive(Debug, Clone)]
pub struct TemplateStub {
    name: String,
    templates: Vec<String>,
}

impl TemplateStub {
    pub fn new<S: Into<String>>(templates: impl IntoIterator<Item = S>) -> Self {
        TemplateStub { name: "template".into(), templates: templates.into_iter().map(Into::into).collect() }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }
}

impl Backend for TemplateStub {
    fn generate(&self, request: &GenRequest) -> Result<String, BackendError> {
        request.validate()?;
        if self.templates.is_empty() {
            return Err(BackendError::ScriptExhausted(0));
        }
        let n = self.templates.len() as u64;
        let idx = (request.seed.wrapping_add(request.count(SegmentTag::Context) as u64) % n) as usize;
        let text = self.templates[idx]
            .replace("{goal}", request.first(SegmentTag::Goal).unwrap_or(""))
            .replace("{persona}", request.first(SegmentTag::Persona).unwrap_or(""))
            .replace("{knowledge}", request.first(SegmentTag::Knowledge).unwrap_or(""))
            .replace("{state}", request.first(SegmentTag::State).unwrap_or(""))
            .replace("{last}", request.last(SegmentTag::Context).unwrap_or(""));
        non_empty(crate::text::normalize_ws(&text))
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Wraps another backend and records every request it sees.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<GenRequest>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<GenRequest> {
        self.log.lock().expect("recording lock").clone()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn generate(&self, request: &GenRequest) -> Result<String, BackendError> {
        self.log.lock().expect("recording lock").push(request.clone());
        self.inner.generate(request)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}
