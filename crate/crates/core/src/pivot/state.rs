//! The `m:q` state codec.
//!
//! ```text
//! odd:                                   ODD, no external knowledge
//! odd: norwich cathedral                 ODD with a search query
//! tod:                                   TOD, empty belief
//! tod: train destination=norwich day=thursday | hotel area=centre
//! ```
//!
//! Domains are separated by `|`; within a domain the first token is the domain
//! name, a token containing `=` starts a slot and bare tokens extend the
//! current value. Slots are written in canonical order.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BeliefState, Mode};
use crate::text::normalize_ws;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "query", rename_all = "lowercase")]
pub enum State {
    Tod(BeliefState),
    Odd(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateParseError {
    #[error("missing `:` separator in state `{0}`")]
    MissingSeparator(String),
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("malformed belief state: {0}")]
    Belief(String),
}

impl State {
    pub fn mode(&self) -> Mode {
        match self {
            State::Tod(_) => Mode::Tod,
            State::Odd(_) => Mode::Odd,
        }
    }

    /// A state is valid if encoding it and parsing back is lossless.
    pub fn is_valid(&self) -> bool {
        match self {
            State::Odd(q) => normalize_ws(q) == *q,
            State::Tod(b) => b.iter().all(|(d, slots)| {
                is_name(d) && !slots.is_empty() && slots.iter().all(|(s, v)| is_name(s) && is_value(v))
            }),
        }
    }
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '=' || c == '|')
}

fn is_value(s: &str) -> bool {
    !s.is_empty() && normalize_ws(s) == s && !s.contains(['=', '|'])
}

pub fn encode_state(state: &State) -> String {
    match state {
        State::Odd(q) if q.is_empty() => "odd:".to_string(),
        State::Odd(q) => format!("odd: {q}"),
        State::Tod(b) if b.is_empty() => "tod:".to_string(),
        State::Tod(b) => format!("tod: {}", encode_belief(b)),
    }
}

/// `domain slot=value ...` groups joined by ` | `.
pub fn encode_belief(belief: &BeliefState) -> String {
    belief
        .domains()
        .filter(|d| belief.constraints(d).is_some_and(|c| !c.is_empty()))
        .map(|d| {
            let mut part = d.to_string();
            for (slot, value) in belief.canonical_slots(d) {
                part.push(' ');
                part.push_str(slot);
                part.push('=');
                part.push_str(value);
            }
            part
        })
        .collect::<Vec<_>>()
        .join(" | ")
}

pub fn parse_state(text: &str) -> Result<State, StateParseError> {
    let (mode, payload) = text.split_once(':').ok_or_else(|| StateParseError::MissingSeparator(text.to_string()))?;
    match mode.trim().to_ascii_lowercase().as_str() {
        "odd" => Ok(State::Odd(normalize_ws(payload))),
        "tod" => parse_belief(payload).map(State::Tod),
        other => Err(StateParseError::UnknownMode(other.to_string())),
    }
}

pub fn parse_belief(payload: &str) -> Result<BeliefState, StateParseError> {
    let mut belief = BeliefState::new();
    if payload.trim().is_empty() {
        return Ok(belief);
    }
    let fail = |m: String| Err(StateParseError::Belief(m));
    for group in payload.split('|') {
        let mut tokens = group.split_whitespace();
        let Some(domain) = tokens.next() else { return fail("empty domain group".into()) };
        if domain.contains('=') {
            return fail(format!("expected a domain name, found `{domain}`"));
        }
        if belief.constraints(domain).is_some() {
            return fail(format!("duplicate domain `{domain}`"));
        }
        let mut slots: Vec<(String, Vec<&str>)> = Vec::new();
        for tok in tokens {
            if let Some((slot, first)) = tok.split_once('=') {
                if slot.is_empty() {
                    return fail(format!("empty slot name in `{tok}`"));
                }
                if first.contains('=') {
                    return fail(format!("`=` inside value `{tok}`"));
                }
                if slots.iter().any(|(s, _)| s == slot) {
                    return fail(format!("duplicate slot `{domain}.{slot}`"));
                }
                slots.push((slot.to_string(), if first.is_empty() { vec![] } else { vec![first] }));
            } else {
                match slots.last_mut() {
                    Some((_, value)) => value.push(tok),
                    None => return fail(format!("value `{tok}` before any slot in `{domain}`")),
                }
            }
        }
        if slots.is_empty() {
            return fail(format!("domain `{domain}` has no slots"));
        }
        for (slot, value) in slots {
            if value.is_empty() {
                return fail(format!("empty value for `{domain}.{slot}`"));
            }
            belief.set(domain, slot, value.join(" "));
        }
    }
    Ok(belief)
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&encode_state(self))
    }
}
