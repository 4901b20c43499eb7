//! Fixed-length token layout for state and response prediction.
//!
//! ```text
//! STATE:    <task_state> <user> ... <system> ... <user> ...                    <pad>...
//! RESPONSE: <task_response> <user> ... <state> tod: ... <knowledge> ...       <pad>...
//! ```
//!
//! Inputs are exactly [`INPUT_LEN`] tokens. History keeps its most recent
//! [`HISTORY_MAX`] tokens; state and knowledge are cut from the right when
//! the budget runs out.

use serde::{Deserialize, Serialize};

use super::{encode_state, HistoryWindow, State, TrainingExample};
use crate::corpus::Speaker;
use crate::knowledge::KnowledgeResult;
use crate::text::Tokenizer;

pub const INPUT_LEN: usize = 512;
pub const HISTORY_MAX: usize = 256;

pub const TASK_STATE: &str = "<task_state>";
pub const TASK_RESPONSE: &str = "<task_response>";
pub const USER_MARK: &str = "<user>";
pub const SYSTEM_MARK: &str = "<system>";
pub const STATE_MARK: &str = "<state>";
pub const KNOWLEDGE_MARK: &str = "<knowledge>";
pub const PAD: &str = crate::backends::toy::PAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskTag {
    State,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedPair {
    pub task_tag: TaskTag,
    pub input_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub history_tokens: usize,
    pub history_truncated: bool,
    pub state_truncated: bool,
    pub knowledge_truncated: bool,
}

/// Speaker-marked history tokens, left-truncated to `HISTORY_MAX`.
fn history_tokens(tok: &Tokenizer, history: &HistoryWindow) -> (Vec<String>, bool) {
    let mut all = Vec::new();
    for (speaker, text) in &history.utterances {
        all.push(if *speaker == Speaker::User { USER_MARK } else { SYSTEM_MARK }.to_string());
        all.extend(tok.tokenize(text));
    }
    if all.len() > HISTORY_MAX {
        let cut = all.len() - HISTORY_MAX;
        (all.split_off(cut), true)
    } else {
        (all, false)
    }
}

fn finish(mut input: Vec<String>) -> Vec<String> {
    input.resize(INPUT_LEN, PAD.to_string());
    input
}

/// Input for state prediction: history only.
pub fn state_input(tok: &Tokenizer, history: &HistoryWindow) -> (Vec<String>, usize, bool) {
    let (hist, truncated) = history_tokens(tok, history);
    let n = hist.len();
    let mut input = vec![TASK_STATE.to_string()];
    input.extend(hist);
    (finish(input), n, truncated)
}

/// Input for response generation: history, state and knowledge.
/// Returns `(tokens, history_len, history_truncated, state_truncated, knowledge_truncated)`.
pub fn response_input(
    tok: &Tokenizer,
    history: &HistoryWindow,
    state: &State,
    knowledge: &KnowledgeResult,
) -> (Vec<String>, usize, bool, bool, bool) {
    let (hist, hist_truncated) = history_tokens(tok, history);
    let n = hist.len();
    let mut input = vec![TASK_RESPONSE.to_string()];
    input.extend(hist);
    let mut budget = INPUT_LEN - input.len();
    let mut state_toks = vec![STATE_MARK.to_string()];
    state_toks.extend(tok.tokenize(&encode_state(state)));
    let state_truncated = state_toks.len() > budget;
    state_toks.truncate(budget);
    budget -= state_toks.len();
    input.extend(state_toks);
    let mut know_toks = vec![KNOWLEDGE_MARK.to_string()];
    know_toks.extend(tok.tokenize(&knowledge.render()));
    let knowledge_truncated = know_toks.len() > budget;
    know_toks.truncate(budget);
    input.extend(know_toks);
    (finish(input), n, hist_truncated, state_truncated, knowledge_truncated)
}

pub fn serialize(example: &TrainingExample, task: TaskTag, tok: &Tokenizer) -> SerializedPair {
    match task {
        TaskTag::State => {
            let (input_tokens, history_tokens, history_truncated) = state_input(tok, &example.history);
            SerializedPair {
                task_tag: task,
                input_tokens,
                target_tokens: tok.tokenize(&encode_state(&example.state)),
                history_tokens,
                history_truncated,
                state_truncated: false,
                knowledge_truncated: false,
            }
        }
        TaskTag::Response => {
            let (input_tokens, history_tokens, history_truncated, state_truncated, knowledge_truncated) =
                response_input(tok, &example.history, &example.state, &example.knowledge);
            SerializedPair {
                task_tag: task,
                input_tokens,
                target_tokens: tok.tokenize(&example.response),
                history_tokens,
                history_truncated,
                state_truncated,
                knowledge_truncated,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BeliefState;

    fn example(history_words: usize, snippet_words: usize) -> TrainingExample {
        let words: Vec<String> = (0..history_words).map(|i| format!("w{i}")).collect();
        TrainingExample {
            dialog_id: "d".into(),
            turn_index: 1,
            history: HistoryWindow { utterances: vec![(Speaker::User, words.join(" "))], window_k: 2 },
            state: State::Tod(BeliefState::new().with("train", "day", "friday")),
            knowledge: KnowledgeResult::Search { snippets: vec![vec!["k"; snippet_words].join(" ")] },
            response: "ok".into(),
        }
    }

    #[test]
    fn long_history_is_left_truncated() {
        let tok = Tokenizer::new();
        let p = serialize(&example(600, 1), TaskTag::State, &tok);
        assert_eq!(p.input_tokens.len(), INPUT_LEN);
        assert_eq!(p.history_tokens, HISTORY_MAX);
        assert!(p.history_truncated);
        assert_eq!(p.input_tokens[HISTORY_MAX], "w599");
        assert_eq!(p.input_tokens[1], "w344");
    }

    #[test]
    fn short_example_is_padded() {
        let tok = Tokenizer::new();
        let p = serialize(&example(28, 1), TaskTag::State, &tok);
        assert_eq!(p.input_tokens.len(), INPUT_LEN);
        assert_eq!(&p.input_tokens[..3], &[TASK_STATE, USER_MARK, "w0"]);
        assert!(p.input_tokens[30..].iter().all(|t| t == PAD));
        assert!(!p.input_tokens.iter().any(|t| t == KNOWLEDGE_MARK));
    }

    #[test]
    fn oversized_knowledge_is_cut_and_flagged() {
        let tok = Tokenizer::new();
        let p = serialize(&example(600, 900), TaskTag::Response, &tok);
        assert_eq!(p.input_tokens.len(), INPUT_LEN);
        assert!(p.knowledge_truncated && !p.state_truncated);
        assert!(p.input_tokens.contains(&STATE_MARK.to_string()));
        assert_eq!(p.input_tokens.last().unwrap(), "k");
    }
}
