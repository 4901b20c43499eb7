use std::sync::Arc;

use chatfuse_core::backends::{ScriptedStub, ToyConfig, TrainConfig};
use chatfuse_core::corpus::Mode;
use chatfuse_core::fixtures::{self, fused_corpus};
use chatfuse_core::pivot::{
    chat_turn, encode_state, load_examples, make_training_examples, parse_state, save_examples, serialize, train_pivot,
    BackendPivot, Session, State, TaskTag, ToyPivot, TrainingExample, HISTORY_MAX, INPUT_LEN, KNOWLEDGE_MARK,
    STATE_MARK,
};
use chatfuse_core::synthesis::Setting;
use chatfuse_core::text::Tokenizer;

fn examples(setting: Setting, n: usize, seed: u64) -> Vec<TrainingExample> {
    let out = fused_corpus(setting, n, seed).unwrap();
    let router = fixtures::router();
    out.dialogs.iter().flat_map(|d| make_training_examples(d, &router, 2).unwrap()).collect()
}

#[test]
fn every_serialized_pair_fits_the_budget() {
    let tok = Tokenizer::new();
    for setting in Setting::ALL {
        for ex in examples(setting, 15, 4) {
            let s = serialize(&ex, TaskTag::State, &tok);
            let r = serialize(&ex, TaskTag::Response, &tok);
            for p in [&s, &r] {
                assert_eq!(p.input_tokens.len(), INPUT_LEN);
                assert!(p.history_tokens <= HISTORY_MAX);
            }
            assert!(!s.input_tokens.iter().any(|t| t == KNOWLEDGE_MARK || t == STATE_MARK));
            assert!(r.input_tokens.iter().any(|t| t == KNOWLEDGE_MARK));
        }
    }
}

#[test]
fn examples_cover_both_modes_and_round_trip() {
    let ex = examples(Setting::Multiple, 10, 3);
    assert!(ex.iter().any(|e| e.state.mode() == Mode::Odd));
    assert!(ex.iter().any(|e| e.state.mode() == Mode::Tod));
    let db = fixtures::database();
    for e in &ex {
        if let State::Tod(b) = &e.state {
            let in_db = b.active_domain().is_some_and(|d| db.has_domain(d));
            assert_eq!(e.knowledge.db_match_count().is_some(), in_db, "{}:{}", e.dialog_id, e.turn_index);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ex.jsonl");
    save_examples(&ex, &path).unwrap();
    assert_eq!(load_examples(&path).unwrap(), ex);
}

#[test]
fn toy_training_lowers_the_two_task_loss() {
    let ex = examples(Setting::Initial, 3, 9);
    let mut pivot = ToyPivot::build(&ex, ToyConfig { embed_dim: 16, hidden_dim: 32, ..Default::default() }, 2);
    for e in &ex {
        let total = pivot.example_loss(e).unwrap();
        let parts = pivot.state_nll(e).unwrap() + pivot.response_nll(e).unwrap();
        assert!((total - parts).abs() < 1e-9);
    }
    let before = pivot.mean_loss(&ex).unwrap();
    let report =
        train_pivot(&ex, &mut pivot, &TrainConfig { epochs: 8, learning_rate: 5e-3, seed: 1, ..Default::default() })
            .unwrap();
    let after = pivot.mean_loss(&ex).unwrap();
    assert!((report.initial() - before).abs() < 1e-9);
    assert!(after < before * 0.8, "{before} -> {after}");
}

#[test]
fn chat_session_with_a_toy_model() {
    let ex = examples(Setting::Transition, 4, 1);
    let pivot = ToyPivot::build(&ex, ToyConfig { embed_dim: 8, hidden_dim: 16, ..Default::default() }, 3);
    let router = fixtures::router();
    let detector = fixtures::intent_detector();
    let mut session = Session::new("toy");
    for utterance in ["i need a train to norwich on friday", "i have been to norwich before", "thanks"] {
        let trace = chat_turn(&mut session, utterance, &pivot, &router, &detector).unwrap();
        if trace.fallback_state {
            assert!(matches!(trace.state, State::Odd(ref q) if q.is_empty()) || trace.state.mode() == Mode::Tod);
        } else {
            assert_eq!(parse_state(&trace.raw_state).unwrap(), trace.state);
        }
    }
    assert_eq!(session.turns.len(), 6);
    for pair in session.turns.chunks(2) {
        assert!(pair[0].is_user() && pair[1].is_system());
        assert_eq!(pair[0].mode, pair[1].mode);
    }
}

#[test]
fn scripted_backend_drives_both_modes() {
    let script =
        ["tod: train destination=norwich day=friday", "[train_id] leaves at [value_leave]", "not a state", "i see"];
    let pivot = BackendPivot::new(Arc::new(ScriptedStub::new(script)), 0);
    let router = fixtures::router();
    let detector = fixtures::intent_detector();
    let mut session = Session::new("scripted");
    let t = chat_turn(&mut session, "a train to norwich on friday please", &pivot, &router, &detector).unwrap();
    assert_eq!(encode_state(&t.state), "tod: train destination=norwich day=friday");
    assert!(t.knowledge.db_match_count().unwrap() > 0);
    assert!(!t.display_response.contains("[train_id]"));
    let t = chat_turn(&mut session, "my grandmother loves the cathedral", &pivot, &router, &detector).unwrap();
    assert!(t.fallback_state);
    assert_eq!(session.turns[3].delex_text.as_deref(), Some("i see"));
}
