use chatfuse_core::corpus::{save_corpus, Dialog, Mode};
use chatfuse_core::fixtures::{self, tod_corpus};
use chatfuse_core::synthesis::{
    synthesize_corpus, AttemptOutcome, Setting, SynthesisConfig, SynthesisOutput, SynthesisTrace,
};
use chatfuse_core::text::contains_word;

fn run(setting: Setting, n: usize, seed: u64, workers: usize) -> SynthesisOutput {
    let config = SynthesisConfig::new(setting, seed);
    synthesize_corpus(
        &tod_corpus(n, seed),
        &config,
        &fixtures::synthesis_backends(),
        &fixtures::intent_detector(),
        &fixtures::ontology(),
        workers,
    )
    .unwrap()
}

/// Maximal runs of ODD turns as index ranges.
fn odd_blocks(d: &Dialog) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, t) in d.turns.iter().enumerate() {
        match (t.mode, start) {
            (Mode::Odd, None) => start = Some(i),
            (Mode::Tod, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..d.turns.len());
    }
    out
}

fn check_snippets(d: &Dialog, trace: &SynthesisTrace) {
    let accepted: Vec<_> = trace
        .attempts
        .iter()
        .filter_map(|a| match &a.outcome {
            AttemptOutcome::Accepted { goal, user_turns, terminated_by_goal } => {
                Some((goal, *user_turns, *terminated_by_goal))
            }
            _ => None,
        })
        .collect();
    let blocks = odd_blocks(d);
    assert_eq!(blocks.len(), accepted.len(), "{}", d.id);
    for (block, (goal, user_turns, terminated)) in blocks.into_iter().zip(accepted) {
        let users: Vec<_> = d.turns[block].iter().filter(|t| t.is_user()).collect();
        assert_eq!(users.len(), user_turns, "{}", d.id);
        if terminated {
            let last = users.last().unwrap();
            assert!(contains_word(&last.text, &goal.value), "{}: `{}` lacks `{}`", d.id, last.text, goal.value);
        }
    }
}

#[test]
fn initial_opens_with_one_snippet() {
    let out = run(Setting::Initial, 50, 7, 1);
    assert_eq!(out.dialogs.len(), 50);
    for (d, t) in out.dialogs.iter().zip(&out.traces) {
        assert_eq!(d.mode_switches(), 1, "{}", d.id);
        assert_eq!(d.turns[0].mode, Mode::Odd);
        assert!(t.persona.is_some());
        check_snippets(d, t);
    }
}

#[test]
fn transition_switches_twice() {
    let out = run(Setting::Transition, 50, 7, 1);
    assert!(!out.dialogs.is_empty());
    assert_eq!(out.dialogs.len() + out.skipped.len(), 50);
    for (d, t) in out.dialogs.iter().zip(&out.traces) {
        assert_eq!(d.mode_switches(), 2, "{}", d.id);
        assert_eq!(d.turns[0].mode, Mode::Tod);
        assert!(d.domains().len() >= 2);
        check_snippets(d, t);
    }
}

#[test]
fn multiple_switches_twice_per_snippet() {
    let out = run(Setting::Multiple, 50, 7, 1);
    assert_eq!(out.dialogs.len(), 50);
    let mut total = 0;
    for (d, t) in out.dialogs.iter().zip(&out.traces) {
        assert_eq!(d.mode_switches(), 2 * t.accepted(), "{}", d.id);
        total += t.accepted();
        check_snippets(d, t);
    }
    assert!(total > 0);
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    for setting in Setting::ALL {
        let a = run(setting, 30, 11, 1);
        let b = run(setting, 30, 11, 4);
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_corpus(&a.dialogs, &pa).unwrap();
        save_corpus(&b.dialogs, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "{setting}");
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.skipped, b.skipped);
    }
}

#[test]
fn different_seeds_change_the_output() {
    let a = run(Setting::Multiple, 20, 1, 1);
    let b = run(Setting::Multiple, 20, 2, 1);
    assert_ne!(a.dialogs, b.dialogs);
}
