use chatfuse_core::corpus::{compute_stats, load_fused_corpus, load_tod_corpus, save_corpus, to_jsonl, Mode};
use chatfuse_core::fixtures::{self, corpus_with_totals, CorpusTotals};
use chatfuse_core::synthesis::Setting;
use proptest::prelude::*;

#[test]
fn fused_corpora_round_trip_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    for setting in Setting::ALL {
        let out = fixtures::fused_corpus(setting, 12, 9).unwrap();
        let path = dir.path().join(format!("{setting:?}.jsonl"));
        save_corpus(&out.dialogs, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), to_jsonl(&out.dialogs));
        let back = load_fused_corpus(&path).unwrap();
        assert_eq!(back, out.dialogs);
        assert_eq!(compute_stats(&back).unwrap(), compute_stats(&out.dialogs).unwrap());
    }
}

#[test]
fn task_corpus_loads_as_task_mode_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tod.jsonl");
    let mut dialogs = fixtures::tod_corpus(5, 1);
    dialogs[0].turns[0].mode = Mode::Odd;
    save_corpus(&dialogs, &path).unwrap();
    let loaded = load_tod_corpus(&path, &fixtures::ontology()).unwrap();
    assert_eq!(loaded.len(), 5);
    assert!(loaded.iter().flat_map(|d| &d.turns).all(|t| t.mode == Mode::Tod));
}

#[test]
fn truncated_file_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let mut raw = to_jsonl(&fixtures::tod_corpus(2, 4));
    raw.push_str("{\"id\": \"broken\", \"turns\": [\n");
    std::fs::write(&path, raw).unwrap();
    let err = load_fused_corpus(&path).unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn built_corpora_hit_their_totals(
        dialogs in 1usize..30,
        per_dialog_switches in 1usize..5,
        extra_odd in 0usize..40,
        extra_tod in 0usize..40,
        odd_len in 1usize..20,
        tod_len in 1usize..20,
    ) {
        let mode_switches = dialogs * per_dialog_switches;
        let blocks = per_dialog_switches + 1;
        let odd_turns = dialogs * blocks.div_ceil(2) + extra_odd;
        let tod_turns = dialogs * (blocks / 2 + 1) + extra_tod;
        let t = CorpusTotals {
            dialogs,
            mode_switches,
            odd_turns,
            tod_turns,
            odd_tokens: odd_turns * 2 * odd_len + extra_odd,
            tod_tokens: tod_turns * 2 * tod_len + extra_tod,
        };
        let s = compute_stats(&corpus_with_totals(&t)).unwrap();
        prop_assert_eq!(s.n_dialogs, t.dialogs);
        prop_assert_eq!(s.total_mode_switches, t.mode_switches);
        prop_assert_eq!(s.total_odd_turns, t.odd_turns);
        prop_assert_eq!(s.total_tod_turns, t.tod_turns);
        prop_assert_eq!(s.odd_tokens, t.odd_tokens);
        prop_assert_eq!(s.tod_tokens, t.tod_tokens);
        prop_assert!((s.avg_mode_switch - mode_switches as f64 / dialogs as f64).abs() < 1e-12);
    }
}
