use super::{align, DialogPrediction, EvalError};
use crate::corpus::{Dialog, Mode};

/// Percentage of gold-ODD positions predicted ODD. TOD positions are not
/// scored; an unparseable prediction (`None`) is a miss.
pub fn mode_accuracy(gold: &[Mode], predicted: &[Option<Mode>]) -> Result<f64, EvalError> {
    if gold.len() != predicted.len() {
        return Err(EvalError::LengthMismatch(gold.len(), predicted.len()));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for (g, p) in gold.iter().zip(predicted) {
        if *g == Mode::Odd {
            total += 1;
            hits += usize::from(*p == Some(Mode::Odd));
        }
    }
    if total == 0 {
        return Err(EvalError::UndefinedMetric("ODD accuracy"));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// Gold and predicted modes of every system turn, in corpus order.
pub fn system_turn_modes(
    golds: &[Dialog],
    preds: &[DialogPrediction],
) -> Result<(Vec<Mode>, Vec<Option<Mode>>), EvalError> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for (g, p) in align(golds, preds)? {
        for tp in &p.turns {
            gold.push(g.turns[tp.turn_index].mode);
            pred.push(tp.mode());
        }
    }
    Ok((gold, pred))
}

pub fn corpus_mode_accuracy(golds: &[Dialog], preds: &[DialogPrediction]) -> Result<f64, EvalError> {
    let (g, p) = system_turn_modes(golds, preds)?;
    mode_accuracy(&g, &p)
}

/// Whether every gold-ODD system turn was predicted ODD. Vacuously true for
/// dialogs without ODD turns.
pub fn odd_turns_all_detected(gold: &Dialog, pred: &DialogPrediction) -> bool {
    pred.turns.iter().all(|tp| gold.turns[tp.turn_index].mode != Mode::Odd || tp.mode() == Some(Mode::Odd))
}

fn has_odd_system_turn(gold: &Dialog) -> bool {
    gold.turns.iter().any(|t| t.is_system() && t.mode == Mode::Odd)
}

/// Among dialogs with at least one gold-ODD system turn, the percentage
/// whose ODD turns were all predicted ODD.
pub fn odd_success_rate(golds: &[Dialog], preds: &[DialogPrediction]) -> Result<f64, EvalError> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for (g, p) in align(golds, preds)? {
        if has_odd_system_turn(g) {
            total += 1;
            hits += usize::from(odd_turns_all_detected(g, p));
        }
    }
    if total == 0 {
        return Err(EvalError::UndefinedMetric("ODD success rate"));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::evalkit::TurnPrediction;
    use crate::pivot::State;

    fn dialog(id: &str, modes: &[Mode]) -> Dialog {
        let mut turns = Vec::new();
        for m in modes {
            turns.push(Turn::user("u", *m));
            turns.push(Turn::system("s", *m));
        }
        Dialog::new(id, turns)
    }

    fn pred(id: &str, modes: &[Mode]) -> DialogPrediction {
        DialogPrediction {
            dialog_id: id.into(),
            turns: modes
                .iter()
                .enumerate()
                .map(|(i, m)| TurnPrediction {
                    turn_index: 2 * i + 1,
                    state: Some(match m {
                        Mode::Tod => State::Tod(Default::default()),
                        Mode::Odd => State::Odd(String::new()),
                    }),
                    response: "r".into(),
                })
                .collect(),
        }
    }

    use Mode::{Odd as O, Tod as T};

    #[test]
    fn accuracy_counts_odd_positions_only() {
        assert_eq!(mode_accuracy(&[O, T, O], &[Some(T), Some(T), Some(T)]).unwrap(), 0.0);
        assert_eq!(mode_accuracy(&[O, T, O], &[Some(O), Some(O), Some(O)]).unwrap(), 100.0);
        let gold = [O; 10];
        let p: Vec<Option<Mode>> = (0..10).map(|i| if i < 7 { Some(O) } else { None }).collect();
        assert_eq!(mode_accuracy(&gold, &p).unwrap(), 70.0);
        assert!(matches!(mode_accuracy(&[T], &[Some(O)]), Err(EvalError::UndefinedMetric(_))));
    }

    #[test]
    fn success_rate_enumeration() {
        let golds =
            [dialog("a", &[O, T]), dialog("b", &[O, O, T]), dialog("c", &[T, O]), dialog("d", &[O]), dialog("e", &[T])];
        let preds = [pred("a", &[O, T]), pred("b", &[O, T, T]), pred("c", &[T, O]), pred("d", &[O]), pred("e", &[O])];
        assert_eq!(odd_success_rate(&golds, &preds).unwrap(), 75.0);
        assert!(matches!(odd_success_rate(&golds[4..], &preds[4..]), Err(EvalError::UndefinedMetric(_))));
    }
}
