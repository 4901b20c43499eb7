use serde::{Deserialize, Serialize};

use super::{reference_text, DialogPrediction, EvalError, TurnPrediction};
use crate::corpus::{Dialog, Mode};
use crate::knowledge::{KnowledgeResult, KnowledgeRouter};
use crate::pivot::{build_history, gold_states, parse_state, PivotModel, State};

/// Predicts every gold system turn from the gold history. Knowledge comes
/// from routing the predicted state; a failed lookup yields empty knowledge.
pub fn predict_corpus(
    golds: &[Dialog],
    model: &dyn PivotModel,
    router: &dyn KnowledgeRouter,
    window_k: usize,
) -> Result<Vec<DialogPrediction>, EvalError> {
    let err = |e: crate::pivot::PivotError| EvalError::Prediction(e.to_string());
    golds
        .iter()
        .map(|g| {
            let turns = g
                .system_turn_indices()
                .map(|i| {
                    let history = build_history(g, i - 1, window_k).map_err(err)?;
                    let raw = model.predict_state(&history).map_err(err)?;
                    let state = parse_state(&raw).ok();
                    let knowledge = match &state {
                        Some(s) => router.route(s).unwrap_or(KnowledgeResult::Empty),
                        None => KnowledgeResult::Empty,
                    };
                    let conditioning = state.clone().unwrap_or_else(|| State::Odd(String::new()));
                    let response = model.generate_response(&history, &conditioning, &knowledge).map_err(err)?;
                    Ok(TurnPrediction { turn_index: i, state, response })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            Ok(DialogPrediction { dialog_id: g.id.clone(), turns })
        })
        .collect()
}

/// Reference predictors that need no model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Gold states and gold responses.
    Gold,
    /// Gold belief and gold response on TOD turns; TOD state and a fixed
    /// task reply on ODD turns.
    AlwaysTod,
    /// Empty ODD state and a fixed chit-chat reply on every turn.
    AlwaysOdd,
}

pub const TOD_FILLER: &str = "is there anything else i can help you with ?";
pub const ODD_FILLER: &str = "that sounds interesting , tell me more !";

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gold" => Ok(Baseline::Gold),
            "always-tod" => Ok(Baseline::AlwaysTod),
            "always-odd" => Ok(Baseline::AlwaysOdd),
            other => Err(format!("unknown baseline `{other}` (expected gold, always-tod or always-odd)")),
        }
    }
}

pub fn baseline_predictions(golds: &[Dialog], baseline: Baseline) -> Result<Vec<DialogPrediction>, EvalError> {
    golds
        .iter()
        .map(|g| {
            let states = gold_states(g).map_err(|e| EvalError::Prediction(e.to_string()))?;
            let mut last_belief = Default::default();
            let turns = states
                .into_iter()
                .map(|(i, gold_state)| {
                    let turn = &g.turns[i];
                    if let State::Tod(b) = &gold_state {
                        last_belief = b.clone();
                    }
                    let (state, response) = match baseline {
                        Baseline::Gold => (gold_state, reference_text(turn).to_string()),
                        Baseline::AlwaysTod => match turn.mode {
                            Mode::Tod => (gold_state, reference_text(turn).to_string()),
                            Mode::Odd => (State::Tod(last_belief.clone()), TOD_FILLER.to_string()),
                        },
                        Baseline::AlwaysOdd => (State::Odd(String::new()), ODD_FILLER.to_string()),
                    };
                    TurnPrediction { turn_index: i, state: Some(state), response }
                })
                .collect();
            Ok(DialogPrediction { dialog_id: g.id.clone(), turns })
        })
        .collect()
}
