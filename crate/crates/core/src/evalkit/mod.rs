//! Response and mode metrics over predicted dialogs.
//!
//! Predictions are aligned with gold system turns. TOD metrics read the
//! gold-TOD turns, ODD metrics the gold-ODD turns (transition turns
//! included by default), and the full-task block reads every system turn.

pub mod bleu;
pub mod modes;
pub mod predict;
pub mod report;
pub mod tod;

pub use bleu::*;
pub use modes::*;
pub use predict::*;
pub use report::*;
pub use tod::*;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialog, Mode};
use crate::pivot::State;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} references vs {1} hypotheses")]
    LengthMismatch(usize, usize),
    #[error("nothing to evaluate")]
    Empty,
    #[error("dialog `{0}` has no goal card")]
    MissingGoal(String),
    #[error("dialog `{dialog}`: {message}")]
    Misaligned { dialog: String, message: String },
    #[error("{0} is undefined on this corpus")]
    UndefinedMetric(&'static str),
    #[error("reports mix settings")]
    MixedSettings,
    #[error("aggregation needs at least two runs, got {0}")]
    TooFewRuns(usize),
    #[error("prediction failed: {0}")]
    Prediction(String),
    #[error("{0}")]
    Io(String),
}

/// Model output for one gold system turn. `state` is `None` when the state
/// text did not parse; such turns match neither mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub turn_index: usize,
    pub state: Option<State>,
    pub response: String,
}

impl TurnPrediction {
    pub fn mode(&self) -> Option<Mode> {
        self.state.as_ref().map(State::mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogPrediction {
    pub dialog_id: String,
    pub turns: Vec<TurnPrediction>,
}

/// Pairs each gold system turn with its prediction, failing unless both
/// sides cover the same dialogs and system turns in the same order.
pub(crate) fn align<'a>(
    golds: &'a [Dialog],
    preds: &'a [DialogPrediction],
) -> Result<Vec<(&'a Dialog, &'a DialogPrediction)>, EvalError> {
    if golds.len() != preds.len() {
        return Err(EvalError::LengthMismatch(golds.len(), preds.len()));
    }
    golds
        .iter()
        .zip(preds)
        .map(|(g, p)| {
            if g.id != p.dialog_id {
                return Err(EvalError::Misaligned {
                    dialog: g.id.clone(),
                    message: format!("prediction is for `{}`", p.dialog_id),
                });
            }
            let gold_idx: Vec<usize> = g.system_turn_indices().collect();
            let pred_idx: Vec<usize> = p.turns.iter().map(|t| t.turn_index).collect();
            if gold_idx != pred_idx {
                return Err(EvalError::Misaligned {
                    dialog: g.id.clone(),
                    message: format!("system turns {gold_idx:?} but predictions for {pred_idx:?}"),
                });
            }
            Ok((g, p))
        })
        .collect()
}

/// Gold reference text for a system turn: delexicalized for TOD turns.
pub fn reference_text(turn: &crate::corpus::Turn) -> &str {
    match turn.mode {
        Mode::Tod => turn.response_text(),
        Mode::Odd => &turn.text,
    }
}
