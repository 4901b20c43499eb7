use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_history, HistoryWindow, PivotError, State};
use crate::corpus::{BeliefState, Dialog, Mode};
use crate::knowledge::{KnowledgeResult, KnowledgeRouter};

/// One system turn viewed as a supervised example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub dialog_id: String,
    pub turn_index: usize,
    pub history: HistoryWindow,
    pub state: State,
    pub knowledge: KnowledgeResult,
    pub response: String,
}

/// Gold state of every system turn as `(turn_index, state)`. TOD states carry
/// the cumulative belief with the turn's domain last; ODD states carry the
/// annotated search query, or nothing.
pub fn gold_states(dialog: &Dialog) -> Result<Vec<(usize, State)>, PivotError> {
    let mut belief = BeliefState::new();
    let mut out = Vec::new();
    for (i, turn) in dialog.turns.iter().enumerate() {
        if !turn.is_system() {
            continue;
        }
        let state = match turn.mode {
            Mode::Tod => {
                let update = turn.belief.as_ref().ok_or_else(|| {
                    PivotError::Validation(format!("dialog `{}` turn {i}: TOD system turn has no belief", dialog.id))
                })?;
                let active = turn.domain.as_deref().or_else(|| dialog.turns[i - 1].domain.as_deref());
                belief.merge(update, active);
                State::Tod(belief.clone())
            }
            Mode::Odd => State::Odd(turn.search_query.clone().unwrap_or_default()),
        };
        out.push((i, state));
    }
    Ok(out)
}

/// One example per system turn with knowledge from `router`. TOD responses
/// are delexicalized.
pub fn make_training_examples(
    dialog: &Dialog,
    router: &dyn KnowledgeRouter,
    window_k: usize,
) -> Result<Vec<TrainingExample>, PivotError> {
    dialog.validate().map_err(|e| PivotError::Validation(e.to_string()))?;
    let mut out = Vec::new();
    for (i, state) in gold_states(dialog)? {
        let turn = &dialog.turns[i];
        let history = build_history(dialog, i - 1, window_k)?;
        let knowledge = router.route(&state).map_err(|e| PivotError::Knowledge(e.to_string()))?;
        let response = match turn.mode {
            Mode::Tod => turn.response_text().to_string(),
            Mode::Odd => turn.text.clone(),
        };
        out.push(TrainingExample { dialog_id: dialog.id.clone(), turn_index: i, history, state, knowledge, response });
    }
    Ok(out)
}

pub fn save_examples(examples: &[TrainingExample], path: &Path) -> Result<(), PivotError> {
    let mut f = fs::File::create(path).map_err(|e| PivotError::Io(format!("{}: {e}", path.display())))?;
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(f, "{line}").map_err(|e| PivotError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn load_examples(path: &Path) -> Result<Vec<TrainingExample>, PivotError> {
    let raw = fs::read_to_string(path).map_err(|e| PivotError::Io(format!("{}: {e}", path.display())))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PivotError::Io(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}
