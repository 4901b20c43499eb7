use serde::{Deserialize, Serialize};

use super::PivotError;
use crate::corpus::{Dialog, Speaker, Turn};

/// Default window: five utterances.
pub const DEFAULT_WINDOW_K: usize = 2;

/// The last `2k + 1` utterances ending at the current user turn. System
/// utterances are delexicalized when annotations exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryWindow {
    pub utterances: Vec<(Speaker, String)>,
    pub window_k: usize,
}

impl HistoryWindow {
    /// Window over `turns`, which must end with a user turn.
    pub fn from_turns(turns: &[Turn], window_k: usize) -> Result<Self, PivotError> {
        let last = turns.len().checked_sub(1).ok_or_else(|| PivotError::Precondition("no turns".into()))?;
        if !turns[last].is_user() {
            return Err(PivotError::Precondition(format!("turn {last} is not a user turn")));
        }
        let start = last.saturating_sub(2 * window_k);
        let utterances = turns[start..=last]
            .iter()
            .map(|t| {
                let text = if t.is_system() { t.response_text() } else { t.text.as_str() };
                (t.speaker, text.to_string())
            })
            .collect();
        Ok(HistoryWindow { utterances, window_k })
    }

    pub fn current(&self) -> &str {
        &self.utterances.last().expect("window is nonempty").1
    }
}

/// History ending at the user turn `turn_index` of `dialog`.
pub fn build_history(dialog: &Dialog, turn_index: usize, window_k: usize) -> Result<HistoryWindow, PivotError> {
    if turn_index >= dialog.turns.len() {
        return Err(PivotError::Precondition(format!("turn {turn_index} out of range")));
    }
    HistoryWindow::from_turns(&dialog.turns[..=turn_index], window_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mode;

    fn dialog(n: usize) -> Dialog {
        let turns = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    Turn::user(format!("u{i}"), Mode::Tod)
                } else {
                    Turn::system(format!("s{i}"), Mode::Tod).with_delex(format!("d{i}"))
                }
            })
            .collect();
        Dialog::new("h", turns)
    }

    #[test]
    fn window_sizes() {
        let d = dialog(12);
        let h = build_history(&d, 6, 2).unwrap();
        assert_eq!(h.utterances.len(), 5);
        assert_eq!(h.current(), "u6");
        assert_eq!(h.utterances[1].1, "d3");
        assert_eq!(build_history(&d, 0, 2).unwrap().utterances.len(), 1);
        assert_eq!(build_history(&d, 10, 0).unwrap().utterances, vec![(Speaker::User, "u10".to_string())]);
        assert!(build_history(&d, 5, 2).is_err());
    }
}
