use serde::{Deserialize, Serialize};

use super::{align, DialogPrediction, EvalError};
use crate::corpus::{entity_placeholders, placeholder, BeliefState, Dialog, Mode};
use crate::knowledge::{matching_records, DBRecord, Database};
use crate::pivot::State;

/// Per-dialog inform and success outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogOutcome {
    pub inform: bool,
    pub success: bool,
}

/// Inform and success over gold-TOD system turns.
///
/// A domain's entity is offered whenever a response contains one of its
/// entity placeholders; the offer resolves to the database records matching
/// the predicted belief at that turn (the most recent TOD belief when the
/// turn's predicted state is ODD or unparseable). The last offer counts.
/// A goal domain is informed when its first offered record satisfies the
/// goal constraints; domains without a database table are always informed.
/// Success additionally needs every requested slot's placeholder somewhere
/// in the responses.
pub fn dialog_outcome(gold: &Dialog, pred: &DialogPrediction, db: &Database) -> Result<DialogOutcome, EvalError> {
    let goal = gold.goal_card.as_ref().ok_or_else(|| EvalError::MissingGoal(gold.id.clone()))?;
    let mut belief = BeliefState::new();
    let mut offered: std::collections::BTreeMap<&str, Vec<&DBRecord>> = Default::default();
    let mut responses: Vec<&str> = Vec::new();
    for tp in &pred.turns {
        if let Some(State::Tod(b)) = &tp.state {
            belief = b.clone();
        }
        if gold.turns[tp.turn_index].mode != Mode::Tod {
            continue;
        }
        responses.push(&tp.response);
        for domain in goal.domains.keys() {
            if db.has_domain(domain) && entity_placeholders(domain).iter().any(|p| tp.response.contains(p.as_str())) {
                let records =
                    matching_records(&belief, domain, db).map_err(|e| EvalError::Prediction(e.to_string()))?;
                offered.insert(domain.as_str(), records);
            }
        }
    }
    let mut inform = true;
    for (domain, dg) in &goal.domains {
        if !db.has_domain(domain) {
            continue;
        }
        let ok = offered
            .get(domain.as_str())
            .and_then(|records| records.first())
            .is_some_and(|r| r.satisfies(&dg.informable));
        inform &= ok;
    }
    let success = inform
        && goal.domains.iter().all(|(domain, dg)| {
            dg.requestable.iter().all(|slot| {
                let p = placeholder(domain, slot);
                responses.iter().any(|r| r.contains(p.as_str()))
            })
        });
    Ok(DialogOutcome { inform, success })
}

pub fn dialog_outcomes(
    golds: &[Dialog],
    preds: &[DialogPrediction],
    db: &Database,
) -> Result<Vec<DialogOutcome>, EvalError> {
    align(golds, preds)?.into_iter().map(|(g, p)| dialog_outcome(g, p, db)).collect()
}

/// `(inform%, success%)` over the dialog set.
pub fn inform_success(golds: &[Dialog], preds: &[DialogPrediction], db: &Database) -> Result<(f64, f64), EvalError> {
    let outcomes = dialog_outcomes(golds, preds, db)?;
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = outcomes.len() as f64;
    let inform = outcomes.iter().filter(|o| o.inform).count() as f64;
    let success = outcomes.iter().filter(|o| o.success).count() as f64;
    Ok((100.0 * inform / n, 100.0 * success / n))
}

pub fn combined(inform: f64, success: f64, bleu: f64) -> f64 {
    (inform + success) * 0.5 + bleu
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DomainGoal, GoalCard, Turn};
    use crate::evalkit::TurnPrediction;

    fn db() -> Database {
        let mut db = Database::new();
        db.insert(
            DBRecord::new("restaurant").with("name", "curry garden").with("area", "centre").with("food", "indian"),
        );
        db.insert(DBRecord::new("restaurant").with("name", "pizza hut").with("area", "south").with("food", "italian"));
        db
    }

    fn gold() -> Dialog {
        let mut d = Dialog::new(
            "g",
            vec![
                Turn::user("indian food in the centre", Mode::Tod).with_domain("restaurant"),
                Turn::system("curry garden is nice", Mode::Tod)
                    .with_domain("restaurant")
                    .with_belief(BeliefState::new().with("restaurant", "area", "centre")),
                Turn::user("phone?", Mode::Tod).with_domain("restaurant"),
                Turn::system("01223", Mode::Tod).with_domain("restaurant").with_belief(BeliefState::new()),
            ],
        );
        let mut goal = GoalCard::default();
        goal.domains.insert(
            "restaurant".into(),
            DomainGoal {
                informable: [("food".to_string(), "indian".to_string())].into(),
                requestable: vec!["phone".into()],
            },
        );
        d.goal_card = Some(goal);
        d
    }

    fn pred(belief: BeliefState, r1: &str, r2: &str) -> DialogPrediction {
        DialogPrediction {
            dialog_id: "g".into(),
            turns: vec![
                TurnPrediction { turn_index: 1, state: Some(State::Tod(belief.clone())), response: r1.into() },
                TurnPrediction { turn_index: 3, state: Some(State::Tod(belief)), response: r2.into() },
            ],
        }
    }

    #[test]
    fn constructed_positive_and_near_miss() {
        let b = BeliefState::new().with("restaurant", "area", "centre");
        let g = [gold()];
        let ok = pred(b.clone(), "[restaurant_name] is nice", "the number is [restaurant_phone]");
        assert_eq!(inform_success(&g, &[ok], &db()).unwrap(), (100.0, 100.0));
        let near = pred(b, "[restaurant_name] is nice", "enjoy");
        assert_eq!(inform_success(&g, &[near], &db()).unwrap(), (100.0, 0.0));
        let wrong =
            pred(BeliefState::new().with("restaurant", "area", "south"), "[restaurant_name]", "[restaurant_phone]");
        assert_eq!(inform_success(&g, &[wrong], &db()).unwrap(), (0.0, 0.0));
        let none = pred(BeliefState::new(), "hello", "[restaurant_phone]");
        assert_eq!(inform_success(&g, &[none], &db()).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn missing_goal_is_an_error() {
        let mut g = gold();
        g.goal_card = None;
        let p = pred(BeliefState::new(), "a", "b");
        assert!(matches!(inform_success(&[g], &[p], &db()), Err(EvalError::MissingGoal(_))));
    }

    #[test]
    fn combined_formula() {
        assert!((combined(52.61, 37.43, 15.00) - 60.02).abs() < 1e-9);
        assert!((combined(10.70, 0.60, 0.97) - 6.62).abs() < 1e-9);
        assert_eq!(combined(0.0, 0.0, 0.0), 0.0);
    }
}
