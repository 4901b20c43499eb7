use serde::{Deserialize, Serialize};

use super::{
    encode_state, response_input, serialize, state_input, HistoryWindow, PivotError, State, TaskTag, TrainingExample,
};
use crate::backends::toy::{Decoding, IdPair, ToyConfig, ToyModel, TrainConfig, TrainReport, Vocab};
use crate::knowledge::KnowledgeResult;
use crate::text::Tokenizer;

pub const MAX_STATE_TOKENS: usize = 64;
pub const MAX_RESPONSE_TOKENS: usize = 64;

/// A [`ToyModel`] shared by both tasks; the task token at the head of the
/// input selects state prediction or response generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyPivot {
    pub model: ToyModel,
    #[serde(skip)]
    tokenizer: Tokenizer,
}

impl ToyPivot {
    /// Vocabulary covers every token of every serialized pair in `examples`.
    pub fn build(examples: &[TrainingExample], config: ToyConfig, seed: u64) -> Self {
        let tokenizer = Tokenizer::new();
        let mut vocab = Vocab::new();
        for ex in examples {
            for task in [TaskTag::State, TaskTag::Response] {
                let pair = serialize(ex, task, &tokenizer);
                for t in pair.input_tokens.iter().chain(&pair.target_tokens) {
                    vocab.add(t);
                }
            }
        }
        ToyPivot { model: ToyModel::new(vocab, config, seed), tokenizer }
    }

    pub fn from_model(model: ToyModel) -> Self {
        ToyPivot { model, tokenizer: Tokenizer::new() }
    }

    fn id_pair(&self, ex: &TrainingExample, task: TaskTag) -> Result<IdPair, PivotError> {
        let pair = serialize(ex, task, &self.tokenizer);
        if pair.target_tokens.is_empty() {
            return Err(PivotError::Precondition(format!(
                "dialog `{}` turn {}: empty target",
                ex.dialog_id, ex.turn_index
            )));
        }
        Ok(IdPair {
            condition: self.model.vocab.encode_condition(&pair.input_tokens),
            target: self.model.vocab.encode_target(&pair.target_tokens)?,
        })
    }

    /// `-log p(s | h)`.
    pub fn state_nll(&self, ex: &TrainingExample) -> Result<f64, PivotError> {
        let pair = serialize(ex, TaskTag::State, &self.tokenizer);
        Ok(self.model.conditional_nll(&pair.input_tokens, &pair.target_tokens)?)
    }

    /// `-log p(r | h, s, k)`.
    pub fn response_nll(&self, ex: &TrainingExample) -> Result<f64, PivotError> {
        let pair = serialize(ex, TaskTag::Response, &self.tokenizer);
        Ok(self.model.conditional_nll(&pair.input_tokens, &pair.target_tokens)?)
    }

    pub fn example_loss(&self, ex: &TrainingExample) -> Result<f64, PivotError> {
        Ok(self.state_nll(ex)? + self.response_nll(ex)?)
    }

    /// Mean combined loss over `examples`.
    pub fn mean_loss(&self, examples: &[TrainingExample]) -> Result<f64, PivotError> {
        let mut total = 0.0;
        for ex in examples {
            total += self.example_loss(ex)?;
        }
        Ok(total / examples.len().max(1) as f64)
    }

    /// Greedy state text for `history`.
    pub fn predict_state_text(&self, history: &HistoryWindow) -> String {
        let (input, _, _) = state_input(&self.tokenizer, history);
        let out = self.model.generate_tokens(&input, MAX_STATE_TOKENS, Decoding::Greedy);
        self.tokenizer.detokenize(&out)
    }

    pub fn generate_response_text(
        &self,
        history: &HistoryWindow,
        state: &State,
        knowledge: &KnowledgeResult,
    ) -> String {
        let (input, ..) = response_input(&self.tokenizer, history, state, knowledge);
        let out = self.model.generate_tokens(&input, MAX_RESPONSE_TOKENS, Decoding::Greedy);
        self.tokenizer.detokenize(&out)
    }

    /// Fraction of examples whose greedy state text equals the encoded gold state.
    pub fn state_exact_match(&self, examples: &[TrainingExample]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let hits = examples.iter().filter(|ex| self.predict_state_text(&ex.history) == encode_state(&ex.state)).count();
        hits as f64 / examples.len() as f64
    }
}

/// Minimizes the summed state and response NLL per example. Reported epoch
/// losses are means over examples of that sum.
pub fn train_pivot(
    examples: &[TrainingExample],
    pivot: &mut ToyPivot,
    config: &TrainConfig,
) -> Result<TrainReport, PivotError> {
    if examples.is_empty() {
        return Err(PivotError::Precondition("no training examples".into()));
    }
    let groups = examples
        .iter()
        .map(|ex| Ok(vec![pivot.id_pair(ex, TaskTag::State)?, pivot.id_pair(ex, TaskTag::Response)?]))
        .collect::<Result<Vec<_>, PivotError>>()?;
    Ok(pivot.model.fit_groups(&groups, config)?)
}

/// Progress after one training round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub epochs: usize,
    pub loss: f64,
    pub state_exact_match: f64,
}

/// Up to `max_rounds` rounds of `config.epochs` epochs each, stopping early
/// once state exact match reaches `target_exact_match`. Round `r` shuffles
/// with `config.seed + r`.
pub fn train_rounds(
    examples: &[TrainingExample],
    pivot: &mut ToyPivot,
    config: &TrainConfig,
    max_rounds: usize,
    target_exact_match: Option<f64>,
) -> Result<Vec<RoundReport>, PivotError> {
    let mut out = Vec::new();
    for round in 0..max_rounds {
        let cfg = TrainConfig { seed: config.seed.wrapping_add(round as u64), ..*config };
        let report = train_pivot(examples, pivot, &cfg)?;
        let em = pivot.state_exact_match(examples);
        out.push(RoundReport {
            round,
            epochs: (round + 1) * config.epochs,
            loss: report.last(),
            state_exact_match: em,
        });
        if target_exact_match.is_some_and(|t| em >= t) {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BeliefState, Speaker};

    fn examples() -> Vec<TrainingExample> {
        vec![
            TrainingExample {
                dialog_id: "a".into(),
                turn_index: 1,
                history: HistoryWindow { utterances: vec![(Speaker::User, "a train to norwich".into())], window_k: 2 },
                state: State::Tod(BeliefState::new().with("train", "destination", "norwich")),
                knowledge: KnowledgeResult::DbState { domain: "train".into(), db_match_count: 2, top_record: None },
                response: "which day ?".into(),
            },
            TrainingExample {
                dialog_id: "b".into(),
                turn_index: 1,
                history: HistoryWindow { utterances: vec![(Speaker::User, "i love cathedrals".into())], window_k: 2 },
                state: State::Odd("cathedral".into()),
                knowledge: KnowledgeResult::Search { snippets: vec!["a cathedral is a church".into()] },
                response: "me too !".into(),
            },
        ]
    }

    #[test]
    fn example_loss_decomposes() {
        let ex = examples();
        let pivot = ToyPivot::build(&ex, ToyConfig::default(), 3);
        let tok = Tokenizer::new();
        for e in &ex {
            let s = serialize(e, TaskTag::State, &tok);
            let r = serialize(e, TaskTag::Response, &tok);
            let oracle = pivot.model.conditional_nll(&s.input_tokens, &s.target_tokens).unwrap()
                + pivot.model.conditional_nll(&r.input_tokens, &r.target_tokens).unwrap();
            assert!((pivot.example_loss(e).unwrap() - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ex = examples();
        let config = TrainConfig { epochs: 30, learning_rate: 1e-2, ..TrainConfig::default() };
        let mut a = ToyPivot::build(&ex, ToyConfig::default(), 3);
        let mut b = a.clone();
        let ra = train_pivot(&ex, &mut a, &config).unwrap();
        let rb = train_pivot(&ex, &mut b, &config).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.last() < ra.initial());
        assert!((ra.initial() - ToyPivot::build(&ex, ToyConfig::default(), 3).mean_loss(&ex).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut p = ToyPivot::build(&examples(), ToyConfig::default(), 0);
        assert!(train_pivot(&[], &mut p, &TrainConfig::default()).is_err());
    }
}
