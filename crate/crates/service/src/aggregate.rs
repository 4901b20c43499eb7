//! Human-evaluation summaries: per-model rating statistics and pairwise
//! win/tie/loss rates.

use std::collections::BTreeMap;

use chatfuse_core::evalkit::{mean_std, paired_bootstrap, MeanStd};
use serde::{Deserialize, Serialize};

use crate::store::{PairwiseJudgment, Preference, Rating, Record};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRatings {
    pub n: usize,
    /// Fraction of sessions rated successful.
    pub success: MeanStd,
    pub appropriateness: MeanStd,
    pub engagingness: MeanStd,
}

/// Judgments between two models, seen from `model_a`. Percentages are over
/// `n`; `p_value` is a paired bootstrap on the win indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRow {
    pub model_a: String,
    pub model_b: String,
    pub n: usize,
    pub win: f64,
    pub tie: f64,
    pub loss: f64,
    pub p_value: f64,
    pub a_appropriateness: MeanStd,
    pub a_engagingness: MeanStd,
    pub b_appropriateness: MeanStd,
    pub b_engagingness: MeanStd,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HumanEvalTables {
    pub models: BTreeMap<String, ModelRatings>,
    pub pairwise: Vec<PairwiseRow>,
}

/// A judgment with the models behind each dialog.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedJudgment {
    pub model_a: String,
    pub model_b: String,
    pub judgment: PairwiseJudgment,
}

/// A preference with (a_appr, a_eng, b_appr, b_eng).
type Scored = (Preference, [f64; 4]);

pub fn summarize(
    ratings: &[(String, Rating)],
    judgments: &[ResolvedJudgment],
    resamples: usize,
    seed: u64,
) -> HumanEvalTables {
    let mut by_model: BTreeMap<&str, Vec<&Rating>> = BTreeMap::new();
    for (model, r) in ratings {
        by_model.entry(model).or_default().push(r);
    }
    let models = by_model
        .into_iter()
        .map(|(m, rs)| {
            let col = |f: fn(&Rating) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let summary = ModelRatings {
                n: rs.len(),
                success: col(|r| if r.success { 1.0 } else { 0.0 }),
                appropriateness: col(|r| r.appropriateness as f64),
                engagingness: col(|r| r.engagingness as f64),
            };
            (m.to_string(), summary)
        })
        .collect();

    // Orient each judgment so the lexicographically smaller model is side A.
    let mut by_pair: BTreeMap<(&str, &str), Vec<Scored>> = BTreeMap::new();
    for rj in judgments {
        let j = &rj.judgment;
        let scores =
            [j.a_appropriateness as f64, j.a_engagingness as f64, j.b_appropriateness as f64, j.b_engagingness as f64];
        if rj.model_a <= rj.model_b {
            by_pair.entry((&rj.model_a, &rj.model_b)).or_default().push((j.overall, scores));
        } else {
            let flipped = match j.overall {
                Preference::A => Preference::B,
                Preference::B => Preference::A,
                Preference::Tie => Preference::Tie,
            };
            by_pair
                .entry((&rj.model_b, &rj.model_a))
                .or_default()
                .push((flipped, [scores[2], scores[3], scores[0], scores[1]]));
        }
    }
    let pairwise = by_pair
        .into_iter()
        .map(|((a, b), js)| {
            let n = js.len();
            let pct = |p: Preference| 100.0 * js.iter().filter(|(x, _)| *x == p).count() as f64 / n as f64;
            let wins_a: Vec<f64> = js.iter().map(|(p, _)| (*p == Preference::A) as u8 as f64).collect();
            let wins_b: Vec<f64> = js.iter().map(|(p, _)| (*p == Preference::B) as u8 as f64).collect();
            let col = |i: usize| mean_std(&js.iter().map(|(_, s)| s[i]).collect::<Vec<_>>());
            PairwiseRow {
                model_a: a.to_string(),
                model_b: b.to_string(),
                n,
                win: pct(Preference::A),
                tie: pct(Preference::Tie),
                loss: pct(Preference::B),
                p_value: paired_bootstrap(&wins_a, &wins_b, resamples, seed).expect("equal lengths"),
                a_appropriateness: col(0),
                a_engagingness: col(1),
                b_appropriateness: col(2),
                b_engagingness: col(3),
            }
        })
        .collect();
    HumanEvalTables { models, pairwise }
}

/// Rebuilds the tables from a raw record log. Records referring to unknown
/// sessions are ignored.
pub fn aggregate_records(records: &[Record], resamples: usize, seed: u64) -> HumanEvalTables {
    let mut model_of: BTreeMap<&str, &str> = BTreeMap::new();
    for r in records {
        if let Record::SessionCreated { session_id, model_name, .. } = r {
            model_of.insert(session_id, model_name);
        }
    }
    let mut ratings = Vec::new();
    let mut judgments = Vec::new();
    for r in records {
        match r {
            Record::Rating(rating) => {
                if let Some(m) = model_of.get(rating.session_id.as_str()) {
                    ratings.push((m.to_string(), rating.clone()));
                }
            }
            Record::Pairwise(j) => {
                if let (Some(a), Some(b)) = (model_of.get(j.dialog_a_id.as_str()), model_of.get(j.dialog_b_id.as_str()))
                {
                    judgments.push(ResolvedJudgment {
                        model_a: a.to_string(),
                        model_b: b.to_string(),
                        judgment: j.clone(),
                    });
                }
            }
            _ => {}
        }
    }
    summarize(&ratings, &judgments, resamples, seed)
}
