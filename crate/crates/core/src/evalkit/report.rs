use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    align, combined, corpus_mode_accuracy, dialog_outcome, odd_success_rate, odd_turns_all_detected, reference_text,
    BleuStats, DialogPrediction, EvalError, BLEU_VARIANT,
};
use crate::corpus::{Dialog, Mode};
use crate::knowledge::Database;
use crate::synthesis::Setting;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Score transition turns in ODD BLEU.
    pub transition_in_odd_bleu: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { transition_in_odd_bleu: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TodBlock {
    pub bleu: f64,
    pub success: f64,
    pub inform: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddBlock {
    pub accuracy: f64,
    pub success_rate: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullBlock {
    pub bleu: f64,
    pub inform: f64,
    pub success: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub bleu_variant: String,
    pub setting: Setting,
    pub seed: u64,
    pub n_dialogs: usize,
    pub tod: TodBlock,
    /// Absent when the corpus has no ODD system turns.
    pub odd: Option<OddBlock>,
    pub full: FullBlock,
}

impl EvalReport {
    /// Metric name and value pairs in table order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("tod.bleu", self.tod.bleu),
            ("tod.success", self.tod.success),
            ("tod.inform", self.tod.inform),
            ("tod.combined", self.tod.combined),
        ];
        if let Some(o) = &self.odd {
            out.extend([("odd.accuracy", o.accuracy), ("odd.success_rate", o.success_rate), ("odd.bleu", o.bleu)]);
        }
        out.extend([
            ("full.bleu", self.full.bleu),
            ("full.inform", self.full.inform),
            ("full.success", self.full.success),
            ("full.combined", self.full.combined),
        ]);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }
}

fn bleu_where(
    golds: &[Dialog],
    preds: &[DialogPrediction],
    keep: impl Fn(&crate::corpus::Turn) -> bool,
) -> Result<Option<f64>, EvalError> {
    let mut stats = BleuStats::default();
    let mut n = 0;
    for (g, p) in align(golds, preds)? {
        for tp in &p.turns {
            let turn = &g.turns[tp.turn_index];
            if keep(turn) {
                stats.add(reference_text(turn), &tp.response);
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| stats.score()))
}

/// BLEU over every system turn; inform and success count only for dialogs
/// whose gold-ODD turns were all predicted ODD, with percentages over the
/// whole dialog set.
pub fn full_task_eval(golds: &[Dialog], preds: &[DialogPrediction], db: &Database) -> Result<FullBlock, EvalError> {
    let pairs = align(golds, preds)?;
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let bleu = bleu_where(golds, preds, |_| true)?.ok_or(EvalError::Empty)?;
    let mut inform = 0usize;
    let mut success = 0usize;
    for (g, p) in &pairs {
        if !odd_turns_all_detected(g, p) {
            continue;
        }
        let o = dialog_outcome(g, p, db)?;
        inform += usize::from(o.inform);
        success += usize::from(o.success);
    }
    let n = pairs.len() as f64;
    let inform = 100.0 * inform as f64 / n;
    let success = 100.0 * success as f64 / n;
    Ok(FullBlock { bleu, inform, success, combined: combined(inform, success, bleu) })
}

pub fn evaluate(
    golds: &[Dialog],
    preds: &[DialogPrediction],
    db: &Database,
    setting: Setting,
    seed: u64,
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    let (inform, success) = super::inform_success(golds, preds, db)?;
    let tod_bleu = bleu_where(golds, preds, |t| t.mode == Mode::Tod)?.unwrap_or(0.0);
    let tod = TodBlock { bleu: tod_bleu, success, inform, combined: combined(inform, success, tod_bleu) };
    let odd = match bleu_where(golds, preds, |t| {
        t.mode == Mode::Odd && (options.transition_in_odd_bleu || !t.is_transition)
    })? {
        Some(bleu) => Some(OddBlock {
            accuracy: corpus_mode_accuracy(golds, preds)?,
            success_rate: odd_success_rate(golds, preds)?,
            bleu,
        }),
        None if golds.iter().flat_map(|g| &g.turns).any(|t| t.is_system() && t.mode == Mode::Odd) => Some(OddBlock {
            accuracy: corpus_mode_accuracy(golds, preds)?,
            success_rate: odd_success_rate(golds, preds)?,
            bleu: 0.0,
        }),
        None => None,
    };
    let full = full_task_eval(golds, preds, db)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        bleu_variant: BLEU_VARIANT.to_string(),
        setting,
        seed,
        n_dialogs: golds.len(),
        tod,
        odd,
        full,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std =
        if n < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub setting: Setting,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    pub metrics: IndexMap<String, MeanStd>,
}

/// Mean and sample standard deviation of every metric across runs.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<RunAggregate, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewRuns(reports.len()));
    }
    let setting = reports[0].setting;
    if reports.iter().any(|r| r.setting != setting) {
        return Err(EvalError::MixedSettings);
    }
    let mut values: IndexMap<String, Vec<f64>> = IndexMap::new();
    for r in reports {
        for (name, v) in r.metrics() {
            values.entry(name.to_string()).or_default().push(v);
        }
    }
    let metrics =
        values.into_iter().filter(|(_, v)| v.len() == reports.len()).map(|(k, v)| (k, mean_std(&v))).collect();
    Ok(RunAggregate { setting, n_runs: reports.len(), seeds: reports.iter().map(|r| r.seed).collect(), metrics })
}

/// One train/eval cell of the cross-setting matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCell {
    pub train: Setting,
    pub eval: Setting,
    /// Full-task combined score; mean over runs.
    pub combined: Option<MeanStd>,
    pub aggregate: Option<RunAggregate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub cells: Vec<CrossCell>,
}

impl CrossMatrix {
    pub fn get(&self, train: Setting, eval: Setting) -> Option<&CrossCell> {
        self.cells.iter().find(|c| c.train == train && c.eval == eval)
    }
}

/// Seeded prediction sets keyed by (train setting, eval setting).
pub type CrossRuns = BTreeMap<(Setting, Setting), Vec<(u64, Vec<DialogPrediction>)>>;

/// Scores every (train setting, eval setting) pair. `runs` holds one
/// prediction set per seed; a missing or failing cell is reported in place.
pub fn cross_setting_eval(
    runs: &CrossRuns,
    golds: &BTreeMap<Setting, Vec<Dialog>>,
    db: &Database,
    options: EvalOptions,
) -> CrossMatrix {
    let mut cells = Vec::new();
    for train in Setting::ALL {
        for eval in Setting::ALL {
            let result = (|| -> Result<(MeanStd, Option<RunAggregate>), String> {
                let seeds = runs.get(&(train, eval)).filter(|r| !r.is_empty()).ok_or("no runs")?;
                let gold = golds.get(&eval).ok_or("no evaluation corpus")?;
                let reports = seeds
                    .iter()
                    .map(|(seed, preds)| evaluate(gold, preds, db, eval, *seed, options))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| e.to_string())?;
                let scores: Vec<f64> = reports.iter().map(|r| r.full.combined).collect();
                let aggregate = if reports.len() >= 2 { aggregate_runs(&reports).ok() } else { None };
                Ok((mean_std(&scores), aggregate))
            })();
            cells.push(match result {
                Ok((combined, aggregate)) => {
                    CrossCell { train, eval, combined: Some(combined), aggregate, error: None }
                }
                Err(e) => CrossCell { train, eval, combined: None, aggregate: None, error: Some(e) },
            });
        }
    }
    CrossMatrix { cells }
}

/// Two-sided paired bootstrap p-value for the mean of `a - b`: resampled
/// mean differences are centred on the observed one and compared in
/// absolute value. Returns 1.0 for empty or constant-zero differences.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let observed = diffs.iter().sum::<f64>() / n as f64;
    if observed == 0.0 {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += diffs[rng.gen_range(0..n)];
        }
        if (s / n as f64 - observed).abs() >= observed.abs() {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (resamples + 1) as f64)
}

fn cell(m: Option<&MeanStd>) -> String {
    match m {
        Some(m) => format!("{:.2} ({:.2})", m.mean, m.std),
        None => "-".to_string(),
    }
}

/// Plain-text table of aggregated runs, one row per model.
pub fn render_aggregate_table(rows: &[(String, RunAggregate)]) -> String {
    let cols = [
        ("TOD BLEU", "tod.bleu"),
        ("TOD Success", "tod.success"),
        ("TOD Inform", "tod.inform"),
        ("TOD Combined", "tod.combined"),
        ("ODD Accuracy", "odd.accuracy"),
        ("ODD Success Rate", "odd.success_rate"),
        ("ODD BLEU", "odd.bleu"),
        ("Full BLEU", "full.bleu"),
        ("Full Inform", "full.inform"),
        ("Full Success", "full.success"),
        ("Full Combined", "full.combined"),
    ];
    let mut out = String::new();
    let _ = write!(out, "{:<12}", "Model");
    for (h, _) in cols {
        let _ = write!(out, " | {h:>16}");
    }
    out.push('\n');
    for (name, agg) in rows {
        let _ = write!(out, "{name:<12}");
        for (_, key) in cols {
            let _ = write!(out, " | {:>16}", cell(agg.metrics.get(key)));
        }
        out.push('\n');
    }
    out
}

/// Plain-text train-by-eval matrix of full-task combined scores.
pub fn render_cross_matrix(matrix: &CrossMatrix) -> String {
    let mut out = format!("{:<12}", "train\\eval");
    for e in Setting::ALL {
        let _ = write!(out, " | {:>16}", e.as_str());
    }
    out.push('\n');
    for t in Setting::ALL {
        let _ = write!(out, "{:<12}", t.as_str());
        for e in Setting::ALL {
            let _ = write!(out, " | {:>16}", cell(matrix.get(t, e).and_then(|c| c.combined.as_ref())));
        }
        out.push('\n');
    }
    out
}
