use std::collections::HashMap;

use super::EvalError;

pub const BLEU_MAX_N: usize = 4;
/// Numerator used in place of a zero n-gram match count.
pub const BLEU_EPSILON: f64 = 0.1;
pub const BLEU_VARIANT: &str = "corpus-bleu4/uniform/eps-0.1/lowercase-whitespace/v1";

pub fn bleu_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram totals, summed over the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_N],
    pub totals: [usize; BLEU_MAX_N],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, reference: &str, hypothesis: &str) {
        let r = bleu_tokens(reference);
        let h = bleu_tokens(hypothesis);
        self.hyp_len += h.len();
        self.ref_len += r.len();
        for n in 1..=BLEU_MAX_N {
            let rc = ngram_counts(&r, n);
            let hc = ngram_counts(&h, n);
            self.totals[n - 1] += h.len().saturating_sub(n - 1);
            self.matches[n - 1] += hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    /// Score in [0, 100]. A zero match count becomes `BLEU_EPSILON` over the
    /// order's total, with an empty order treated as a total of one.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..BLEU_MAX_N {
            let total = self.totals[n].max(1) as f64;
            let m = if self.matches[n] == 0 { BLEU_EPSILON } else { self.matches[n] as f64 };
            log_sum += (m / total).ln();
        }
        let c = self.hyp_len as f64;
        let r = self.ref_len as f64;
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * (log_sum / BLEU_MAX_N as f64).exp()
    }
}

/// Corpus-level BLEU with one reference per hypothesis.
pub fn bleu<R: AsRef<str>, H: AsRef<str>>(references: &[R], hypotheses: &[H]) -> Result<f64, EvalError> {
    if references.len() != hypotheses.len() {
        return Err(EvalError::LengthMismatch(references.len(), hypotheses.len()));
    }
    if references.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut stats = BleuStats::default();
    for (r, h) in references.iter().zip(hypotheses) {
        stats.add(r.as_ref(), h.as_ref());
    }
    Ok(stats.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_100() {
        let refs = ["the train leaves at [value_time]", "i love the cathedral in norwich"];
        assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_corpus_is_near_zero() {
        let r: Vec<String> = (0..20).map(|i| format!("r{i}")).collect();
        let h: Vec<String> = (0..20).map(|i| format!("h{i}")).collect();
        let s = bleu(&[r.join(" ")], &[h.join(" ")]).unwrap();
        assert!(s > 0.0 && s < 1.0, "{s}");
    }

    #[test]
    fn hand_computed_three_sentences() {
        // matches/totals: 1-gram 10/13, 2-gram 5/10, 3-gram 2/7, 4-gram 1/4;
        // hypothesis length 13, reference length 14.
        let refs = ["the cat sat on the mat", "there is a train at noon", "thank you"];
        let hyps = ["the cat sat on a mat", "there is one train", "thank you so"];
        let precisions: f64 = (10.0 / 13.0) * (5.0 / 10.0) * (2.0 / 7.0) * (1.0 / 4.0);
        let expected = 100.0 * (1.0f64 - 14.0 / 13.0).exp() * precisions.powf(0.25);
        let got = bleu(&refs, &hyps).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn order_invariant_and_length_checked() {
        let refs = ["a b c", "d e f g", "h i"];
        let hyps = ["a b", "d e f", "h i j"];
        let a = bleu(&refs, &hyps).unwrap();
        let b = bleu(&[refs[2], refs[0], refs[1]], &[hyps[2], hyps[0], hyps[1]]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(bleu(&refs, &hyps[..2]), Err(EvalError::LengthMismatch(3, 2))));
    }
}
