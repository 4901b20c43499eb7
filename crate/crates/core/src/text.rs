//! Small text helpers shared by the corpus, synthesis and modeling code.
//!
//! Matching is ASCII case-insensitive so that byte offsets in the original
//! string stay valid after case folding.

/// Characters that may appear inside a word for boundary purposes.
fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Byte spans of `[placeholder]` tokens in `text`.
pub fn placeholder_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_' || bytes[j].is_ascii_digit()) {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b']' && j > i + 1 {
                spans.push((i, j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    spans
}

/// All word-boundary anchored, ASCII case-insensitive occurrences of `needle`
/// in `haystack`, as byte offsets. Occurrences overlapping a `[placeholder]`
/// are ignored.
pub fn find_all_words(haystack: &str, needle: &str) -> Vec<usize> {
    let needle = needle.trim();
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    let hay = haystack.as_bytes();
    let pat = needle.as_bytes();
    let protected = placeholder_spans(haystack);
    let mut found = Vec::new();
    let mut start = 0;
    while start + pat.len() <= hay.len() {
        let end = start + pat.len();
        if hay[start..end].eq_ignore_ascii_case(pat)
            && haystack.is_char_boundary(start)
            && haystack.is_char_boundary(end)
        {
            let left_ok = start == 0 || !is_word_byte(hay[start - 1]) || !is_word_byte(pat[0]);
            let right_ok = end == hay.len() || !is_word_byte(hay[end]) || !is_word_byte(pat[pat.len() - 1]);
            let inside = protected.iter().any(|&(a, b)| start < b && end > a);
            if left_ok && right_ok && !inside {
                found.push(start);
            }
        }
        start += 1;
    }
    found
}

/// First word-boundary occurrence of `needle` in `haystack`.
pub fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    find_all_words(haystack, needle).into_iter().next()
}

/// Whether `haystack` mentions `needle` as a whole word or phrase.
pub fn contains_word(haystack: &str, needle: &str) -> bool {
    find_word(haystack, needle).is_some()
}

/// Collapses runs of whitespace into single spaces and trims the ends.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace token count, used for utterance-length statistics.
pub fn whitespace_len(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Prefix marking a token glued to its predecessor (no space in between).
pub const GLUE: &str = "##";

/// Whitespace + punctuation splitter used for budget accounting and the toy
/// model. Punctuation becomes separate tokens; a token that was attached to
/// the previous one carries the [`GLUE`] prefix so that
/// `detokenize(tokenize(t)) == normalize_ws(t)`. Bracketed placeholders such
/// as `[value_time]` stay whole.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn new() -> Self {
        Tokenizer
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut first = true;
            let mut push = |tok: &str, out: &mut Vec<String>| {
                if first {
                    out.push(tok.to_string());
                    first = false;
                } else {
                    out.push(format!("{GLUE}{tok}"));
                }
            };
            let spans = placeholder_spans(word);
            let chars: Vec<(usize, char)> = word.char_indices().collect();
            let mut ci = 0;
            while ci < chars.len() {
                let (pos, ch) = chars[ci];
                if let Some(&(_, end)) = spans.iter().find(|&&(a, _)| a == pos) {
                    push(&word[pos..end], &mut out);
                    while ci < chars.len() && chars[ci].0 < end {
                        ci += 1;
                    }
                    continue;
                }
                if ch.is_alphanumeric() {
                    let begin = pos;
                    while ci < chars.len() && chars[ci].1.is_alphanumeric() {
                        ci += 1;
                    }
                    let end = chars.get(ci).map(|c| c.0).unwrap_or(word.len());
                    push(&word[begin..end], &mut out);
                } else {
                    push(&word[pos..pos + ch.len_utf8()], &mut out);
                    ci += 1;
                }
            }
        }
        out
    }

    pub fn detokenize<S: AsRef<str>>(&self, tokens: &[S]) -> String {
        let mut out = String::new();
        for tok in tokens {
            let tok = tok.as_ref();
            if let Some(rest) = tok.strip_prefix(GLUE) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    pub fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn word_boundaries() {
        assert!(contains_word("Arrive in Norwich please?", "norwich"));
        assert!(!contains_word("Norwichshire is far", "norwich"));
        assert!(!contains_word("the [train_id] leaves", "train"));
        assert_eq!(find_word("in the centre on thursday", "thursday"), Some(17));
        assert!(contains_word("leaves at 10:15.", "10:15"));
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        let t = Tokenizer::new();
        assert_eq!(t.tokenize("tod: train day=thursday"), vec!["tod", "##:", "train", "day", "##=", "##thursday"]);
        assert_eq!(t.tokenize("[train_id] at [value_time]."), vec!["[train_id]", "at", "[value_time]", "##."]);
    }

    proptest! {
        #[test]
        fn tokenizer_round_trip(s in "[a-zA-Z0-9 .,:;!?=#\\[\\]_'-]{0,60}") {
            let t = Tokenizer::new();
            prop_assert_eq!(t.detokenize(&t.tokenize(&s)), normalize_ws(&s));
        }
    }
}
