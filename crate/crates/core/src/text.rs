//! Tokenization shared by the sparse index and the lexical scorer.

use unicode_normalization::UnicodeNormalization;

/// NFKD decomposition followed by dropping every non-ASCII scalar.
pub fn fold_ascii(s: &str) -> String {
    s.nfkd().filter(char::is_ascii).collect()
}

/// Split on any non-alphanumeric character; empty pieces are dropped.
pub fn tokenize(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty())
}

/// Apply folding and case rules, then emit word n-grams of length
/// `1..=max_ngram` (n-grams joined by a single space).
pub fn analyze(text: &str, lowercase: bool, ascii: bool, max_ngram: usize) -> Vec<String> {
    let mut prepared = if ascii { fold_ascii(text) } else { text.to_string() };
    if lowercase {
        prepared = prepared.to_lowercase();
    }
    let tokens: Vec<&str> = tokenize(&prepared).collect();
    let mut out = Vec::with_capacity(tokens.len() * max_ngram.max(1));
    for n in 1..=max_ngram.max(1) {
        for window in tokens.windows(n) {
            out.push(window.join(" "));
        }
    }
    out
}
