//! Edit-distance title lookup driven by entity-like spans pulled from a claim.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use crate::corpus::{display_title, Corpus};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_DISTANCE: usize = 2;
const SHORT_TERM_CHARS: usize = 4;

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein(&a, &b, usize::MAX).unwrap()
}

/// `Some(d)` iff the distance `d` is at most `max`. Stops once every cell in a
/// row exceeds the bound.
pub fn edit_distance_within(a: &str, b: &str, max: usize) -> Option<usize> {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein(&a, &b, max)
}

fn levenshtein(a: &[char], b: &[char], max: usize) -> Option<usize> {
    if a.len().abs_diff(b.len()) > max {
        return None;
    }
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return Some(a.len());
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        let mut row_min = cur[0];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
            row_min = row_min.min(cur[j + 1]);
        }
        if row_min > max {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[b.len()];
    (d <= max).then_some(d)
}

/// Lookup key for titles and query terms: display form, lowercased.
pub fn title_key(s: &str) -> String {
    display_title(s).to_lowercase()
}

/// Distance budget for a term: short terms (four characters or fewer) get at most 1.
pub fn distance_budget(term: &str, max_distance: usize) -> usize {
    if title_key(term).chars().count() <= SHORT_TERM_CHARS {
        max_distance.min(1)
    } else {
        max_distance
    }
}

/// Normalized title keys bucketed by character length.
#[derive(Debug, Clone, Default)]
pub struct TitleDictionary {
    entries: Vec<(String, String)>,
    by_len: BTreeMap<usize, Vec<usize>>,
}

impl TitleDictionary {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::from_page_ids(corpus.documents().iter().map(|d| d.page_id.clone()))
    }

    pub fn from_page_ids(pages: impl IntoIterator<Item = String>) -> Self {
        let mut dict = TitleDictionary::default();
        for page in pages {
            let key = title_key(&page);
            let idx = dict.entries.len();
            dict.by_len.entry(key.chars().count()).or_default().push(idx);
            dict.entries.push((key, page));
        }
        dict
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// (key, page_id) pairs in insertion order.
    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Every title within `max_distance` of the normalized term, ascending by
    /// (distance, key, page_id).
    pub fn lookup(&self, term: &str, max_distance: usize) -> Vec<(String, usize)> {
        let key = title_key(term);
        let query: Vec<char> = key.chars().collect();
        let lo = query.len().saturating_sub(max_distance);
        let hi = query.len().saturating_add(max_distance);
        let mut hits: Vec<(usize, &str, &str)> = Vec::new();
        for (_, bucket) in self.by_len.range(lo..=hi) {
            for &i in bucket {
                let (k, page) = &self.entries[i];
                let cand: Vec<char> = k.chars().collect();
                if let Some(d) = levenshtein(&query, &cand, max_distance) {
                    hits.push((d, k, page));
                }
            }
        }
        hits.sort();
        hits.into_iter().map(|(d, _, p)| (p.to_string(), d)).collect()
    }
}

pub fn fuzzy_lookup(dict: &TitleDictionary, term: &str, max_distance: usize) -> Vec<(String, usize)> {
    dict.lookup(term, max_distance)
}

/// Candidate entity strings for one claim: non-empty, unique ignoring case.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryTermSet {
    terms: Vec<String>,
}

impl QueryTermSet {
    pub fn new(raw: impl IntoIterator<Item = String>) -> Self {
        let mut seen = HashSet::new();
        let terms = raw
            .into_iter()
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty() && seen.insert(t.to_lowercase()))
            .collect();
        Self { terms }
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

const FUNCTION_WORDS: [&str; 5] = ["of", "the", "a", "an", "in"];

const VERB_LIKE: &[&str] = &[
    "is", "was", "are", "were", "be", "been", "being", "has", "had", "have", "does", "did", "do", "can", "could",
    "will", "would", "may", "might", "must", "should", "shall", "became", "becomes", "began", "starred", "stars",
    "won", "lost", "made", "makes", "played", "plays", "wrote", "writes", "died", "lived", "lives", "only", "not",
    "never", "exclusively",
];

struct Token<'a> {
    word: &'a str,
    closes_span: bool,
}

fn split_claim(text: &str) -> Vec<Token<'_>> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed_end = raw.trim_end_matches(|c: char| !c.is_alphanumeric());
            let closes_span = trimmed_end.len() != raw.len();
            let word = trimmed_end.trim_start_matches(|c: char| !c.is_alphanumeric());
            let word = word.strip_suffix("'s").or_else(|| word.strip_suffix("’s")).unwrap_or(word);
            (!word.is_empty()).then_some(Token { word, closes_span })
        })
        .collect()
}

fn is_function_word(w: &str) -> bool {
    FUNCTION_WORDS.iter().any(|f| f.eq_ignore_ascii_case(w))
}

fn starts_upper(w: &str) -> bool {
    w.chars().next().is_some_and(char::is_uppercase)
}

fn is_verb_like(w: &str) -> bool {
    let lower = w.to_lowercase();
    VERB_LIKE.contains(&lower.as_str()) || (lower.len() > 4 && lower.ends_with("ed") && !starts_upper(w))
}

fn join(tokens: &[Token<'_>]) -> String {
    tokens.iter().map(|t| t.word).collect::<Vec<_>>().join(" ")
}

/// Heuristic entity extractor standing in for a trained tagger.
///
/// Emits maximal runs of capitalized tokens, where a lowercase function word
/// (of/the/a/an/in) may sit between two capitalized tokens, and, when the first
/// token is a capitalized content word, the leading span up to the first
/// verb-like token.
pub fn extract_query_terms(claim_text: &str) -> QueryTermSet {
    let tokens = split_claim(claim_text);
    let mut terms = Vec::new();

    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        let opens = starts_upper(t.word) && !(is_function_word(t.word) && !next_is_upper_content(&tokens, i));
        if !opens {
            i += 1;
            continue;
        }
        let mut end = i + 1;
        let mut closed = t.closes_span;
        while end < tokens.len() && !closed {
            let w = tokens[end].word;
            if starts_upper(w) || (end > i && w.chars().all(|c| c.is_ascii_digit())) {
                closed = tokens[end].closes_span;
                end += 1;
            } else if is_function_word(w) && !tokens[end].closes_span && next_is_upper_content(&tokens, end) {
                end += 1;
            } else {
                break;
            }
        }
        let span = &tokens[i..end];
        if span.iter().any(|t| !is_function_word(t.word)) {
            terms.push(join(span));
        }
        i = end;
    }

    if let Some(first) = tokens.first() {
        if starts_upper(first.word) && !is_function_word(first.word) && !first.closes_span {
            let boundary = tokens.iter().position(|t| is_verb_like(t.word));
            if let Some(b) = boundary.filter(|&b| b >= 2) {
                let span = &tokens[..b];
                if span[..b - 1].iter().all(|t| !t.closes_span) {
                    terms.push(join(span));
                }
            }
        }
    }
    QueryTermSet::new(terms)
}

fn next_is_upper_content(tokens: &[Token<'_>], i: usize) -> bool {
    tokens.get(i + 1).is_some_and(|n| starts_upper(n.word) && !is_function_word(n.word))
}

#[derive(Deserialize)]
struct TermLine {
    id: u64,
    terms: Vec<String>,
}

/// Per-claim term overrides: line-delimited `{"id": .., "terms": [..]}`.
pub fn read_term_overrides<R: BufRead>(source: R) -> Result<HashMap<u64, QueryTermSet>> {
    let mut out = HashMap::new();
    for (n, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TermLine =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("terms line {}: {e}", n + 1)))?;
        out.insert(parsed.id, QueryTermSet::new(parsed.terms));
    }
    Ok(out)
}

pub fn read_term_overrides_path(path: &Path) -> Result<HashMap<u64, QueryTermSet>> {
    read_term_overrides(std::io::BufReader::new(std::fs::File::open(path)?))
}
