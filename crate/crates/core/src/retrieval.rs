//! Per-claim document candidates: title and body TF-IDF hits, fuzzy title
//! hits, and pages reached through hyperlinks of initial evidence.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimRecord, Corpus, SentenceRef};
use crate::error::{Error, Result};
use crate::fuzzy::{distance_budget, QueryTermSet, TitleDictionary, DEFAULT_MAX_DISTANCE};
use crate::tfidf::TfIdfIndex;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DocSource {
    Fuzzy,
    TitleTfidf,
    BodyTfidf,
    /// Single index over title + body text.
    CatTfidf,
    Reretrieved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocCandidate {
    #[serde(rename = "page")]
    pub page_id: String,
    pub source: DocSource,
    pub score: f64,
    /// Every source that proposed this page, first one first.
    #[serde(default)]
    pub sources: Vec<DocSource>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DocCandidateSet {
    #[serde(rename = "id")]
    pub claim_id: u64,
    #[serde(rename = "docs")]
    pub candidates: Vec<DocCandidate>,
}

impl DocCandidateSet {
    pub fn new(claim_id: u64) -> Self {
        Self { claim_id, candidates: Vec::new() }
    }

    /// Adds the page unless present; a repeat only records the extra source.
    pub fn push(&mut self, page_id: &str, source: DocSource, score: f64) -> bool {
        if let Some(existing) = self.candidates.iter_mut().find(|c| c.page_id == page_id) {
            if !existing.sources.contains(&source) {
                existing.sources.push(source);
            }
            return false;
        }
        self.candidates.push(DocCandidate { page_id: page_id.to_string(), source, score, sources: vec![source] });
        true
    }

    pub fn pages(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.page_id.as_str())
    }

    pub fn contains(&self, page_id: &str) -> bool {
        self.candidates.iter().any(|c| c.page_id == page_id)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Sparse indices backing retrieval: either a title/body pair or a single
/// concatenated index.
#[derive(Debug, Clone, Copy)]
pub enum SparseIndices<'a> {
    Separated { title: &'a TfIdfIndex, body: &'a TfIdfIndex },
    Concatenated(&'a TfIdfIndex),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalOptions {
    /// Total TF-IDF documents; split evenly between title and body when separated.
    pub k: usize,
    pub fuzzy: bool,
    pub max_distance: usize,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self { k: DEFAULT_K, fuzzy: true, max_distance: DEFAULT_MAX_DISTANCE }
    }
}

/// Score given to a fuzzy hit at `distance`.
pub fn fuzzy_score(distance: usize, max_distance: usize) -> f64 {
    1.0 - distance as f64 / (max_distance as f64 + 1.0)
}

/// All fuzzy hits for the terms, sorted by distance (stable across term order),
/// first occurrence per page kept.
pub fn fuzzy_candidates(dict: &TitleDictionary, terms: &QueryTermSet, max_distance: usize) -> Vec<(String, usize)> {
    let mut hits: Vec<(String, usize)> = terms
        .terms()
        .iter()
        .flat_map(|t| dict.lookup(t, distance_budget(t, max_distance)))
        .collect();
    hits.sort_by_key(|(_, d)| *d);
    let mut seen = HashSet::new();
    hits.retain(|(p, _)| seen.insert(p.clone()));
    hits
}

/// Fuzzy hits first (by distance), then title hits, then body hits;
/// de-duplicated by page with the first source winning.
pub fn retrieve_documents(
    claim: &ClaimRecord,
    indices: SparseIndices<'_>,
    dict: &TitleDictionary,
    terms: &QueryTermSet,
    opts: &RetrievalOptions,
) -> Result<DocCandidateSet> {
    let mut set = DocCandidateSet::new(claim.claim_id);
    if opts.fuzzy {
        for (page, d) in fuzzy_candidates(dict, terms, opts.max_distance) {
            set.push(&page, DocSource::Fuzzy, fuzzy_score(d, opts.max_distance));
        }
    }
    match indices {
        SparseIndices::Separated { title, body } => {
            if opts.k == 0 || opts.k % 2 != 0 {
                return Err(Error::invalid(format!("k must be a positive even number, got {}", opts.k)));
            }
            let half = opts.k / 2;
            let title_hits = title.top_k(&claim.text, half);
            let body_hits = body.top_k(&claim.text, half);
            for (page, s) in title_hits {
                set.push(&page, DocSource::TitleTfidf, s);
            }
            for (page, s) in body_hits {
                set.push(&page, DocSource::BodyTfidf, s);
            }
        }
        SparseIndices::Concatenated(index) => {
            if opts.k == 0 {
                return Err(Error::invalid("k must be positive"));
            }
            for (page, s) in index.top_k(&claim.text, opts.k) {
                set.push(&page, DocSource::CatTfidf, s);
            }
        }
    }
    Ok(set)
}

/// A page reached through a hyperlink of an initial evidence sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ReretrievedDoc {
    pub page_id: String,
    pub parent: SentenceRef,
    pub parent_score: f64,
}

/// Hyperlink targets of the initial evidence that are in the corpus and not
/// already candidates. A page linked from several sentences keeps the
/// highest-scored parent (ties: smallest ref).
pub fn reretrieve_documents(
    initial: &[(SentenceRef, f64)],
    corpus: &Corpus,
    already: &HashSet<String>,
) -> Vec<ReretrievedDoc> {
    let mut ordered: Vec<&(SentenceRef, f64)> = initial.iter().collect();
    ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut out: Vec<ReretrievedDoc> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (parent, score) in ordered {
        let Some(sentence) = corpus.get_sentence(parent) else {
            continue;
        };
        for target in &sentence.hyperlinks {
            if already.contains(target) || !corpus.contains(target) || seen.contains_key(target.as_str()) {
                continue;
            }
            seen.insert(target.as_str(), out.len());
            out.push(ReretrievedDoc { page_id: target.clone(), parent: parent.clone(), parent_score: *score });
        }
    }
    out
}
