//! Point-wise sentence selection.
//!
//! Every sentence of every candidate document is scored against the claim by a
//! [`Scorer`]; the relevance used for ranking is `p(RELEVANT)` for binary
//! scorers and `1 - p(NEI)` for ternary ones. Sentences from pages reached via
//! hyperlinks of the initial top evidence are scaled by their parent's
//! relevance before being merged back in.

use std::collections::{HashMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimRecord, Corpus, Label, SentenceRef};
use crate::error::{Error, Result};
use crate::retrieval::{reretrieve_documents, DocCandidateSet};
use crate::text::analyze;

pub const TOP_EVIDENCE: usize = 5;
pub const PROB_TOLERANCE: f64 = 1e-6;
/// Negative-sample counts explored when tuning the selection model.
pub const NEGATIVE_SAMPLE_GRID: [usize; 4] = [5, 10, 20, 40];
pub const DEFAULT_NEGATIVES: usize = 10;

/// Class probabilities in REFUTES, NEI, SUPPORTS order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxTriple {
    pub p_refutes: f64,
    pub p_nei: f64,
    pub p_supports: f64,
}

impl SoftmaxTriple {
    pub const UNIFORM: SoftmaxTriple = SoftmaxTriple { p_refutes: 1.0 / 3.0, p_nei: 1.0 / 3.0, p_supports: 1.0 / 3.0 };

    pub fn new(p_refutes: f64, p_nei: f64, p_supports: f64) -> Result<Self> {
        Self::from_slice(&[p_refutes, p_nei, p_supports])
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        check_distribution(p, 3)?;
        Ok(Self { p_refutes: p[0], p_nei: p[1], p_supports: p[2] })
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.p_refutes, self.p_nei, self.p_supports]
    }
}

/// Length and simplex check for a probability vector.
pub fn check_distribution(p: &[f64], expected_len: usize) -> Result<()> {
    if p.len() != expected_len {
        return Err(Error::Dimension { expected: expected_len, actual: p.len() });
    }
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::invalid(format!("probabilities out of [0, 1]: {p:?}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerMode {
    /// (IRRELEVANT, RELEVANT)
    Binary,
    /// (REFUTES, NEI, SUPPORTS)
    Ternary,
}

impl ScorerMode {
    pub fn width(self) -> usize {
        match self {
            ScorerMode::Binary => 2,
            ScorerMode::Ternary => 3,
        }
    }
}

/// What a scoring call is asked to judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Sentence-selection relevance, one vector per sentence.
    Sentence,
    /// Claim classification per (claim, evidence) pair.
    Claim,
    /// Claim classification over all evidence concatenated; one vector.
    ClaimConcat,
}

/// Scoring boundary for sentence selection and claim classification.
pub trait Scorer: Send + Sync {
    /// Width of the vectors returned for [`ScoreKind::Sentence`].
    /// Claim kinds always return triples.
    fn mode(&self) -> ScorerMode;

    fn score_batch(&self, kind: ScoreKind, claim: &str, sentences: &[&str]) -> Result<Vec<Vec<f64>>>;
}

pub fn relevance_from_probs(probs: &[f64], mode: ScorerMode) -> Result<f64> {
    check_distribution(probs, mode.width())?;
    Ok(match mode {
        ScorerMode::Binary => probs[1],
        ScorerMode::Ternary => 1.0 - probs[1],
    })
}

/// Deterministic stand-in scorer based on unigram TF-IDF cosine.
///
/// With `c` the clamped cosine, the triple is `(c/2, 1 - c, c/2)`; it carries
/// relevance information but no stance.
#[derive(Debug, Clone, Default)]
pub struct LexicalScorer {
    doc_freq: HashMap<String, u32>,
    n_docs: usize,
}

const LEXICAL_STANCE: f64 = 0.5;

impl LexicalScorer {
    /// Document frequencies taken from the corpus bodies.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        for doc in corpus.documents() {
            let terms: HashSet<String> = analyze(&doc.body_text(), true, true, 1).into_iter().collect();
            for t in terms {
                *doc_freq.entry(t).or_insert(0) += 1;
            }
        }
        Self { doc_freq, n_docs: corpus.len() }
    }

    fn vector(&self, text: &str) -> HashMap<String, f64> {
        let mut tf: HashMap<String, f64> = HashMap::new();
        for t in analyze(text, true, true, 1) {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        for (term, w) in tf.iter_mut() {
            let df = self.doc_freq.get(term).copied().unwrap_or(0);
            *w *= crate::tfidf::idf(self.n_docs, df as usize);
        }
        tf
    }

    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        let va = self.vector(a);
        let vb = self.vector(b);
        let mut keys: Vec<&String> = va.keys().filter(|k| vb.contains_key(*k)).collect();
        keys.sort();
        let dot: f64 = keys.iter().map(|k| va[*k] * vb[*k]).sum();
        let norm = |v: &HashMap<String, f64>| {
            let mut w: Vec<f64> = v.values().copied().collect();
            w.sort_by(f64::total_cmp);
            w.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        let denom = norm(&va) * norm(&vb);
        if denom == 0.0 {
            return 0.0;
        }
        (dot / denom).clamp(0.0, 1.0)
    }

    pub fn triple(&self, claim: &str, sentence: &str) -> SoftmaxTriple {
        let c = self.cosine(claim, sentence);
        SoftmaxTriple { p_refutes: c * (1.0 - LEXICAL_STANCE), p_nei: 1.0 - c, p_supports: c * LEXICAL_STANCE }
    }
}

impl Scorer for LexicalScorer {
    fn mode(&self) -> ScorerMode {
        ScorerMode::Ternary
    }

    fn score_batch(&self, kind: ScoreKind, claim: &str, sentences: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(match kind {
            ScoreKind::Sentence | ScoreKind::Claim => {
                sentences.iter().map(|s| self.triple(claim, s).to_array().to_vec()).collect()
            }
            ScoreKind::ClaimConcat => vec![self.triple(claim, &sentences.join(" ")).to_array().to_vec()],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Initial,
    Reretrieved { parent: SentenceRef, parent_relevance: f64, own_score: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceCandidate {
    pub sentence: SentenceRef,
    pub relevance: f64,
    pub provenance: Provenance,
    /// Raw scorer output for this sentence.
    pub probs: Option<Vec<f64>>,
}

/// Descending relevance, then ascending (page_id, line_index).
pub fn sort_candidates(cands: &mut [EvidenceCandidate]) {
    cands.sort_by(|a, b| b.relevance.total_cmp(&a.relevance).then_with(|| a.sentence.cmp(&b.sentence)));
}

/// Score every non-empty sentence of the given pages, one scorer call per page.
pub fn score_pages<'a>(
    claim: &ClaimRecord,
    pages: impl IntoIterator<Item = &'a str>,
    scorer: &dyn Scorer,
    corpus: &Corpus,
) -> Result<Vec<(SentenceRef, f64, Vec<f64>)>> {
    let mode = scorer.mode();
    let mut out = Vec::new();
    for page in pages {
        let Some(doc) = corpus.get_document(page) else {
            continue;
        };
        let sentences: Vec<(usize, &str)> = doc
            .sentences
            .iter()
            .filter(|s| !s.text.trim().is_empty())
            .map(|s| (s.line_index, s.text.as_str()))
            .collect();
        if sentences.is_empty() {
            continue;
        }
        let texts: Vec<&str> = sentences.iter().map(|(_, t)| *t).collect();
        let batch = || format!("claim {} page {}", claim.claim_id, page);
        let probs = scorer
            .score_batch(ScoreKind::Sentence, &claim.text, &texts)
            .map_err(|e| Error::Scorer { batch: batch(), reason: e.to_string() })?;
        if probs.len() != texts.len() {
            return Err(Error::Scorer {
                batch: batch(),
                reason: format!("expected {} vectors, got {}", texts.len(), probs.len()),
            });
        }
        for ((line, _), p) in sentences.into_iter().zip(probs) {
            let relevance =
                relevance_from_probs(&p, mode).map_err(|e| Error::Scorer { batch: batch(), reason: e.to_string() })?;
            out.push((SentenceRef { page_id: doc.page_id.clone(), line_index: line }, relevance, p));
        }
    }
    Ok(out)
}

pub fn rank_sentences<'a>(
    claim: &ClaimRecord,
    pages: impl IntoIterator<Item = &'a str>,
    scorer: &dyn Scorer,
    corpus: &Corpus,
) -> Result<Vec<EvidenceCandidate>> {
    let mut cands: Vec<EvidenceCandidate> = score_pages(claim, pages, scorer, corpus)?
        .into_iter()
        .map(|(sentence, relevance, p)| EvidenceCandidate {
            sentence,
            relevance,
            provenance: Provenance::Initial,
            probs: Some(p),
        })
        .collect();
    sort_candidates(&mut cands);
    Ok(cands)
}

/// A sentence from a re-retrieved page with its unscaled score.
#[derive(Debug, Clone, PartialEq)]
pub struct ReretrievedSentence {
    pub sentence: SentenceRef,
    pub own_score: f64,
    pub parent: SentenceRef,
    pub probs: Option<Vec<f64>>,
}

/// Scale each re-retrieved sentence by its parent's relevance and merge with
/// the initial ranking; initial scores are untouched.
pub fn apply_reretrieval_scaling(
    initial: &[EvidenceCandidate],
    reretrieved: Vec<ReretrievedSentence>,
) -> Result<Vec<EvidenceCandidate>> {
    let parents: HashMap<&SentenceRef, f64> = initial.iter().map(|c| (&c.sentence, c.relevance)).collect();
    let mut merged = initial.to_vec();
    for r in reretrieved {
        let &parent_relevance = parents
            .get(&r.parent)
            .ok_or_else(|| Error::Wiring(format!("re-retrieved {} has unknown parent {}", r.sentence, r.parent)))?;
        merged.push(EvidenceCandidate {
            sentence: r.sentence,
            relevance: parent_relevance * r.own_score,
            provenance: Provenance::Reretrieved { parent: r.parent, parent_relevance, own_score: r.own_score },
            probs: r.probs,
        });
    }
    sort_candidates(&mut merged);
    Ok(merged)
}

/// Prefix of an already sorted ranking.
pub fn select_top(merged: &[EvidenceCandidate], n: usize) -> Vec<EvidenceCandidate> {
    merged.iter().take(n).cloned().collect()
}

pub fn select_top5(merged: &[EvidenceCandidate]) -> Vec<EvidenceCandidate> {
    select_top(merged, TOP_EVIDENCE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub reretrieval: bool,
    /// How many initial candidates seed re-retrieval.
    pub reretrieval_pool: usize,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self { reretrieval: true, reretrieval_pool: TOP_EVIDENCE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub claim_id: u64,
    pub merged: Vec<EvidenceCandidate>,
    /// Pages added by re-retrieval.
    pub reretrieved_pages: Vec<String>,
}

impl SelectionOutcome {
    pub fn top5(&self) -> Vec<EvidenceCandidate> {
        select_top5(&self.merged)
    }
}

/// Rank initial candidates, then (optionally) score one hop of hyperlinked
/// pages and merge with parent scaling.
pub fn select_evidence(
    claim: &ClaimRecord,
    docs: &DocCandidateSet,
    scorer: &dyn Scorer,
    corpus: &Corpus,
    opts: &SelectionOptions,
) -> Result<SelectionOutcome> {
    let initial = rank_sentences(claim, docs.pages(), scorer, corpus)?;
    if !opts.reretrieval {
        return Ok(SelectionOutcome { claim_id: claim.claim_id, merged: initial, reretrieved_pages: Vec::new() });
    }
    let seeds: Vec<(SentenceRef, f64)> =
        initial.iter().take(opts.reretrieval_pool).map(|c| (c.sentence.clone(), c.relevance)).collect();
    let already: HashSet<String> = docs.pages().map(str::to_string).collect();
    let extra = reretrieve_documents(&seeds, corpus, &already);
    let mut children = Vec::new();
    for doc in &extra {
        for (sentence, own_score, p) in score_pages(claim, [doc.page_id.as_str()], scorer, corpus)? {
            children.push(ReretrievedSentence { sentence, own_score, parent: doc.parent.clone(), probs: Some(p) });
        }
    }
    let merged = apply_reretrieval_scaling(&initial, children)?;
    Ok(SelectionOutcome {
        claim_id: claim.claim_id,
        merged,
        reretrieved_pages: extra.into_iter().map(|d| d.page_id).collect(),
    })
}

/// One line of the selection stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub page: String,
    pub line: usize,
    pub score: f64,
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<(String, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub own_score: Option<f64>,
    #[serde(default)]
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub id: u64,
    pub evidence: Vec<EvidenceRecord>,
    /// Pages added by hyperlink re-retrieval.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reretrieved: Vec<String>,
}

impl From<&EvidenceCandidate> for EvidenceRecord {
    fn from(c: &EvidenceCandidate) -> Self {
        let (provenance, parent, parent_score, own_score) = match &c.provenance {
            Provenance::Initial => ("INITIAL".to_string(), None, None, None),
            Provenance::Reretrieved { parent, parent_relevance, own_score } => (
                "RERETRIEVED".to_string(),
                Some((parent.page_id.clone(), parent.line_index)),
                Some(*parent_relevance),
                Some(*own_score),
            ),
        };
        EvidenceRecord {
            page: c.sentence.page_id.clone(),
            line: c.sentence.line_index,
            score: c.relevance,
            provenance,
            parent,
            parent_score,
            own_score,
            probs: c.probs.clone().unwrap_or_default(),
        }
    }
}

impl EvidenceRecord {
    pub fn to_candidate(&self) -> Result<EvidenceCandidate> {
        let provenance = match self.provenance.as_str() {
            "INITIAL" => Provenance::Initial,
            "RERETRIEVED" => {
                let (page, line) = self
                    .parent
                    .clone()
                    .ok_or_else(|| Error::invalid(format!("re-retrieved evidence {}:{} without parent", self.page, self.line)))?;
                Provenance::Reretrieved {
                    parent: SentenceRef { page_id: page, line_index: line },
                    parent_relevance: self.parent_score.unwrap_or(f64::NAN),
                    own_score: self.own_score.unwrap_or(f64::NAN),
                }
            }
            other => return Err(Error::invalid(format!("unknown provenance {other:?}"))),
        };
        Ok(EvidenceCandidate {
            sentence: SentenceRef { page_id: self.page.clone(), line_index: self.line },
            relevance: self.score,
            provenance,
            probs: (!self.probs.is_empty()).then(|| self.probs.clone()),
        })
    }
}

impl SelectionRecord {
    pub fn from_candidates(id: u64, cands: &[EvidenceCandidate]) -> Self {
        Self { id, evidence: cands.iter().map(EvidenceRecord::from).collect(), reretrieved: Vec::new() }
    }

    pub fn candidates(&self) -> Result<Vec<EvidenceCandidate>> {
        self.evidence.iter().map(EvidenceRecord::to_candidate).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainingLabel {
    #[serde(rename = "RELEVANT")]
    Relevant,
    #[serde(rename = "IRRELEVANT")]
    Irrelevant,
    #[serde(rename = "SUPPORTS")]
    Supports,
    #[serde(rename = "REFUTES")]
    Refutes,
    #[serde(rename = "NOT ENOUGH INFO")]
    NotEnoughInfo,
}

impl From<Label> for TrainingLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Supports => TrainingLabel::Supports,
            Label::Refutes => TrainingLabel::Refutes,
            Label::NotEnoughInfo => TrainingLabel::NotEnoughInfo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionTrainingExample {
    pub claim: String,
    pub sentence: String,
    pub label: TrainingLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub claims: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Claims whose retrieved pages held fewer non-gold sentences than requested.
    pub short_claims: Vec<u64>,
    /// Gold sentences that could not be resolved in the corpus.
    pub dangling_gold: usize,
}

/// Gold sentences as positives plus `n_negatives` non-gold sentences sampled
/// without replacement from the claim's retrieved pages. Each claim draws
/// from its own RNG stream derived from `(seed, claim_id)`.
pub fn export_training_data(
    claims: &[ClaimRecord],
    corpus: &Corpus,
    doc_sets: &HashMap<u64, DocCandidateSet>,
    n_negatives: usize,
    mode: ScorerMode,
    seed: u64,
) -> (Vec<SelectionTrainingExample>, ExportReport) {
    let mut out = Vec::new();
    let mut report = ExportReport::default();
    for claim in claims {
        report.claims += 1;
        let mut gold: Vec<&SentenceRef> = claim.gold_evidence.iter().flat_map(|g| g.members()).collect();
        gold.sort();
        gold.dedup();
        let gold_set: HashSet<&SentenceRef> = gold.iter().copied().collect();
        for r in &gold {
            match corpus.get_sentence(r) {
                Some(s) if !s.text.trim().is_empty() => {
                    let label = match (mode, claim.gold_label) {
                        (ScorerMode::Binary, _) => TrainingLabel::Relevant,
                        (ScorerMode::Ternary, Some(l)) => l.into(),
                        (ScorerMode::Ternary, None) => TrainingLabel::Supports,
                    };
                    out.push(SelectionTrainingExample { claim: claim.text.clone(), sentence: s.text.clone(), label });
                    report.positives += 1;
                }
                _ => report.dangling_gold += 1,
            }
        }

        let mut pool: Vec<&str> = Vec::new();
        if let Some(docs) = doc_sets.get(&claim.claim_id) {
            for page in docs.pages() {
                let Some(doc) = corpus.get_document(page) else { continue };
                for s in &doc.sentences {
                    let r = SentenceRef { page_id: doc.page_id.clone(), line_index: s.line_index };
                    if !s.text.trim().is_empty() && !gold_set.contains(&r) {
                        pool.push(&s.text);
                    }
                }
            }
        }
        if pool.len() < n_negatives {
            report.short_claims.push(claim.claim_id);
        }
        let take = n_negatives.min(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ claim.claim_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut picked = sample(&mut rng, pool.len(), take).into_vec();
        picked.sort_unstable();
        let negative = match mode {
            ScorerMode::Binary => TrainingLabel::Irrelevant,
            ScorerMode::Ternary => TrainingLabel::NotEnoughInfo,
        };
        for i in picked {
            out.push(SelectionTrainingExample { claim: claim.text.clone(), sentence: pool[i].to_string(), label: negative });
            report.negatives += 1;
        }
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EvidenceGroup;
    use crate::retrieval::DocSource;

    fn cand(page: &str, line: usize, relevance: f64) -> EvidenceCandidate {
        EvidenceCandidate {
            sentence: SentenceRef::new(page, line),
            relevance,
            provenance: Provenance::Initial,
            probs: None,
        }
    }

    fn child(page: &str, own: f64, parent: &EvidenceCandidate) -> ReretrievedSentence {
        ReretrievedSentence { sentence: SentenceRef::new(page, 0), own_score: own, parent: parent.sentence.clone(), probs: None }
    }

    #[test]
    fn relevance_transforms() {
        assert_eq!(relevance_from_probs(&[0.2, 0.5, 0.3], ScorerMode::Ternary).unwrap(), 0.5);
        assert_eq!(relevance_from_probs(&[0.9, 0.1], ScorerMode::Binary).unwrap(), 0.1);
        assert_eq!(relevance_from_probs(&[0.0, 1.0, 0.0], ScorerMode::Ternary).unwrap(), 0.0);
        assert!(matches!(
            relevance_from_probs(&[0.5, 0.5], ScorerMode::Ternary),
            Err(Error::Dimension { expected: 3, actual: 2 })
        ));
        assert!(relevance_from_probs(&[0.5, 0.6], ScorerMode::Binary).is_err());
    }

    #[test]
    fn scaling_arithmetic() {
        let p = cand("P", 0, 0.9);
        let merged = apply_reretrieval_scaling(&[p.clone()], vec![child("C", 0.8, &p)]).unwrap();
        assert!((merged[1].relevance - 0.72).abs() < 1e-12);

        let one = cand("P", 0, 1.0);
        let merged = apply_reretrieval_scaling(&[one.clone()], vec![child("C", 0.37, &one)]).unwrap();
        assert_eq!(merged[1].relevance, 0.37);
    }

    #[test]
    fn scaling_merges_in_order() {
        let a = cand("A", 0, 0.9);
        let b = cand("B", 0, 0.7);
        let merged = apply_reretrieval_scaling(&[a.clone(), b.clone()], vec![child("C", 0.85, &a)]).unwrap();
        let scores: Vec<f64> = merged.iter().map(|c| c.relevance).collect();
        assert_eq!(scores[0], 0.9);
        assert!((scores[1] - 0.765).abs() < 1e-12);
        assert_eq!(scores[2], 0.7);
        assert_eq!(merged[0], a);
        assert_eq!(merged[2], b);
    }

    #[test]
    fn missing_parent_is_wiring_error() {
        let a = cand("A", 0, 0.9);
        let orphan = ReretrievedSentence {
            sentence: SentenceRef::new("C", 0),
            own_score: 0.5,
            parent: SentenceRef::new("Z", 9),
            probs: None,
        };
        assert!(matches!(apply_reretrieval_scaling(&[a], vec![orphan]), Err(Error::Wiring(_))));
    }

    #[test]
    fn top5_prefix() {
        let mut all: Vec<_> = (0..7).map(|i| cand("P", i, 1.0 - i as f64 / 10.0)).collect();
        sort_candidates(&mut all);
        let top = select_top5(&all);
        assert_eq!(top.len(), 5);
        assert_eq!(&all[..5], &top[..]);
        assert_eq!(select_top5(&all[..3]).len(), 3);
    }

    #[test]
    fn weak_parent_does_not_displace() {
        let initial: Vec<_> = [0.9, 0.8, 0.7, 0.6, 0.5].iter().enumerate().map(|(i, &s)| cand("I", i, s)).collect();
        let weak = cand("W", 0, 0.1);
        let mut all = initial.clone();
        all.push(weak.clone());
        let merged = apply_reretrieval_scaling(&all, vec![child("X", 0.99, &weak)]).unwrap();
        let top = select_top5(&merged);
        assert!(top.iter().any(|c| c.sentence == SentenceRef::new("I", 4)));
        assert!(!top.iter().any(|c| c.sentence.page_id == "X"));
    }

    #[test]
    fn lexical_scorer_bounds() {
        let s = LexicalScorer::default();
        let t = s.triple("Barack Obama was born in Hawaii", "Barack Obama was born in Hawaii");
        assert!(t.p_nei.abs() < 1e-12);
        let t = s.triple("Barack Obama", "completely unrelated words");
        assert_eq!(t.p_nei, 1.0);
        let t = s.triple("Obama born Hawaii", "Obama was born in Honolulu, Hawaii");
        assert!((t.to_array().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(t.p_nei > 0.0 && t.p_nei < 1.0);
        assert_eq!(t.p_refutes, t.p_supports);
    }

    #[test]
    fn rank_ties_and_empty_sentences() {
        let corpus = Corpus::ingest(
            r#"{"id": "B", "lines": "0\tsame text\n1\t\n2\tsame text"}
{"id": "A", "lines": "0\tsame text"}"#
                .as_bytes(),
        )
        .unwrap()
        .0;
        let claim = ClaimRecord { claim_id: 1, text: "same text".into(), gold_label: None, gold_evidence: vec![] };
        let ranked = rank_sentences(&claim, ["B", "A"], &LexicalScorer::from_corpus(&corpus), &corpus).unwrap();
        let refs: Vec<String> = ranked.iter().map(|c| c.sentence.to_string()).collect();
        assert_eq!(refs, ["A:0", "B:0", "B:2"]);
    }

    struct Broken;
    impl Scorer for Broken {
        fn mode(&self) -> ScorerMode {
            ScorerMode::Binary
        }
        fn score_batch(&self, _: ScoreKind, _: &str, s: &[&str]) -> Result<Vec<Vec<f64>>> {
            Ok(s.iter().map(|_| vec![0.3, 0.3]).collect())
        }
    }

    #[test]
    fn scorer_failure_names_batch() {
        let corpus = Corpus::ingest(r#"{"id": "P", "lines": "0\tx"}"#.as_bytes()).unwrap().0;
        let claim = ClaimRecord { claim_id: 4, text: "x".into(), gold_label: None, gold_evidence: vec![] };
        match rank_sentences(&claim, ["P"], &Broken, &corpus) {
            Err(Error::Scorer { batch, .. }) => assert_eq!(batch, "claim 4 page P"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn export_fixture() -> (Corpus, HashMap<u64, DocCandidateSet>) {
        let corpus = Corpus::ingest(
            r#"{"id": "P", "lines": "0\ts0\n1\ts1\n2\ts2\n3\ts3\n4\ts4\n5\ts5\n6\ts6\n7\t"}
{"id": "Q", "lines": "0\tq0\n1\tq1"}"#
                .as_bytes(),
        )
        .unwrap()
        .0;
        let mut docs = DocCandidateSet::new(1);
        docs.push("P", DocSource::TitleTfidf, 1.0);
        docs.push("Q", DocSource::BodyTfidf, 1.0);
        let mut nei_docs = DocCandidateSet::new(2);
        nei_docs.push("P", DocSource::TitleTfidf, 1.0);
        (corpus, HashMap::from([(1, docs), (2, nei_docs)]))
    }

    #[test]
    fn export_counts() {
        let (corpus, docs) = export_fixture();
        let supports = ClaimRecord {
            claim_id: 1,
            text: "c".into(),
            gold_label: Some(Label::Supports),
            gold_evidence: vec![EvidenceGroup::new([SentenceRef::new("P", 0), SentenceRef::new("P", 2)]).unwrap()],
        };
        let (ex, report) = export_training_data(&[supports], &corpus, &docs, 5, ScorerMode::Ternary, 7);
        assert_eq!(ex.iter().filter(|e| e.label == TrainingLabel::Supports).count(), 2);
        assert_eq!(ex.iter().filter(|e| e.label == TrainingLabel::NotEnoughInfo).count(), 5);
        assert!(ex.iter().filter(|e| e.label == TrainingLabel::NotEnoughInfo).all(|e| e.sentence != "s0" && e.sentence != "s2"));
        assert!(report.short_claims.is_empty());

        let nei = ClaimRecord { claim_id: 2, text: "n".into(), gold_label: Some(Label::NotEnoughInfo), gold_evidence: vec![] };
        let (ex, _) = export_training_data(&[nei.clone()], &corpus, &docs, 5, ScorerMode::Binary, 7);
        assert_eq!(ex.len(), 5);
        assert!(ex.iter().all(|e| e.label == TrainingLabel::Irrelevant));

        let (ex, report) = export_training_data(&[nei], &corpus, &docs, 10, ScorerMode::Binary, 7);
        assert_eq!(ex.len(), 7);
        assert_eq!(report.short_claims, vec![2]);
    }

    #[test]
    fn export_is_seeded() {
        let (corpus, docs) = export_fixture();
        let nei = ClaimRecord { claim_id: 2, text: "n".into(), gold_label: Some(Label::NotEnoughInfo), gold_evidence: vec![] };
        let run = |seed| {
            let (ex, _) = export_training_data(&[nei.clone()], &corpus, &docs, 3, ScorerMode::Ternary, seed);
            serde_json::to_string(&ex).unwrap()
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn stage_record_round_trip() {
        let a = cand("A", 0, 0.9);
        let merged = apply_reretrieval_scaling(&[a.clone()], vec![child("C", 0.5, &a)]).unwrap();
        let rec = SelectionRecord::from_candidates(3, &merged);
        let json = serde_json::to_string(&rec).unwrap();
        let back: SelectionRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.candidates().unwrap(), merged);
    }
}
