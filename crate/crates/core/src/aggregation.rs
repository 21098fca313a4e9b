//! Turns per-evidence claim-classifier outputs into one verdict per claim.
//!
//! Singleton and mixed modes feed a 5x4 (or 6x4) matrix of
//! `[p_refutes, p_nei, p_supports, retrieval_score]` rows into a GBDT;
//! concatenated mode takes the argmax of a single triple.

use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimRecord, Corpus, Label, SentenceRef};
use crate::error::{Error, Result};
use crate::gbdt::{grid_search_cv, CvReport, GbdtConfig, GbdtModel};
use crate::selection::{EvidenceCandidate, ScoreKind, Scorer, SoftmaxTriple, TOP_EVIDENCE};

pub const FEATURE_WIDTH: usize = 4;
pub const SINGLETON_ROWS: usize = TOP_EVIDENCE;
pub const MIXED_ROWS: usize = TOP_EVIDENCE + 1;
pub const N_LABELS: usize = 3;
const PAD_ROW: [f64; FEATURE_WIDTH] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    Singleton,
    Concatenated,
    Mixed,
}

impl AggregationMode {
    pub fn rows(self) -> Option<usize> {
        match self {
            AggregationMode::Singleton => Some(SINGLETON_ROWS),
            AggregationMode::Mixed => Some(MIXED_ROWS),
            AggregationMode::Concatenated => None,
        }
    }
}

/// One piece of predicted evidence with its claim-classifier output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredEvidence {
    pub claim_probs: SoftmaxTriple,
    pub retrieval_score: f64,
}

impl ScoredEvidence {
    fn row(&self) -> [f64; FEATURE_WIDTH] {
        let [r, n, s] = self.claim_probs.to_array();
        [r, n, s, self.retrieval_score]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationFeatures {
    rows: Vec<[f64; FEATURE_WIDTH]>,
}

impl AggregationFeatures {
    pub fn rows(&self) -> &[[f64; FEATURE_WIDTH]] {
        &self.rows
    }

    /// Row-major, length 20 (singleton) or 24 (mixed).
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn unflatten(flat: &[f64]) -> Result<AggregationFeatures> {
        let n = flat.len();
        if n != SINGLETON_ROWS * FEATURE_WIDTH && n != MIXED_ROWS * FEATURE_WIDTH {
            return Err(Error::Dimension { expected: SINGLETON_ROWS * FEATURE_WIDTH, actual: n });
        }
        let rows = flat.chunks_exact(FEATURE_WIDTH).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        Ok(AggregationFeatures { rows })
    }
}

/// Rows sorted by descending retrieval score (remaining ties by the full row),
/// padded with `[1/3, 1/3, 1/3, 0]`; mixed mode appends the concatenated triple
/// with the mean retrieval score of the five rows.
pub fn build_features(
    evidence: &[ScoredEvidence],
    concat_probs: Option<SoftmaxTriple>,
    mode: AggregationMode,
) -> Result<AggregationFeatures> {
    if evidence.len() > TOP_EVIDENCE {
        return Err(Error::invalid(format!("{} evidence rows, at most {TOP_EVIDENCE} allowed", evidence.len())));
    }
    if mode == AggregationMode::Concatenated {
        return Err(Error::invalid("concatenated aggregation takes a single triple, not features"));
    }
    let mut rows: Vec<[f64; FEATURE_WIDTH]> = evidence.iter().map(ScoredEvidence::row).collect();
    rows.sort_by(|a, b| {
        b[3].total_cmp(&a[3])
            .then(a[0].total_cmp(&b[0]))
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    rows.resize(SINGLETON_ROWS, PAD_ROW);
    if mode == AggregationMode::Mixed {
        let concat = concat_probs.ok_or_else(|| Error::invalid("mixed aggregation needs concatenated probabilities"))?;
        let mean = rows.iter().map(|r| r[3]).sum::<f64>() / SINGLETON_ROWS as f64;
        let [r, n, s] = concat.to_array();
        rows.push([r, n, s, mean]);
    }
    Ok(AggregationFeatures { rows })
}

pub fn label_from_class(class: usize) -> Result<Label> {
    Label::from_class_index(class).ok_or_else(|| Error::invalid(format!("class {class} is not a label")))
}

pub fn aggregate(features: &AggregationFeatures, model: &GbdtModel) -> Result<Label> {
    if model.n_classes != N_LABELS {
        return Err(Error::Dimension { expected: N_LABELS, actual: model.n_classes });
    }
    label_from_class(model.predict(&features.flatten())?)
}

/// Argmax with ties resolved toward SUPPORTS, then REFUTES, then NEI.
pub fn aggregate_concatenated(probs: SoftmaxTriple) -> Label {
    let ranked = [(Label::Supports, probs.p_supports), (Label::Refutes, probs.p_refutes), (Label::NotEnoughInfo, probs.p_nei)];
    let mut best = ranked[0];
    for cand in &ranked[1..] {
        if cand.1 > best.1 {
            best = *cand;
        }
    }
    best.0
}

/// Cross-validated grid search on dev-set features, then a refit of the best
/// configuration on all of them.
pub fn train_aggregator(
    features: &[AggregationFeatures],
    labels: &[Label],
    grid: &[GbdtConfig],
    folds: usize,
    seed: u64,
) -> Result<(GbdtModel, CvReport)> {
    let x: Vec<Vec<f64>> = features.iter().map(AggregationFeatures::flatten).collect();
    let y: Vec<usize> = labels.iter().map(|l| l.class_index()).collect();
    let report = grid_search_cv(&x, &y, N_LABELS, grid, folds, seed)?;
    let model = GbdtModel::fit(&x, &y, N_LABELS, &report.best)?;
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregationMethod {
    Singleton,
    Concatenated,
    Mixed,
}

impl From<AggregationMode> for AggregationMethod {
    fn from(m: AggregationMode) -> Self {
        match m {
            AggregationMode::Singleton => AggregationMethod::Singleton,
            AggregationMode::Concatenated => AggregationMethod::Concatenated,
            AggregationMode::Mixed => AggregationMethod::Mixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimVerdict {
    pub claim_id: u64,
    pub label: Label,
    pub evidence: Vec<SentenceRef>,
    pub method: AggregationMethod,
}

/// FEVER submission line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub id: u64,
    pub predicted_label: Label,
    pub predicted_evidence: Vec<(String, usize)>,
}

impl From<&ClaimVerdict> for SubmissionRecord {
    fn from(v: &ClaimVerdict) -> Self {
        SubmissionRecord {
            id: v.claim_id,
            predicted_label: v.label,
            predicted_evidence: v.evidence.iter().map(|r| (r.page_id.clone(), r.line_index)).collect(),
        }
    }
}

impl SubmissionRecord {
    pub fn evidence_refs(&self) -> Vec<SentenceRef> {
        self.predicted_evidence
            .iter()
            .map(|(p, l)| SentenceRef { page_id: p.clone(), line_index: *l })
            .collect()
    }
}

/// Claim-classifier outputs for the top evidence of one claim: one triple per
/// sentence and, when asked, one triple over the claim followed by all evidence
/// in descending retrieval order.
pub fn classify_evidence(
    claim: &ClaimRecord,
    top: &[EvidenceCandidate],
    corpus: &Corpus,
    scorer: &dyn Scorer,
    with_concat: bool,
) -> Result<(Vec<ScoredEvidence>, Option<SoftmaxTriple>)> {
    let mut ordered: Vec<&EvidenceCandidate> = top.iter().take(TOP_EVIDENCE).collect();
    ordered.sort_by(|a, b| b.relevance.total_cmp(&a.relevance).then_with(|| a.sentence.cmp(&b.sentence)));
    let texts: Vec<&str> = ordered
        .iter()
        .map(|c| corpus.get_sentence(&c.sentence).map_or("", |s| s.text.as_str()))
        .collect();
    let batch = || format!("claim {} evidence", claim.claim_id);
    let wrap = |e: Error| Error::Scorer { batch: batch(), reason: e.to_string() };
    let mut scored = Vec::with_capacity(texts.len());
    if !texts.is_empty() {
        let probs = scorer.score_batch(ScoreKind::Claim, &claim.text, &texts).map_err(wrap)?;
        if probs.len() != texts.len() {
            return Err(wrap(Error::Dimension { expected: texts.len(), actual: probs.len() }));
        }
        for (c, p) in ordered.iter().zip(probs) {
            scored.push(ScoredEvidence { claim_probs: SoftmaxTriple::from_slice(&p).map_err(wrap)?, retrieval_score: c.relevance });
        }
    }
    let concat = if with_concat {
        let p = scorer.score_batch(ScoreKind::ClaimConcat, &claim.text, &texts).map_err(wrap)?;
        let first = p.first().ok_or_else(|| wrap(Error::invalid("empty concatenated response")))?;
        Some(SoftmaxTriple::from_slice(first).map_err(wrap)?)
    } else {
        None
    };
    Ok((scored, concat))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(r: f64, n: f64, s: f64, score: f64) -> ScoredEvidence {
        ScoredEvidence { claim_probs: SoftmaxTriple::new(r, n, s).unwrap(), retrieval_score: score }
    }

    #[test]
    fn shapes() {
        let five: Vec<_> = (0..5).map(|i| ev(0.2, 0.3, 0.5, i as f64 / 10.0)).collect();
        let f = build_features(&five, Some(SoftmaxTriple::UNIFORM), AggregationMode::Mixed).unwrap();
        assert_eq!(f.rows().len(), 6);
        assert_eq!(f.flatten().len(), 24);
        assert!((f.rows()[5][3] - 0.2).abs() < 1e-12);

        let empty = build_features(&[], None, AggregationMode::Singleton).unwrap();
        assert_eq!(empty.flatten().len(), 20);
        assert!(empty.rows().iter().all(|r| *r == PAD_ROW));
    }

    #[test]
    fn rows_sorted_and_padded() {
        let e = [ev(0.1, 0.1, 0.8, 0.9), ev(0.1, 0.1, 0.8, 0.4), ev(0.1, 0.1, 0.8, 0.7)];
        let f = build_features(&e, None, AggregationMode::Singleton).unwrap();
        let scores: Vec<f64> = f.rows().iter().map(|r| r[3]).collect();
        assert_eq!(scores, [0.9, 0.7, 0.4, 0.0, 0.0]);
        assert_eq!(f.rows()[3], PAD_ROW);
    }

    #[test]
    fn feature_errors() {
        let six: Vec<_> = (0..6).map(|_| ev(0.2, 0.3, 0.5, 0.5)).collect();
        assert!(build_features(&six, None, AggregationMode::Singleton).is_err());
        assert!(build_features(&six[..2], None, AggregationMode::Mixed).is_err());
        assert!(AggregationFeatures::unflatten(&[0.0; 7]).is_err());
    }

    #[test]
    fn concatenated_argmax_and_ties() {
        assert_eq!(aggregate_concatenated(SoftmaxTriple::new(0.1, 0.2, 0.7).unwrap()), Label::Supports);
        assert_eq!(aggregate_concatenated(SoftmaxTriple::new(0.5, 0.3, 0.2).unwrap()), Label::Refutes);
        assert_eq!(aggregate_concatenated(SoftmaxTriple::UNIFORM), Label::Supports);
        assert_eq!(aggregate_concatenated(SoftmaxTriple::new(0.4, 0.4, 0.2).unwrap()), Label::Refutes);
        assert_eq!(aggregate_concatenated(SoftmaxTriple::new(0.2, 0.6, 0.2).unwrap()), Label::NotEnoughInfo);
    }

    #[test]
    fn degenerate_model_always_supports() {
        let feats: Vec<_> = (0..8)
            .map(|i| build_features(&[ev(0.3, 0.3, 0.4, i as f64 / 8.0)], None, AggregationMode::Singleton).unwrap())
            .collect();
        let labels = vec![Label::Supports; 8];
        let (model, _) = train_aggregator(&feats, &labels, &[GbdtConfig::default()], 4, 0).unwrap();
        for f in &feats {
            assert_eq!(aggregate(f, &model).unwrap(), Label::Supports);
        }
        let other = build_features(&[ev(0.9, 0.05, 0.05, 0.99)], None, AggregationMode::Singleton).unwrap();
        assert_eq!(aggregate(&other, &model).unwrap(), Label::Supports);
        assert_eq!(aggregate(&other, &model).unwrap(), aggregate(&other, &model).unwrap());
    }

    #[test]
    fn aggregate_rejects_wrong_width() {
        let f = build_features(&[], Some(SoftmaxTriple::UNIFORM), AggregationMode::Mixed).unwrap();
        let model = GbdtModel::constant(20, vec![0.0; 3]);
        assert!(matches!(aggregate(&f, &model), Err(Error::Dimension { expected: 20, actual: 24 })));
    }

    #[test]
    fn submission_shape() {
        let v = ClaimVerdict {
            claim_id: 9,
            label: Label::NotEnoughInfo,
            evidence: vec![SentenceRef::new("P", 2)],
            method: AggregationMethod::Singleton,
        };
        let json = serde_json::to_string(&SubmissionRecord::from(&v)).unwrap();
        assert_eq!(json, r#"{"id":9,"predicted_label":"NOT ENOUGH INFO","predicted_evidence":[["P",2]]}"#);
    }
}
