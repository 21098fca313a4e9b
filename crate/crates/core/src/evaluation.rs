//! FEVER metrics with official group-complete evidence semantics.
//!
//! Predicted evidence is de-duplicated and cut to the first five references
//! before any evidence check. A claim's evidence counts as found when every
//! member of at least one gold group is among those five.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::aggregation::SubmissionRecord;
use crate::corpus::{ClaimRecord, Label, SentenceRef};
use crate::error::{Error, Result};
use crate::selection::TOP_EVIDENCE;

/// De-duplicate (first occurrence wins) and keep the first `k`.
pub fn truncate_evidence(evidence: &[SentenceRef], k: usize) -> Vec<SentenceRef> {
    let mut seen = HashSet::new();
    evidence.iter().filter(|r| seen.insert(*r)).take(k).cloned().collect()
}

pub fn evidence_covered(gold: &ClaimRecord, predicted: &[SentenceRef]) -> bool {
    gold.gold_evidence.iter().any(|g| g.members().iter().all(|m| predicted.contains(m)))
}

/// Pair predictions with gold claims; any id without a partner is an error.
fn match_claims<'a>(
    predictions: &'a [SubmissionRecord],
    gold: &'a [ClaimRecord],
) -> Result<Vec<(&'a SubmissionRecord, &'a ClaimRecord)>> {
    if predictions.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    let by_id: HashMap<u64, &ClaimRecord> = gold.iter().map(|c| (c.claim_id, c)).collect();
    let mut seen = HashSet::new();
    let mut unmatched = Vec::new();
    let mut pairs = Vec::with_capacity(predictions.len());
    for p in predictions {
        match by_id.get(&p.id) {
            Some(g) if seen.insert(p.id) => pairs.push((p, *g)),
            _ => unmatched.push(p.id),
        }
    }
    unmatched.extend(gold.iter().map(|c| c.claim_id).filter(|id| !seen.contains(id)));
    if !unmatched.is_empty() {
        unmatched.sort_unstable();
        unmatched.dedup();
        return Err(Error::UnmatchedIds(unmatched));
    }
    for (_, g) in &pairs {
        if g.gold_label.is_none() {
            return Err(Error::invalid(format!("gold claim {} has no label", g.claim_id)));
        }
    }
    Ok(pairs)
}

fn fever_hit(p: &SubmissionRecord, g: &ClaimRecord) -> bool {
    if Some(p.predicted_label) != g.gold_label {
        return false;
    }
    g.gold_label == Some(Label::NotEnoughInfo) || evidence_covered(g, &truncate_evidence(&p.evidence_refs(), TOP_EVIDENCE))
}

pub fn fever_score(predictions: &[SubmissionRecord], gold: &[ClaimRecord]) -> Result<f64> {
    let pairs = match_claims(predictions, gold)?;
    Ok(pairs.iter().filter(|(p, g)| fever_hit(p, g)).count() as f64 / pairs.len() as f64)
}

pub fn label_accuracy(predictions: &[SubmissionRecord], gold: &[ClaimRecord]) -> Result<f64> {
    let pairs = match_claims(predictions, gold)?;
    Ok(pairs.iter().filter(|(p, g)| Some(p.predicted_label) == g.gold_label).count() as f64 / pairs.len() as f64)
}

/// Share of evidence-bearing claims with a complete gold group in the first
/// `k` predicted references. Claims without gold evidence are left out; with
/// none left the result is 0.
pub fn recall_at_k(predictions: &[SubmissionRecord], gold: &[ClaimRecord], k: usize) -> Result<f64> {
    let pairs = match_claims(predictions, gold)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, g) in pairs {
        if g.gold_evidence.is_empty() {
            continue;
        }
        total += 1;
        if evidence_covered(g, &truncate_evidence(&p.evidence_refs(), k)) {
            hits += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Oracle score given retrieved pages: NEI claims always count; others count
/// when every page of some gold group was retrieved.
pub fn ofever(retrieved: &HashMap<u64, Vec<String>>, gold: &[ClaimRecord]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::invalid("no gold claims"));
    }
    let gold_ids: HashSet<u64> = gold.iter().map(|c| c.claim_id).collect();
    let mut unmatched: Vec<u64> = gold.iter().map(|c| c.claim_id).filter(|id| !retrieved.contains_key(id)).collect();
    unmatched.extend(retrieved.keys().filter(|id| !gold_ids.contains(id)));
    if !unmatched.is_empty() {
        unmatched.sort_unstable();
        return Err(Error::UnmatchedIds(unmatched));
    }
    let hits = gold
        .iter()
        .filter(|g| {
            g.gold_label == Some(Label::NotEnoughInfo) || {
                let pages = &retrieved[&g.claim_id];
                g.gold_evidence.iter().any(|grp| grp.pages().all(|p| pages.iter().any(|r| r == p)))
            }
        })
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimOutcome {
    pub id: u64,
    pub gold_label: Label,
    pub predicted_label: Label,
    pub label_correct: bool,
    /// `None` for claims without gold evidence.
    pub evidence_covered: Option<bool>,
    pub fever_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_claims: usize,
    pub n_evidence_claims: usize,
    pub label_accuracy: f64,
    pub fever_score: f64,
    pub recall_at_5: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ofever: Option<f64>,
    /// gold label -> predicted label -> count
    pub confusion: BTreeMap<Label, BTreeMap<Label, usize>>,
    pub per_claim: Vec<ClaimOutcome>,
}

impl MetricReport {
    pub fn compute(
        predictions: &[SubmissionRecord],
        gold: &[ClaimRecord],
        retrieved: Option<&HashMap<u64, Vec<String>>>,
    ) -> Result<MetricReport> {
        let pairs = match_claims(predictions, gold)?;
        let mut per_claim = Vec::with_capacity(pairs.len());
        let mut confusion: BTreeMap<Label, BTreeMap<Label, usize>> = BTreeMap::new();
        for (p, g) in &pairs {
            let gold_label = g.gold_label.expect("checked by match_claims");
            let top = truncate_evidence(&p.evidence_refs(), TOP_EVIDENCE);
            let covered = (!g.gold_evidence.is_empty()).then(|| evidence_covered(g, &top));
            *confusion.entry(gold_label).or_default().entry(p.predicted_label).or_insert(0) += 1;
            per_claim.push(ClaimOutcome {
                id: p.id,
                gold_label,
                predicted_label: p.predicted_label,
                label_correct: gold_label == p.predicted_label,
                evidence_covered: covered,
                fever_hit: fever_hit(p, g),
            });
        }
        per_claim.sort_by_key(|c| c.id);
        let n = per_claim.len() as f64;
        let n_evidence_claims = per_claim.iter().filter(|c| c.evidence_covered.is_some()).count();
        let covered = per_claim.iter().filter(|c| c.evidence_covered == Some(true)).count();
        Ok(MetricReport {
            n_claims: per_claim.len(),
            n_evidence_claims,
            label_accuracy: per_claim.iter().filter(|c| c.label_correct).count() as f64 / n,
            fever_score: per_claim.iter().filter(|c| c.fever_hit).count() as f64 / n,
            recall_at_5: if n_evidence_claims == 0 { 0.0 } else { covered as f64 / n_evidence_claims as f64 },
            ofever: retrieved.map(|r| ofever(r, gold)).transpose()?,
            confusion,
            per_claim,
        })
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![
            vec!["claims".to_string(), self.n_claims.to_string()],
            vec!["label accuracy".to_string(), pct(self.label_accuracy)],
            vec!["FEVER score".to_string(), pct(self.fever_score)],
            vec!["recall@5".to_string(), pct(self.recall_at_5)],
        ];
        if let Some(o) = self.ofever {
            rows.push(vec!["OFEVER".to_string(), pct(o)]);
        }
        render_table(&["metric", "value"], &rows)
    }
}

pub fn pct(v: f64) -> String {
    format!("{:.2} %", v * 100.0)
}

/// Plain-text table with left-aligned first column and right-aligned others.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let fmt_row = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{:<w$}", c, w = widths[i]) } else { format!("{:>w$}", c, w = widths[i]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = fmt_row(headers.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EvidenceGroup;

    fn gold(id: u64, label: Label, groups: &[&[(&str, usize)]]) -> ClaimRecord {
        ClaimRecord {
            claim_id: id,
            text: String::new(),
            gold_label: Some(label),
            gold_evidence: groups
                .iter()
                .map(|g| EvidenceGroup::new(g.iter().map(|(p, l)| SentenceRef::new(p, *l))).unwrap())
                .collect(),
        }
    }

    fn pred(id: u64, label: Label, ev: &[(&str, usize)]) -> SubmissionRecord {
        SubmissionRecord {
            id,
            predicted_label: label,
            predicted_evidence: ev.iter().map(|(p, l)| (p.to_string(), *l)).collect(),
        }
    }

    #[test]
    fn nei_needs_label_only() {
        let g = [gold(1, Label::NotEnoughInfo, &[])];
        let p = [pred(1, Label::NotEnoughInfo, &[("Anything", 3)])];
        assert_eq!(fever_score(&p, &g).unwrap(), 1.0);
    }

    #[test]
    fn incomplete_group_scores_zero() {
        let g = [gold(1, Label::Supports, &[&[("P", 0), ("P", 2)]])];
        let p = [pred(1, Label::Supports, &[("P", 0), ("Q", 1)])];
        assert_eq!(fever_score(&p, &g).unwrap(), 0.0);
        assert_eq!(label_accuracy(&p, &g).unwrap(), 1.0);
    }

    #[test]
    fn recall_pigeonhole() {
        let g = [gold(1, Label::Supports, &[&[("P", 0), ("P", 2)]])];
        let p = [pred(1, Label::Supports, &[("P", 0), ("P", 2)])];
        assert_eq!(recall_at_k(&p, &g, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&p, &g, 1).unwrap(), 0.0);
    }

    #[test]
    fn duplicates_do_not_waste_slots() {
        let g = [gold(1, Label::Supports, &[&[("P", 5)]])];
        let p = [pred(1, Label::Supports, &[("A", 0), ("A", 0), ("A", 0), ("A", 0), ("A", 0), ("P", 5)])];
        assert_eq!(fever_score(&p, &g).unwrap(), 1.0);
    }

    #[test]
    fn unmatched_and_empty() {
        let g = [gold(1, Label::Supports, &[&[("P", 0)]]), gold(2, Label::Refutes, &[&[("P", 1)]])];
        let p = [pred(1, Label::Supports, &[]), pred(3, Label::Supports, &[])];
        match label_accuracy(&p, &g) {
            Err(Error::UnmatchedIds(ids)) => assert_eq!(ids, vec![2, 3]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(label_accuracy(&[], &g), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ofever_cases() {
        let g = [
            gold(1, Label::NotEnoughInfo, &[]),
            gold(2, Label::Supports, &[&[("A", 0)]]),
            gold(3, Label::Refutes, &[&[("A", 0), ("B", 1)]]),
        ];
        let retrieved: HashMap<u64, Vec<String>> =
            [(1, vec![]), (2, vec!["A".to_string()]), (3, vec!["A".to_string()])].into();
        assert!((ofever(&retrieved, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn table_renders() {
        let t = render_table(&["a", "bb"], &[vec!["x".into(), "1".into()], vec!["long".into(), "22".into()]]);
        assert_eq!(t, "a     bb\n----  --\nx      1\nlong  22\n");
    }
}
