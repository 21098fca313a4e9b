//! Sparse TF-IDF vectorizer with top-k retrieval and a recall@k grid search.
//!
//! Weighting: `tf' = tf` or `1 + ln(tf)` when sublinear, `idf = ln((1+N)/(1+df)) + 1`,
//! weight `tf' * idf`, optionally L2-normalized per row. Query vectors are
//! always L2-normalized; with `Norm::None` rows are scored un-normalized, so
//! the norm setting changes the ranking.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::corpus::{ClaimRecord, Corpus};
use crate::error::{Error, Result};
use crate::text::analyze;

const INDEX_MAGIC: &[u8; 8] = b"FVTFIDF1";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Norm {
    L2,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TfIdfConfig {
    pub force_lowercase: bool,
    pub force_ascii: bool,
    pub norm: Norm,
    pub sublinear_tf: bool,
    pub max_ngram: usize,
}

impl TfIdfConfig {
    /// Tuned setting for the title index.
    pub const TITLE: TfIdfConfig =
        TfIdfConfig { force_lowercase: true, force_ascii: true, norm: Norm::L2, sublinear_tf: true, max_ngram: 2 };
    /// Tuned setting for the document-body index.
    pub const BODY: TfIdfConfig =
        TfIdfConfig { force_lowercase: false, force_ascii: true, norm: Norm::None, sublinear_tf: true, max_ngram: 2 };
    /// Tuned setting for a single index over title + body.
    pub const CONCATENATED: TfIdfConfig =
        TfIdfConfig { force_lowercase: true, force_ascii: true, norm: Norm::None, sublinear_tf: true, max_ngram: 2 };

    /// The full 2x2x2x2x2 tuning grid, in a fixed order.
    pub fn grid() -> Vec<TfIdfConfig> {
        let mut out = Vec::with_capacity(32);
        for force_lowercase in [true, false] {
            for force_ascii in [true, false] {
                for norm in [Norm::L2, Norm::None] {
                    for sublinear_tf in [true, false] {
                        for max_ngram in [1, 2] {
                            out.push(TfIdfConfig { force_lowercase, force_ascii, norm, sublinear_tf, max_ngram });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn analyze(&self, text: &str) -> Vec<String> {
        analyze(text, self.force_lowercase, self.force_ascii, self.max_ngram)
    }

    fn tf_weight(&self, tf: u32) -> f64 {
        if self.sublinear_tf {
            1.0 + (tf as f64).ln()
        } else {
            tf as f64
        }
    }
}

impl fmt::Display for TfIdfConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.force_lowercase,
            self.force_ascii,
            match self.norm {
                Norm::L2 => "l2",
                Norm::None => "none",
            },
            self.sublinear_tf,
            self.max_ngram
        )
    }
}

/// Smoothed inverse document frequency.
pub fn idf(n_docs: usize, doc_freq: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + doc_freq as f64)).ln() + 1.0
}

/// Sparse query in the index's column space, sorted by column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryVector {
    pub entries: Vec<(u32, f64)>,
}

impl QueryVector {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfIndex {
    config: TfIdfConfig,
    terms: Vec<String>,
    vocabulary: HashMap<String, u32>,
    doc_freq: Vec<u32>,
    idf: Vec<f64>,
    row_keys: Vec<String>,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    data: Vec<f64>,
    /// Column-major copy of the matrix: per term, (row, weight) by ascending row.
    postings: Vec<Vec<(u32, f64)>>,
}

impl TfIdfIndex {
    pub fn build(texts: &[(String, String)], config: TfIdfConfig) -> Result<TfIdfIndex> {
        if texts.is_empty() {
            return Err(Error::invalid("cannot build a TF-IDF index over zero texts"));
        }
        if config.max_ngram == 0 {
            return Err(Error::invalid("max_ngram must be at least 1"));
        }
        let counts: Vec<BTreeMap<String, u32>> = texts
            .par_iter()
            .map(|(_, text)| {
                let mut tf = BTreeMap::new();
                for term in config.analyze(text) {
                    *tf.entry(term).or_insert(0u32) += 1;
                }
                tf
            })
            .collect();

        let mut df: BTreeMap<&str, u32> = BTreeMap::new();
        for tf in &counts {
            for term in tf.keys() {
                *df.entry(term.as_str()).or_insert(0) += 1;
            }
        }
        let terms: Vec<String> = df.keys().map(|t| t.to_string()).collect();
        let doc_freq: Vec<u32> = df.values().copied().collect();
        let vocabulary: HashMap<String, u32> = terms.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let n = texts.len();
        let idf_vec: Vec<f64> = doc_freq.iter().map(|&d| idf(n, d as usize)).collect();

        let rows: Vec<Vec<(u32, f64)>> = counts
            .par_iter()
            .map(|tf| {
                // BTreeMap iteration is in term order, which is column order.
                let mut row: Vec<(u32, f64)> = tf
                    .iter()
                    .map(|(term, &c)| {
                        let col = vocabulary[term];
                        (col, config.tf_weight(c) * idf_vec[col as usize])
                    })
                    .collect();
                if config.norm == Norm::L2 {
                    l2_normalize(&mut row);
                }
                row
            })
            .collect();

        let mut indptr = Vec::with_capacity(n + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        for row in rows {
            for (c, w) in row {
                indices.push(c);
                data.push(w);
            }
            indptr.push(indices.len());
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for (key, _) in texts {
            if !seen.insert(key.as_str()) {
                return Err(Error::invalid(format!("duplicate row key {key:?}")));
            }
        }
        let row_keys = texts.iter().map(|(k, _)| k.clone()).collect();
        let mut index = TfIdfIndex {
            config,
            terms,
            vocabulary,
            doc_freq,
            idf: idf_vec,
            row_keys,
            indptr,
            indices,
            data,
            postings: Vec::new(),
        };
        index.rebuild_postings();
        Ok(index)
    }

    fn rebuild_postings(&mut self) {
        let mut postings = vec![Vec::new(); self.terms.len()];
        for row in 0..self.row_keys.len() {
            for (c, w) in self.row(row) {
                postings[c as usize].push((row as u32, w));
            }
        }
        self.postings = postings;
    }

    pub fn config(&self) -> &TfIdfConfig {
        &self.config
    }

    pub fn n_rows(&self) -> usize {
        self.row_keys.len()
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn row_keys(&self) -> &[String] {
        &self.row_keys
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn doc_freq(&self, term: &str) -> Option<u32> {
        self.vocabulary.get(term).map(|&c| self.doc_freq[c as usize])
    }

    pub fn column(&self, term: &str) -> Option<u32> {
        self.vocabulary.get(term).copied()
    }

    /// Non-zero (column, weight) pairs of a row, ascending by column.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let (lo, hi) = (self.indptr[row], self.indptr[row + 1]);
        self.indices[lo..hi].iter().copied().zip(self.data[lo..hi].iter().copied())
    }

    /// L2-normalized query vector; out-of-vocabulary terms are dropped.
    pub fn query_vector(&self, text: &str) -> QueryVector {
        let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
        for term in self.config.analyze(text) {
            if let Some(&col) = self.vocabulary.get(&term) {
                *tf.entry(col).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(u32, f64)> =
            tf.into_iter().map(|(c, n)| (c, self.config.tf_weight(n) * self.idf[c as usize])).collect();
        l2_normalize(&mut entries);
        QueryVector { entries }
    }

    /// Dot product of a query against every row it touches, as (row, score).
    pub fn score_rows(&self, query: &QueryVector) -> Vec<(usize, f64)> {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for &(col, qw) in &query.entries {
            for &(row, w) in &self.postings[col as usize] {
                *acc.entry(row).or_insert(0.0) += qw * w;
            }
        }
        acc.into_iter().filter(|&(_, s)| s > 0.0).map(|(r, s)| (r as usize, s)).collect()
    }

    /// Highest-scoring rows, descending; ties by insertion order. Rows sharing
    /// no term with the query are never returned.
    pub fn top_k(&self, query_text: &str, k: usize) -> Vec<(String, f64)> {
        let q = self.query_vector(query_text);
        self.top_k_vector(&q, k).into_iter().map(|(r, s)| (self.row_keys[r].clone(), s)).collect()
    }

    pub fn top_k_vector(&self, query: &QueryVector, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || query.is_empty() {
            return Vec::new();
        }
        let mut scored = self.score_rows(query);
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        scored
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(INDEX_MAGIC);
        enc.u32(INDEX_VERSION);
        let c = &self.config;
        enc.u8(c.force_lowercase as u8);
        enc.u8(c.force_ascii as u8);
        enc.u8(matches!(c.norm, Norm::L2) as u8);
        enc.u8(c.sublinear_tf as u8);
        enc.u32(c.max_ngram as u32);
        enc.u64(self.terms.len() as u64);
        for (t, &df) in self.terms.iter().zip(&self.doc_freq) {
            enc.str(t);
            enc.u32(df);
        }
        enc.u64(self.row_keys.len() as u64);
        for k in &self.row_keys {
            enc.str(k);
        }
        for &p in &self.indptr {
            enc.u64(p as u64);
        }
        for (&c, &w) in self.indices.iter().zip(&self.data) {
            enc.u32(c);
            enc.f64(w);
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TfIdfIndex> {
        let mut dec = Decoder::new(bytes);
        dec.expect_magic(INDEX_MAGIC)?;
        let version = dec.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let config = TfIdfConfig {
            force_lowercase: dec.u8()? != 0,
            force_ascii: dec.u8()? != 0,
            norm: if dec.u8()? != 0 { Norm::L2 } else { Norm::None },
            sublinear_tf: dec.u8()? != 0,
            max_ngram: dec.u32()? as usize,
        };
        let n_terms = dec.u64()? as usize;
        let mut terms = Vec::with_capacity(n_terms.min(1 << 24));
        let mut doc_freq = Vec::with_capacity(n_terms.min(1 << 24));
        for _ in 0..n_terms {
            terms.push(dec.str()?);
            doc_freq.push(dec.u32()?);
        }
        let n_rows = dec.u64()? as usize;
        let mut row_keys = Vec::with_capacity(n_rows.min(1 << 24));
        for _ in 0..n_rows {
            row_keys.push(dec.str()?);
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        for _ in 0..=n_rows {
            indptr.push(dec.u64()? as usize);
        }
        let nnz = *indptr.last().unwrap_or(&0);
        if indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Format("row pointers not monotone".into()));
        }
        let mut indices = Vec::with_capacity(nnz.min(1 << 28));
        let mut data = Vec::with_capacity(nnz.min(1 << 28));
        for _ in 0..nnz {
            let c = dec.u32()?;
            if c as usize >= n_terms {
                return Err(Error::Format(format!("column {c} out of range")));
            }
            indices.push(c);
            data.push(dec.f64()?);
        }
        if !dec.is_empty() {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        let vocabulary = terms.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let idf_vec = doc_freq.iter().map(|&d| idf(n_rows, d as usize)).collect();
        let mut index = TfIdfIndex {
            config,
            terms,
            vocabulary,
            doc_freq,
            idf: idf_vec,
            row_keys,
            indptr,
            indices,
            data,
            postings: Vec::new(),
        };
        index.rebuild_postings();
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TfIdfIndex> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn l2_normalize(v: &mut [(u32, f64)]) {
    let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in v.iter_mut() {
            *w /= norm;
        }
    }
}

/// Which text of a document feeds an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexField {
    Title,
    Body,
    /// Title followed by body, for the single-index setup.
    Concatenated,
}

pub fn field_texts(corpus: &Corpus, field: IndexField) -> Vec<(String, String)> {
    corpus
        .documents()
        .iter()
        .map(|d| {
            let text = match field {
                IndexField::Title => d.title_display.clone(),
                IndexField::Body => d.body_text(),
                IndexField::Concatenated => format!("{} {}", d.title_display, d.body_text()),
            };
            (d.page_id.clone(), text)
        })
        .collect()
}

/// A claim is a document-level hit when every page of some gold group is
/// among the retrieved pages.
pub fn covers_some_group(claim: &ClaimRecord, retrieved: &[&str]) -> bool {
    claim.gold_evidence.iter().any(|g| g.pages().all(|p| retrieved.contains(&p)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfGridRow {
    pub config: TfIdfConfig,
    pub recall: f64,
    pub claims_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfGridReport {
    pub best: TfIdfConfig,
    pub k: usize,
    pub rows: Vec<TfIdfGridRow>,
}

impl TfIdfGridReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("force_lowercase,force_ascii,norm,sublinear_tf,max_ngram,recall_at_k\n");
        for row in &self.rows {
            out.push_str(&format!("{},{:.6}\n", row.config, row.recall));
        }
        out
    }
}

/// Document-level recall@k of one index over the claims that carry gold evidence.
pub fn document_recall(index: &TfIdfIndex, claims: &[ClaimRecord], k: usize) -> (f64, usize) {
    let hits: Vec<bool> = claims
        .par_iter()
        .filter(|c| !c.gold_evidence.is_empty())
        .map(|c| {
            let top = index.top_k(&c.text, k);
            let pages: Vec<&str> = top.iter().map(|(p, _)| p.as_str()).collect();
            covers_some_group(c, &pages)
        })
        .collect();
    if hits.is_empty() {
        return (0.0, 0);
    }
    (hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64, hits.len())
}

/// Evaluate every grid point by document recall@k; the first best wins ties.
pub fn grid_search_tfidf(
    texts: &[(String, String)],
    claims: &[ClaimRecord],
    grid: &[TfIdfConfig],
    k: usize,
) -> Result<TfIdfGridReport> {
    if grid.is_empty() {
        return Err(Error::invalid("empty TF-IDF grid"));
    }
    let rows = grid
        .iter()
        .map(|&config| {
            let index = TfIdfIndex::build(texts, config)?;
            let (recall, claims_evaluated) = document_recall(&index, claims, k);
            Ok(TfIdfGridRow { config, recall, claims_evaluated })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.recall > rows[best].recall {
            best = i;
        }
    }
    Ok(TfIdfGridReport { best: rows[best].config, k, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(docs: &[&str]) -> Vec<(String, String)> {
        docs.iter().enumerate().map(|(i, d)| (format!("doc{}", i + 1), d.to_string())).collect()
    }

    const PLAIN: TfIdfConfig =
        TfIdfConfig { force_lowercase: true, force_ascii: true, norm: Norm::None, sublinear_tf: false, max_ngram: 1 };

    #[test]
    fn doc_freq_counts() {
        let idx = TfIdfIndex::build(&texts(&["a b", "b c", "c c d"]), PLAIN).unwrap();
        assert_eq!(idx.doc_freq("a"), Some(1));
        assert_eq!(idx.doc_freq("b"), Some(2));
        assert_eq!(idx.doc_freq("c"), Some(2));
        assert_eq!(idx.doc_freq("d"), Some(1));
        assert_eq!(idx.n_terms(), 4);
    }

    #[test]
    fn sublinear_tf_weight() {
        let cfg = TfIdfConfig { sublinear_tf: true, ..PLAIN };
        let idx = TfIdfIndex::build(&texts(&["a b", "b c", "c c d"]), cfg).unwrap();
        let c = idx.column("c").unwrap();
        let w = idx.row(2).find(|&(col, _)| col == c).unwrap().1;
        assert!((w - (1.0 + 2f64.ln()) * idf(3, 2)).abs() < 1e-12);
    }

    #[test]
    fn l2_rows_are_unit() {
        let cfg = TfIdfConfig { norm: Norm::L2, ..PLAIN };
        let idx = TfIdfIndex::build(&texts(&["a b", "b c", "c c d", ""]), cfg).unwrap();
        for r in 0..3 {
            let n: f64 = idx.row(r).map(|(_, w)| w * w).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        assert_eq!(idx.row(3).count(), 0);
    }

    #[test]
    fn top_k_examples() {
        let idx = TfIdfIndex::build(&texts(&["a b", "b c", "c c d"]), PLAIN).unwrap();
        let hits = idx.top_k("d", 2);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, "doc3");
        assert!(hits[0].1 > 0.0);
        assert!(idx.top_k("zzz", 3).is_empty());
    }

    #[test]
    fn ties_break_by_insertion_order() {
        let idx = TfIdfIndex::build(&texts(&["x y", "x z", "x w"]), PLAIN).unwrap();
        let hits = idx.top_k("x", 3);
        let keys: Vec<_> = hits.iter().map(|h| h.0.as_str()).collect();
        assert_eq!(keys, ["doc1", "doc2", "doc3"]);
        assert_eq!(idx.top_k("x", 2).len(), 2);
    }

    #[test]
    fn build_errors() {
        assert!(TfIdfIndex::build(&[], PLAIN).is_err());
        let dup = vec![("a".to_string(), "x".to_string()), ("a".to_string(), "y".to_string())];
        assert!(TfIdfIndex::build(&dup, PLAIN).is_err());
    }

    #[test]
    fn idf_strictly_decreasing_in_df() {
        for n in 1..50 {
            for df in 1..n {
                assert!(idf(n, df) > idf(n, df + 1));
            }
        }
    }

    #[test]
    fn serialization_round_trip_and_determinism() {
        let t = texts(&["The cat sat", "a cat and a dog", "Dogs bark loudly", ""]);
        for cfg in TfIdfConfig::grid() {
            let a = TfIdfIndex::build(&t, cfg).unwrap();
            let b = TfIdfIndex::build(&t, cfg).unwrap();
            assert_eq!(a.to_bytes(), b.to_bytes());
            let back = TfIdfIndex::from_bytes(&a.to_bytes()).unwrap();
            assert_eq!(back, a);
        }
    }

    #[test]
    fn grid_cardinality_and_optima_in_grid() {
        let grid = TfIdfConfig::grid();
        assert_eq!(grid.len(), 32);
        for cfg in [TfIdfConfig::TITLE, TfIdfConfig::BODY, TfIdfConfig::CONCATENATED] {
            assert!(grid.contains(&cfg));
        }
    }
}
