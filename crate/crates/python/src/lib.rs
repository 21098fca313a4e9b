//! Python bindings: `import fever_py`.
//!
//! Structured inputs that mirror the JSON line formats (claims, predictions)
//! are accepted as plain dicts and converted through `json`.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fever_core::aggregation::{self, AggregationMode, ScoredEvidence, SubmissionRecord};
use fever_core::corpus::{self, parse_claim, ClaimRecord, SentenceRef};
use fever_core::evaluation::MetricReport;
use fever_core::fuzzy;
use fever_core::gbdt::{GbdtConfig, GbdtModel};
use fever_core::pipeline::{self, PipelineConfig, Stage};
use fever_core::selection::{self, EvidenceCandidate, Provenance, ReretrievedSentence, SoftmaxTriple};
use fever_core::tfidf::{Norm, TfIdfConfig};
use fever_core::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::MissingArtifact { .. } | Error::Wiring(_) | Error::Scorer { .. }) => {
            PyRuntimeError::new_err(e.to_string())
        }
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json_dumps(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn claims_from(objs: &[Bound<'_, PyAny>]) -> PyResult<Vec<ClaimRecord>> {
    objs.iter().map(|o| parse_claim(&json_dumps(o)?).map_err(to_py)).collect()
}

fn predictions_from(objs: &[Bound<'_, PyAny>]) -> PyResult<Vec<SubmissionRecord>> {
    objs.iter()
        .map(|o| serde_json::from_str(&json_dumps(o)?).map_err(|e| PyValueError::new_err(e.to_string())))
        .collect()
}

fn triple(p: (f64, f64, f64)) -> PyResult<SoftmaxTriple> {
    SoftmaxTriple::new(p.0, p.1, p.2).map_err(to_py)
}

#[pyfunction]
fn normalize_title(raw: &str) -> String {
    corpus::normalize_title(raw)
}

#[pyfunction]
fn display_title(page_id: &str) -> String {
    corpus::display_title(page_id)
}

#[pyfunction]
fn edit_distance(a: &str, b: &str) -> usize {
    fuzzy::edit_distance(a, b)
}

#[pyfunction]
fn extract_query_terms(claim: &str) -> Vec<String> {
    fuzzy::extract_query_terms(claim).terms().to_vec()
}

/// Titles bucketed for edit-distance lookup.
#[pyclass(frozen)]
struct TitleDictionary {
    inner: fuzzy::TitleDictionary,
}

#[pymethods]
impl TitleDictionary {
    #[new]
    fn new(page_ids: Vec<String>) -> Self {
        Self { inner: fuzzy::TitleDictionary::from_page_ids(page_ids) }
    }

    /// `[(page_id, distance)]`, nearest first.
    #[pyo3(signature = (term, max_distance=fuzzy::DEFAULT_MAX_DISTANCE))]
    fn lookup(&self, term: &str, max_distance: usize) -> Vec<(String, usize)> {
        self.inner.lookup(term, max_distance)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn parse_norm(norm: &str) -> PyResult<Norm> {
    match norm.to_ascii_lowercase().as_str() {
        "l2" => Ok(Norm::L2),
        "none" => Ok(Norm::None),
        _ => Err(PyValueError::new_err(format!("norm must be 'l2' or 'none', not {norm:?}"))),
    }
}

#[pyclass(frozen)]
struct TfIdfIndex {
    inner: fever_core::tfidf::TfIdfIndex,
}

#[pymethods]
impl TfIdfIndex {
    /// Index `texts` under `keys`.
    #[new]
    #[pyo3(signature = (keys, texts, lowercase=true, ascii=true, norm="l2", sublinear_tf=true, max_ngram=2))]
    fn new(
        py: Python<'_>,
        keys: Vec<String>,
        texts: Vec<String>,
        lowercase: bool,
        ascii: bool,
        norm: &str,
        sublinear_tf: bool,
        max_ngram: usize,
    ) -> PyResult<Self> {
        if keys.len() != texts.len() {
            return Err(PyValueError::new_err("keys and texts differ in length"));
        }
        let config = TfIdfConfig { force_lowercase: lowercase, force_ascii: ascii, norm: parse_norm(norm)?, sublinear_tf, max_ngram };
        let pairs: Vec<(String, String)> = keys.into_iter().zip(texts).collect();
        let inner = py.detach(|| fever_core::tfidf::TfIdfIndex::build(&pairs, config)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: fever_core::tfidf::TfIdfIndex::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn top_k(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        self.inner.top_k(query, k)
    }

    #[getter]
    fn n_terms(&self) -> usize {
        self.inner.n_terms()
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }
}

#[pyclass(frozen)]
struct Corpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl Corpus {
    /// Parse a wiki dump in JSON lines.
    #[staticmethod]
    fn ingest(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let (inner, _) = py.detach(|| corpus::Corpus::ingest_path(&path)).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn sentence(&self, page_id: &str, line: usize) -> Option<String> {
        self.inner.get_sentence(&SentenceRef::new(page_id, line)).map(|s| s.text.clone())
    }

    fn page_ids(&self) -> Vec<String> {
        self.inner.documents().iter().map(|d| d.page_id.clone()).collect()
    }

    fn __contains__(&self, page_id: &str) -> bool {
        self.inner.contains(page_id)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Softmax gradient-boosted trees.
#[pyclass(frozen)]
struct Gbdt {
    inner: GbdtModel,
}

#[pymethods]
impl Gbdt {
    #[staticmethod]
    #[pyo3(signature = (x, y, n_classes=3, learning_rate=0.3, n_estimators=60, max_depth=2, l2=1.0, seed=0))]
    fn fit(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        n_classes: usize,
        learning_rate: f64,
        n_estimators: usize,
        max_depth: usize,
        l2: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = GbdtConfig { learning_rate, n_estimators, max_depth, l2_leaf_regularization: l2, seed };
        let inner = py.detach(|| GbdtModel::fit(&x, &y, n_classes, &config)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: GbdtModel::from_json(text).map_err(to_py)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn predict_proba(&self, row: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_proba(&row).map_err(to_py)
    }

    fn predict(&self, row: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&row).map_err(to_py)
    }

    /// Mean training cross-entropy after 0, 1, ... rounds.
    fn staged_log_loss(&self, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<Vec<f64>> {
        self.inner.staged_log_loss(&x, &y).map_err(to_py)
    }

    #[getter]
    fn n_rounds(&self) -> usize {
        self.inner.n_rounds()
    }
}

/// Flattened aggregation features for up to five `(p_refutes, p_nei,
/// p_supports, retrieval_score)` rows; mixed mode also takes the concatenated triple.
#[pyfunction]
#[pyo3(signature = (evidence, concat=None))]
fn build_features(evidence: Vec<(f64, f64, f64, f64)>, concat: Option<(f64, f64, f64)>) -> PyResult<Vec<f64>> {
    let ev = evidence
        .into_iter()
        .map(|(r, n, s, score)| Ok(ScoredEvidence { claim_probs: triple((r, n, s))?, retrieval_score: score }))
        .collect::<PyResult<Vec<_>>>()?;
    let mode = if concat.is_some() { AggregationMode::Mixed } else { AggregationMode::Singleton };
    let concat = concat.map(triple).transpose()?;
    Ok(aggregation::build_features(&ev, concat, mode).map_err(to_py)?.flatten())
}

/// Merge re-retrieved sentences into an initial ranking.
///
/// `initial` holds `(page, line, relevance)`; `children` holds
/// `(page, line, own_score, parent_page, parent_line)`. Returns the merged
/// ranking as `(page, line, relevance)`.
#[pyfunction]
fn apply_reretrieval_scaling(
    initial: Vec<(String, usize, f64)>,
    children: Vec<(String, usize, f64, String, usize)>,
) -> PyResult<Vec<(String, usize, f64)>> {
    let initial: Vec<EvidenceCandidate> = initial
        .into_iter()
        .map(|(p, l, r)| EvidenceCandidate {
            sentence: SentenceRef::new(&p, l),
            relevance: r,
            provenance: Provenance::Initial,
            probs: None,
        })
        .collect();
    let children = children
        .into_iter()
        .map(|(p, l, own, pp, pl)| ReretrievedSentence {
            sentence: SentenceRef::new(&p, l),
            own_score: own,
            parent: SentenceRef::new(&pp, pl),
            probs: None,
        })
        .collect();
    let merged = selection::apply_reretrieval_scaling(&initial, children).map_err(to_py)?;
    Ok(merged.into_iter().map(|c| (c.sentence.page_id, c.sentence.line_index, c.relevance)).collect())
}

/// Metric report for predictions (`{"id", "predicted_label",
/// "predicted_evidence"}`) against gold claims in dump format.
#[pyfunction]
#[pyo3(signature = (predictions, claims, retrieved=None))]
fn evaluate<'py>(
    py: Python<'py>,
    predictions: Vec<Bound<'py, PyAny>>,
    claims: Vec<Bound<'py, PyAny>>,
    retrieved: Option<HashMap<u64, Vec<String>>>,
) -> PyResult<Bound<'py, PyAny>> {
    let preds = predictions_from(&predictions)?;
    let gold = claims_from(&claims)?;
    let report = MetricReport::compute(&preds, &gold, retrieved.as_ref()).map_err(to_py)?;
    let text = serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_loads(py, &text)
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown stage {name:?}")))
}

/// Cached stage runner over a work directory.
#[pyclass(frozen)]
struct Pipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    /// Load a JSON config; keyword arguments override its fields.
    #[new]
    #[pyo3(signature = (config=None, **overrides))]
    fn new(config: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(p) => PipelineConfig::from_json_file(&p).map_err(to_py)?,
            None => PipelineConfig::default(),
        };
        if let Some(kw) = overrides {
            let mut value = serde_json::to_value(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let patch: serde_json::Value =
                serde_json::from_str(&json_dumps(kw.as_any())?).map_err(|e| PyValueError::new_err(e.to_string()))?;
            for (k, v) in patch.as_object().into_iter().flatten() {
                value[k] = v.clone();
            }
            cfg = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        }
        Ok(Self { inner: pipeline::Pipeline::new(cfg) })
    }

    /// Run one stage; returns `{"stage", "key", "dir", "cache_hit", "summary"}`.
    fn run_stage<'py>(&self, py: Python<'py>, stage: &str) -> PyResult<Bound<'py, PyDict>> {
        let stage = parse_stage(stage)?;
        let outcome = py.detach(|| self.inner.run_stage(stage)).map_err(to_py)?;
        outcome_dict(py, &outcome)
    }

    /// Ingest through evaluate.
    fn run_all<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let outcomes = py.detach(|| self.inner.run_all()).map_err(to_py)?;
        outcomes.iter().map(|o| outcome_dict(py, o)).collect()
    }

    fn artifact_dir(&self, stage: &str) -> PyResult<PathBuf> {
        self.inner.artifact_dir(parse_stage(stage)?).map_err(to_py)
    }
}

fn outcome_dict<'py>(py: Python<'py>, o: &pipeline::StageOutcome) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("stage", o.stage.name())?;
    d.set_item("key", &o.key)?;
    d.set_item("dir", &o.dir)?;
    d.set_item("cache_hit", o.cache_hit)?;
    d.set_item("summary", &o.summary)?;
    Ok(d)
}

#[pymodule]
pub fn fever_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_title, m)?)?;
    m.add_function(wrap_pyfunction!(display_title, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(extract_query_terms, m)?)?;
    m.add_function(wrap_pyfunction!(build_features, m)?)?;
    m.add_function(wrap_pyfunction!(apply_reretrieval_scaling, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<TitleDictionary>()?;
    m.add_class::<TfIdfIndex>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<Gbdt>()?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
