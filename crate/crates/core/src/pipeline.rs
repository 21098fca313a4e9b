//! Staged pipeline with content-addressed artifacts.
//!
//! Every stage writes into `<work_dir>/<stage>/<key>/`, where `key` hashes the
//! stage's configuration together with the keys of its upstream stages and the
//! contents of its input files. A stage whose directory already holds a
//! manifest is a cache hit and does no work.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::aggregation::{
    aggregate, aggregate_concatenated, build_features, classify_evidence, train_aggregator, AggregationFeatures,
    AggregationMode, ClaimVerdict, SubmissionRecord,
};
use crate::bridge::BridgeClient;
use crate::corpus::{read_claims_path, ClaimRecord, Corpus, Label};
use crate::error::{Error, Result};
use crate::evaluation::{pct, render_table, MetricReport};
use crate::fuzzy::{extract_query_terms, read_term_overrides_path, QueryTermSet, TitleDictionary};
use crate::gbdt::{grid_search_cv, GbdtConfig, GbdtModel};
use crate::retrieval::{retrieve_documents, DocCandidateSet, RetrievalOptions, SparseIndices};
use crate::selection::{
    export_training_data, select_evidence, LexicalScorer, Scorer, ScorerMode, SelectionOptions, SelectionRecord,
    DEFAULT_NEGATIVES,
};
use crate::tfidf::{field_texts, grid_search_tfidf, IndexField, TfIdfConfig, TfIdfIndex};

const ARTIFACT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
/// Recall cut-off used when tuning the sparse indices.
pub const TUNE_K: usize = 5;
pub const CV_FOLDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Independent title and body indices, k/2 hits each.
    Separated,
    /// One index over title + body text.
    Concatenated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScorerSpec {
    Lexical,
    Bridge(String),
}

impl FromStr for ScorerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lexical" => Ok(ScorerSpec::Lexical),
            _ => match s.strip_prefix("bridge:") {
                Some(ep) if !ep.trim().is_empty() => Ok(ScorerSpec::Bridge(ep.to_string())),
                _ => Err(Error::invalid(format!("unknown scorer {s:?}; use lexical or bridge:<endpoint>"))),
            },
        }
    }
}

impl fmt::Display for ScorerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerSpec::Lexical => f.write_str("lexical"),
            ScorerSpec::Bridge(ep) => write!(f, "bridge:{ep}"),
        }
    }
}

impl Serialize for ScorerSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ScorerSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GbdtSearch {
    /// Train the configured `gbdt` setting only.
    Fixed,
    /// Cross-validate the full tuning grid and refit the best.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub claims: PathBuf,
    pub work_dir: PathBuf,
    /// Optional per-claim query terms replacing the built-in extractor.
    pub terms: Option<PathBuf>,
    pub title_tfidf: TfIdfConfig,
    pub body_tfidf: TfIdfConfig,
    pub cat_tfidf: TfIdfConfig,
    pub retrieval_mode: RetrievalMode,
    pub k: usize,
    pub fuzzy: bool,
    pub max_distance: usize,
    pub reretrieval: bool,
    pub reretrieval_pool: usize,
    pub scorer: ScorerSpec,
    /// Output width of a bridge sentence scorer; the lexical scorer is ternary.
    pub selection_mode: ScorerMode,
    pub aggregation: AggregationMode,
    pub gbdt: GbdtConfig,
    pub gbdt_search: GbdtSearch,
    pub cv_folds: usize,
    /// Pre-trained aggregation model; when unset the stage trains on the labeled claims.
    pub aggregator_model: Option<PathBuf>,
    pub n_negatives: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool. Never affects results.
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let opts = RetrievalOptions::default();
        Self {
            corpus: PathBuf::new(),
            claims: PathBuf::new(),
            work_dir: PathBuf::from("work"),
            terms: None,
            title_tfidf: TfIdfConfig::TITLE,
            body_tfidf: TfIdfConfig::BODY,
            cat_tfidf: TfIdfConfig::CONCATENATED,
            retrieval_mode: RetrievalMode::Separated,
            k: opts.k,
            fuzzy: opts.fuzzy,
            max_distance: opts.max_distance,
            reretrieval: true,
            reretrieval_pool: SelectionOptions::default().reretrieval_pool,
            scorer: ScorerSpec::Lexical,
            selection_mode: ScorerMode::Ternary,
            aggregation: AggregationMode::Mixed,
            gbdt: GbdtConfig::default(),
            gbdt_search: GbdtSearch::Fixed,
            cv_folds: CV_FOLDS,
            aggregator_model: None,
            n_negatives: DEFAULT_NEGATIVES,
            seed: 0,
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        // Relative paths in a config file resolve against the file's directory.
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() && !p.as_os_str().is_empty() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.corpus);
            fix(&mut cfg.claims);
            fix(&mut cfg.work_dir);
            if let Some(t) = cfg.terms.as_mut() {
                fix(t);
            }
            if let Some(m) = cfg.aggregator_model.as_mut() {
                fix(m);
            }
        }
        Ok(cfg)
    }

    fn retrieval_options(&self, fuzzy: bool) -> RetrievalOptions {
        RetrievalOptions { k: self.k, fuzzy, max_distance: self.max_distance }
    }

    fn selection_options(&self, reretrieval: bool) -> SelectionOptions {
        SelectionOptions { reretrieval, reretrieval_pool: self.reretrieval_pool }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Index,
    Retrieve,
    Select,
    Aggregate,
    Evaluate,
    TuneTfidf,
    TuneGbdt,
    Ablate,
    ExportTraining,
}

impl Stage {
    pub const MAIN_CHAIN: [Stage; 6] =
        [Stage::Ingest, Stage::Index, Stage::Retrieve, Stage::Select, Stage::Aggregate, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Index => "index",
            Stage::Retrieve => "retrieve",
            Stage::Select => "select",
            Stage::Aggregate => "aggregate",
            Stage::Evaluate => "evaluate",
            Stage::TuneTfidf => "tune-tfidf",
            Stage::TuneGbdt => "tune-gbdt",
            Stage::Ablate => "ablate",
            Stage::ExportTraining => "export-training",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub key: String,
    pub artifact_version: u32,
    pub inputs: BTreeMap<String, String>,
    pub config: Value,
    pub outputs: Vec<String>,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub key: String,
    pub dir: PathBuf,
    pub cache_hit: bool,
    pub summary: String,
}

/// Hex SHA-256 of the given bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut file = BufReader::new(fs::File::open(path)?);
    loop {
        let buf = file.fill_buf()?;
        if buf.is_empty() {
            break;
        }
        hasher.update(buf);
        let n = buf.len();
        file.consume(n);
    }
    Ok(hex::encode(hasher.finalize()))
}

struct KeyedStage {
    key: String,
    inputs: BTreeMap<String, String>,
    config: Value,
}

impl KeyedStage {
    fn new(stage: Stage, inputs: BTreeMap<String, String>, config: Value) -> Self {
        let material = json!({
            "stage": stage.name(),
            "artifact_version": ARTIFACT_VERSION,
            "inputs": inputs,
            "config": config,
        });
        let key = sha256_hex(material.to_string().as_bytes())[..24].to_string();
        Self { key, inputs, config }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::invalid(format!("no {what} path configured")));
    }
    if !path.is_file() {
        return Err(Error::invalid(format!("{what} file {} does not exist", path.display())));
    }
    Ok(())
}

/// Result of retrieving and selecting for every claim under one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub docs: Vec<DocCandidateSet>,
    pub selections: Vec<SelectionRecord>,
}

impl RetrievalRun {
    /// Candidate pages plus re-retrieved pages per claim.
    pub fn retrieved_pages(&self) -> HashMap<u64, Vec<String>> {
        self.docs
            .iter()
            .zip(&self.selections)
            .map(|(d, s)| {
                let mut pages: Vec<String> = d.pages().map(str::to_string).collect();
                pages.extend(s.reretrieved.iter().cloned());
                (d.claim_id, pages)
            })
            .collect()
    }
}

/// In-memory building blocks shared by the stages and the ablation driver.
pub struct Engine<'a> {
    pub corpus: &'a Corpus,
    pub dict: TitleDictionary,
    pub overrides: HashMap<u64, QueryTermSet>,
}

impl<'a> Engine<'a> {
    pub fn new(corpus: &'a Corpus, overrides: HashMap<u64, QueryTermSet>) -> Self {
        Self { corpus, dict: TitleDictionary::from_corpus(corpus), overrides }
    }

    pub fn query_terms(&self, claim: &ClaimRecord) -> QueryTermSet {
        self.overrides.get(&claim.claim_id).cloned().unwrap_or_else(|| extract_query_terms(&claim.text))
    }

    pub fn retrieve_all(
        &self,
        claims: &[ClaimRecord],
        indices: SparseIndices<'_>,
        opts: &RetrievalOptions,
    ) -> Result<Vec<DocCandidateSet>> {
        claims
            .par_iter()
            .map(|c| retrieve_documents(c, indices, &self.dict, &self.query_terms(c), opts))
            .collect()
    }

    pub fn select_all(
        &self,
        claims: &[ClaimRecord],
        docs: &[DocCandidateSet],
        scorer: &dyn Scorer,
        opts: &SelectionOptions,
    ) -> Result<Vec<SelectionRecord>> {
        let by_id: HashMap<u64, &DocCandidateSet> = docs.iter().map(|d| (d.claim_id, d)).collect();
        claims
            .par_iter()
            .map(|c| {
                let docs = by_id.get(&c.claim_id).ok_or_else(|| {
                    Error::Wiring(format!("claim {} has no retrieval output; rerun `retrieve`", c.claim_id))
                })?;
                let outcome = select_evidence(c, docs, scorer, self.corpus, opts)?;
                let mut rec = SelectionRecord::from_candidates(c.claim_id, &outcome.top5());
                rec.reretrieved = outcome.reretrieved_pages;
                Ok(rec)
            })
            .collect()
    }
}

/// Claim-classifier features (or the concatenated triple) for every claim.
enum ClaimInputs {
    Features(Vec<AggregationFeatures>),
    Concat(Vec<crate::selection::SoftmaxTriple>),
}

fn claim_inputs(
    claims: &[ClaimRecord],
    selections: &[SelectionRecord],
    corpus: &Corpus,
    scorer: &dyn Scorer,
    mode: AggregationMode,
) -> Result<ClaimInputs> {
    let by_id: HashMap<u64, &SelectionRecord> = selections.iter().map(|s| (s.id, s)).collect();
    let with_concat = mode != AggregationMode::Singleton;
    let per_claim: Vec<(Vec<crate::aggregation::ScoredEvidence>, Option<crate::selection::SoftmaxTriple>)> = claims
        .par_iter()
        .map(|c| {
            let sel = by_id
                .get(&c.claim_id)
                .ok_or_else(|| Error::Wiring(format!("claim {} has no selection output", c.claim_id)))?;
            classify_evidence(c, &sel.candidates()?, corpus, scorer, with_concat)
        })
        .collect::<Result<_>>()?;
    match mode {
        AggregationMode::Concatenated => Ok(ClaimInputs::Concat(
            per_claim.into_iter().map(|(_, c)| c.expect("requested concatenated triple")).collect(),
        )),
        _ => Ok(ClaimInputs::Features(
            per_claim.into_iter().map(|(ev, concat)| build_features(&ev, concat, mode)).collect::<Result<_>>()?,
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub approach: String,
    pub mode: RetrievalMode,
    pub fuzzy: bool,
    pub reretrieval: bool,
    pub recall_at_5: f64,
    pub ofever: f64,
    pub mean_docs: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.approach.clone(), pct(r.recall_at_5), pct(r.ofever), format!("{:.2}", r.mean_docs)])
        .collect();
    render_table(&["Retrieval Approach", "Recall@5", "OFEVER", "Docs/claim"], &body)
}

/// Sentence-level recall@5 over the top evidence of each claim.
pub fn selection_recall(claims: &[ClaimRecord], selections: &[SelectionRecord]) -> f64 {
    let by_id: HashMap<u64, &SelectionRecord> = selections.iter().map(|s| (s.id, s)).collect();
    let mut total = 0;
    let mut hits = 0;
    for c in claims.iter().filter(|c| !c.gold_evidence.is_empty()) {
        total += 1;
        if let Some(sel) = by_id.get(&c.claim_id) {
            let refs: Vec<crate::corpus::SentenceRef> = sel
                .evidence
                .iter()
                .take(crate::selection::TOP_EVIDENCE)
                .map(|e| crate::corpus::SentenceRef { page_id: e.page.clone(), line_index: e.line })
                .collect();
            if crate::evaluation::evidence_covered(c, &refs) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Document-level oracle score over claims with a gold label.
pub fn document_ofever(claims: &[ClaimRecord], retrieved: &HashMap<u64, Vec<String>>) -> Result<f64> {
    let labeled: Vec<ClaimRecord> = claims.iter().filter(|c| c.gold_label.is_some()).cloned().collect();
    let subset: HashMap<u64, Vec<String>> =
        labeled.iter().map(|c| (c.claim_id, retrieved.get(&c.claim_id).cloned().unwrap_or_default())).collect();
    crate::evaluation::ofever(&subset, &labeled)
}

pub struct Pipeline {
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn stage_dir(&self, stage: Stage, key: &str) -> PathBuf {
        self.config.work_dir.join(stage.name()).join(key)
    }

    fn is_complete(dir: &Path) -> bool {
        dir.join(MANIFEST).is_file()
    }

    fn require(&self, stage: Stage, key: &str) -> Result<PathBuf> {
        let dir = self.stage_dir(stage, key);
        if !Self::is_complete(&dir) {
            return Err(Error::MissingArtifact { stage: stage.name(), path: dir });
        }
        Ok(dir)
    }

    fn claims_hash(&self) -> Result<String> {
        require_file(&self.config.claims, "claims")?;
        file_hash(&self.config.claims)
    }

    fn terms_hash(&self) -> Result<String> {
        match &self.config.terms {
            Some(p) => {
                require_file(p, "terms")?;
                file_hash(p)
            }
            None => Ok("heuristic".into()),
        }
    }

    fn ingest_stage(&self) -> Result<KeyedStage> {
        require_file(&self.config.corpus, "corpus")?;
        let inputs = BTreeMap::from([("corpus".to_string(), file_hash(&self.config.corpus)?)]);
        Ok(KeyedStage::new(Stage::Ingest, inputs, json!({})))
    }

    fn index_config(&self) -> Value {
        match self.config.retrieval_mode {
            RetrievalMode::Separated => json!({"mode": "separated", "title": self.config.title_tfidf, "body": self.config.body_tfidf}),
            RetrievalMode::Concatenated => json!({"mode": "concatenated", "cat": self.config.cat_tfidf}),
        }
    }

    fn index_stage(&self) -> Result<KeyedStage> {
        let up = self.ingest_stage()?;
        let inputs = BTreeMap::from([("ingest".to_string(), up.key)]);
        Ok(KeyedStage::new(Stage::Index, inputs, self.index_config()))
    }

    fn retrieve_stage(&self) -> Result<KeyedStage> {
        let up = self.index_stage()?;
        let inputs = BTreeMap::from([
            ("index".to_string(), up.key),
            ("ingest".to_string(), up.inputs["ingest"].clone()),
            ("claims".to_string(), self.claims_hash()?),
            ("terms".to_string(), self.terms_hash()?),
        ]);
        let c = &self.config;
        Ok(KeyedStage::new(Stage::Retrieve, inputs, json!({"k": c.k, "fuzzy": c.fuzzy, "max_distance": c.max_distance})))
    }

    fn scorer_config(&self) -> Value {
        let mode = match self.config.scorer {
            ScorerSpec::Lexical => ScorerMode::Ternary,
            ScorerSpec::Bridge(_) => self.config.selection_mode,
        };
        json!({"scorer": self.config.scorer, "selection_mode": mode})
    }

    fn select_stage(&self) -> Result<KeyedStage> {
        let up = self.retrieve_stage()?;
        let inputs = BTreeMap::from([
            ("retrieve".to_string(), up.key),
            ("ingest".to_string(), up.inputs["ingest"].clone()),
            ("claims".to_string(), up.inputs["claims"].clone()),
        ]);
        let c = &self.config;
        Ok(KeyedStage::new(
            Stage::Select,
            inputs,
            json!({"scorer": self.scorer_config(), "reretrieval": c.reretrieval, "pool": c.reretrieval_pool}),
        ))
    }

    fn aggregate_stage(&self) -> Result<KeyedStage> {
        let up = self.select_stage()?;
        let mut inputs = BTreeMap::from([
            ("select".to_string(), up.key),
            ("ingest".to_string(), up.inputs["ingest"].clone()),
            ("claims".to_string(), up.inputs["claims"].clone()),
        ]);
        if let Some(m) = &self.config.aggregator_model {
            require_file(m, "aggregator model")?;
            inputs.insert("model".to_string(), file_hash(m)?);
        }
        let c = &self.config;
        Ok(KeyedStage::new(
            Stage::Aggregate,
            inputs,
            json!({
                "scorer": self.scorer_config(),
                "aggregation": c.aggregation,
                "gbdt": c.gbdt,
                "search": c.gbdt_search,
                "folds": c.cv_folds,
                "seed": c.seed,
            }),
        ))
    }

    fn evaluate_stage(&self) -> Result<KeyedStage> {
        let up = self.aggregate_stage()?;
        let sel = self.select_stage()?;
        let inputs = BTreeMap::from([
            ("aggregate".to_string(), up.key),
            ("select".to_string(), sel.key),
            ("retrieve".to_string(), sel.inputs["retrieve"].clone()),
            ("claims".to_string(), up.inputs["claims"].clone()),
        ]);
        Ok(KeyedStage::new(Stage::Evaluate, inputs, json!({})))
    }

    fn tune_tfidf_stage(&self) -> Result<KeyedStage> {
        let up = self.ingest_stage()?;
        let inputs = BTreeMap::from([("ingest".to_string(), up.key), ("claims".to_string(), self.claims_hash()?)]);
        Ok(KeyedStage::new(Stage::TuneTfidf, inputs, json!({"k": TUNE_K})))
    }

    fn tune_gbdt_stage(&self) -> Result<KeyedStage> {
        let up = self.select_stage()?;
        let inputs = BTreeMap::from([
            ("select".to_string(), up.key),
            ("ingest".to_string(), up.inputs["ingest"].clone()),
            ("claims".to_string(), up.inputs["claims"].clone()),
        ]);
        let c = &self.config;
        Ok(KeyedStage::new(
            Stage::TuneGbdt,
            inputs,
            json!({"scorer": self.scorer_config(), "aggregation": c.aggregation, "folds": c.cv_folds, "seed": c.seed}),
        ))
    }

    fn ablate_stage(&self) -> Result<KeyedStage> {
        let up = self.ingest_stage()?;
        let inputs = BTreeMap::from([
            ("ingest".to_string(), up.key),
            ("claims".to_string(), self.claims_hash()?),
            ("terms".to_string(), self.terms_hash()?),
        ]);
        let c = &self.config;
        Ok(KeyedStage::new(
            Stage::Ablate,
            inputs,
            json!({
                "title": c.title_tfidf, "body": c.body_tfidf, "cat": c.cat_tfidf,
                "k": c.k, "max_distance": c.max_distance, "pool": c.reretrieval_pool,
                "scorer": self.scorer_config(),
            }),
        ))
    }

    fn export_stage(&self) -> Result<KeyedStage> {
        let up = self.retrieve_stage()?;
        let inputs = BTreeMap::from([
            ("retrieve".to_string(), up.key),
            ("ingest".to_string(), up.inputs["ingest"].clone()),
            ("claims".to_string(), up.inputs["claims"].clone()),
        ]);
        let c = &self.config;
        Ok(KeyedStage::new(
            Stage::ExportTraining,
            inputs,
            json!({"n_negatives": c.n_negatives, "mode": c.selection_mode, "seed": c.seed}),
        ))
    }

    fn keyed(&self, stage: Stage) -> Result<KeyedStage> {
        match stage {
            Stage::Ingest => self.ingest_stage(),
            Stage::Index => self.index_stage(),
            Stage::Retrieve => self.retrieve_stage(),
            Stage::Select => self.select_stage(),
            Stage::Aggregate => self.aggregate_stage(),
            Stage::Evaluate => self.evaluate_stage(),
            Stage::TuneTfidf => self.tune_tfidf_stage(),
            Stage::TuneGbdt => self.tune_gbdt_stage(),
            Stage::Ablate => self.ablate_stage(),
            Stage::ExportTraining => self.export_stage(),
        }
    }

    /// Directory a stage writes to under the current configuration.
    pub fn artifact_dir(&self, stage: Stage) -> Result<PathBuf> {
        Ok(self.stage_dir(stage, &self.keyed(stage)?.key))
    }

    pub fn manifest(&self, stage: Stage) -> Result<Manifest> {
        let dir = self.artifact_dir(stage)?;
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?)
    }

    /// Run one stage; upstream artifacts must already exist.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        match self.config.threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
                pool.install(|| self.run_stage_inner(stage))
            }
            None => self.run_stage_inner(stage),
        }
    }

    /// Run ingest through evaluate in order.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::MAIN_CHAIN.iter().map(|&s| self.run_stage(s)).collect()
    }

    fn run_stage_inner(&self, stage: Stage) -> Result<StageOutcome> {
        let keyed = self.keyed(stage)?;
        let dir = self.stage_dir(stage, &keyed.key);
        if Self::is_complete(&dir) {
            let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
            return Ok(StageOutcome {
                stage,
                key: keyed.key,
                dir,
                cache_hit: true,
                summary: format!("cached ({} outputs)", manifest.outputs.len()),
            });
        }
        // A partial directory from an interrupted run is discarded.
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let started = Instant::now();
        let summary = match stage {
            Stage::Ingest => self.do_ingest(&tmp),
            Stage::Index => self.do_index(&keyed, &tmp),
            Stage::Retrieve => self.do_retrieve(&keyed, &tmp),
            Stage::Select => self.do_select(&keyed, &tmp),
            Stage::Aggregate => self.do_aggregate(&keyed, &tmp),
            Stage::Evaluate => self.do_evaluate(&keyed, &tmp),
            Stage::TuneTfidf => self.do_tune_tfidf(&keyed, &tmp),
            Stage::TuneGbdt => self.do_tune_gbdt(&keyed, &tmp),
            Stage::Ablate => self.do_ablate(&keyed, &tmp),
            Stage::ExportTraining => self.do_export(&keyed, &tmp),
        };
        let summary = match summary {
            Ok(s) => s,
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                return Err(e);
            }
        };
        let mut outputs: Vec<String> = fs::read_dir(&tmp)?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        outputs.sort();
        let manifest = Manifest {
            stage,
            key: keyed.key.clone(),
            artifact_version: ARTIFACT_VERSION,
            inputs: keyed.inputs,
            config: keyed.config,
            outputs,
            elapsed_ms: started.elapsed().as_millis(),
        };
        write_pretty(&tmp.join(MANIFEST), &manifest)?;
        fs::rename(&tmp, &dir)?;
        Ok(StageOutcome { stage, key: keyed.key, dir, cache_hit: false, summary })
    }

    fn load_corpus(&self, ingest_key: &str) -> Result<Corpus> {
        Corpus::load(&self.require(Stage::Ingest, ingest_key)?.join("corpus.bin"))
    }

    fn load_claims(&self) -> Result<Vec<ClaimRecord>> {
        read_claims_path(&self.config.claims)
    }

    fn load_overrides(&self) -> Result<HashMap<u64, QueryTermSet>> {
        match &self.config.terms {
            Some(p) => read_term_overrides_path(p),
            None => Ok(HashMap::new()),
        }
    }

    fn make_scorer(&self, corpus: &Corpus) -> Result<Box<dyn Scorer>> {
        Ok(match &self.config.scorer {
            ScorerSpec::Lexical => Box::new(LexicalScorer::from_corpus(corpus)),
            ScorerSpec::Bridge(ep) => Box::new(BridgeClient::connect(ep, self.config.selection_mode)?),
        })
    }

    fn do_ingest(&self, out: &Path) -> Result<String> {
        let (corpus, report) = Corpus::ingest_path(&self.config.corpus)?;
        corpus.save(&out.join("corpus.bin"))?;
        write_pretty(&out.join("report.json"), &report)?;
        Ok(format!(
            "{} records in, {} stored, {} skipped, {} overwritten",
            report.records_in, report.records_stored, report.records_skipped, report.records_overwritten
        ))
    }

    fn do_index(&self, keyed: &KeyedStage, out: &Path) -> Result<String> {
        let corpus = self.load_corpus(&keyed.inputs["ingest"])?;
        if corpus.is_empty() {
            return Err(Error::invalid("corpus is empty"));
        }
        let build = |field, cfg: TfIdfConfig, name: &str| -> Result<String> {
            let idx = TfIdfIndex::build(&field_texts(&corpus, field), cfg)?;
            idx.save(&out.join(name))?;
            Ok(format!("{name}: {} rows x {} terms", idx.n_rows(), idx.n_terms()))
        };
        Ok(match self.config.retrieval_mode {
            RetrievalMode::Separated => format!(
                "{}; {}",
                build(IndexField::Title, self.config.title_tfidf, "title.idx")?,
                build(IndexField::Body, self.config.body_tfidf, "body.idx")?
            ),
            RetrievalMode::Concatenated => build(IndexField::Concatenated, self.config.cat_tfidf, "cat.idx")?,
        })
    }

    fn do_retrieve(&self, keyed: &KeyedStage, out: &Path) -> Result<String> {
        let index_dir = self.require(Stage::Index, &keyed.inputs["index"])?;
        let corpus = self.load_corpus(&keyed.inputs["ingest"])?;
        let claims = self.load_claims()?;
        let engine = Engine::new(&corpus, self.load_overrides()?);
        let opts = self.config.retrieval_options(self.config.fuzzy);
        let docs = match self.config.retrieval_mode {
            RetrievalMode::Separated => {
                let title = TfIdfIndex::load(&index_dir.join("title.idx"))?;
                let body = TfIdfIndex::load(&index_dir.join("body.idx"))?;
                engine.retrieve_all(&claims, SparseIndices::Separated { title: &title, body: &body }, &opts)?
            }
            RetrievalMode::Concatenated => {
                let cat = TfIdfIndex::load(&index_dir.join("cat.idx"))?;
                engine.retrieve_all(&claims, SparseIndices::Concatenated(&cat), &opts)?
            }
        };
        write_jsonl(&out.join("docs.jsonl"), &docs)?;
        let total: usize = docs.iter().map(DocCandidateSet::len).sum();
        Ok(format!("{} claims, {:.2} docs/claim", docs.len(), total as f64 / docs.len().max(1) as f64))
    }

    fn do_select(&self, keyed: &KeyedStage, out: &Path) -> Result<String> {
        let docs_path = self.require(Stage::Retrieve, &keyed.inputs["retrieve"])?.join("docs.jsonl");
        let docs: Vec<DocCandidateSet> = read_jsonl(&docs_path)?;
        let corpus = self.load_corpus(&keyed.inputs["ingest"])?;
        let claims = self.load_claims()?;
        let scorer = self.make_scorer(&corpus)?;
        let engine = Engine::new(&corpus, HashMap::new());
        let selections =
            engine.select_all(&claims, &docs, scorer.as_ref(), &self.config.selection_options(self.config.reretrieval))?;
        write_jsonl(&out.join("evidence.jsonl"), &selections)?;
        Ok(format!("{} claims, recall@5 {}", selections.len(), pct(selection_recall(&claims, &selections))))
    }

    fn load_selections(&self, select_key: &str) -> Result<Vec<SelectionRecord>> {
        read_jsonl(&self.require(Stage::Select, select_key)?.join("evidence.jsonl"))
    }

    fn do_aggregate(&self, keyed: &KeyedStage, out: &Path) -> Result<String> {
        let selections = self.load_selections(&keyed.inputs["select"])?;
        let corpus = self.load_corpus(&keyed.inputs["ingest"])?;
        let claims = self.load_claims()?;
        let scorer = self.make_scorer(&corpus)?;
        let mode = self.config.aggregation;
        let inputs = claim_inputs(&claims, &selections, &corpus, scorer.as_ref(), mode)?;
        let evidence: HashMap<u64, Vec<crate::corpus::SentenceRef>> = selections
            .iter()
            .map(|s| (s.id, s.evidence.iter().map(|e| crate::corpus::SentenceRef { page_id: e.page.clone(), line_index: e.line }).collect()))
            .collect();

        let mut note = String::new();
        let labels: Vec<Label> = match inputs {
            ClaimInputs::Concat(triples) => triples.into_iter().map(aggregate_concatenated).collect(),
            ClaimInputs::Features(features) => {
                let model = match &self.config.aggregator_model {
                    Some(p) => GbdtModel::load(p)?,
                    None => {
                        let (model, cv_note) = self.train_model(&claims, &features)?;
                        note = cv_note;
                        if let Some(cv) = &model.1 {
                            fs::write(out.join("cv.csv"), cv.to_csv())?;
                        }
                        model.0
                    }
                };
                model.save(&out.join("model.json"))?;
                features.iter().map(|f| aggregate(f, &model)).collect::<Result<_>>()?
            }
        };
        let verdicts: Vec<SubmissionRecord> = claims
            .iter()
            .zip(labels)
            .map(|(c, label)| {
                SubmissionRecord::from(&ClaimVerdict {
                    claim_id: c.claim_id,
                    label,
                    evidence: evidence.get(&c.claim_id).cloned().unwrap_or_default(),
                    method: mode.into(),
                })
            })
            .collect();
        write_jsonl(&out.join("predictions.jsonl"), &verdicts)?;
        Ok(format!("{} verdicts ({mode:?}){note}", verdicts.len()))
    }

    #[allow(clippy::type_complexity)]
    fn train_model(
        &self,
        claims: &[ClaimRecord],
        features: &[AggregationFeatures],
    ) -> Result<((GbdtModel, Option<crate::gbdt::CvReport>), String)> {
        let (fx, fy): (Vec<AggregationFeatures>, Vec<Label>) = claims
            .iter()
            .zip(features)
            .filter_map(|(c, f)| c.gold_label.map(|l| (f.clone(), l)))
            .unzip();
        if fx.is_empty() {
            return Err(Error::invalid("no labeled claims to train the aggregator; pass aggregator_model"));
        }
        let grid = match self.config.gbdt_search {
            GbdtSearch::Fixed => vec![self.config.gbdt],
            GbdtSearch::Grid => GbdtConfig::grid(self.config.seed),
        };
        if fx.len() < self.config.cv_folds {
            let x: Vec<Vec<f64>> = fx.iter().map(AggregationFeatures::flatten).collect();
            let y: Vec<usize> = fy.iter().map(|l| l.class_index()).collect();
            let model = GbdtModel::fit(&x, &y, crate::aggregation::N_LABELS, &grid[0])?;
            return Ok(((model, None), ", too few labeled claims for cross-validation".into()));
        }
        let (model, report) = train_aggregator(&fx, &fy, &grid, self.config.cv_folds, self.config.seed)?;
        let note = format!(", cv accuracy {}", pct(report.best_row().mean_accuracy));
        Ok(((model, Some(report)), note))
    }

    fn do_evaluate(&self, keyed: &KeyedStage, out: &Path) -> Result<String> {
        let preds: Vec<SubmissionRecord> =
            read_jsonl(&self.require(Stage::Aggregate, &keyed.inputs["aggregate"])?.join("predictions.jsonl"))?;
        let selections = self.load_selections(&keyed.inputs["select"])?;
        let docs: Vec<DocCandidateSet> =
            read_jsonl(&self.require(Stage::Retrieve, &keyed.inputs["retrieve"])?.join("docs.jsonl"))?;
        let claims = self.load_claims()?;
        let run = RetrievalRun { docs, selections };
        let retrieved = run.retrieved_pages();
        let report = MetricReport::compute(&preds, &claims, Some(&retrieved))?;
        write_pretty(&out.join("metrics.json"), &report)?;
        fs::write(out.join("metrics.txt"), report.to_table())?;
        Ok(format!(
            "LA {}, FEVER {}, recall@5 {}",
            pct(report.label_accuracy),
            pct(report.fever_score),
            pct(report.recall_at_5)
        ))
    }

    fn do_tune_tfidf(&self, keyed: &KeyedStage, out: &Path) -> Result<String> {
        let corpus = self.load_corpus(&keyed.inputs["ingest"])?;
        let claims = self.load_claims()?;
        let grid = TfIdfConfig::grid();
        let mut best = BTreeMap::new();
        for (field, name) in
            [(IndexField::Title, "title"), (IndexField::Body, "body"), (IndexField::Concatenated, "concatenated")]
        {
            let report = grid_search_tfidf(&field_texts(&corpus, field), &claims, &grid, TUNE_K)?;
            fs::write(out.join(format!("{name}.csv")), report.to_csv())?;
            let recall = report.rows.iter().find(|r| r.config == report.best).map_or(0.0, |r| r.recall);
            best.insert(name, json!({"config": report.best, "recall": recall}));
        }
        write_pretty(&out.join("best.json"), &best)?;
        Ok(format!("{} configurations per field", grid.len()))
    }

    fn do_tune_gbdt(&self, keyed: &KeyedStage, out: &Path) -> Result<String> {
        let selections = self.load_selections(&keyed.inputs["select"])?;
        let corpus = self.load_corpus(&keyed.inputs["ingest"])?;
        let claims = self.load_claims()?;
        let scorer = self.make_scorer(&corpus)?;
        let mode = match self.config.aggregation {
            AggregationMode::Concatenated => AggregationMode::Mixed,
            m => m,
        };
        let ClaimInputs::Features(features) = claim_inputs(&claims, &selections, &corpus, scorer.as_ref(), mode)? else {
            unreachable!("feature modes only");
        };
        let (x, y): (Vec<Vec<f64>>, Vec<usize>) = claims
            .iter()
            .zip(&features)
            .filter_map(|(c, f)| c.gold_label.map(|l| (f.flatten(), l.class_index())))
            .unzip();
        let report = grid_search_cv(&x, &y, crate::aggregation::N_LABELS, &GbdtConfig::grid(self.config.seed), self.config.cv_folds, self.config.seed)?;
        fs::write(out.join("cv.csv"), report.to_csv())?;
        write_pretty(&out.join("best.json"), &json!({"config": report.best, "mean_accuracy": report.best_row().mean_accuracy, "stratified": report.stratified}))?;
        Ok(format!("{} configurations, best accuracy {}", report.rows.len(), pct(report.best_row().mean_accuracy)))
    }

    /// Both index layouts, each without extras, with fuzzy title search, and
    /// with fuzzy search plus re-retrieval.
    pub fn ablation_rows(&self, corpus: &Corpus, claims: &[ClaimRecord]) -> Result<Vec<AblationRow>> {
        let engine = Engine::new(corpus, self.load_overrides()?);
        let scorer = self.make_scorer(corpus)?;
        let title = TfIdfIndex::build(&field_texts(corpus, IndexField::Title), self.config.title_tfidf)?;
        let body = TfIdfIndex::build(&field_texts(corpus, IndexField::Body), self.config.body_tfidf)?;
        let cat = TfIdfIndex::build(&field_texts(corpus, IndexField::Concatenated), self.config.cat_tfidf)?;
        let layouts = [
            (RetrievalMode::Concatenated, "TF-IDF (concatenated)", SparseIndices::Concatenated(&cat)),
            (RetrievalMode::Separated, "TF-IDF (separated)", SparseIndices::Separated { title: &title, body: &body }),
        ];
        let mut rows = Vec::with_capacity(6);
        for (mode, label, indices) in layouts {
            let base_docs = engine.retrieve_all(claims, indices, &self.config.retrieval_options(false))?;
            let fuzzy_docs = engine.retrieve_all(claims, indices, &self.config.retrieval_options(true))?;
            let variants = [
                (label.to_string(), false, false, &base_docs),
                ("  + fuzzy string search".to_string(), true, false, &fuzzy_docs),
                ("  + document re-retrieval".to_string(), true, true, &fuzzy_docs),
            ];
            for (approach, fuzzy, reretrieval, docs) in variants {
                let selections =
                    engine.select_all(claims, docs, scorer.as_ref(), &self.config.selection_options(reretrieval))?;
                let run = RetrievalRun { docs: docs.clone(), selections };
                let retrieved = run.retrieved_pages();
                let mean_docs = retrieved.values().map(Vec::len).sum::<usize>() as f64 / claims.len().max(1) as f64;
                rows.push(AblationRow {
                    approach,
                    mode,
                    fuzzy,
                    reretrieval,
                    recall_at_5: selection_recall(claims, &run.selections),
                    ofever: document_ofever(claims, &retrieved)?,
                    mean_docs,
                });
            }
        }
        Ok(rows)
    }

    fn do_ablate(&self, keyed: &KeyedStage, out: &Path) -> Result<String> {
        let corpus = self.load_corpus(&keyed.inputs["ingest"])?;
        let claims = self.load_claims()?;
        let rows = self.ablation_rows(&corpus, &claims)?;
        write_pretty(&out.join("ablation.json"), &rows)?;
        let table = ablation_table(&rows);
        fs::write(out.join("ablation.txt"), &table)?;
        Ok(format!("{} rows\n{table}", rows.len()))
    }

    fn do_export(&self, keyed: &KeyedStage, out: &Path) -> Result<String> {
        let docs: Vec<DocCandidateSet> =
            read_jsonl(&self.require(Stage::Retrieve, &keyed.inputs["retrieve"])?.join("docs.jsonl"))?;
        let corpus = self.load_corpus(&keyed.inputs["ingest"])?;
        let claims = self.load_claims()?;
        let doc_sets: HashMap<u64, DocCandidateSet> = docs.into_iter().map(|d| (d.claim_id, d)).collect();
        let (examples, report) = export_training_data(
            &claims,
            &corpus,
            &doc_sets,
            self.config.n_negatives,
            self.config.selection_mode,
            self.config.seed,
        );
        write_jsonl(&out.join("training.jsonl"), &examples)?;
        write_pretty(&out.join("report.json"), &report)?;
        Ok(format!(
            "{} examples ({} positive, {} negative), {} claims short of negatives",
            examples.len(),
            report.positives,
            report.negatives,
            report.short_claims.len()
        ))
    }
}

/// Pages proposed per claim, for callers outside the stage machinery.
pub fn pages_by_claim(docs: &[DocCandidateSet]) -> HashMap<u64, HashSet<String>> {
    docs.iter().map(|d| (d.claim_id, d.pages().map(str::to_string).collect())).collect()
}
