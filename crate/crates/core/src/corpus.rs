//! Sentence-segmented Wikipedia store with per-sentence hyperlinks, plus the
//! claim records that address it.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

const STORE_MAGIC: &[u8; 8] = b"FVCORPUS";
const STORE_VERSION: u32 = 1;

const BRACKET_TOKENS: [(&str, &str); 3] = [("-LRB-", "("), ("-RRB-", ")"), ("-COLON-", ":")];

/// Canonical page key: trimmed, spaces as underscores, bracket tokens decoded.
pub fn normalize_title(raw: &str) -> String {
    let mut out = raw.trim().replace(' ', "_");
    for (token, ch) in BRACKET_TOKENS {
        if out.contains(token) {
            out = out.replace(token, ch);
        }
    }
    out
}

/// Human-readable form of a normalized page id.
pub fn display_title(page_id: &str) -> String {
    normalize_title(page_id).replace('_', " ")
}

/// FEVER verdict labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "SUPPORTS")]
    Supports,
    #[serde(rename = "REFUTES")]
    Refutes,
    #[serde(rename = "NOT ENOUGH INFO")]
    NotEnoughInfo,
}

impl Label {
    /// Class order shared by softmax triples and the aggregation classifier.
    pub const CLASS_ORDER: [Label; 3] = [Label::Refutes, Label::NotEnoughInfo, Label::Supports];

    pub fn class_index(self) -> usize {
        match self {
            Label::Refutes => 0,
            Label::NotEnoughInfo => 1,
            Label::Supports => 2,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Label> {
        Self::CLASS_ORDER.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Supports => "SUPPORTS",
            Label::Refutes => "REFUTES",
            Label::NotEnoughInfo => "NOT ENOUGH INFO",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "SUPPORTS" => Some(Label::Supports),
            "REFUTES" => Some(Label::Refutes),
            "NOT ENOUGH INFO" | "NEI" => Some(Label::NotEnoughInfo),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceRef {
    pub page_id: String,
    pub line_index: usize,
}

impl SentenceRef {
    pub fn new(page: &str, line_index: usize) -> Self {
        Self { page_id: normalize_title(page), line_index }
    }
}

impl fmt::Display for SentenceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.page_id, self.line_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceEntry {
    pub line_index: usize,
    pub text: String,
    /// Normalized, de-duplicated target page ids in first-seen order.
    pub hyperlinks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentRecord {
    pub page_id: String,
    pub title_display: String,
    pub sentences: Vec<SentenceEntry>,
}

impl DocumentRecord {
    /// All sentence texts joined with spaces; used as the body representation.
    pub fn body_text(&self) -> String {
        let mut out = String::new();
        for s in self.sentences.iter().filter(|s| !s.text.is_empty()) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&s.text);
        }
        out
    }
}

/// Parse the tab-delimited `lines` field of a dump record.
///
/// Each line is `index \t text (\t anchor \t target)*`. Gaps in the index
/// sequence are filled with empty sentences so `line_index` stays aligned with
/// gold annotations.
pub fn parse_lines(lines: &str) -> Result<Vec<SentenceEntry>> {
    let mut by_index: Vec<Option<SentenceEntry>> = Vec::new();
    for raw in lines.split('\n') {
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split('\t');
        let idx_field = fields.next().unwrap_or("");
        let line_index: usize = idx_field
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad sentence index {idx_field:?}")))?;
        let text = fields.next().unwrap_or("").to_string();
        let rest: Vec<&str> = fields.collect();
        let mut seen = HashSet::new();
        let mut hyperlinks = Vec::new();
        for pair in rest.chunks_exact(2) {
            let target = normalize_title(pair[1]);
            if !target.is_empty() && seen.insert(target.clone()) {
                hyperlinks.push(target);
            }
        }
        if line_index >= by_index.len() {
            by_index.resize(line_index + 1, None);
        }
        if by_index[line_index].is_some() {
            return Err(Error::invalid(format!("duplicate sentence index {line_index}")));
        }
        by_index[line_index] = Some(SentenceEntry { line_index, text, hyperlinks });
    }
    Ok(by_index
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.unwrap_or(SentenceEntry { line_index: i, text: String::new(), hyperlinks: Vec::new() }))
        .collect())
}

#[derive(Deserialize)]
struct RawDumpRecord {
    id: String,
    lines: String,
}

fn parse_dump_record(line: &str) -> Result<DocumentRecord> {
    let raw: RawDumpRecord = serde_json::from_str(line)?;
    let page_id = normalize_title(&raw.id);
    if page_id.is_empty() {
        return Err(Error::invalid("empty page id"));
    }
    let sentences = parse_lines(&raw.lines)?;
    Ok(DocumentRecord { title_display: display_title(&page_id), page_id, sentences })
}

/// Counts produced by [`Corpus::ingest`].
///
/// `records_in == records_stored + records_skipped + records_overwritten`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records_in: usize,
    pub records_stored: usize,
    pub records_skipped: usize,
    pub records_overwritten: usize,
    /// (source line number, reason) for the first few skipped records.
    pub skipped_examples: Vec<(usize, String)>,
}

const MAX_SKIP_EXAMPLES: usize = 20;

/// Immutable document store addressable by page id and by [`SentenceRef`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<DocumentRecord>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: impl IntoIterator<Item = DocumentRecord>) -> Self {
        let mut corpus = Corpus::default();
        for doc in docs {
            corpus.insert(doc);
        }
        corpus
    }

    /// Returns true if an existing record was replaced.
    fn insert(&mut self, doc: DocumentRecord) -> bool {
        match self.by_id.get(&doc.page_id) {
            Some(&slot) => {
                self.docs[slot] = doc;
                true
            }
            None => {
                self.by_id.insert(doc.page_id.clone(), self.docs.len());
                self.docs.push(doc);
                false
            }
        }
    }

    /// Ingest line-delimited dump records. Blank lines are ignored; malformed
    /// records are skipped and counted; duplicate ids keep the last record.
    pub fn ingest<R: BufRead>(source: R) -> Result<(Corpus, IngestReport)> {
        let lines: Vec<String> = source
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .collect();
        let parsed: Vec<(usize, Result<DocumentRecord>)> = lines
            .par_iter()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, parse_dump_record(l)))
            .collect();

        let mut report = IngestReport::default();
        let mut corpus = Corpus::default();
        for (line_no, rec) in parsed {
            report.records_in += 1;
            match rec {
                Ok(doc) => {
                    if corpus.insert(doc) {
                        report.records_overwritten += 1;
                    }
                }
                Err(e) => {
                    report.records_skipped += 1;
                    if report.skipped_examples.len() < MAX_SKIP_EXAMPLES {
                        report.skipped_examples.push((line_no, e.to_string()));
                    }
                }
            }
        }
        report.records_stored = corpus.len();
        Ok((corpus, report))
    }

    pub fn ingest_path(path: &Path) -> Result<(Corpus, IngestReport)> {
        let file = std::fs::File::open(path)?;
        Self::ingest(std::io::BufReader::new(file))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[DocumentRecord] {
        &self.docs
    }

    pub fn contains(&self, page_id: &str) -> bool {
        self.by_id.contains_key(page_id)
    }

    pub fn get_document(&self, page_id: &str) -> Option<&DocumentRecord> {
        self.by_id.get(page_id).map(|&i| &self.docs[i])
    }

    /// `None` for unknown pages and out-of-range lines.
    pub fn get_sentence(&self, r: &SentenceRef) -> Option<&SentenceEntry> {
        self.get_document(&r.page_id)?.sentences.get(r.line_index)
    }

    /// Versioned binary layout: magic, version, count, offset table, records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(STORE_MAGIC);
        enc.u32(STORE_VERSION);
        enc.u64(self.docs.len() as u64);
        let table_at = enc.len();
        for _ in &self.docs {
            enc.u64(0);
        }
        for (i, doc) in self.docs.iter().enumerate() {
            let offset = enc.len() as u64;
            enc.patch_u64(table_at + 8 * i, offset);
            enc.str(&doc.page_id);
            enc.str(&doc.title_display);
            enc.u32(doc.sentences.len() as u32);
            for s in &doc.sentences {
                enc.u32(s.line_index as u32);
                enc.str(&s.text);
                enc.u32(s.hyperlinks.len() as u32);
                for h in &s.hyperlinks {
                    enc.str(h);
                }
            }
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Corpus> {
        let mut dec = Decoder::new(bytes);
        dec.expect_magic(STORE_MAGIC)?;
        let version = dec.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported corpus store version {version}")));
        }
        let n = dec.u64()? as usize;
        let mut offsets = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            offsets.push(dec.u64()? as usize);
        }
        let mut docs = Vec::with_capacity(offsets.len());
        for off in offsets {
            dec.seek(off)?;
            let page_id = dec.str()?;
            let title_display = dec.str()?;
            let ns = dec.u32()? as usize;
            let mut sentences = Vec::with_capacity(ns.min(1 << 16));
            for _ in 0..ns {
                let line_index = dec.u32()? as usize;
                let text = dec.str()?;
                let nh = dec.u32()? as usize;
                let mut hyperlinks = Vec::with_capacity(nh.min(1 << 12));
                for _ in 0..nh {
                    hyperlinks.push(dec.str()?);
                }
                sentences.push(SentenceEntry { line_index, text, hyperlinks });
            }
            docs.push(DocumentRecord { page_id, title_display, sentences });
        }
        let corpus = Corpus::from_documents(docs);
        if corpus.len() != n {
            return Err(Error::Format("duplicate page ids in store".into()));
        }
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A set of sentences that jointly verify a claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceGroup {
    members: Vec<SentenceRef>,
}

impl EvidenceGroup {
    /// Sorts and de-duplicates; `None` when no members remain.
    pub fn new(members: impl IntoIterator<Item = SentenceRef>) -> Option<Self> {
        let mut members: Vec<SentenceRef> = members.into_iter().collect();
        members.sort();
        members.dedup();
        (!members.is_empty()).then_some(Self { members })
    }

    pub fn members(&self) -> &[SentenceRef] {
        &self.members
    }

    pub fn pages(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.page_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub claim_id: u64,
    pub text: String,
    pub gold_label: Option<Label>,
    pub gold_evidence: Vec<EvidenceGroup>,
}

impl ClaimRecord {
    /// Pages referenced by any gold group, sorted and unique.
    pub fn gold_pages(&self) -> Vec<&str> {
        let mut pages: Vec<&str> = self.gold_evidence.iter().flat_map(|g| g.pages()).collect();
        pages.sort_unstable();
        pages.dedup();
        pages
    }
}

/// Parse one claim line: `{"id", "claim", "label"?, "evidence"?}` where
/// evidence is `[[[annotation_id, evidence_id, page, line], ...], ...]`.
pub fn parse_claim(line: &str) -> Result<ClaimRecord> {
    let v: Value = serde_json::from_str(line)?;
    let claim_id = v
        .get("id")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::invalid("claim without integer \"id\""))?;
    let text = v
        .get("claim")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::invalid(format!("claim {claim_id} without \"claim\" text")))?
        .to_string();
    let gold_label = match v.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => {
            Some(Label::parse(s).ok_or_else(|| Error::invalid(format!("claim {claim_id}: unknown label {s:?}")))?)
        }
        Some(other) => return Err(Error::invalid(format!("claim {claim_id}: bad label {other}"))),
    };
    let mut gold_evidence = Vec::new();
    if gold_label != Some(Label::NotEnoughInfo) {
        if let Some(groups) = v.get("evidence").and_then(Value::as_array) {
            for group in groups {
                let members = group.as_array().into_iter().flatten().filter_map(|item| {
                    let item = item.as_array()?;
                    let page = item.get(2)?.as_str()?;
                    let line = item.get(3)?.as_u64()?;
                    Some(SentenceRef::new(page, line as usize))
                });
                if let Some(g) = EvidenceGroup::new(members) {
                    if !gold_evidence.contains(&g) {
                        gold_evidence.push(g);
                    }
                }
            }
        }
    }
    Ok(ClaimRecord { claim_id, text, gold_label, gold_evidence })
}

pub fn read_claims<R: BufRead>(source: R) -> Result<Vec<ClaimRecord>> {
    let mut claims = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        claims.push(parse_claim(&line).map_err(|e| Error::invalid(format!("claims line {}: {e}", i + 1)))?);
    }
    Ok(claims)
}

pub fn read_claims_path(path: &Path) -> Result<Vec<ClaimRecord>> {
    read_claims(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Serialize a claim back into the dump's line shape.
pub fn claim_to_json(claim: &ClaimRecord) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), claim.claim_id.into());
    obj.insert("claim".into(), claim.text.clone().into());
    if let Some(label) = claim.gold_label {
        obj.insert("label".into(), label.as_str().into());
    }
    let evidence: Vec<Value> = claim
        .gold_evidence
        .iter()
        .map(|g| {
            Value::Array(
                g.members()
                    .iter()
                    .map(|m| serde_json::json!([0, 0, m.page_id, m.line_index]))
                    .collect(),
            )
        })
        .collect();
    obj.insert("evidence".into(), Value::Array(evidence));
    Value::Object(obj)
}
