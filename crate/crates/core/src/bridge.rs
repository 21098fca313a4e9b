//! Client for external scorers speaking line-delimited JSON.
//!
//! Each request is one line `{"kind", "id", "claim", "sentences"}`; each
//! response is one line `{"id", "probs"}`, `{"id", "terms"}` or
//! `{"id", "error"}`. Responses may come back in any order and are matched by
//! id, so several threads can share one connection.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{check_distribution, ScoreKind, Scorer, ScorerMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Sentence,
    Claim,
    ClaimConcat,
    Terms,
}

impl From<ScoreKind> for RequestKind {
    fn from(k: ScoreKind) -> Self {
        match k {
            ScoreKind::Sentence => RequestKind::Sentence,
            ScoreKind::Claim => RequestKind::Claim,
            ScoreKind::ClaimConcat => RequestKind::ClaimConcat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub kind: RequestKind,
    pub id: u64,
    pub claim: String,
    #[serde(default)]
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn bridge_err(id: u64, reason: impl Into<String>) -> Error {
    Error::Scorer { batch: format!("bridge request {id}"), reason: reason.into() }
}

/// Shared connection to one scorer process or socket.
pub struct BridgeClient {
    writer: Mutex<Box<dyn Write + Send>>,
    reader: Mutex<Box<dyn BufRead + Send>>,
    stash: Mutex<HashMap<u64, ScoreResponse>>,
    next_id: AtomicU64,
    mode: ScorerMode,
    child: Mutex<Option<Child>>,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient").field("mode", &self.mode).finish_non_exhaustive()
    }
}

impl BridgeClient {
    pub fn new(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static, mode: ScorerMode) -> Self {
        Self {
            writer: Mutex::new(Box::new(writer)),
            reader: Mutex::new(Box::new(reader)),
            stash: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            mode,
            child: Mutex::new(None),
        }
    }

    /// `tcp://host:port` connects to a socket; anything else is run as a
    /// shell command whose standard streams carry the protocol.
    pub fn connect(endpoint: &str, mode: ScorerMode) -> Result<Self> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            let stream = TcpStream::connect(addr)?;
            let reader = BufReader::new(stream.try_clone()?);
            return Ok(Self::new(reader, stream, mode));
        }
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(endpoint)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let client = Self::new(BufReader::new(stdout), stdin, mode);
        *client.child.lock().unwrap() = Some(child);
        Ok(client)
    }

    fn send(&self, req: &ScoreRequest) -> Result<()> {
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        let mut w = self.writer.lock().unwrap();
        w.write_all(line.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    fn receive(&self, id: u64) -> Result<ScoreResponse> {
        loop {
            if let Some(resp) = self.stash.lock().unwrap().remove(&id) {
                return Ok(resp);
            }
            let mut reader = self.reader.lock().unwrap();
            // Another thread may have stashed ours while we waited for the reader.
            if let Some(resp) = self.stash.lock().unwrap().remove(&id) {
                return Ok(resp);
            }
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(bridge_err(id, "scorer closed the stream"));
            }
            if line.trim().is_empty() {
                continue;
            }
            let resp: ScoreResponse =
                serde_json::from_str(&line).map_err(|e| bridge_err(id, format!("bad response line: {e}")))?;
            if resp.id == id {
                return Ok(resp);
            }
            self.stash.lock().unwrap().insert(resp.id, resp);
        }
    }

    fn next_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Send all requests before reading, then collect responses in request order.
    pub fn call_many(&self, reqs: &[ScoreRequest]) -> Result<Vec<ScoreResponse>> {
        for r in reqs {
            self.send(r)?;
        }
        reqs.iter().map(|r| self.receive(r.id)).collect()
    }

    pub fn request(&self, kind: RequestKind, claim: &str, sentences: &[&str]) -> ScoreRequest {
        ScoreRequest {
            kind,
            id: self.next_id(),
            claim: claim.to_string(),
            sentences: sentences.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn extract_terms(&self, claim: &str) -> Result<Vec<String>> {
        let req = self.request(RequestKind::Terms, claim, &[]);
        let resp = self.call_many(std::slice::from_ref(&req))?.remove(0);
        if let Some(e) = resp.error {
            return Err(bridge_err(req.id, e));
        }
        resp.terms.ok_or_else(|| bridge_err(req.id, "response without terms"))
    }

    /// Validate a probability response against the request that produced it.
    pub fn check_probs(&self, req: &ScoreRequest, resp: ScoreResponse) -> Result<Vec<Vec<f64>>> {
        if let Some(e) = resp.error {
            return Err(bridge_err(req.id, e));
        }
        let probs = resp.probs.ok_or_else(|| bridge_err(req.id, "response without probs"))?;
        let expected_rows = match req.kind {
            RequestKind::ClaimConcat => 1,
            _ => req.sentences.len(),
        };
        if probs.len() != expected_rows {
            return Err(bridge_err(req.id, format!("expected {expected_rows} rows, got {}", probs.len())));
        }
        let width = match req.kind {
            RequestKind::Sentence => self.mode.width(),
            _ => 3,
        };
        for row in &probs {
            check_distribution(row, width).map_err(|e| bridge_err(req.id, e.to_string()))?;
        }
        Ok(probs)
    }
}

impl Scorer for BridgeClient {
    fn mode(&self) -> ScorerMode {
        self.mode
    }

    fn score_batch(&self, kind: ScoreKind, claim: &str, sentences: &[&str]) -> Result<Vec<Vec<f64>>> {
        let req = self.request(kind.into(), claim, sentences);
        let resp = self.call_many(std::slice::from_ref(&req))?.remove(0);
        self.check_probs(&req, resp)
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.lock().unwrap().take() {
            // Closing stdin lets a well-behaved scorer exit on EOF.
            *self.writer.lock().unwrap() = Box::new(std::io::sink());
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{pipe, PipeReader, PipeWriter};
    use std::thread;

    /// Mock scorer: answers in reverse order of each pair of requests, fixed
    /// triple per sentence.
    fn spawn_mock(req_rx: PipeReader, mut resp_tx: PipeWriter) -> thread::JoinHandle<()> {
        thread::spawn(move || {
            let mut held: Option<ScoreResponse> = None;
            for line in BufReader::new(req_rx).lines() {
                let Ok(line) = line else { break };
                let resp = match serde_json::from_str::<ScoreRequest>(&line) {
                    Ok(req) => {
                        let rows = if req.kind == RequestKind::ClaimConcat { 1 } else { req.sentences.len() };
                        ScoreResponse { id: req.id, probs: Some(vec![vec![0.2, 0.3, 0.5]; rows]), ..Default::default() }
                    }
                    Err(e) => ScoreResponse { id: 0, error: Some(e.to_string()), ..Default::default() },
                };
                match held.take() {
                    None => held = Some(resp),
                    Some(first) => {
                        for r in [resp, first] {
                            writeln!(resp_tx, "{}", serde_json::to_string(&r).unwrap()).unwrap();
                        }
                    }
                }
            }
            if let Some(r) = held {
                let _ = writeln!(resp_tx, "{}", serde_json::to_string(&r).unwrap());
            }
        })
    }

    fn client() -> (BridgeClient, thread::JoinHandle<()>) {
        let (req_rx, req_tx) = pipe().unwrap();
        let (resp_rx, resp_tx) = pipe().unwrap();
        let handle = spawn_mock(req_rx, resp_tx);
        (BridgeClient::new(BufReader::new(resp_rx), req_tx, ScorerMode::Ternary), handle)
    }

    #[test]
    fn out_of_order_responses_match_by_id() {
        let (c, _h) = client();
        let reqs: Vec<ScoreRequest> =
            (0..6).map(|i| c.request(RequestKind::Sentence, "claim", &vec!["s"; i + 1])).collect();
        let resps = c.call_many(&reqs).unwrap();
        for (req, resp) in reqs.iter().zip(resps) {
            assert_eq!(req.id, resp.id);
            assert_eq!(c.check_probs(req, resp).unwrap().len(), req.sentences.len());
        }
    }

    #[test]
    fn concurrent_callers_share_a_connection() {
        let (c, _h) = client();
        let c = std::sync::Arc::new(c);
        // Pairs are answered in reverse; an even number of calls always drains.
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let c = c.clone();
                thread::spawn(move || c.score_batch(ScoreKind::Claim, "x", &vec!["a"; i + 1]).unwrap().len())
            })
            .collect();
        let mut lens: Vec<usize> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        lens.sort();
        assert_eq!(lens, [1, 2, 3, 4]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let c = BridgeClient::new(std::io::empty(), std::io::sink(), ScorerMode::Binary);
        let req = c.request(RequestKind::Sentence, "c", &["a", "b"]);
        let short = ScoreResponse { id: req.id, probs: Some(vec![vec![0.5, 0.5]]), ..Default::default() };
        assert!(c.check_probs(&req, short).is_err());
        let wide = ScoreResponse { id: req.id, probs: Some(vec![vec![0.2, 0.3, 0.5]; 2]), ..Default::default() };
        assert!(c.check_probs(&req, wide).is_err());
        let failed = ScoreResponse { id: req.id, error: Some("boom".into()), ..Default::default() };
        assert!(c.check_probs(&req, failed).is_err());
        assert!(c.score_batch(ScoreKind::Sentence, "c", &["a"]).is_err());
    }

    #[test]
    fn wire_shapes() {
        let req = ScoreRequest { kind: RequestKind::ClaimConcat, id: 3, claim: "c".into(), sentences: vec!["s".into()] };
        assert_eq!(serde_json::to_string(&req).unwrap(), r#"{"kind":"claim_concat","id":3,"claim":"c","sentences":["s"]}"#);
        let resp: ScoreResponse = serde_json::from_str(r#"{"id": 3, "terms": ["A"]}"#).unwrap();
        assert_eq!(resp.terms.unwrap(), ["A"]);
    }
}
