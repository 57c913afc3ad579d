//! The evaluation service: scores a rewrite of a corpus entry with the
//! verifier and the cost model. Requests and responses are plain records so
//! they can travel over a socket as JSON lines.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use silo_core::cost::{cost_with, mean_bit_diff, objective_from_parts, LatencyTable, ObjectiveReport, RlConfig};
use silo_core::datagen::DatasetEntry;
use silo_core::isa::{detokenize, Program, Vocab};
use silo_core::machine::{Executable, LiveOut};
use silo_core::testgen::TestSuite;
use silo_core::verify::{verify_exe, VerifyConfig};

pub const PROTOCOL: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: u64,
    pub entry_id: String,
    /// Space-separated token rendering of the rewrite.
    pub rewrite: String,
    pub protocol: String,
}

impl EvalRequest {
    pub fn new(id: u64, entry_id: impl Into<String>, tokens: &[u32]) -> Self {
        EvalRequest {
            id,
            entry_id: entry_id.into(),
            rewrite: Vocab::get().render(tokens),
            protocol: PROTOCOL.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub id: u64,
    pub entry_id: String,
    pub parse_ok: bool,
    pub verdict: String,
    pub v: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub c_all: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub c_exe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub c_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bit_diff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

impl EvalResponse {
    /// Verified and strictly cheaper than `cost`.
    pub fn improves_on(&self, cost: f64) -> bool {
        self.v == 0 && self.c_total.is_some_and(|c| c < cost)
    }

    /// The policy-gradient objective for this result.
    pub fn objective(&self, rl: &RlConfig) -> ObjectiveReport {
        match (self.parse_ok, self.c_total) {
            (true, Some(c)) => objective_from_parts(c, self.v, self.bit_diff.unwrap_or(0.0), rl),
            _ => ObjectiveReport {
                j: rl.clip,
                c_total: 0.0,
                v_term: rl.lambda,
                bit_penalty: 0.0,
                clipped: true,
            },
        }
    }
}

/// A structured failure reply; the service keeps running.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub id: Option<u64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unknown entry `{0}`")]
    UnknownEntry(String),
    #[error("unsupported protocol `{0}`")]
    Protocol(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed message: {0}")]
    Malformed(String),
}

pub trait Evaluator: Send + Sync {
    /// One response per request, in order.
    fn evaluate(&self, reqs: &[EvalRequest]) -> Result<Vec<EvalResponse>, EvalError>;
}

/// What the service needs to know about an entry.
#[derive(Debug, Clone)]
pub struct EvalEntry {
    pub spec: Program,
    pub suite: TestSuite,
    pub live_out: LiveOut,
}

/// Parses a token rendering back into a program.
pub fn parse_rewrite(text: &str) -> Option<Program> {
    let vocab = Vocab::get();
    let ids: Option<Vec<u32>> = text.split_whitespace().map(|t| vocab.id(t)).collect();
    detokenize(&ids?).ok()
}

/// In-process evaluation with a bounded number of worker threads.
#[derive(Clone)]
pub struct LocalEvaluator {
    entries: Arc<HashMap<String, EvalEntry>>,
    pub verify: VerifyConfig,
    pub latency: LatencyTable,
    pub workers: usize,
    /// Wall-clock time makes responses non-reproducible, so it is opt-in.
    pub record_wall_ms: bool,
}

impl LocalEvaluator {
    pub fn new<'a>(entries: impl IntoIterator<Item = &'a DatasetEntry>, verify: VerifyConfig) -> Self {
        let map = entries
            .into_iter()
            .map(|e| {
                (
                    e.id.clone(),
                    EvalEntry { spec: e.f_s.clone(), suite: e.suite.clone(), live_out: e.live_out },
                )
            })
            .collect();
        LocalEvaluator {
            entries: Arc::new(map),
            verify,
            latency: LatencyTable::default(),
            workers: 1,
            record_wall_ms: false,
        }
    }

    pub fn with_workers(mut self, n: usize) -> Self {
        self.workers = n.max(1);
        self
    }

    pub fn evaluate_one(&self, req: &EvalRequest) -> Result<EvalResponse, EvalError> {
        if req.protocol != PROTOCOL {
            return Err(EvalError::Protocol(req.protocol.clone()));
        }
        let entry = self
            .entries
            .get(&req.entry_id)
            .ok_or_else(|| EvalError::UnknownEntry(req.entry_id.clone()))?;
        let t0 = Instant::now();
        let mut resp = EvalResponse {
            id: req.id,
            entry_id: req.entry_id.clone(),
            parse_ok: false,
            verdict: "unparseable".into(),
            v: 1,
            c_all: None,
            c_exe: None,
            c_total: None,
            bit_diff: None,
            wall_ms: None,
        };
        if let Some(cand) = parse_rewrite(&req.rewrite) {
            let exe = Executable::new(&cand);
            let out = verify_exe(&exe, &Executable::new(&entry.spec), &entry.suite, &entry.live_out, &self.verify);
            let c = cost_with(&cand, &exe, &entry.suite, &self.latency);
            resp.parse_ok = true;
            resp.verdict = out.verdict.name().to_string();
            resp.v = out.v_value();
            resp.c_all = Some(c.c_all);
            resp.c_exe = Some(c.c_exe);
            resp.c_total = Some(c.c_total);
            resp.bit_diff = Some(mean_bit_diff(&exe, &entry.suite, &entry.live_out));
        }
        if self.record_wall_ms {
            resp.wall_ms = Some(t0.elapsed().as_millis() as u64);
        }
        Ok(resp)
    }
}

impl Evaluator for LocalEvaluator {
    fn evaluate(&self, reqs: &[EvalRequest]) -> Result<Vec<EvalResponse>, EvalError> {
        if self.workers <= 1 || reqs.len() <= 1 {
            return reqs.iter().map(|r| self.evaluate_one(r)).collect();
        }
        let chunk = reqs.len().div_ceil(self.workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = reqs
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|r| self.evaluate_one(r)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use silo_core::datagen::{build_corpus, DatagenConfig};
    use silo_core::isa::tokenize;

    #[test]
    fn own_reference_scores_its_recorded_cost() {
        let c = build_corpus(4, 1, 1, &DatagenConfig::default()).unwrap();
        let ev = LocalEvaluator::new(&c.train, VerifyConfig::default());
        for e in &c.train {
            let req = EvalRequest::new(1, &e.id, &tokenize(&e.f_ref).unwrap().0);
            let r = ev.evaluate_one(&req).unwrap();
            assert!(r.parse_ok);
            assert_eq!(r.v, 0);
            assert_eq!(r.c_total, Some(e.cost_ref));
            let again = ev.evaluate_one(&req).unwrap();
            assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
        }
        let junk = EvalRequest { rewrite: "<bos> FUNC movl <eos>".into(), ..EvalRequest::new(2, &c.train[0].id, &[]) };
        let r = ev.evaluate_one(&junk).unwrap();
        assert!(!r.parse_ok);
        assert_eq!(r.v, 1);
        assert!(r.c_total.is_none());
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("c_total"));
        assert!(ev.evaluate_one(&EvalRequest::new(3, "nope", &[])).is_err());
    }
}
