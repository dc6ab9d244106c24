//! Dialogue memory on top of the vector store.
//!
//! Each exchange is stored under `V = w_q·embed(query) + w_a·embed(answer)`,
//! so the stored direction leans toward the heavier side. Recall embeds the
//! new query, restricts the search to one `(user_id, bot_id)` pair and renders
//! hits as
//!
//! ```text
//! [2024-05-01T12:00:00.000000Z] Q: what is a vector? | A: a list of numbers
//! ```
//!
//! In the query part `\` and `|` are escaped with a backslash so that
//! [`parse_template`] can split the line unambiguously; the answer runs to the
//! end of the string.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::OnceLock;

use chrono::{DateTime, NaiveDateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{CmpOp, Fields, QueryExpr, ScalarValue};
use crate::engine::{DocId, Engine, EngineError, KnnHit};
use crate::metrics::{self, Metric, Scalar};
use crate::Vector;

pub const FIELD_QUERY: &str = "query";
pub const FIELD_ANSWER: &str = "answer";
pub const FIELD_USER: &str = "user_id";
pub const FIELD_BOT: &str = "bot_id";
pub const FIELD_TIMESTAMP: &str = "timestamp";
/// Every memory field is indexed.
pub const MEMORY_FIELDS: [&str; 5] = [FIELD_QUERY, FIELD_ANSWER, FIELD_USER, FIELD_BOT, FIELD_TIMESTAMP];

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.6fZ";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoryError {
    #[error("InvalidInput: {0}")]
    InvalidInput(String),
    #[error("DuplicateMemory: a memory with vector {0} already exists")]
    DuplicateMemory(String),
    #[error("StoreUnavailable: {0}")]
    StoreUnavailable(String),
    #[error("StoreError: {0}")]
    Store(String),
    #[error("EmbeddingError: {0}")]
    Embedding(String),
    #[error("MalformedMemory: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub w_q: f64,
    pub w_a: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { w_q: 0.5, w_a: 0.5 }
    }
}

impl Weights {
    pub fn new(w_q: f64, w_a: f64) -> Result<Self, MemoryError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(w_q) || !ok(w_a) || w_q + w_a <= 0.0 {
            return Err(MemoryError::InvalidInput(format!(
                "weights must be finite, non-negative and not both zero (got {w_q}, {w_a})"
            )));
        }
        Ok(Weights { w_q, w_a })
    }
}

/// `w_q·v_q + w_a·v_a`, elementwise.
pub fn weighted_embedding<T: Scalar>(
    w: Weights,
    v_q: &metrics::Vector<T>,
    v_a: &metrics::Vector<T>,
) -> Result<metrics::Vector<T>, MemoryError> {
    if v_q.dim() != v_a.dim() {
        return Err(MemoryError::InvalidInput(format!(
            "query and answer embeddings differ in dimension ({} vs {})",
            v_q.dim(),
            v_a.dim()
        )));
    }
    let (wq, wa) = (T::from_f64(w.w_q).unwrap(), T::from_f64(w.w_a).unwrap());
    let v = v_q.iter().zip(v_a.iter()).map(|(&q, &a)| wq * q + wa * a).collect();
    metrics::Vector::new(v).map_err(|e| MemoryError::InvalidInput(e.to_string()))
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vector, MemoryError>;
}

/// Deterministic stand-in for a real embedding model: the SHA-256 of the
/// text seeds a ChaCha20 stream of standard normal samples, normalized to unit
/// length. Unrelated texts land on effectively independent random directions.
#[derive(Debug, Clone, Copy)]
pub struct ToyEmbedder {
    dim: usize,
}

impl ToyEmbedder {
    pub fn new(dim: usize) -> Result<Self, MemoryError> {
        if dim < 2 {
            return Err(MemoryError::InvalidInput(format!(
                "toy embedder needs dim >= 2, got {dim}"
            )));
        }
        Ok(ToyEmbedder { dim })
    }
}

pub fn toy_embedder(dim: usize) -> Result<ToyEmbedder, MemoryError> {
    ToyEmbedder::new(dim)
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vector, MemoryError> {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha20Rng::from_seed(seed);
        loop {
            let raw: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                let v = raw.into_iter().map(|x| x / norm).collect();
                return Vector::new(v).map_err(|e| MemoryError::Embedding(e.to_string()));
            }
        }
    }
}

/// Source of memory timestamps, in microseconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now_micros(&self) -> i64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_micros(&self) -> i64 {
        Utc::now().timestamp_micros()
    }
}

/// Returns `start`, `start + step`, ... on successive calls.
#[derive(Debug)]
pub struct StepClock {
    next: AtomicI64,
    step: i64,
}

impl StepClock {
    pub fn new(start_micros: i64, step_micros: i64) -> Self {
        StepClock {
            next: AtomicI64::new(start_micros),
            step: step_micros,
        }
    }
}

impl Clock for StepClock {
    fn now_micros(&self) -> i64 {
        self.next.fetch_add(self.step, Ordering::Relaxed)
    }
}

/// Backend that memories are written to and searched in.
pub trait MemoryStore {
    fn insert_memory(&self, vector: Vector, fields: Fields, indices: &[String]) -> Result<DocId, MemoryError>;
    fn search_memories(
        &self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: &QueryExpr,
    ) -> Result<Vec<KnnHit>, MemoryError>;
}

impl<S: MemoryStore + ?Sized> MemoryStore for &S {
    fn insert_memory(&self, vector: Vector, fields: Fields, indices: &[String]) -> Result<DocId, MemoryError> {
        (**self).insert_memory(vector, fields, indices)
    }

    fn search_memories(
        &self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: &QueryExpr,
    ) -> Result<Vec<KnnHit>, MemoryError> {
        (**self).search_memories(query, metric, k, filter)
    }
}

impl MemoryStore for Engine {
    fn insert_memory(&self, vector: Vector, fields: Fields, indices: &[String]) -> Result<DocId, MemoryError> {
        match self.create(vector, fields, indices) {
            Ok(doc) => Ok(doc.id),
            Err(EngineError::VectorExists(key)) => Err(MemoryError::DuplicateMemory(key.to_string())),
            Err(e) => Err(MemoryError::Store(e.to_string())),
        }
    }

    fn search_memories(
        &self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: &QueryExpr,
    ) -> Result<Vec<KnnHit>, MemoryError> {
        self.knn_search(query, metric, k, Some(filter))
            .map(|r| r.hits)
            .map_err(|e| MemoryError::Store(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueRecord {
    pub query: String,
    pub answer: String,
    pub user_id: String,
    pub bot_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

impl DialogueRecord {
    pub fn to_fields(&self) -> Fields {
        Fields::from([
            (FIELD_QUERY.into(), ScalarValue::from(self.query.as_str())),
            (FIELD_ANSWER.into(), ScalarValue::from(self.answer.as_str())),
            (FIELD_USER.into(), ScalarValue::from(self.user_id.as_str())),
            (FIELD_BOT.into(), ScalarValue::from(self.bot_id.as_str())),
            (FIELD_TIMESTAMP.into(), ScalarValue::Number(self.timestamp)),
        ])
    }

    pub fn from_fields(fields: &Fields) -> Result<Self, MemoryError> {
        let text = |name: &str| match fields.get(name) {
            Some(ScalarValue::String(s)) => Ok(s.clone()),
            _ => Err(MemoryError::Malformed(format!(
                "field {name:?} missing or not a string"
            ))),
        };
        let timestamp = match fields.get(FIELD_TIMESTAMP) {
            Some(ScalarValue::Number(t)) => *t,
            _ => {
                return Err(MemoryError::Malformed(
                    "field \"timestamp\" missing or not a number".into(),
                ))
            }
        };
        Ok(DialogueRecord {
            query: text(FIELD_QUERY)?,
            answer: text(FIELD_ANSWER)?,
            user_id: text(FIELD_USER)?,
            bot_id: text(FIELD_BOT)?,
            timestamp,
        })
    }

    pub fn timestamp_micros(&self) -> i64 {
        (self.timestamp * 1e6).round() as i64
    }

    pub fn to_template(&self) -> String {
        format_template(&self.query, &self.answer, self.timestamp_micros())
    }
}

/// Collapses every run of two or more line breaks into a single `\n`.
pub fn normalize_newlines(text: &str) -> String {
    static RUNS: OnceLock<Regex> = OnceLock::new();
    RUNS.get_or_init(|| Regex::new(r"(?:\r?\n){2,}").unwrap())
        .replace_all(text, "\n")
        .into_owned()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Memorized {
    pub id: DocId,
    pub record: DialogueRecord,
    pub vector: Vector,
}

#[allow(clippy::too_many_arguments)]
pub fn memorize_conversation<S: MemoryStore + ?Sized>(
    query: &str,
    answer: &str,
    user_id: &str,
    bot_id: &str,
    weights: Weights,
    embedder: &dyn Embedder,
    store: &S,
    clock: &dyn Clock,
) -> Result<Memorized, MemoryError> {
    if query.is_empty() {
        return Err(MemoryError::InvalidInput("query must not be empty".into()));
    }
    let weights = Weights::new(weights.w_q, weights.w_a)?;
    let micros = clock.now_micros();
    if micros <= 0 {
        return Err(MemoryError::InvalidInput(format!(
            "clock returned non-positive timestamp {micros}"
        )));
    }
    let answer = normalize_newlines(answer);
    let v_q = embedder.embed(query)?;
    let v_a = embedder.embed(&answer)?;
    let vector = weighted_embedding(weights, &v_q, &v_a)?;
    let record = DialogueRecord {
        query: query.to_string(),
        answer,
        user_id: user_id.to_string(),
        bot_id: bot_id.to_string(),
        timestamp: micros as f64 / 1e6,
    };
    let indices: Vec<String> = MEMORY_FIELDS.iter().map(|s| s.to_string()).collect();
    let id = store.insert_memory(vector.clone(), record.to_fields(), &indices)?;
    Ok(Memorized { id, record, vector })
}

/// `user_id == uid && bot_id == bid`, optionally `&& extra`.
pub fn owner_filter(user_id: &str, bot_id: &str, extra: Option<&QueryExpr>) -> QueryExpr {
    let mut parts = vec![
        QueryExpr::cmp(FIELD_USER, CmpOp::Eq, user_id),
        QueryExpr::cmp(FIELD_BOT, CmpOp::Eq, bot_id),
    ];
    parts.extend(extra.cloned());
    QueryExpr::And(parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecalledMemory {
    pub id: DocId,
    pub distance: f64,
    pub record: DialogueRecord,
}

#[allow(clippy::too_many_arguments)]
pub fn recall_memories<S: MemoryStore + ?Sized>(
    query: &str,
    k: usize,
    metric: Metric,
    user_id: &str,
    bot_id: &str,
    extra_filter: Option<&QueryExpr>,
    embedder: &dyn Embedder,
    store: &S,
) -> Result<Vec<RecalledMemory>, MemoryError> {
    if k == 0 {
        return Err(MemoryError::InvalidInput("k must be at least 1".into()));
    }
    let q = embedder.embed(query)?;
    let filter = owner_filter(user_id, bot_id, extra_filter);
    store
        .search_memories(&q, metric, k, &filter)?
        .into_iter()
        .map(|hit| {
            Ok(RecalledMemory {
                id: hit.document.id,
                distance: hit.distance,
                record: DialogueRecord::from_fields(&hit.document.fields)?,
            })
        })
        .collect()
}

/// Recall rendered as template lines, nearest first.
#[allow(clippy::too_many_arguments)]
pub fn recall_memories_templated<S: MemoryStore + ?Sized>(
    query: &str,
    k: usize,
    metric: Metric,
    user_id: &str,
    bot_id: &str,
    extra_filter: Option<&QueryExpr>,
    embedder: &dyn Embedder,
    store: &S,
) -> Result<Vec<String>, MemoryError> {
    let hits = recall_memories(query, k, metric, user_id, bot_id, extra_filter, embedder, store)?;
    Ok(hits.iter().map(|m| m.record.to_template()).collect())
}

pub fn format_template(query: &str, answer: &str, timestamp_micros: i64) -> String {
    let when = DateTime::<Utc>::from_timestamp_micros(timestamp_micros)
        .map(|t| t.format(TIME_FORMAT).to_string())
        .unwrap_or_else(|| timestamp_micros.to_string());
    let mut q = String::with_capacity(query.len());
    for c in query.chars() {
        if c == '\\' || c == '|' {
            q.push('\\');
        }
        q.push(c);
    }
    format!("[{when}] Q: {q} | A: {answer}")
}

/// A parsed template line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateParts {
    pub query: String,
    pub answer: String,
    pub timestamp_micros: i64,
}

pub fn parse_template(line: &str) -> Result<TemplateParts, MemoryError> {
    let bad = |why: &str| MemoryError::Malformed(format!("template {line:?}: {why}"));
    let rest = line.strip_prefix('[').ok_or_else(|| bad("missing '['"))?;
    let (when, rest) = rest.split_once("] Q: ").ok_or_else(|| bad("missing \"] Q: \""))?;
    let timestamp_micros = NaiveDateTime::parse_from_str(when, TIME_FORMAT)
        .map_err(|e| bad(&e.to_string()))?
        .and_utc()
        .timestamp_micros();
    let mut query = String::new();
    let mut chars = rest.char_indices();
    let answer = loop {
        match chars.next() {
            Some((_, '\\')) => match chars.next() {
                Some((_, c)) => query.push(c),
                None => return Err(bad("dangling escape")),
            },
            Some((i, '|')) => {
                let answer = rest[i + 1..]
                    .strip_prefix(" A: ")
                    .ok_or_else(|| bad("missing \" A: \""))?;
                if query.pop() != Some(' ') {
                    return Err(bad("missing space before '|'"));
                }
                break answer;
            }
            Some((_, c)) => query.push(c),
            None => return Err(bad("missing \" | A: \"")),
        }
    };
    Ok(TemplateParts {
        query,
        answer: answer.to_string(),
        timestamp_micros,
    })
}
