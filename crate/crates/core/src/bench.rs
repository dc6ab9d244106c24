//! Query latency versus dataset size, with and without index pre-filtering.
//!
//! Documents are random unit vectors carrying a categorical `grp` field
//! (indexed) and an identical `grp_scan` copy (never indexed). A fraction
//! `selectivity` of them is `"hot"`. For every size the dataset is grown to
//! that size, a few warm-up queries run, then each query is timed in every
//! mode, modes interleaved query by query:
//!
//! - `filtered`: knn restricted by `grp == "hot"` through the inverted index
//! - `unfiltered`: knn over every document
//! - `scan_filter` (optional): the same predicate on `grp_scan`, which forces
//!   a full scan of the document store
//!
//! One query in a hundred is checked against a brute-force oracle.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{self, CmpOp, Fields, QueryExpr, ScalarValue};
use crate::engine::{Engine, KnnHit};
use crate::metrics::{compute_stats, Metric};
use crate::Vector;

pub const CSV_HEADER: &str = "size,mode,mean_ms,p50_ms,p95_ms";
pub const FIELD_SEQ: &str = "seq";
pub const FIELD_GROUP: &str = "grp";
pub const FIELD_GROUP_SCAN: &str = "grp_scan";
const HOT: &str = "hot";
const COLD: &str = "cold";
/// Every `VERIFY_EVERY`-th timed query is checked against the oracle.
const VERIFY_EVERY: usize = 100;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("ConfigInvalid: {0}")]
    ConfigInvalid(String),
    #[error("TargetUnavailable: {0}")]
    TargetUnavailable(String),
    #[error("TargetError: {0}")]
    Target(String),
    #[error("VerificationFailed: {0}")]
    Verification(String),
    #[error("IoError: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub k: usize,
    pub repeats: usize,
    pub selectivity: f64,
    pub seed: u64,
    pub metric: Metric,
    pub warmup: usize,
    pub scan_filter: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut sizes = vec![1];
        sizes.extend((1..=20).map(|i| i * 250));
        BenchConfig {
            sizes,
            dim: 128,
            k: 10,
            repeats: 30,
            selectivity: 0.1,
            seed: 42,
            metric: Metric::Cosine,
            warmup: 5,
            scan_filter: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::ConfigInvalid(m));
        if self.sizes.is_empty() {
            return bad("no sizes given".into());
        }
        if self.sizes[0] == 0 || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "sizes must be positive and strictly ascending: {:?}",
                self.sizes
            ));
        }
        if !(self.selectivity > 0.0 && self.selectivity <= 1.0) {
            return bad(format!("selectivity must be in (0, 1], got {}", self.selectivity));
        }
        if self.repeats == 0 || self.k == 0 || self.dim == 0 {
            return bad("repeats, k and dim must be at least 1".into());
        }
        Ok(())
    }

    fn metadata(&self, target: &str) -> String {
        format!(
            "# target={target} dim={} k={} repeats={} warmup={} selectivity={} seed={} metric={}",
            self.dim, self.k, self.repeats, self.warmup, self.selectivity, self.seed, self.metric
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BenchMode {
    Filtered,
    ScanFilter,
    Unfiltered,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Filtered => "filtered",
            BenchMode::ScanFilter => "scan_filter",
            BenchMode::Unfiltered => "unfiltered",
        }
    }

    fn filter(self) -> Option<QueryExpr> {
        match self {
            BenchMode::Filtered => Some(QueryExpr::cmp(FIELD_GROUP, CmpOp::Eq, HOT)),
            BenchMode::ScanFilter => Some(QueryExpr::cmp(FIELD_GROUP_SCAN, CmpOp::Eq, HOT)),
            BenchMode::Unfiltered => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub mode: BenchMode,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub target: String,
    /// Sorted by (size, mode name).
    pub rows: Vec<BenchRow>,
    pub verified_queries: usize,
    /// SHA-256 over every result list, latencies excluded.
    pub result_digest: String,
}

impl BenchReport {
    pub fn row(&self, size: usize, mode: BenchMode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.size == size && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.config.metadata(&self.target);
        out.push('\n');
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                r.size,
                r.mode.as_str(),
                r.mean_ms,
                r.p50_ms,
                r.p95_ms
            );
        }
        out
    }

    /// Whitespace-separated mean latencies, one line per size, for plotting.
    pub fn to_dat(&self) -> String {
        let modes = self.modes();
        let mut out = self.config.metadata(&self.target);
        out.push_str("\n# size");
        for m in &modes {
            let _ = write!(out, " {}_mean_ms", m.as_str());
        }
        out.push('\n');
        for &size in &self.config.sizes {
            out.push_str(&size.to_string());
            for &m in &modes {
                let v = self.row(size, m).map_or(f64::NAN, |r| r.mean_ms);
                let _ = write!(out, " {v:.6}");
            }
            out.push('\n');
        }
        out
    }

    fn modes(&self) -> Vec<BenchMode> {
        let mut m: Vec<_> = self.rows.iter().map(|r| r.mode).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Writes `path` and a sibling `.dat` file; returns the `.dat` path.
    pub fn write_files(&self, path: &Path) -> Result<PathBuf, BenchError> {
        let io_err = |p: &Path| {
            let context = format!("writing {}", p.display());
            move |source| BenchError::Io { context, source }
        };
        fs::write(path, self.to_csv()).map_err(io_err(path))?;
        let dat = path.with_extension("dat");
        fs::write(&dat, self.to_dat()).map_err(io_err(&dat))?;
        Ok(dat)
    }
}

/// Something the benchmark can load documents into and query.
pub trait BenchTarget {
    fn describe(&self) -> String;
    fn create_index(&mut self, field: &str) -> Result<(), BenchError>;
    fn insert(&mut self, vector: Vector, fields: Fields) -> Result<(), BenchError>;
    fn knn(
        &mut self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: Option<&QueryExpr>,
    ) -> Result<Vec<KnnHit>, BenchError>;
}

impl BenchTarget for Engine {
    fn describe(&self) -> String {
        "in-process".into()
    }

    fn create_index(&mut self, field: &str) -> Result<(), BenchError> {
        Engine::create_index(self, field)
            .map(drop)
            .map_err(|e| BenchError::Target(e.to_string()))
    }

    fn insert(&mut self, vector: Vector, fields: Fields) -> Result<(), BenchError> {
        self.create(vector, fields, &[])
            .map(drop)
            .map_err(|e| BenchError::Target(e.to_string()))
    }

    fn knn(
        &mut self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: Option<&QueryExpr>,
    ) -> Result<Vec<KnnHit>, BenchError> {
        self.knn_search(query, metric, k, filter)
            .map(|r| r.hits)
            .map_err(|e| BenchError::Target(e.to_string()))
    }
}

fn random_unit(rng: &mut ChaCha20Rng, dim: usize) -> Vector {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return Vector::new(raw.into_iter().map(|x| x / norm).collect()).expect("finite");
        }
    }
}

/// Whether document `i` is in the hot group. Spreads hot documents evenly so
/// every prefix of length n holds `ceil(n * selectivity)` of them.
pub fn is_hot(i: usize, selectivity: f64) -> bool {
    ((i + 1) as f64 * selectivity).ceil() > (i as f64 * selectivity).ceil()
}

/// The deterministic document sequence for `config`.
pub fn generate_dataset(config: &BenchConfig) -> Vec<(Vector, Fields)> {
    let n = config.sizes.last().copied().unwrap_or(0);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    (0..n)
        .map(|i| {
            let grp = if is_hot(i, config.selectivity) { HOT } else { COLD };
            let fields = Fields::from([
                (FIELD_SEQ.to_string(), ScalarValue::Number(i as f64)),
                (FIELD_GROUP.to_string(), ScalarValue::from(grp)),
                (FIELD_GROUP_SCAN.to_string(), ScalarValue::from(grp)),
            ]);
            (random_unit(&mut rng, config.dim), fields)
        })
        .collect()
}

fn seq_of(hit: &KnnHit) -> Option<usize> {
    match hit.document.fields.get(FIELD_SEQ) {
        Some(ScalarValue::Number(n)) if *n >= 0.0 && n.fract() == 0.0 => Some(*n as usize),
        _ => None,
    }
}

/// Brute-force top-k over the first `n` documents, as sequence numbers.
fn oracle(
    data: &[(Vector, Fields)],
    n: usize,
    query: &Vector,
    metric: Metric,
    k: usize,
    filter: Option<&QueryExpr>,
) -> Vec<usize> {
    let prefix = &data[..n];
    let stats = match metric {
        Metric::EuclideanZScore => Some(compute_stats(prefix.iter().map(|(v, _)| v)).expect("non-empty")),
        _ => None,
    };
    let mut scored: Vec<(f64, usize)> = prefix
        .iter()
        .enumerate()
        .filter(|(_, (_, f))| filter.is_none_or(|e| dsl::evaluate(e, f)))
        .filter_map(|(i, (v, _))| metric.distance(query, v, stats.as_ref()).ok().map(|d| (d, i)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn summarize(size: usize, mode: BenchMode, mut samples: Vec<f64>) -> BenchRow {
    samples.sort_by(f64::total_cmp);
    BenchRow {
        size,
        mode,
        mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
        p50_ms: percentile(&samples, 0.5),
        p95_ms: percentile(&samples, 0.95),
    }
}

/// Runs the benchmark. The target should start empty: documents are matched
/// to the oracle by their `seq` field and ties are broken by insertion order.
pub fn run_bench<T: BenchTarget + ?Sized>(config: &BenchConfig, target: &mut T) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let data = generate_dataset(config);
    let mut query_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x5155_4552_5953_0001);
    let mut modes = vec![BenchMode::Filtered, BenchMode::Unfiltered];
    if config.scan_filter {
        modes.push(BenchMode::ScanFilter);
    }
    let filters: Vec<Option<QueryExpr>> = modes.iter().map(|m| m.filter()).collect();

    target.create_index(FIELD_GROUP)?;
    let mut digest = Sha256::new();
    let mut rows = Vec::new();
    let mut loaded = 0;
    let mut timed = 0usize;
    let mut verified = 0;
    for &size in &config.sizes {
        for (v, f) in &data[loaded..size] {
            target.insert(v.clone(), f.clone())?;
        }
        loaded = size;

        for _ in 0..config.warmup {
            let q = random_unit(&mut query_rng, config.dim);
            for f in &filters {
                target.knn(&q, config.metric, config.k, f.as_ref())?;
            }
        }
        let mut samples = vec![Vec::with_capacity(config.repeats); modes.len()];
        for _ in 0..config.repeats {
            let q = random_unit(&mut query_rng, config.dim);
            for (m, f) in filters.iter().enumerate() {
                let started = Instant::now();
                let hits = target.knn(&q, config.metric, config.k, f.as_ref())?;
                samples[m].push(started.elapsed().as_secs_f64() * 1e3);

                let got: Vec<usize> = hits
                    .iter()
                    .map(|h| {
                        seq_of(h).ok_or_else(|| {
                            BenchError::Verification(format!("hit {} has no {FIELD_SEQ} field", h.document.id))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                for s in &got {
                    digest.update((*s as u64).to_le_bytes());
                }
                digest.update(b"|");
                if timed.is_multiple_of(VERIFY_EVERY) {
                    let want = oracle(&data, size, &q, config.metric, config.k, f.as_ref());
                    if got != want {
                        return Err(BenchError::Verification(format!(
                            "size {size}, mode {}: got {got:?}, oracle {want:?}",
                            modes[m].as_str()
                        )));
                    }
                    verified += 1;
                }
                timed += 1;
            }
        }
        for (m, s) in modes.iter().zip(samples) {
            rows.push(summarize(size, *m, s));
        }
    }
    rows.sort_by(|a, b| (a.size, a.mode.as_str()).cmp(&(b.size, b.mode.as_str())));
    Ok(BenchReport {
        config: config.clone(),
        target: target.describe(),
        rows,
        verified_queries: verified,
        result_digest: hex::encode(digest.finalize()),
    })
}
