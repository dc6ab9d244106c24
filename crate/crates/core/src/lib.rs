//! Core of the Bhakti vector database.
//!
//! The crate holds everything that does not touch a socket:
//!
//! * [`metrics`]: the five exact distance functions and dataset statistics,
//!   generic over the floating point type.
//! * [`dsl`]: the document filter language (parser, printer, evaluator).
//! * [`engine`]: the Dipamkara document store with a unique-vector index, inverted
//!   indices, exact k-NN and snapshot persistence.
//! * [`wire`]: the JSON request/response envelopes and command dispatch.
//! * [`pipeline`]: the staged request processing abstraction used by the server.
//! * [`memory`]: weighted dialogue memory on top of any vector store.
//! * [`bench`]: the query latency scaling benchmark.

pub mod bench;
pub mod dsl;
pub mod engine;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod wire;

pub use dsl::{QueryExpr, ScalarValue};
pub use engine::{DocId, Document, Engine, EngineConfig, EngineError, Fields};
pub use metrics::{Metric, MetricError, Scalar};

/// Vector of 64-bit floats, the storage and search unit of the engine.
pub type Vector = metrics::Vector<f64>;
/// Single precision vector, usable with every metric function.
pub type Vector32 = metrics::Vector<f32>;
/// Per-dimension mean/variance over a set of [`Vector`]s.
pub type DatasetStats = metrics::DatasetStats<f64>;
