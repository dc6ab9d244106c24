//! Lets the memory layer and the benchmark run against a remote server.

use bhakti_core::bench::{BenchError, BenchTarget};
use bhakti_core::dsl::{Fields, QueryExpr};
use bhakti_core::engine::{DocId, KnnHit};
use bhakti_core::memory::{MemoryError, MemoryStore};
use bhakti_core::{Metric, Vector};

use crate::{request, ClientConn, ClientError};

fn memory_error(e: ClientError) -> MemoryError {
    match e {
        ClientError::Server { ref kind, .. } if kind == "VectorExists" => MemoryError::DuplicateMemory(e.to_string()),
        ClientError::Connect { .. } | ClientError::ConnectionLost(_) | ClientError::Timeout(_) => {
            MemoryError::StoreUnavailable(e.to_string())
        }
        other => MemoryError::Store(other.to_string()),
    }
}

impl ClientConn {
    fn knn_expr(
        &self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: Option<&QueryExpr>,
    ) -> Result<Vec<KnnHit>, ClientError> {
        if k == 0 {
            return Err(ClientError::Validation("k must be at least 1".into()));
        }
        let data = self.call(&request::knn_search(query, metric, k, filter))?;
        serde_json::from_str::<bhakti_core::wire::KnnPayload>(&data)
            .map(|p| p.hits)
            .map_err(|e| ClientError::Protocol(e.to_string()))
    }
}

impl MemoryStore for ClientConn {
    fn insert_memory(&self, vector: Vector, fields: Fields, indices: &[String]) -> Result<DocId, MemoryError> {
        let idx: Vec<&str> = indices.iter().map(String::as_str).collect();
        self.create_doc(&vector, &fields, &idx)
            .map(|d| d.id)
            .map_err(memory_error)
    }

    fn search_memories(
        &self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: &QueryExpr,
    ) -> Result<Vec<KnnHit>, MemoryError> {
        self.knn_expr(query, metric, k, Some(filter)).map_err(memory_error)
    }
}

fn bench_error(e: ClientError) -> BenchError {
    match e {
        ClientError::Connect { .. } | ClientError::ConnectionLost(_) | ClientError::Timeout(_) => {
            BenchError::TargetUnavailable(e.to_string())
        }
        other => BenchError::Target(other.to_string()),
    }
}

impl BenchTarget for ClientConn {
    fn describe(&self) -> String {
        format!("remote:{}", self.addr())
    }

    fn create_index(&mut self, field: &str) -> Result<(), BenchError> {
        ClientConn::create_index(self, field).map(drop).map_err(bench_error)
    }

    fn insert(&mut self, vector: Vector, fields: Fields) -> Result<(), BenchError> {
        self.create_doc(&vector, &fields, &[]).map(drop).map_err(bench_error)
    }

    fn knn(
        &mut self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: Option<&QueryExpr>,
    ) -> Result<Vec<KnnHit>, BenchError> {
        self.knn_expr(query, metric, k, filter).map_err(bench_error)
    }
}
