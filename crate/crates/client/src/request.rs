//! Request builders, one per command. Encoding them with
//! [`wire::encode_request`](bhakti_core::wire::encode_request) gives the
//! exact bytes the client sends.

use bhakti_core::dsl::{self, Fields, QueryExpr, ScalarValue};
use bhakti_core::wire::{Command, WireRequest};
use bhakti_core::{Metric, Vector};
use serde_json::{json, Map, Value};

fn build(cmd: Command, param: Value) -> WireRequest {
    let Value::Object(param) = param else {
        unreachable!("params are objects")
    };
    WireRequest::new(cmd, param)
}

fn vector(v: &Vector) -> Value {
    serde_json::to_value(v).expect("vectors serialize")
}

pub fn ping() -> WireRequest {
    WireRequest::new(Command::Ping, Map::new())
}

pub fn create(v: &Vector, fields: &Fields, indices: &[String]) -> WireRequest {
    build(
        Command::Create,
        json!({"vector": vector(v), "document": fields, "indices": indices}),
    )
}

pub fn create_index(name: &str, detailed: bool) -> WireRequest {
    build(Command::CreateIndex, json!({"index": name, "detailed": detailed}))
}

pub fn find_doc_by_vector(v: &Vector) -> WireRequest {
    build(Command::FindDocByVector, json!({"vector": vector(v)}))
}

pub fn knn_search(v: &Vector, metric: Metric, k: usize, filter: Option<&QueryExpr>) -> WireRequest {
    let mut p = json!({"vector": vector(v), "metric": metric.wire_name(), "k": k});
    if let Some(f) = filter {
        p["query"] = Value::String(dsl::print(f));
    }
    build(Command::KnnSearch, p)
}

pub fn mod_doc_by_vector(v: &Vector, key: &str, value: ScalarValue) -> WireRequest {
    build(
        Command::ModDocByVector,
        json!({"vector": vector(v), "key": key, "value": value}),
    )
}

pub fn remove_by_vector(v: &Vector) -> WireRequest {
    build(Command::RemoveByVector, json!({"vector": vector(v)}))
}

pub fn remove_by_query(filter: &QueryExpr) -> WireRequest {
    build(Command::RemoveByQuery, json!({"query": dsl::print(filter)}))
}

pub fn save() -> WireRequest {
    WireRequest::new(Command::Save, Map::new())
}

pub fn indices_list(detailed: bool) -> WireRequest {
    build(Command::IndicesList, json!({"detailed": detailed}))
}
