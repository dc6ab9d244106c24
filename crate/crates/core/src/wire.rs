//! Protocol v1: JSON request/response envelopes and command dispatch.
//!
//! Requests look like
//!
//! ```text
//! {"db_engine": "dipamkara", "opt": "create", "cmd": "create_index", "param": {"detailed": false, "index": "my_index"}}
//! ```
//!
//! and responses like `{"state": "OK", "message": "", "data": "true"}`.
//! `data` is always a JSON-encoded payload carried as a string, or `null`
//! on failure. One message per line; see `docs/protocol-v1.md`.

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::dsl::{self, Fields, ScalarValue};
use crate::engine::{Document, Engine, EngineError, KnnHit};
use crate::metrics::Metric;
use crate::Vector;

pub const ENGINE_NAME: &str = "dipamkara";
/// Largest accepted frame, newline excluded.
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;
/// Message of the exception sent when a request stalls mid-frame.
pub const READ_TIMEOUT_MESSAGE: &str = "Read timeout";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("MalformedJson: {0}")]
    MalformedJson(String),
    #[error("MissingField: {0}")]
    MissingField(String),
    #[error("UnexpectedField: {0}")]
    UnexpectedField(String),
    #[error("InvalidField: {field}: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("UnknownEngine: {0:?}")]
    UnknownEngine(String),
    #[error("UnknownCommand: {0:?}")]
    UnknownCommand(String),
    #[error("InvalidParam: {name}: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("FrameTooLarge: frame exceeds {MAX_FRAME_BYTES} bytes")]
    FrameTooLarge,
    #[error("Read timeout")]
    ReadTimeout,
}

impl WireError {
    fn param(name: &str, reason: impl fmt::Display) -> Self {
        WireError::InvalidParam {
            name: name.to_string(),
            reason: reason.to_string(),
        }
    }
}

/// Operation class of a request. Validated but not used for routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Opt {
    Create,
    Read,
    Update,
    Delete,
    Admin,
}

impl Opt {
    pub const ALL: [Opt; 5] = [Opt::Create, Opt::Read, Opt::Update, Opt::Delete, Opt::Admin];

    pub fn as_str(self) -> &'static str {
        match self {
            Opt::Create => "create",
            Opt::Read => "read",
            Opt::Update => "update",
            Opt::Delete => "delete",
            Opt::Admin => "admin",
        }
    }
}

macro_rules! commands {
    ($($variant:ident => $name:literal, $opt:ident;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Command {
            $($variant,)*
        }

        impl Command {
            pub const ALL: &'static [Command] = &[$(Command::$variant,)*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(Command::$variant => $name,)*
                }
            }

            /// Operation class clients send with this command.
            pub fn default_opt(self) -> Opt {
                match self {
                    $(Command::$variant => Opt::$opt,)*
                }
            }
        }

        impl FromStr for Command {
            type Err = WireError;

            fn from_str(s: &str) -> Result<Self, WireError> {
                match s {
                    $($name => Ok(Command::$variant),)*
                    other => Err(WireError::UnknownCommand(other.to_string())),
                }
            }
        }
    };
}

commands! {
    Create => "create", Create;
    CreateIndex => "create_index", Create;
    FindDocByVector => "find_doc_by_vector", Read;
    KnnSearch => "knn_search", Read;
    ModDocByVector => "mod_doc_by_vector", Update;
    RemoveByVector => "remove_by_vector", Delete;
    RemoveByQuery => "remove_by_query", Delete;
    Save => "save", Admin;
    IndicesList => "indices_list", Read;
    Ping => "ping", Admin;
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireRequest {
    pub db_engine: String,
    pub opt: Opt,
    pub cmd: Command,
    pub param: Map<String, Value>,
}

impl WireRequest {
    pub fn new(cmd: Command, param: Map<String, Value>) -> Self {
        WireRequest {
            db_engine: ENGINE_NAME.to_string(),
            opt: cmd.default_opt(),
            cmd,
            param,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseState {
    #[serde(rename = "OK")]
    Ok,
    Exception,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub state: ResponseState,
    pub message: String,
    pub data: Option<String>,
}

impl WireResponse {
    pub fn ok(data: impl Into<String>) -> Self {
        WireResponse {
            state: ResponseState::Ok,
            message: String::new(),
            data: Some(data.into()),
        }
    }

    pub fn exception(message: impl Into<String>) -> Self {
        WireResponse {
            state: ResponseState::Exception,
            message: message.into(),
            data: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.state == ResponseState::Ok
    }
}

/// JSON formatter emitting `", "` and `": "` separators, the layout used for
/// every frame on the wire.
struct SpacedFormatter;

impl Formatter for SpacedFormatter {
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        w.write_all(b": ")
    }
}

fn write_spaced<T: Serialize + ?Sized>(out: &mut Vec<u8>, value: &T) {
    let mut ser = serde_json::Serializer::with_formatter(&mut *out, SpacedFormatter);
    value.serialize(&mut ser).expect("in-memory JSON serialization");
}

/// Canonical request frame. `param` keys (and keys of nested objects) are
/// sorted; the result ends with a newline.
pub fn encode_request(req: &WireRequest) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    out.extend_from_slice(b"{\"db_engine\": ");
    write_spaced(&mut out, &req.db_engine);
    out.extend_from_slice(b", \"opt\": ");
    write_spaced(&mut out, req.opt.as_str());
    out.extend_from_slice(b", \"cmd\": ");
    write_spaced(&mut out, req.cmd.as_str());
    out.extend_from_slice(b", \"param\": ");
    // serde_json's default `Map` is ordered by key.
    write_spaced(&mut out, &req.param);
    out.extend_from_slice(b"}\n");
    out
}

fn strip_newline(frame: &[u8]) -> &[u8] {
    let frame = frame.strip_suffix(b"\n").unwrap_or(frame);
    frame.strip_suffix(b"\r").unwrap_or(frame)
}

fn take_string(obj: &mut Map<String, Value>, key: &str) -> Result<String, WireError> {
    match obj.remove(key) {
        None => Err(WireError::MissingField(key.to_string())),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(WireError::InvalidField {
            field: key.to_string(),
            reason: "expected a string".into(),
        }),
    }
}

/// Parses and validates one request frame.
pub fn decode_request(frame: &[u8]) -> Result<WireRequest, WireError> {
    let frame = strip_newline(frame);
    if frame.len() > MAX_FRAME_BYTES {
        return Err(WireError::FrameTooLarge);
    }
    let value: Value = serde_json::from_slice(frame).map_err(|e| WireError::MalformedJson(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(WireError::MalformedJson("request must be a JSON object".into()));
    };
    let db_engine = take_string(&mut obj, "db_engine")?;
    let opt = take_string(&mut obj, "opt")?;
    let cmd = take_string(&mut obj, "cmd")?;
    let param = match obj.remove("param") {
        None => return Err(WireError::MissingField("param".into())),
        Some(Value::Object(p)) => p,
        Some(_) => {
            return Err(WireError::InvalidField {
                field: "param".into(),
                reason: "expected an object".into(),
            })
        }
    };
    if let Some(key) = obj.keys().next() {
        return Err(WireError::UnexpectedField(key.clone()));
    }
    if db_engine != ENGINE_NAME {
        return Err(WireError::UnknownEngine(db_engine));
    }
    let opt = Opt::ALL
        .into_iter()
        .find(|o| o.as_str() == opt)
        .ok_or_else(|| WireError::InvalidField {
            field: "opt".into(),
            reason: format!("unknown operation type {opt:?}"),
        })?;
    let cmd = cmd.parse()?;
    Ok(WireRequest {
        db_engine,
        opt,
        cmd,
        param,
    })
}

/// Response frame with keys in the order state, message, data; ends with a
/// newline.
pub fn encode_response(resp: &WireResponse) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + resp.message.len() + resp.data.as_ref().map_or(0, String::len));
    out.extend_from_slice(b"{\"state\": ");
    write_spaced(&mut out, &resp.state);
    out.extend_from_slice(b", \"message\": ");
    write_spaced(&mut out, &resp.message);
    out.extend_from_slice(b", \"data\": ");
    write_spaced(&mut out, &resp.data);
    out.extend_from_slice(b"}\n");
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResponse {
    state: ResponseState,
    message: String,
    data: Option<String>,
}

pub fn decode_response(frame: &[u8]) -> Result<WireResponse, WireError> {
    let raw: RawResponse =
        serde_json::from_slice(strip_newline(frame)).map_err(|e| WireError::MalformedJson(e.to_string()))?;
    if raw.state == ResponseState::Exception && raw.data.is_some() {
        return Err(WireError::InvalidField {
            field: "data".into(),
            reason: "exception responses carry null data".into(),
        });
    }
    Ok(WireResponse {
        state: raw.state,
        message: raw.message,
        data: raw.data,
    })
}

/// Payload of a `knn_search` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnPayload {
    pub hits: Vec<KnnHit>,
    /// The filter touched an unindexed field and was resolved by full scan.
    pub full_scan: bool,
}

struct Params {
    map: Map<String, Value>,
}

impl Params {
    fn new(map: Map<String, Value>, allowed: &[&str]) -> Result<Self, WireError> {
        if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(WireError::param(k, "unexpected parameter"));
        }
        Ok(Params { map })
    }

    fn required(&self, name: &str) -> Result<&Value, WireError> {
        self.map.get(name).ok_or_else(|| WireError::param(name, "missing"))
    }

    fn string(&self, name: &str) -> Result<&str, WireError> {
        self.required(name)?
            .as_str()
            .ok_or_else(|| WireError::param(name, "expected a string"))
    }

    fn opt_bool(&self, name: &str) -> Result<bool, WireError> {
        match self.map.get(name) {
            None => Ok(false),
            Some(v) => v.as_bool().ok_or_else(|| WireError::param(name, "expected a boolean")),
        }
    }

    fn vector(&self, name: &str) -> Result<Vector, WireError> {
        let values: Vec<f64> = serde_json::from_value(self.required(name)?.clone())
            .map_err(|_| WireError::param(name, "expected an array of numbers"))?;
        Vector::new(values).map_err(|e| WireError::param(name, e))
    }

    fn metric(&self, name: &str) -> Result<Metric, WireError> {
        self.string(name)?.parse().map_err(|e| WireError::param(name, e))
    }

    fn positive(&self, name: &str) -> Result<usize, WireError> {
        self.required(name)?
            .as_u64()
            .filter(|&k| k >= 1)
            .and_then(|k| usize::try_from(k).ok())
            .ok_or_else(|| WireError::param(name, "expected a positive integer"))
    }

    fn query(&self, name: &str) -> Result<Option<dsl::QueryExpr>, WireError> {
        match self.map.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => dsl::parse(s).map(Some).map_err(|e| WireError::param(name, e)),
            Some(_) => Err(WireError::param(name, "expected a filter string")),
        }
    }

    fn scalar(&self, name: &str) -> Result<ScalarValue, WireError> {
        ScalarValue::from_json(self.required(name)?)
            .ok_or_else(|| WireError::param(name, "InvalidFieldValue: expected a string, number or boolean"))
    }

    fn fields(&self, name: &str) -> Result<Fields, WireError> {
        let Some(v) = self.map.get(name) else {
            return Ok(Fields::new());
        };
        let obj = v
            .as_object()
            .ok_or_else(|| WireError::param(name, "expected an object"))?;
        obj.iter()
            .map(|(k, v)| {
                ScalarValue::from_json(v)
                    .map(|s| (k.clone(), s))
                    .ok_or_else(|| WireError::param(name, format!("InvalidFieldValue: field {k:?} is not a scalar")))
            })
            .collect()
    }

    fn strings(&self, name: &str) -> Result<Vec<String>, WireError> {
        match self.map.get(name) {
            None => Ok(Vec::new()),
            Some(v) => {
                serde_json::from_value(v.clone()).map_err(|_| WireError::param(name, "expected an array of strings"))
            }
        }
    }
}

enum Failure {
    Wire(WireError),
    Engine(EngineError),
}

impl From<WireError> for Failure {
    fn from(e: WireError) -> Self {
        Failure::Wire(e)
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure::Engine(e)
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("payload serializes")
}

fn doc_json(doc: &Option<Document>) -> String {
    json(doc)
}

fn run(req: WireRequest, engine: &Engine) -> Result<String, Failure> {
    let p = req.param;
    Ok(match req.cmd {
        Command::Ping => {
            Params::new(p, &[])?;
            "pong".to_string()
        }
        Command::Create => {
            let p = Params::new(p, &["vector", "document", "indices"])?;
            let doc = engine.create(p.vector("vector")?, p.fields("document")?, &p.strings("indices")?)?;
            json(&doc)
        }
        Command::CreateIndex => {
            let p = Params::new(p, &["index", "detailed"])?;
            let name = p.string("index")?;
            let created = engine.create_index(name)?;
            if p.opt_bool("detailed")? {
                json(&serde_json::json!({
                    "index": name,
                    "created": created,
                    "entries": engine.index_entries(name),
                }))
            } else {
                json(&created)
            }
        }
        Command::FindDocByVector => {
            let p = Params::new(p, &["vector"])?;
            doc_json(&engine.find_doc_by_vector(&p.vector("vector")?)?)
        }
        Command::KnnSearch => {
            let p = Params::new(p, &["vector", "metric", "k", "query"])?;
            let (vector, metric, k, query) = (
                p.vector("vector")?,
                p.metric("metric")?,
                p.positive("k")?,
                p.query("query")?,
            );
            let r = engine.knn_search(&vector, metric, k, query.as_ref())?;
            json(&KnnPayload {
                hits: r.hits,
                full_scan: r.full_scan,
            })
        }
        Command::ModDocByVector => {
            let p = Params::new(p, &["vector", "key", "value"])?;
            let doc = engine.mod_doc_by_vector(&p.vector("vector")?, p.string("key")?, p.scalar("value")?)?;
            json(&doc)
        }
        Command::RemoveByVector => {
            let p = Params::new(p, &["vector"])?;
            json(&engine.remove_by_vector(&p.vector("vector")?)?)
        }
        Command::RemoveByQuery => {
            let p = Params::new(p, &["query"])?;
            let query = p.query("query")?.ok_or_else(|| WireError::param("query", "missing"))?;
            json(&engine.remove_by_query(&query)?)
        }
        Command::Save => {
            Params::new(p, &[])?;
            engine.save()?;
            json(&true)
        }
        Command::IndicesList => {
            let p = Params::new(p, &["detailed"])?;
            if p.opt_bool("detailed")? {
                let all: std::collections::BTreeMap<String, _> = engine
                    .indices()
                    .into_iter()
                    .map(|name| {
                        let entries = engine.index_entries(&name);
                        (name, entries)
                    })
                    .collect();
                json(&all)
            } else {
                json(&engine.indices())
            }
        }
    })
}

/// Executes a validated request. Failures become `Exception` responses whose
/// message starts with the error kind (e.g. `VectorExists: ...`).
pub fn dispatch(req: WireRequest, engine: &Engine) -> WireResponse {
    match run(req, engine) {
        Ok(data) => WireResponse::ok(data),
        Err(Failure::Wire(e)) => WireResponse::exception(e.to_string()),
        Err(Failure::Engine(e)) => WireResponse::exception(e.to_string()),
    }
}

/// Decodes, dispatches and encodes one frame.
pub fn handle_frame(frame: &[u8], engine: &Engine) -> Vec<u8> {
    let resp = match decode_request(frame) {
        Ok(req) => dispatch(req, engine),
        Err(e) => WireResponse::exception(e.to_string()),
    };
    encode_response(&resp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    const PRETTY_REQUEST: &str = r#"{
  "db_engine": "dipamkara",
  "opt": "create",
  "cmd": "create_index",
  "param": {
    "index": "my_index",
    "detailed": false
  }
}"#;

    fn params(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    fn call(engine: &Engine, cmd: Command, param: Value) -> WireResponse {
        let frame = encode_request(&WireRequest::new(cmd, params(param)));
        decode_response(&handle_frame(&frame, engine)).unwrap()
    }

    #[test]
    fn decodes_documented_create_index_request() {
        let req = decode_request(PRETTY_REQUEST.as_bytes()).unwrap();
        assert_eq!(req.db_engine, "dipamkara");
        assert_eq!(req.opt, Opt::Create);
        assert_eq!(req.cmd, Command::CreateIndex);
        assert_eq!(
            Value::Object(req.param.clone()),
            json!({"index": "my_index", "detailed": false})
        );
        assert_eq!(
            String::from_utf8(encode_request(&req)).unwrap(),
            "{\"db_engine\": \"dipamkara\", \"opt\": \"create\", \"cmd\": \"create_index\", \"param\": {\"detailed\": false, \"index\": \"my_index\"}}\n"
        );
    }

    #[test]
    fn decode_errors() {
        assert_eq!(decode_request(b"{}"), Err(WireError::MissingField("db_engine".into())));
        assert!(matches!(decode_request(b"not json"), Err(WireError::MalformedJson(_))));
        assert!(matches!(decode_request(b"[1]"), Err(WireError::MalformedJson(_))));
        let base = json!({"db_engine": "dipamkara", "opt": "read", "cmd": "ping", "param": {}});
        let with = |k: &str, v: Value| {
            let mut o = base.clone();
            o[k] = v;
            serde_json::to_vec(&o).unwrap()
        };
        assert_eq!(
            decode_request(&with("db_engine", json!("other"))),
            Err(WireError::UnknownEngine("other".into()))
        );
        assert_eq!(
            decode_request(&with("cmd", json!("drop"))),
            Err(WireError::UnknownCommand("drop".into()))
        );
        assert!(matches!(
            decode_request(&with("opt", json!("upsert"))),
            Err(WireError::InvalidField { .. })
        ));
        assert!(matches!(
            decode_request(&with("param", json!([]))),
            Err(WireError::InvalidField { .. })
        ));
        assert_eq!(
            decode_request(&with("extra", json!(1))),
            Err(WireError::UnexpectedField("extra".into()))
        );
        let mut no_param = base.clone();
        no_param.as_object_mut().unwrap().remove("param");
        assert_eq!(
            decode_request(&serde_json::to_vec(&no_param).unwrap()),
            Err(WireError::MissingField("param".into()))
        );
    }

    #[test]
    fn encodes_documented_responses() {
        assert_eq!(
            encode_response(&WireResponse::ok("true")),
            b"{\"state\": \"OK\", \"message\": \"\", \"data\": \"true\"}\n"
        );
        assert_eq!(
            encode_response(&WireResponse::exception(READ_TIMEOUT_MESSAGE)),
            b"{\"state\": \"Exception\", \"message\": \"Read timeout\", \"data\": null}\n"
        );
        assert_eq!(WireError::ReadTimeout.to_string(), READ_TIMEOUT_MESSAGE);
    }

    #[test]
    fn exception_with_data_is_rejected() {
        let bad = br#"{"state": "Exception", "message": "x", "data": "1"}"#;
        assert!(decode_response(bad).is_err());
        assert!(decode_response(br#"{"state": "Maybe", "message": "", "data": null}"#).is_err());
    }

    #[test]
    fn dispatch_create_index_on_empty_engine() {
        let e = Engine::new();
        let resp = call(
            &e,
            Command::CreateIndex,
            json!({"index": "my_index", "detailed": false}),
        );
        assert_eq!(resp, WireResponse::ok("true"));
        let resp = call(&e, Command::CreateIndex, json!({"index": "my_index", "detailed": true}));
        let v: Value = serde_json::from_str(resp.data.as_deref().unwrap()).unwrap();
        assert_eq!(v, json!({"index": "my_index", "created": true, "entries": {}}));
    }

    #[test]
    fn dispatch_command_table() {
        let e = Engine::new();
        assert_eq!(call(&e, Command::Ping, json!({})).data.as_deref(), Some("pong"));
        let resp = call(
            &e,
            Command::Create,
            json!({"vector": [1.0, 0.0], "document": {"uid": "u1", "n": 2}, "indices": ["uid"]}),
        );
        let doc: Document = serde_json::from_str(resp.data.as_deref().unwrap()).unwrap();
        assert_eq!(doc.id, 0);
        assert_eq!(doc.fields["n"], ScalarValue::Number(2.0));
        call(
            &e,
            Command::Create,
            json!({"vector": [0.0, 1.0], "document": {"uid": "u2"}}),
        );

        let resp = call(&e, Command::FindDocByVector, json!({"vector": [1.0, 0.0]}));
        assert_eq!(
            serde_json::from_str::<Option<Document>>(resp.data.as_deref().unwrap()).unwrap(),
            Some(doc)
        );
        let resp = call(&e, Command::FindDocByVector, json!({"vector": [5.0, 0.0]}));
        assert_eq!(resp.data.as_deref(), Some("null"));

        let resp = call(
            &e,
            Command::KnnSearch,
            json!({"vector": [1.0, 0.1], "metric": "cosine", "k": 2, "query": "uid == \"u2\""}),
        );
        let knn: KnnPayload = serde_json::from_str(resp.data.as_deref().unwrap()).unwrap();
        assert_eq!(knn.hits.len(), 1);
        assert_eq!(knn.hits[0].document.id, 1);
        assert!(!knn.full_scan);
        let resp = call(
            &e,
            Command::KnnSearch,
            json!({"vector": [1.0, 0.1], "metric": "cosine", "k": 2, "query": "zz == 1"}),
        );
        let knn: KnnPayload = serde_json::from_str(resp.data.as_deref().unwrap()).unwrap();
        assert!(knn.full_scan && knn.hits.is_empty());

        let resp = call(
            &e,
            Command::ModDocByVector,
            json!({"vector": [0.0, 1.0], "key": "uid", "value": "u1"}),
        );
        assert!(resp.is_ok());
        assert_eq!(
            call(&e, Command::IndicesList, json!({})).data.as_deref(),
            Some("[\"uid\"]")
        );
        assert_eq!(
            call(&e, Command::RemoveByQuery, json!({"query": "uid == \"u1\""}))
                .data
                .as_deref(),
            Some("2")
        );
        assert_eq!(
            call(&e, Command::RemoveByVector, json!({"vector": [0.0, 1.0]}))
                .data
                .as_deref(),
            Some("false")
        );
    }

    #[test]
    fn dispatch_errors_are_exceptions_with_stable_prefixes() {
        let e = Engine::new();
        call(&e, Command::Create, json!({"vector": [1.0, 0.0]}));
        let cases = [
            (
                Command::KnnSearch,
                json!({"vector": [1.0, 0.0], "metric": "manhattan", "k": 1}),
                "InvalidParam: metric: UnknownMetric: unknown metric",
            ),
            (
                Command::KnnSearch,
                json!({"vector": [1.0, 0.0], "metric": "cosine", "k": 0}),
                "InvalidParam: k:",
            ),
            (
                Command::KnnSearch,
                json!({"vector": [1.0, 0.0], "metric": "cosine", "k": 1, "query": "x =="}),
                "InvalidParam: query: SyntaxError",
            ),
            (
                Command::KnnSearch,
                json!({"vector": [0.0, 0.0], "metric": "cosine", "k": 1}),
                "ZeroVector:",
            ),
            (Command::Create, json!({"vector": [1.0, 0.0]}), "VectorExists:"),
            (Command::Create, json!({"vector": [1.0]}), "DimensionMismatch:"),
            (Command::Create, json!({"vector": []}), "InvalidParam: vector:"),
            (
                Command::Create,
                json!({"vector": [2.0, 0.0], "document": {"a": [1]}}),
                "InvalidParam: document: InvalidFieldValue",
            ),
            (
                Command::Create,
                json!({"vector": [2.0, 0.0], "bogus": 1}),
                "InvalidParam: bogus: unexpected parameter",
            ),
            (
                Command::ModDocByVector,
                json!({"vector": [9.0, 0.0], "key": "a", "value": 1}),
                "VectorNotFound:",
            ),
            (
                Command::ModDocByVector,
                json!({"vector": [1.0, 0.0], "key": "a", "value": null}),
                "InvalidParam: value: InvalidFieldValue",
            ),
            (Command::Save, json!({}), "InvalidArgument:"),
            (Command::RemoveByQuery, json!({}), "InvalidParam: query: missing"),
        ];
        for (cmd, param, prefix) in cases {
            let resp = call(&e, cmd, param.clone());
            assert_eq!(resp.state, ResponseState::Exception, "{cmd} {param}");
            assert!(resp.message.starts_with(prefix), "{cmd} {param}: {}", resp.message);
            assert_eq!(resp.data, None);
        }
        let resp = decode_response(&handle_frame(b"{\"db_engine\": \"x\"", &e)).unwrap();
        assert!(resp.message.starts_with("MalformedJson:"));
    }

    fn request() -> impl Strategy<Value = WireRequest> {
        let scalar = prop_oneof![
            any::<bool>().prop_map(Value::from),
            any::<i32>().prop_map(Value::from),
            prop::num::f64::NORMAL.prop_map(Value::from),
            ".{0,8}".prop_map(Value::from),
        ];
        let value = scalar.prop_recursive(2, 16, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::btree_map("[a-z]{1,4}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        });
        (
            prop::sample::select(Command::ALL.to_vec()),
            prop::sample::select(Opt::ALL.to_vec()),
            prop::collection::btree_map(".{1,6}", value, 0..5),
        )
            .prop_map(|(cmd, opt, param)| WireRequest {
                db_engine: ENGINE_NAME.into(),
                opt,
                cmd,
                param: param.into_iter().collect(),
            })
    }

    fn response() -> impl Strategy<Value = WireResponse> {
        prop_oneof![
            (".*", prop::option::of(".*")).prop_map(|(message, data)| WireResponse {
                state: ResponseState::Ok,
                message,
                data
            }),
            ".*".prop_map(WireResponse::exception),
        ]
    }

    proptest! {
        #[test]
        fn request_round_trip(req in request()) {
            let bytes = encode_request(&req);
            prop_assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
            prop_assert_eq!(decode_request(&bytes).unwrap(), req);
        }

        #[test]
        fn response_round_trip(resp in response()) {
            let bytes = encode_response(&resp);
            prop_assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
            prop_assert_eq!(decode_response(&bytes).unwrap(), resp);
        }

        #[test]
        fn decode_is_total(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
            let _ = decode_request(&bytes);
            let _ = decode_response(&bytes);
        }
    }
}
