//! Client for a Bhakti server.
//!
//! ```no_run
//! use bhakti_client::ClientConn;
//! use bhakti_core::{Metric, Vector};
//!
//! let conn = ClientConn::connect("127.0.0.1:7878").unwrap();
//! conn.create_index("uid").unwrap();
//! let q = Vector::new(vec![0.1, 0.2, 0.3]).unwrap();
//! for hit in conn.knn(&q, Metric::Cosine, 3, Some("uid == \"u1\"")).unwrap().hits {
//!     println!("{} {}", hit.document.id, hit.distance);
//! }
//! ```
//!
//! A [`ClientConn`] carries one request at a time; concurrent callers on the
//! same connection queue behind each other. Use one connection per thread for
//! parallelism.

mod adapters;
mod embed;
pub mod request;

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use bhakti_core::dsl::{self, Fields, ScalarValue};
use bhakti_core::engine::{DocId, Document};
use bhakti_core::wire::{self, KnnPayload, WireRequest, WireResponse, MAX_FRAME_BYTES};
use bhakti_core::{Metric, Vector};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use thiserror::Error;

pub use embed::{HttpEmbedder, ENV_EMBED_URL};

pub const DEFAULT_READ_TIMEOUT: Duration = Duration::from_secs(30);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("ConnectError: cannot connect to {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("ConnectionLost: {0}")]
    ConnectionLost(String),
    #[error("Timeout: no response within {0:?}")]
    Timeout(Duration),
    #[error("ProtocolError: {0}")]
    Protocol(String),
    /// The server answered with an `Exception`.
    #[error("{message}")]
    Server { kind: String, message: String },
    #[error("ValidationError: {0}")]
    Validation(String),
}

impl ClientError {
    fn server(message: String) -> Self {
        let kind = match message.split_once(": ") {
            Some((k, _)) if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric()) => k.to_string(),
            _ => message.clone(),
        };
        ClientError::Server { kind, message }
    }

    /// Error kind reported by the server, if this is a server exception.
    pub fn server_kind(&self) -> Option<&str> {
        match self {
            ClientError::Server { kind, .. } => Some(kind),
            _ => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

struct Stream {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

pub struct ClientConn {
    addr: String,
    read_timeout: Option<Duration>,
    stream: Mutex<Option<Stream>>,
}

impl std::fmt::Debug for ClientConn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientConn")
            .field("addr", &self.addr)
            .field("read_timeout", &self.read_timeout)
            .field("closed", &self.is_closed())
            .finish()
    }
}

impl ClientConn {
    pub fn connect(addr: &str) -> Result<Self> {
        Self::connect_with(addr, Some(DEFAULT_READ_TIMEOUT))
    }

    /// `read_timeout` bounds the wait for each response; `None` waits forever.
    pub fn connect_with(addr: &str, read_timeout: Option<Duration>) -> Result<Self> {
        let connect_err = |source| ClientError::Connect {
            addr: addr.to_string(),
            source,
        };
        let mut last = io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing");
        let mut stream = None;
        for sa in addr.to_socket_addrs().map_err(connect_err)? {
            match TcpStream::connect_timeout(&sa, CONNECT_TIMEOUT) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e,
            }
        }
        let stream = stream.ok_or_else(|| connect_err(last))?;
        stream.set_nodelay(true).map_err(connect_err)?;
        stream.set_read_timeout(read_timeout).map_err(connect_err)?;
        let writer = stream.try_clone().map_err(connect_err)?;
        Ok(ClientConn {
            addr: addr.to_string(),
            read_timeout,
            stream: Mutex::new(Some(Stream {
                reader: BufReader::new(stream),
                writer,
            })),
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn is_closed(&self) -> bool {
        self.stream.lock().is_none()
    }

    pub fn close(&self) {
        if let Some(s) = self.stream.lock().take() {
            let _ = s.writer.shutdown(std::net::Shutdown::Both);
        }
    }

    /// Sends one request and returns the decoded response, `Exception`s
    /// included. Transport failures close the connection.
    pub fn call_raw(&self, req: &WireRequest) -> Result<WireResponse> {
        let mut guard = self.stream.lock();
        let stream = guard
            .as_mut()
            .ok_or_else(|| ClientError::ConnectionLost("connection is closed".into()))?;
        let result = exchange(stream, &wire::encode_request(req), self.read_timeout);
        if result.is_err() {
            *guard = None;
        }
        result
    }

    /// Like [`call_raw`](Self::call_raw) but turns `Exception` responses into
    /// [`ClientError::Server`] and returns the payload string.
    pub fn call(&self, req: &WireRequest) -> Result<String> {
        let resp = self.call_raw(req)?;
        if !resp.is_ok() {
            return Err(ClientError::server(resp.message));
        }
        resp.data
            .ok_or_else(|| ClientError::Protocol("OK response without data".into()))
    }

    fn call_json<T: DeserializeOwned>(&self, req: &WireRequest) -> Result<T> {
        let data = self.call(req)?;
        serde_json::from_str(&data).map_err(|e| ClientError::Protocol(format!("unexpected payload {data:?}: {e}")))
    }

    pub fn ping(&self) -> Result<()> {
        match self.call(&request::ping())?.as_str() {
            "pong" => Ok(()),
            other => Err(ClientError::Protocol(format!("unexpected ping payload {other:?}"))),
        }
    }

    pub fn create_doc(&self, vector: &Vector, fields: &Fields, indices: &[&str]) -> Result<Document> {
        let indices: Vec<String> = indices.iter().map(|s| s.to_string()).collect();
        if indices.iter().any(String::is_empty) {
            return Err(ClientError::Validation("index names must not be empty".into()));
        }
        self.call_json(&request::create(vector, fields, &indices))
    }

    pub fn create_index(&self, name: &str) -> Result<bool> {
        if name.is_empty() {
            return Err(ClientError::Validation("index name must not be empty".into()));
        }
        self.call_json(&request::create_index(name, false))
    }

    /// `create_index` with `detailed: true`: the index name, whether it was
    /// created, and its vector-key → id entries.
    pub fn create_index_detailed(&self, name: &str) -> Result<serde_json::Value> {
        if name.is_empty() {
            return Err(ClientError::Validation("index name must not be empty".into()));
        }
        self.call_json(&request::create_index(name, true))
    }

    /// `filter` is validated locally before anything is sent.
    pub fn knn(&self, query: &Vector, metric: Metric, k: usize, filter: Option<&str>) -> Result<KnnPayload> {
        if k == 0 {
            return Err(ClientError::Validation("k must be at least 1".into()));
        }
        let filter = filter
            .map(|f| dsl::parse(f).map_err(|e| ClientError::Validation(e.to_string())))
            .transpose()?;
        self.call_json(&request::knn_search(query, metric, k, filter.as_ref()))
    }

    /// [`knn`](Self::knn) with the metric given by its wire name.
    pub fn knn_named(&self, query: &Vector, metric: &str, k: usize, filter: Option<&str>) -> Result<KnnPayload> {
        let metric = metric
            .parse()
            .map_err(|e: bhakti_core::MetricError| ClientError::Validation(e.to_string()))?;
        self.knn(query, metric, k, filter)
    }

    pub fn get_by_vector(&self, vector: &Vector) -> Result<Option<Document>> {
        self.call_json(&request::find_doc_by_vector(vector))
    }

    pub fn mod_field(&self, vector: &Vector, key: &str, value: ScalarValue) -> Result<Document> {
        if !value.is_valid() {
            return Err(ClientError::Validation("field values must be finite".into()));
        }
        self.call_json(&request::mod_doc_by_vector(vector, key, value))
    }

    pub fn remove_by_vector(&self, vector: &Vector) -> Result<bool> {
        self.call_json(&request::remove_by_vector(vector))
    }

    pub fn remove_by_query(&self, filter: &str) -> Result<usize> {
        let expr = dsl::parse(filter).map_err(|e| ClientError::Validation(e.to_string()))?;
        self.call_json(&request::remove_by_query(&expr))
    }

    pub fn save(&self) -> Result<()> {
        self.call_json::<bool>(&request::save()).map(drop)
    }

    pub fn indices(&self) -> Result<Vec<String>> {
        self.call_json(&request::indices_list(false))
    }

    /// Every index with its vector-key → id entries.
    pub fn indices_detailed(
        &self,
    ) -> Result<std::collections::BTreeMap<String, std::collections::BTreeMap<String, DocId>>> {
        self.call_json(&request::indices_list(true))
    }
}

fn exchange(stream: &mut Stream, frame: &[u8], timeout: Option<Duration>) -> Result<WireResponse> {
    stream
        .writer
        .write_all(frame)
        .and_then(|_| stream.writer.flush())
        .map_err(|e| ClientError::ConnectionLost(format!("sending request: {e}")))?;
    let mut line = Vec::new();
    loop {
        let (used, done) = match stream.reader.fill_buf() {
            Ok([]) => return Err(ClientError::ConnectionLost("server closed the connection".into())),
            Ok(buf) => match buf.iter().position(|&b| b == b'\n') {
                Some(i) => {
                    line.extend_from_slice(&buf[..=i]);
                    (i + 1, true)
                }
                None => {
                    line.extend_from_slice(buf);
                    (buf.len(), false)
                }
            },
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(ClientError::Timeout(timeout.unwrap_or_default()))
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(ClientError::ConnectionLost(format!("reading response: {e}"))),
        };
        stream.reader.consume(used);
        if done {
            break;
        }
        if line.len() > MAX_FRAME_BYTES {
            return Err(ClientError::Protocol("response frame too large".into()));
        }
    }
    wire::decode_response(&line).map_err(|e| ClientError::Protocol(e.to_string()))
}
