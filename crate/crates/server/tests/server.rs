use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bhakti_core::pipeline::Context;
use bhakti_core::wire::{decode_response, ResponseState};
use bhakti_core::Engine;
use bhakti_server::stages::{self, Connection};
use bhakti_server::{read_ops_log, RunningServer, Server, ServerConfig};

fn golden(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs/golden")
        .join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn config() -> ServerConfig {
    ServerConfig {
        port: 0,
        flush_interval: None,
        ..ServerConfig::default()
    }
}

fn start(config: ServerConfig) -> RunningServer {
    Server::bind(config).unwrap().spawn()
}

struct Peer {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Peer {
    fn connect(server: &RunningServer) -> Peer {
        let s = TcpStream::connect(server.addr()).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        Peer {
            writer: s.try_clone().unwrap(),
            reader: BufReader::new(s),
        }
    }

    fn send_raw(&mut self, bytes: &[u8]) {
        self.writer.write_all(bytes).unwrap();
    }

    fn line(&mut self) -> String {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        line
    }

    fn call(&mut self, request: &str) -> String {
        self.send_raw(request.as_bytes());
        self.send_raw(b"\n");
        self.line()
    }

    fn at_eof(&mut self) -> bool {
        let mut buf = [0u8; 1];
        matches!(self.reader.read(&mut buf), Ok(0))
    }
}

const PING: &str = r#"{"db_engine": "dipamkara", "opt": "admin", "cmd": "ping", "param": {}}"#;

#[derive(Clone, Default)]
struct SharedSink(Arc<Mutex<Vec<u8>>>);

impl Write for SharedSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[test]
fn pipeline_turns_golden_request_into_golden_response() {
    let engine = Arc::new(Engine::new());
    let pipeline = stages::request_pipeline(engine.clone(), Duration::from_secs(1), Arc::new(AtomicBool::new(false)));
    assert_eq!(
        pipeline.stage_names(),
        [
            "read_frame",
            "parse_request",
            "dispatch_engine",
            "render_response",
            "write_frame"
        ]
    );
    let sink = SharedSink::default();
    let conn = Connection::new(
        Box::new(Cursor::new(golden("create_index_request.json"))),
        Box::new(sink.clone()),
    );
    let mut seen = Vec::new();
    stages::serve_connection(&pipeline, conn, |ctx: &Context| {
        seen.push((
            ctx.get::<&str>(stages::CMD).copied(),
            ctx.get::<&str>(stages::STATE).copied(),
        ));
    });
    assert_eq!(*sink.0.lock().unwrap(), golden("ok_true_response.json"));
    assert_eq!(seen, [(Some("create_index"), Some("OK"))]);
    assert_eq!(engine.indices(), ["my_index"]);
}

#[test]
fn live_server_answers_golden_request_byte_for_byte() {
    let server = start(config());
    let mut peer = Peer::connect(&server);
    peer.send_raw(&golden("create_index_request.json"));
    assert_eq!(peer.line().as_bytes(), golden("ok_true_response.json"));
    // Key order on input is free.
    let reordered = r#"{"param": {"index": "my_index", "detailed": false}, "cmd": "create_index", "opt": "create", "db_engine": "dipamkara"}"#;
    assert_eq!(peer.call(reordered).as_bytes(), golden("ok_true_response.json"));
    server.stop().unwrap();
}

#[test]
fn stalled_request_gets_read_timeout_and_is_closed() {
    let server = start(ServerConfig {
        read_timeout: Duration::from_millis(300),
        ..config()
    });
    let mut peer = Peer::connect(&server);
    peer.send_raw(br#"{"db_engine": "dipa"#);
    let started = Instant::now();
    assert_eq!(peer.line().as_bytes(), golden("read_timeout_response.json"));
    assert!(started.elapsed() >= Duration::from_millis(200));
    assert!(peer.at_eof());
    server.stop().unwrap();
}

#[test]
fn idle_connection_is_closed_silently() {
    let server = start(ServerConfig {
        read_timeout: Duration::from_millis(200),
        ..config()
    });
    let mut peer = Peer::connect(&server);
    assert!(peer.call(PING).contains("pong"));
    assert!(peer.at_eof());
    server.stop().unwrap();
}

#[test]
fn bad_frames_get_exceptions_and_connection_survives() {
    let server = start(config());
    let mut peer = Peer::connect(&server);
    for (frame, prefix) in [
        ("not json", "MalformedJson:"),
        ("{}", "MissingField: db_engine"),
        (
            r#"{"db_engine": "other", "opt": "read", "cmd": "ping", "param": {}}"#,
            "UnknownEngine:",
        ),
        (
            r#"{"db_engine": "dipamkara", "opt": "read", "cmd": "drop", "param": {}}"#,
            "UnknownCommand:",
        ),
    ] {
        let resp = decode_response(peer.call(frame).as_bytes()).unwrap();
        assert_eq!(resp.state, ResponseState::Exception);
        assert!(resp.message.starts_with(prefix), "{frame}: {}", resp.message);
    }
    // Blank lines are not requests.
    peer.send_raw(b"\n\r\n");
    assert!(peer.call(PING).contains("\"pong\""));
    server.stop().unwrap();
}

#[test]
fn oversized_frame_is_rejected() {
    let server = start(config());
    let mut peer = Peer::connect(&server);
    let chunk = vec![b' '; 1 << 20];
    let mut writer = peer.writer.try_clone().unwrap();
    let t = std::thread::spawn(move || {
        for _ in 0..17 {
            if writer.write_all(&chunk).is_err() {
                break;
            }
        }
    });
    let resp = decode_response(peer.line().as_bytes()).unwrap();
    assert!(resp.message.starts_with("FrameTooLarge:"), "{}", resp.message);
    t.join().unwrap();
    server.stop().unwrap();
}

#[test]
fn connection_limit_is_enforced() {
    let server = start(ServerConfig {
        max_connections: 1,
        ..config()
    });
    let mut first = Peer::connect(&server);
    assert!(first.call(PING).contains("pong"));
    let mut second = Peer::connect(&server);
    let resp = decode_response(second.line().as_bytes()).unwrap();
    assert!(resp.message.starts_with("TooManyConnections:"));
    assert!(second.at_eof());
    drop(first);
    server.stop().unwrap();
}

#[test]
fn shutdown_saves_and_restart_restores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServerConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..config()
    };
    let server = start(cfg.clone());
    let mut peer = Peer::connect(&server);
    let create = r#"{"db_engine": "dipamkara", "opt": "create", "cmd": "create", "param": {"document": {"uid": "a"}, "indices": ["uid"], "vector": [1.0, 2.0]}}"#;
    assert!(peer.call(create).starts_with(r#"{"state": "OK""#));
    drop(peer);
    server.stop().unwrap();
    for f in ["documents.jsonl", "indices.json", "meta.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let server = start(cfg);
    let mut peer = Peer::connect(&server);
    let find =
        r#"{"db_engine": "dipamkara", "opt": "read", "cmd": "find_doc_by_vector", "param": {"vector": [1.0, 2.0]}}"#;
    let resp = decode_response(peer.call(find).as_bytes()).unwrap();
    assert_eq!(
        resp.data.as_deref(),
        Some(r#"{"id":0,"vector":[1.0,2.0],"fields":{"uid":"a"}}"#)
    );
    assert_eq!(server.engine().indices(), ["uid"]);
    server.stop().unwrap();
}

#[test]
fn ops_log_replays_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ops.jsonl");
    let server = start(ServerConfig {
        ops_log: Some(log.clone()),
        ..config()
    });
    let mut peer = Peer::connect(&server);
    for i in 0..10 {
        let req = format!(
            r#"{{"db_engine": "dipamkara", "opt": "create", "cmd": "create", "param": {{"document": {{"n": {i}}}, "indices": ["n"], "vector": [{i}.5, 1.0]}}}}"#
        );
        assert!(peer.call(&req).contains("\"OK\""));
    }
    let rmq = r#"{"db_engine": "dipamkara", "opt": "delete", "cmd": "remove_by_query", "param": {"query": "n < 3"}}"#;
    assert!(peer.call(rmq).contains(r#""data": "3""#));
    let engine = server.engine().clone();
    server.stop().unwrap();

    let commits = read_ops_log(&log).unwrap();
    assert_eq!(commits.len(), 11);
    assert!(commits.windows(2).all(|w| w[0].seq < w[1].seq));
    let replayed = Engine::new();
    for c in &commits {
        replayed.apply(&c.mutation).unwrap();
    }
    assert_eq!(replayed.documents().unwrap(), engine.documents().unwrap());
    assert_eq!(replayed.indices(), engine.indices());
}

#[test]
fn invalid_config_is_rejected() {
    assert!(Server::bind(ServerConfig {
        max_connections: 0,
        ..config()
    })
    .is_err());
    assert!(Server::bind(ServerConfig {
        cached: false,
        ..config()
    })
    .is_err());
    let taken = Server::bind(config()).unwrap();
    let err = Server::bind(ServerConfig {
        port: taken.local_addr().port(),
        ..config()
    })
    .err()
    .unwrap();
    assert!(err.to_string().starts_with("BindError:"));
}
