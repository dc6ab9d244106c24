use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use bhakti_client::{request, ClientConn, ClientError, HttpEmbedder};
use bhakti_core::dsl::{self, Fields, ScalarValue};
use bhakti_core::memory::{self, Embedder, MemoryError, StepClock, ToyEmbedder, Weights};
use bhakti_core::wire::{encode_request, KnnPayload};
use bhakti_core::{bench, Engine, Metric, Vector};
use bhakti_server::{RunningServer, Server, ServerConfig};
use proptest::prelude::*;

fn golden(name: &str) -> Vec<u8> {
    std::fs::read(
        PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../docs/golden")
            .join(name),
    )
    .unwrap()
}

fn server() -> RunningServer {
    Server::bind(ServerConfig {
        port: 0,
        flush_interval: None,
        ..ServerConfig::default()
    })
    .unwrap()
    .spawn()
}

fn connect(s: &RunningServer) -> ClientConn {
    ClientConn::connect(&s.addr().to_string()).unwrap()
}

fn v(x: &[f64]) -> Vector {
    Vector::new(x.to_vec()).unwrap()
}

fn fields(pairs: &[(&str, ScalarValue)]) -> Fields {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn request_bytes_match_golden_file() {
    assert_eq!(
        encode_request(&request::create_index("my_index", false)),
        golden("create_index_request.json")
    );
    assert_eq!(
        String::from_utf8(encode_request(&request::knn_search(&v(&[1.0, 0.5]), Metric::Cosine, 3, None))).unwrap(),
        "{\"db_engine\": \"dipamkara\", \"opt\": \"read\", \"cmd\": \"knn_search\", \"param\": {\"k\": 3, \"metric\": \"cosine\", \"vector\": [1.0, 0.5]}}\n"
    );
}

#[test]
fn typed_wrappers_against_live_server() {
    let s = server();
    let c = connect(&s);
    c.ping().unwrap();
    assert!(c.create_index("my_index").unwrap());
    let doc = c
        .create_doc(
            &v(&[1.0, 0.0, 0.0]),
            &fields(&[("uid", "u1".into()), ("n", 3.0.into())]),
            &["uid"],
        )
        .unwrap();
    assert_eq!(doc.id, 0);
    for (i, x) in [[0.9, 0.1, 0.0], [0.0, 1.0, 0.0], [0.5, 0.5, 0.5], [0.0, 0.0, 1.0]]
        .iter()
        .enumerate()
    {
        c.create_doc(&v(x), &fields(&[("uid", format!("u{}", i % 2).into())]), &[])
            .unwrap();
    }
    assert_eq!(c.get_by_vector(&v(&[1.0, 0.0, 0.0])).unwrap(), Some(doc.clone()));
    assert_eq!(c.get_by_vector(&v(&[7.0, 0.0, 0.0])).unwrap(), None);

    let knn = c.knn(&v(&[1.0, 0.05, 0.0]), Metric::Cosine, 3, None).unwrap();
    assert_eq!(knn.hits.len(), 3);
    assert!(knn.hits.windows(2).all(|w| w[0].distance <= w[1].distance));
    assert_eq!(knn.hits[0].document, doc);
    let direct = s
        .engine()
        .knn_search(&v(&[1.0, 0.05, 0.0]), Metric::Cosine, 3, None)
        .unwrap();
    assert_eq!(knn.hits, direct.hits);

    let filtered = c
        .knn_named(&v(&[1.0, 0.0, 0.0]), "euclidean", 10, Some("uid == \"u1\""))
        .unwrap();
    assert!(filtered.hits.iter().all(|h| h.document.fields["uid"] == "u1".into()));
    assert!(!filtered.full_scan);
    assert!(
        c.knn(&v(&[1.0, 0.0, 0.0]), Metric::Cosine, 10, Some("n > 1"))
            .unwrap()
            .full_scan
    );

    let modded = c.mod_field(&v(&[1.0, 0.0, 0.0]), "n", 4.0.into()).unwrap();
    assert_eq!(modded.fields["n"], 4.0.into());
    assert_eq!(c.indices().unwrap(), ["my_index", "uid"]);
    assert_eq!(c.indices_detailed().unwrap()["uid"].len(), 5);
    assert!(c.remove_by_vector(&v(&[0.0, 0.0, 1.0])).unwrap());
    assert!(!c.remove_by_vector(&v(&[0.0, 0.0, 1.0])).unwrap());
    assert_eq!(c.remove_by_query("uid == \"u0\"").unwrap(), 2);
    assert_eq!(s.engine().len(), 2);

    let err = c.create_doc(&v(&[1.0, 0.0, 0.0]), &Fields::new(), &[]).unwrap_err();
    assert_eq!(err.server_kind(), Some("VectorExists"));
    let err = c.save().unwrap_err();
    assert_eq!(err.server_kind(), Some("InvalidArgument"));
    // Server exceptions leave the connection usable.
    c.ping().unwrap();
    let detailed = c.create_index_detailed("uid").unwrap();
    assert_eq!(detailed["created"], true);
}

#[test]
fn validation_happens_before_any_traffic() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let c = ClientConn::connect(&listener.local_addr().unwrap().to_string()).unwrap();
    let q = v(&[1.0]);
    assert!(matches!(
        c.knn(&q, Metric::Cosine, 0, None),
        Err(ClientError::Validation(_))
    ));
    assert!(matches!(
        c.knn_named(&q, "manhattan", 1, None),
        Err(ClientError::Validation(_))
    ));
    assert!(matches!(
        c.knn(&q, Metric::Cosine, 1, Some("a ==")),
        Err(ClientError::Validation(_))
    ));
    assert!(matches!(c.remove_by_query("(("), Err(ClientError::Validation(_))));
    assert!(matches!(c.create_index(""), Err(ClientError::Validation(_))));
    assert!(matches!(
        c.mod_field(&q, "x", ScalarValue::Number(f64::NAN)),
        Err(ClientError::Validation(_))
    ));
    let (mut sock, _) = listener.accept().unwrap();
    sock.set_nonblocking(true).unwrap();
    let mut buf = [0u8; 16];
    assert!(matches!(sock.read(&mut buf), Err(e) if e.kind() == std::io::ErrorKind::WouldBlock));
}

#[test]
fn server_dying_mid_call_is_connection_lost() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let t = thread::spawn(move || {
        let (sock, _) = listener.accept().unwrap();
        let mut line = String::new();
        BufReader::new(&sock).read_line(&mut line).unwrap();
        drop(sock);
    });
    let c = ClientConn::connect(&addr.to_string()).unwrap();
    assert!(matches!(c.ping(), Err(ClientError::ConnectionLost(_))));
    assert!(c.is_closed());
    assert!(matches!(c.ping(), Err(ClientError::ConnectionLost(_))));
    t.join().unwrap();
}

#[test]
fn silent_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let t = thread::spawn(move || {
        let (sock, _) = listener.accept().unwrap();
        thread::sleep(Duration::from_millis(600));
        drop(sock);
    });
    let c = ClientConn::connect_with(&addr.to_string(), Some(Duration::from_millis(150))).unwrap();
    assert!(matches!(c.ping(), Err(ClientError::Timeout(_))));
    t.join().unwrap();
}

#[test]
fn garbage_response_is_protocol_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let t = thread::spawn(move || {
        let (mut sock, _) = listener.accept().unwrap();
        let mut line = String::new();
        BufReader::new(&sock).read_line(&mut line).unwrap();
        sock.write_all(b"hello\n").unwrap();
    });
    let c = ClientConn::connect(&addr.to_string()).unwrap();
    assert!(matches!(c.ping(), Err(ClientError::Protocol(_))));
    t.join().unwrap();
}

#[test]
fn memory_layer_over_the_wire() {
    let s = server();
    let c = connect(&s);
    let emb = ToyEmbedder::new(16).unwrap();
    let clock = StepClock::new(1_700_000_000_000_000, 1000);
    for i in 0..6 {
        memory::memorize_conversation(
            &format!("q{i}"),
            &format!("a{i}"),
            "u",
            if i < 3 { "b1" } else { "b2" },
            Weights::new(1.0, 0.0).unwrap(),
            &emb,
            &c,
            &clock,
        )
        .unwrap();
    }
    let dup = memory::memorize_conversation("q0", "a0", "u", "b1", Weights::new(1.0, 0.0).unwrap(), &emb, &c, &clock);
    assert!(matches!(dup, Err(MemoryError::DuplicateMemory(_))), "{dup:?}");
    let remote = memory::recall_memories_templated("q1", 5, Metric::Cosine, "u", "b1", None, &emb, &c).unwrap();
    let local =
        memory::recall_memories_templated("q1", 5, Metric::Cosine, "u", "b1", None, &emb, s.engine().as_ref()).unwrap();
    assert_eq!(remote, local);
    assert_eq!(remote.len(), 3);
    assert_eq!(memory::parse_template(&remote[0]).unwrap().query, "q1");
}

#[test]
fn bench_runs_against_remote_target() {
    let s = server();
    let mut c = connect(&s);
    let cfg = bench::BenchConfig {
        sizes: vec![1, 20, 60],
        dim: 8,
        k: 5,
        repeats: 40,
        warmup: 1,
        scan_filter: true,
        ..bench::BenchConfig::default()
    };
    let remote = bench::run_bench(&cfg, &mut c).unwrap();
    let local = bench::run_bench(&cfg, &mut Engine::new()).unwrap();
    assert_eq!(remote.result_digest, local.result_digest);
    assert!(remote.verified_queries >= 3);
    assert!(remote.target.starts_with("remote:"));
}

fn stub_embedding_server(dim: usize) -> (String, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/embed", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        for sock in listener.incoming().take(3) {
            let mut sock = sock.unwrap();
            let mut reader = BufReader::new(sock.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let text = req["text"].as_str().unwrap();
            let vector: Vec<f64> = (0..dim).map(|i| (text.len() + i) as f64).collect();
            let out = serde_json::json!({ "vector": vector }).to_string();
            write!(sock, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}", out.len()).unwrap();
        }
    });
    (url, handle)
}

#[test]
fn http_embedder_talks_to_endpoint() {
    let (url, handle) = stub_embedding_server(3);
    let e = HttpEmbedder::new(&url, Duration::from_secs(5)).unwrap();
    assert_eq!(e.dim(), 3);
    assert_eq!(e.embed("ab").unwrap(), v(&[2.0, 3.0, 4.0]));
    assert_eq!(e.embed("").unwrap(), v(&[0.0, 1.0, 2.0]));
    handle.join().unwrap();
    assert!(matches!(e.embed("x"), Err(MemoryError::Embedding(_))));
}

#[derive(Debug, Clone)]
enum Op {
    Create(Vec<f64>, u8),
    Index(u8),
    Mod(Vec<f64>, u8),
    Remove(Vec<f64>),
    RemoveQuery(u8),
    Knn(Vec<f64>, usize, Option<u8>),
    Find(Vec<f64>),
}

fn small_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-3i8..=3).prop_map(f64::from), 3)
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (small_vec(), 0u8..4).prop_map(|(v, g)| Op::Create(v, g)),
        1 => (0u8..3).prop_map(Op::Index),
        1 => (small_vec(), 0u8..4).prop_map(|(v, g)| Op::Mod(v, g)),
        1 => small_vec().prop_map(Op::Remove),
        1 => (0u8..4).prop_map(Op::RemoveQuery),
        2 => (small_vec(), 1usize..6, prop::option::of(0u8..4)).prop_map(|(v, k, f)| Op::Knn(v, k, f)),
        1 => small_vec().prop_map(Op::Find),
    ]
}

fn outcome<T: std::fmt::Debug, E: std::fmt::Display>(r: Result<T, E>) -> String {
    match r {
        Ok(v) => format!("ok {v:?}"),
        Err(e) => {
            let s = e.to_string();
            format!("err {}", s.split(':').next().unwrap())
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    /// Going through client, wire and server gives the same observable
    /// results as calling the engine directly.
    #[test]
    fn client_matches_direct_engine(ops in prop::collection::vec(op(), 1..40)) {
        let s = server();
        let c = connect(&s);
        let e = Arc::new(Engine::new());
        let field = |g: u8| format!("f{}", g % 3);
        for op in &ops {
            let (remote, local) = match op {
                Op::Create(x, g) => {
                    let Ok(x) = Vector::new(x.clone()) else { continue };
                    let f = fields(&[("g", f64::from(*g).into())]);
                    (outcome(c.create_doc(&x, &f, &["g"])), outcome(e.create(x, f, &["g".to_string()])))
                }
                Op::Index(g) => (outcome(c.create_index(&field(*g))), outcome(e.create_index(&field(*g)))),
                Op::Mod(x, g) => {
                    let x = Vector::new(x.clone()).unwrap();
                    (outcome(c.mod_field(&x, &field(*g), (*g != 0).into())), outcome(e.mod_doc_by_vector(&x, &field(*g), (*g != 0).into())))
                }
                Op::Remove(x) => {
                    let x = Vector::new(x.clone()).unwrap();
                    (outcome(c.remove_by_vector(&x)), outcome(e.remove_by_vector(&x)))
                }
                Op::RemoveQuery(g) => {
                    let q = format!("g == {g}");
                    (outcome(c.remove_by_query(&q)), outcome(e.remove_by_query(&dsl::parse(&q).unwrap())))
                }
                Op::Knn(x, k, f) => {
                    let x = Vector::new(x.clone()).unwrap();
                    let q = f.map(|g| format!("g >= {g} || f0 == true"));
                    let expr = q.as_deref().map(|q| dsl::parse(q).unwrap());
                    let r = c.knn(&x, Metric::Euclidean, *k, q.as_deref());
                    let l = e.knn_search(&x, Metric::Euclidean, *k, expr.as_ref()).map(|r| KnnPayload { hits: r.hits, full_scan: r.full_scan });
                    (outcome(r), outcome(l))
                }
                Op::Find(x) => {
                    let x = Vector::new(x.clone()).unwrap();
                    (outcome(c.get_by_vector(&x)), outcome(e.find_doc_by_vector(&x)))
                }
            };
            prop_assert_eq!(remote, local, "{:?}", op);
        }
        prop_assert_eq!(s.engine().documents().unwrap(), e.documents().unwrap());
        prop_assert_eq!(c.indices().unwrap(), e.indices());
    }
}
