use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_bhakti");

struct ServerProcess {
    child: Child,
    addr: String,
}

impl ServerProcess {
    fn start(data_dir: &Path) -> ServerProcess {
        let mut child = Command::new(BIN)
            .args(["serve", "--port", "0", "--flush-interval", "0", "--data-dir"])
            .arg(data_dir)
            .env_remove("BHAKTI_PORT")
            .env_remove("BHAKTI_HOST")
            .env_remove("BHAKTI_DATA_DIR")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("{line:?}"))
            .to_string();
        ServerProcess { child, addr }
    }

    fn cli(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .arg("--addr")
            .arg(&self.addr)
            .args(args)
            .env_remove("BHAKTI_EMBED_URL")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cli(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn client_commands_round_trip_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let s = ServerProcess::start(&dir.path().join("data"));
    assert_eq!(s.ok(&["ping"]), "pong\n");
    assert_eq!(s.ok(&["index", "my_index"]), "index \"my_index\" ready\n");

    let created = s.ok(&[
        "--json",
        "create",
        "[1, 0, 0]",
        "-f",
        "uid=u1",
        "-f",
        "n=3",
        "-i",
        "uid",
    ]);
    assert_eq!(
        created.trim(),
        r#"{"id":0,"vector":[1.0,0.0,0.0],"fields":{"n":3.0,"uid":"u1"}}"#
    );
    let vec_file = dir.path().join("v.json");
    std::fs::write(&vec_file, "[0, 1, 0]\n").unwrap();
    let at = format!("@{}", vec_file.display());
    s.ok(&["create", &at, "--doc", r#"{"uid": "u2", "ok": true}"#]);

    let knn = s.ok(&["--json", "knn", "[1, 0.1, 0]", "-k", "2", "-m", "euclidean"]);
    let v: serde_json::Value = serde_json::from_str(&knn).unwrap();
    assert_eq!(v["hits"][0]["id"], 0);
    assert_eq!(v["hits"][1]["id"], 1);
    let table = s.ok(&["knn", "[1, 0.1, 0]", "-f", "uid == \"u2\""]);
    assert!(table.lines().next().unwrap().contains("distance"));
    assert_eq!(table.lines().count(), 2);

    assert!(s.ok(&["get", &at]).contains("\"u2\""));
    assert!(s.ok(&["--json", "mod", &at, "uid", "u3"]).contains(r#""uid":"u3""#));
    assert_eq!(s.ok(&["--json", "indices"]).trim(), r#"["my_index","uid"]"#);
    assert_eq!(s.ok(&["rmq", "uid == \"u3\""]), "removed 1 document(s)\n");
    assert_eq!(s.ok(&["rm", "[1, 0, 0]"]), "removed\n");
    assert_eq!(s.ok(&["save"]), "saved\n");

    let bad = s.cli(&["knn", "[1, 0, 0]", "-m", "manhattan"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown metric"));
    let bad = s.cli(&["create", "[1, 2]"]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("DimensionMismatch"));
}

#[test]
fn memory_and_bench_commands() {
    let dir = tempfile::tempdir().unwrap();
    let s = ServerProcess::start(&dir.path().join("data"));
    s.ok(&[
        "mem",
        "add",
        "--uid",
        "u",
        "--bid",
        "b",
        "--wq",
        "1",
        "--wa",
        "0",
        "what is rust?",
        "a language",
    ]);
    s.ok(&["mem", "add", "--uid", "u", "--bid", "b", "where is paris?", "in france"]);
    s.ok(&[
        "mem",
        "add",
        "--uid",
        "other",
        "--bid",
        "b",
        "what is rust?",
        "iron oxide",
    ]);
    let recalled = s.ok(&["mem", "recall", "--uid", "u", "--bid", "b", "-k", "5", "what is rust?"]);
    let lines: Vec<&str> = recalled.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].ends_with("] Q: what is rust? | A: a language"), "{lines:?}");

    drop(s);

    let s = ServerProcess::start(&dir.path().join("bench-data"));
    let csv = dir.path().join("latency.csv");
    let out = s.ok(&[
        "bench",
        "--sizes",
        "1,40,80",
        "--dim",
        "8",
        "-k",
        "3",
        "--repeats",
        "5",
        "--scan-filter",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.contains("wrote"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("# target=remote:"));
    assert_eq!(text.lines().nth(1), Some("size,mode,mean_ms,p50_ms,p95_ms"));
    assert_eq!(text.lines().count(), 2 + 9);
    assert!(dir.path().join("latency.dat").exists());

    let local = dir.path().join("local.csv");
    let out = Command::new(BIN)
        .args([
            "bench",
            "--sizes",
            "1,10",
            "--dim",
            "4",
            "--repeats",
            "2",
            "--out",
            local.to_str().unwrap(),
        ])
        .env_remove("BHAKTI_ADDR")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(&local)
        .unwrap()
        .starts_with("# target=in-process"));
}

#[cfg(unix)]
#[test]
fn interrupt_shuts_down_cleanly_with_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut s = ServerProcess::start(&data);
    s.ok(&["create", "[0.5, 0.5]", "-f", "k=v", "-i", "k"]);
    let status = Command::new("kill")
        .arg("-INT")
        .arg(s.child.id().to_string())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(s.child.wait().unwrap().success());
    for f in ["documents.jsonl", "indices.json", "meta.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    drop(s);

    let s = ServerProcess::start(&data);
    assert!(s.ok(&["get", "[0.5, 0.5]"]).contains("\"v\""));
    assert_eq!(s.ok(&["indices"]), "k\n");
}

#[test]
fn bind_failure_exits_non_zero() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args([
            "serve",
            "--port",
            &taken.local_addr().unwrap().port().to_string(),
            "--data-dir",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("BindError"));
}
