use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use bhakti_client::{ClientConn, HttpEmbedder};
use bhakti_core::bench::{self, BenchConfig, BenchMode};
use bhakti_core::dsl::{self, Fields, ScalarValue};
use bhakti_core::engine::Document;
use bhakti_core::memory::{self, Embedder, SystemClock, ToyEmbedder, Weights};
use bhakti_core::{Engine, Metric, Vector};
use bhakti_server::{Server, ServerConfig, ENV_DATA_DIR, ENV_HOST, ENV_PORT};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bhakti", version, about = "Bhakti vector database server and client")]
struct Cli {
    /// Server address for client commands [default: 127.0.0.1:7878]. For
    /// `bench`, giving an address benchmarks that server instead of an
    /// in-process engine.
    #[arg(long, global = true, env = "BHAKTI_ADDR")]
    addr: Option<String>,
    /// Print raw JSON payloads instead of tables.
    #[arg(long, global = true)]
    json: bool,
    /// Seconds to wait for each response.
    #[arg(long, global = true, default_value_t = 30.0)]
    timeout: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the server until interrupted.
    Serve(ServeArgs),
    /// Check that the server answers.
    Ping,
    /// Store a document under a vector.
    Create {
        /// JSON array of numbers, or @FILE holding one.
        vector: String,
        /// Field as KEY=VALUE; VALUE is read as JSON when it parses, else as text.
        #[arg(short, long = "field")]
        fields: Vec<String>,
        /// All fields as one JSON object.
        #[arg(long)]
        doc: Option<String>,
        /// Field to index (repeatable).
        #[arg(short, long = "index")]
        indices: Vec<String>,
    },
    /// Create an inverted index on a field.
    Index {
        name: String,
        /// Also print the index entries.
        #[arg(long)]
        detailed: bool,
    },
    /// List indexed fields.
    Indices,
    /// Exact k nearest neighbours.
    Knn {
        vector: String,
        #[arg(short, default_value_t = 10)]
        k: usize,
        #[arg(short, long, default_value = "cosine")]
        metric: String,
        /// Filter expression, e.g. 'uid == "u1" && score >= 3'.
        #[arg(short, long)]
        filter: Option<String>,
    },
    /// Fetch the document stored under a vector.
    Get { vector: String },
    /// Set one field of the document stored under a vector.
    Mod { vector: String, key: String, value: String },
    /// Remove the document stored under a vector.
    Rm { vector: String },
    /// Remove every document matching a filter.
    Rmq { filter: String },
    /// Ask the server to write a snapshot.
    Save,
    /// Dialogue memory.
    #[command(subcommand)]
    Mem(MemCommand),
    /// Query latency versus dataset size.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = ENV_HOST, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = ENV_PORT, default_value_t = 7878)]
    port: u16,
    /// Snapshot directory.
    #[arg(long, env = ENV_DATA_DIR, default_value = "bhakti-data")]
    data_dir: PathBuf,
    /// Read document fields from the snapshot instead of keeping them in memory.
    #[arg(long)]
    no_cache: bool,
    /// Seconds between background snapshots; 0 disables them.
    #[arg(long, default_value_t = 1.0)]
    flush_interval: f64,
    #[arg(long, default_value_t = 1024)]
    max_connections: usize,
    /// Seconds a client may take to send one request.
    #[arg(long, default_value_t = 30.0)]
    read_timeout: f64,
    /// Append committed mutations to this file as JSON lines.
    #[arg(long)]
    ops_log: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Dimension of the built-in toy embedder, used when BHAKTI_EMBED_URL is unset.
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
}

#[derive(Subcommand)]
enum MemCommand {
    /// Memorize one question/answer exchange.
    Add {
        #[arg(long)]
        uid: String,
        #[arg(long)]
        bid: String,
        #[arg(long, default_value_t = 0.5)]
        wq: f64,
        #[arg(long, default_value_t = 0.5)]
        wa: f64,
        query: String,
        answer: String,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Recall the memories closest to a query.
    Recall {
        #[arg(long)]
        uid: String,
        #[arg(long)]
        bid: String,
        #[arg(short, default_value_t = 5)]
        k: usize,
        #[arg(short, long, default_value = "cosine")]
        metric: String,
        /// Extra filter joined to the user/bot condition.
        #[arg(short, long)]
        filter: Option<String>,
        query: String,
        #[command(flatten)]
        embed: EmbedArgs,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Comma separated dataset sizes, ascending.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "1,250,500,750,1000,1250,1500,1750,2000,2250,2500,2750,3000,3250,3500,3750,4000,4250,4500,4750,5000"
    )]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(short, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 30)]
    repeats: usize,
    #[arg(long, default_value_t = 0.1)]
    selectivity: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(short, long, default_value = "cosine")]
    metric: String,
    /// Also time the filter evaluated by full scan.
    #[arg(long)]
    scan_filter: bool,
    #[arg(long, default_value = "latency.csv")]
    out: PathBuf,
}

const DEFAULT_ADDR: &str = "127.0.0.1:7878";

type CliResult = Result<(), String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn seconds(s: f64, what: &str) -> Result<Duration, String> {
    Duration::try_from_secs_f64(s).map_err(|_| format!("{what} must be a non-negative number of seconds"))
}

fn run(cli: Cli) -> CliResult {
    let timeout = seconds(cli.timeout, "--timeout")?;
    let addr = cli.addr.clone().unwrap_or_else(|| DEFAULT_ADDR.to_string());
    let connect = || ClientConn::connect_with(&addr, Some(timeout)).map_err(|e| e.to_string());
    let json = cli.json;
    match cli.command {
        Command::Serve(args) => serve(args),
        Command::Ping => {
            connect()?.ping().map_err(|e| e.to_string())?;
            println!("pong");
            Ok(())
        }
        Command::Create {
            vector,
            fields,
            doc,
            indices,
        } => {
            let v = parse_vector(&vector)?;
            let mut f = match doc {
                Some(d) => parse_doc(&d)?,
                None => Fields::new(),
            };
            for kv in &fields {
                let (k, val) = kv
                    .split_once('=')
                    .ok_or_else(|| format!("--field {kv:?} is not KEY=VALUE"))?;
                f.insert(k.to_string(), parse_scalar(val)?);
            }
            let idx: Vec<&str> = indices.iter().map(String::as_str).collect();
            let d = connect()?.create_doc(&v, &f, &idx).map_err(|e| e.to_string())?;
            print_doc(json, Some(&d));
            Ok(())
        }
        Command::Index { name, detailed } => {
            let c = connect()?;
            if detailed {
                let v = c.create_index_detailed(&name).map_err(|e| e.to_string())?;
                println!(
                    "{}",
                    if json {
                        v.to_string()
                    } else {
                        serde_json::to_string_pretty(&v).unwrap()
                    }
                );
            } else {
                c.create_index(&name).map_err(|e| e.to_string())?;
                if json {
                    println!("true");
                } else {
                    println!("index {name:?} ready");
                }
            }
            Ok(())
        }
        Command::Indices => {
            let names = connect()?.indices().map_err(|e| e.to_string())?;
            if json {
                println!("{}", serde_json::to_string(&names).unwrap());
            } else {
                names.iter().for_each(|n| println!("{n}"));
            }
            Ok(())
        }
        Command::Knn {
            vector,
            k,
            metric,
            filter,
        } => {
            let v = parse_vector(&vector)?;
            let r = connect()?
                .knn_named(&v, &metric, k, filter.as_deref())
                .map_err(|e| e.to_string())?;
            if json {
                println!("{}", serde_json::to_string(&r).unwrap());
                return Ok(());
            }
            if r.full_scan {
                eprintln!("note: the filter uses an unindexed field and was answered by a full scan");
            }
            println!("{:>4}  {:>8}  {:>14}  fields", "rank", "id", "distance");
            for (i, h) in r.hits.iter().enumerate() {
                let fields = serde_json::to_string(&h.document.fields).unwrap();
                println!("{:>4}  {:>8}  {:>14.9}  {fields}", i + 1, h.document.id, h.distance);
            }
            Ok(())
        }
        Command::Get { vector } => {
            let d = connect()?
                .get_by_vector(&parse_vector(&vector)?)
                .map_err(|e| e.to_string())?;
            print_doc(json, d.as_ref());
            Ok(())
        }
        Command::Mod { vector, key, value } => {
            let d = connect()?
                .mod_field(&parse_vector(&vector)?, &key, parse_scalar(&value)?)
                .map_err(|e| e.to_string())?;
            print_doc(json, Some(&d));
            Ok(())
        }
        Command::Rm { vector } => {
            let removed = connect()?
                .remove_by_vector(&parse_vector(&vector)?)
                .map_err(|e| e.to_string())?;
            match (json, removed) {
                (true, r) => println!("{r}"),
                (false, true) => println!("removed"),
                (false, false) => println!("no document with that vector"),
            }
            Ok(())
        }
        Command::Rmq { filter } => {
            let n = connect()?.remove_by_query(&filter).map_err(|e| e.to_string())?;
            if json {
                println!("{n}");
            } else {
                println!("removed {n} document(s)");
            }
            Ok(())
        }
        Command::Save => {
            connect()?.save().map_err(|e| e.to_string())?;
            println!("{}", if json { "true" } else { "saved" });
            Ok(())
        }
        Command::Mem(cmd) => mem(cmd, &connect()?, json, timeout),
        Command::Bench(args) => {
            let remote = if cli.addr.is_some() { Some(connect()?) } else { None };
            run_bench(args, remote)
        }
    }
}

fn serve(args: ServeArgs) -> CliResult {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let flush = seconds(args.flush_interval, "--flush-interval")?;
    let config = ServerConfig {
        host: args.host,
        port: args.port,
        data_dir: Some(args.data_dir),
        cached: !args.no_cache,
        flush_interval: (!flush.is_zero()).then_some(flush),
        max_connections: args.max_connections,
        read_timeout: seconds(args.read_timeout, "--read-timeout")?,
        ops_log: args.ops_log,
    };
    let server = Server::bind(config).map_err(|e| e.to_string())?;
    let handle = server.shutdown_handle();
    ctrlc::set_handler(move || handle.shutdown()).map_err(|e| format!("installing signal handler: {e}"))?;
    println!("listening on {}", server.local_addr());
    let _ = std::io::stdout().flush();
    server.run().map_err(|e| e.to_string())
}

fn embedder(args: &EmbedArgs, timeout: Duration) -> Result<Box<dyn Embedder>, String> {
    match HttpEmbedder::from_env(timeout) {
        Some(e) => Ok(Box::new(e.map_err(|e| e.to_string())?)),
        None => Ok(Box::new(ToyEmbedder::new(args.embed_dim).map_err(|e| e.to_string())?)),
    }
}

fn mem(cmd: MemCommand, conn: &ClientConn, json: bool, timeout: Duration) -> CliResult {
    match cmd {
        MemCommand::Add {
            uid,
            bid,
            wq,
            wa,
            query,
            answer,
            embed,
        } => {
            let w = Weights::new(wq, wa).map_err(|e| e.to_string())?;
            let e = embedder(&embed, timeout)?;
            let m = memory::memorize_conversation(&query, &answer, &uid, &bid, w, e.as_ref(), conn, &SystemClock)
                .map_err(|e| e.to_string())?;
            if json {
                println!("{}", serde_json::json!({"id": m.id, "fields": m.record.to_fields()}));
            } else {
                println!("memorized as document {}", m.id);
            }
            Ok(())
        }
        MemCommand::Recall {
            uid,
            bid,
            k,
            metric,
            filter,
            query,
            embed,
        } => {
            let metric: Metric = metric.parse().map_err(|e: bhakti_core::MetricError| e.to_string())?;
            let extra = filter.map(|f| dsl::parse(&f).map_err(|e| e.to_string())).transpose()?;
            let e = embedder(&embed, timeout)?;
            let lines =
                memory::recall_memories_templated(&query, k, metric, &uid, &bid, extra.as_ref(), e.as_ref(), conn)
                    .map_err(|e| e.to_string())?;
            if json {
                println!("{}", serde_json::to_string(&lines).unwrap());
            } else {
                lines.iter().for_each(|l| println!("{l}"));
            }
            Ok(())
        }
    }
}

fn run_bench(args: BenchArgs, remote: Option<ClientConn>) -> CliResult {
    let config = BenchConfig {
        sizes: args.sizes,
        dim: args.dim,
        k: args.k,
        repeats: args.repeats,
        selectivity: args.selectivity,
        seed: args.seed,
        metric: args
            .metric
            .parse()
            .map_err(|e: bhakti_core::MetricError| e.to_string())?,
        scan_filter: args.scan_filter,
        ..BenchConfig::default()
    };
    let report = match remote {
        Some(mut c) => bench::run_bench(&config, &mut c),
        None => bench::run_bench(&config, &mut Engine::new()),
    }
    .map_err(|e| e.to_string())?;
    let dat = report.write_files(&args.out).map_err(|e| e.to_string())?;
    println!(
        "{:>6}  {:<12} {:>10} {:>10} {:>10}",
        "size", "mode", "mean_ms", "p50_ms", "p95_ms"
    );
    for r in &report.rows {
        println!(
            "{:>6}  {:<12} {:>10.3} {:>10.3} {:>10.3}",
            r.size,
            r.mode.as_str(),
            r.mean_ms,
            r.p50_ms,
            r.p95_ms
        );
    }
    let last = config.sizes.last().copied().unwrap_or(0);
    if let (Some(f), Some(u)) = (
        report.row(last, BenchMode::Filtered),
        report.row(last, BenchMode::Unfiltered),
    ) {
        println!(
            "at {last} documents: filtered {:.3} ms vs unfiltered {:.3} ms",
            f.mean_ms, u.mean_ms
        );
    }
    println!(
        "{} queries verified against brute force; wrote {} and {}",
        report.verified_queries,
        args.out.display(),
        dat.display()
    );
    Ok(())
}

fn parse_vector(arg: &str) -> Result<Vector, String> {
    let text = match arg.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).map_err(|e| format!("reading {path}: {e}"))?,
        None => arg.to_string(),
    };
    let values: Vec<f64> =
        serde_json::from_str(text.trim()).map_err(|e| format!("vector must be a JSON array of numbers: {e}"))?;
    Vector::new(values).map_err(|e| e.to_string())
}

fn parse_scalar(text: &str) -> Result<ScalarValue, String> {
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(v) => ScalarValue::from_json(&v).ok_or_else(|| format!("{text:?} is not a string, number or boolean")),
        Err(_) => Ok(ScalarValue::String(text.to_string())),
    }
}

fn parse_doc(text: &str) -> Result<Fields, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("--doc: {e}"))?;
    let obj = v.as_object().ok_or("--doc must be a JSON object")?;
    obj.iter()
        .map(|(k, v)| {
            ScalarValue::from_json(v)
                .map(|s| (k.clone(), s))
                .ok_or_else(|| format!("--doc: field {k:?} is not a string, number or boolean"))
        })
        .collect()
}

fn print_doc(json: bool, doc: Option<&Document>) {
    match (json, doc) {
        (true, d) => println!("{}", serde_json::to_string(&d).unwrap()),
        (false, None) => println!("no document with that vector"),
        (false, Some(d)) => {
            println!("id      {}", d.id);
            println!("vector  {}", serde_json::to_string(&d.vector).unwrap());
            for (k, v) in &d.fields {
                println!("{k:<7} {}", serde_json::to_string(v).unwrap());
            }
        }
    }
}
