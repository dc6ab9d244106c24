//! TCP front end for the Bhakti engine.
//!
//! One thread per connection; each request goes through the pipeline in
//! [`stages`]. Requests on a connection are answered strictly in order.
//!
//! ```no_run
//! use bhakti_server::{Server, ServerConfig};
//!
//! let server = Server::bind(ServerConfig { port: 0, ..ServerConfig::default() }).unwrap();
//! println!("listening on {}", server.local_addr());
//! server.run().unwrap();
//! ```

mod config;
pub mod stages;

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use bhakti_core::engine::{Commit, CommitHook};
use bhakti_core::wire::{self, WireResponse};
use bhakti_core::{Engine, EngineConfig, EngineError};
use parking_lot::Mutex;
use thiserror::Error;

pub use config::{ServerConfig, ENV_DATA_DIR, ENV_HOST, ENV_PORT};
use stages::Connection;

/// How often blocked reads wake up to check for shutdown.
const POLL_INTERVAL: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("BindError: cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("IoError: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

/// Stops a running server from any thread.
#[derive(Debug, Clone)]
pub struct ShutdownHandle {
    flag: Arc<AtomicBool>,
    wake: SocketAddr,
}

impl ShutdownHandle {
    pub fn shutdown(&self) {
        if !self.flag.swap(true, Ordering::SeqCst) {
            // Unblock the accept loop.
            let _ = TcpStream::connect_timeout(&self.wake, Duration::from_secs(1));
        }
    }

    pub fn is_shutdown(&self) -> bool {
        self.flag.load(Ordering::SeqCst)
    }
}

pub struct Server {
    listener: TcpListener,
    addr: SocketAddr,
    engine: Arc<Engine>,
    config: ServerConfig,
    shutdown: Arc<AtomicBool>,
}

impl Server {
    /// Opens (or creates) the engine in `config.data_dir` and binds the
    /// listening socket.
    pub fn bind(config: ServerConfig) -> Result<Server, ServerError> {
        config.validate()?;
        let engine = Engine::open(EngineConfig {
            data_dir: config.data_dir.clone(),
            cached: config.cached,
        })?;
        Self::with_engine(config, Arc::new(engine))
    }

    /// Serves an existing engine. `config.data_dir` and `config.cached` are
    /// ignored in favour of the engine's own configuration.
    pub fn with_engine(config: ServerConfig, engine: Arc<Engine>) -> Result<Server, ServerError> {
        config.validate()?;
        let bind_addr = format!("{}:{}", config.host, config.port);
        let listener = TcpListener::bind(&bind_addr).map_err(|source| ServerError::Bind {
            addr: bind_addr.clone(),
            source,
        })?;
        let addr = listener.local_addr().map_err(|source| ServerError::Bind {
            addr: bind_addr,
            source,
        })?;
        if let Some(path) = &config.ops_log {
            engine.set_commit_hook(Some(ops_log_hook(path)?));
        }
        Ok(Server {
            listener,
            addr,
            engine,
            config,
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn shutdown_handle(&self) -> ShutdownHandle {
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(match wake {
                SocketAddr::V4(_) => [127, 0, 0, 1].into(),
                SocketAddr::V6(_) => std::net::Ipv6Addr::LOCALHOST.into(),
            });
        }
        ShutdownHandle {
            flag: self.shutdown.clone(),
            wake,
        }
    }

    /// Runs on a background thread.
    pub fn spawn(self) -> RunningServer {
        let addr = self.addr;
        let handle = self.shutdown_handle();
        let engine = self.engine.clone();
        let thread = thread::Builder::new()
            .name("bhakti-accept".into())
            .spawn(move || self.run())
            .expect("spawn server thread");
        RunningServer {
            addr,
            handle,
            engine,
            thread: Some(thread),
        }
    }

    /// Accepts connections until shut down, then waits for open connections
    /// to finish their current request and, with a data directory, saves a
    /// final snapshot.
    pub fn run(self) -> Result<(), ServerError> {
        let flusher = match (&self.engine.config().data_dir, self.config.flush_interval) {
            (Some(_), Some(every)) => Some(self.engine.spawn_flusher(every)),
            _ => None,
        };
        let pipeline = Arc::new(stages::request_pipeline(
            self.engine.clone(),
            self.config.read_timeout,
            self.shutdown.clone(),
        ));
        let active = Arc::new(AtomicUsize::new(0));
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        log::info!("listening on {}", self.addr);

        for stream in self.listener.incoming() {
            if self.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            workers.retain(|w| !w.is_finished());
            if active.load(Ordering::SeqCst) >= self.config.max_connections {
                reject(stream, self.config.max_connections);
                continue;
            }
            active.fetch_add(1, Ordering::SeqCst);
            let guard = ActiveGuard(active.clone());
            let pipeline = pipeline.clone();
            let spawned = thread::Builder::new().name("bhakti-conn".into()).spawn(move || {
                let _guard = guard;
                handle_connection(stream, &pipeline);
            });
            match spawned {
                Ok(w) => workers.push(w),
                Err(e) => log::error!("cannot spawn connection thread: {e}"),
            }
        }

        log::info!(
            "shutting down, draining {} connection(s)",
            active.load(Ordering::SeqCst)
        );
        for w in workers {
            let _ = w.join();
        }
        if let Some(f) = flusher {
            f.stop();
        }
        if self.engine.config().data_dir.is_some() {
            self.engine.save()?;
            log::info!("final snapshot saved");
        }
        self.engine.set_commit_hook(None);
        Ok(())
    }
}

struct ActiveGuard(Arc<AtomicUsize>);

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn reject(mut stream: TcpStream, limit: usize) {
    let msg = format!("TooManyConnections: server is at its limit of {limit} connections");
    log::warn!("{msg}");
    let _ = stream.write_all(&wire::encode_response(&WireResponse::exception(msg)));
    let _ = stream.shutdown(Shutdown::Both);
}

fn handle_connection(stream: TcpStream, pipeline: &bhakti_core::pipeline::Pipeline) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_else(|_| "?".into());
    let setup = stream
        .set_read_timeout(Some(POLL_INTERVAL))
        .and_then(|_| stream.set_nodelay(true))
        .and_then(|_| stream.try_clone());
    let writer = match setup {
        Ok(w) => w,
        Err(e) => {
            log::warn!("{peer}: connection setup failed: {e}");
            return;
        }
    };
    log::debug!("{peer}: connected");
    let conn = Connection::new(Box::new(stream), Box::new(writer));
    stages::serve_connection(pipeline, conn, |ctx| {
        let cmd = ctx.get::<&str>(stages::CMD).copied().unwrap_or("-");
        let state = ctx.get::<&str>(stages::STATE).copied().unwrap_or("-");
        let busy: Duration = ctx
            .timings
            .iter()
            .filter(|(stage, _)| stage != "read_frame")
            .map(|(_, d)| *d)
            .sum();
        log::info!(target: "bhakti::request", "peer={peer} cmd={cmd} state={state} us={}", busy.as_micros());
    });
    log::debug!("{peer}: closed");
}

fn ops_log_hook(path: &Path) -> Result<CommitHook, ServerError> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| ServerError::Io {
            context: format!("opening ops log {}", path.display()),
            source,
        })?;
    let out = Mutex::new(BufWriter::new(file));
    let path = path.to_path_buf();
    Ok(Arc::new(move |commit: &Commit| {
        let mut out = out.lock();
        let line = serde_json::to_string(commit).expect("commit serializes");
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            log::error!("ops log {}: {e}", path.display());
        }
    }))
}

/// Reads an operations log written via [`ServerConfig::ops_log`].
pub fn read_ops_log(path: &Path) -> io::Result<Vec<Commit>> {
    BufReader::new(File::open(path)?)
        .lines()
        .map(|line| serde_json::from_str(&line?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
        .collect()
}

/// A server running on its own thread.
pub struct RunningServer {
    addr: SocketAddr,
    handle: ShutdownHandle,
    engine: Arc<Engine>,
    thread: Option<JoinHandle<Result<(), ServerError>>>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn handle(&self) -> ShutdownHandle {
        self.handle.clone()
    }

    /// Shuts down and waits for the server thread.
    pub fn stop(mut self) -> Result<(), ServerError> {
        self.handle.shutdown();
        self.join_inner()
    }

    /// Waits for the server to exit after someone else shut it down.
    pub fn join(mut self) -> Result<(), ServerError> {
        self.join_inner()
    }

    fn join_inner(&mut self) -> Result<(), ServerError> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| {
                Err(ServerError::Io {
                    context: "server thread".into(),
                    source: io::Error::other("panicked"),
                })
            }),
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.handle.shutdown();
            let _ = self.join_inner();
        }
    }
}
