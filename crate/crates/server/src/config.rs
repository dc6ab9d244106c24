use std::path::PathBuf;
use std::time::Duration;

use crate::ServerError;

pub const ENV_HOST: &str = "BHAKTI_HOST";
pub const ENV_PORT: &str = "BHAKTI_PORT";
pub const ENV_DATA_DIR: &str = "BHAKTI_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub host: String,
    /// 0 picks a free port.
    pub port: u16,
    /// Snapshot directory. `None` runs purely in memory.
    pub data_dir: Option<PathBuf>,
    pub cached: bool,
    /// Period of the background snapshot flusher; `None` disables it.
    pub flush_interval: Option<Duration>,
    pub max_connections: usize,
    pub read_timeout: Duration,
    /// Append every committed mutation to this file as JSON lines.
    pub ops_log: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            host: "127.0.0.1".into(),
            port: 7878,
            data_dir: None,
            cached: true,
            flush_interval: Some(Duration::from_secs(1)),
            max_connections: 1024,
            read_timeout: Duration::from_secs(30),
            ops_log: None,
        }
    }
}

impl ServerConfig {
    /// Overrides host, port and data directory from `BHAKTI_*` variables.
    pub fn apply_env(&mut self) -> Result<(), ServerError> {
        if let Ok(host) = std::env::var(ENV_HOST) {
            self.host = host;
        }
        if let Ok(port) = std::env::var(ENV_PORT) {
            self.port = port
                .parse()
                .map_err(|_| ServerError::InvalidConfig(format!("{ENV_PORT}={port:?} is not a port number")))?;
        }
        if let Ok(dir) = std::env::var(ENV_DATA_DIR) {
            self.data_dir = Some(dir.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |m: &str| Err(ServerError::InvalidConfig(m.into()));
        if self.max_connections == 0 {
            return bad("max_connections must be at least 1");
        }
        if self.read_timeout.is_zero() {
            return bad("read_timeout must be positive");
        }
        if self.flush_interval.is_some_and(|d| d.is_zero()) {
            return bad("flush_interval must be positive");
        }
        if !self.cached && self.data_dir.is_none() {
            return bad("uncached mode needs a data directory");
        }
        Ok(())
    }
}
