use std::time::Duration;

use bhakti_core::memory::{Embedder, MemoryError};
use bhakti_core::Vector;
use serde::{Deserialize, Serialize};

/// Environment variable naming the embedding endpoint.
pub const ENV_EMBED_URL: &str = "BHAKTI_EMBED_URL";

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

/// Embedder backed by an HTTP endpoint that answers
/// `POST {"text": "..."}` with `{"vector": [...]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    url: String,
    agent: ureq::Agent,
    dim: usize,
}

impl HttpEmbedder {
    /// Connects to `url` and learns the dimension from one probe request.
    pub fn new(url: &str, timeout: Duration) -> Result<Self, MemoryError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut e = HttpEmbedder {
            url: url.to_string(),
            agent,
            dim: 0,
        };
        e.dim = e.fetch("dimension probe")?.dim();
        Ok(e)
    }

    /// Uses `BHAKTI_EMBED_URL` if set.
    pub fn from_env(timeout: Duration) -> Option<Result<Self, MemoryError>> {
        std::env::var(ENV_EMBED_URL).ok().map(|url| Self::new(&url, timeout))
    }

    fn fetch(&self, text: &str) -> Result<Vector, MemoryError> {
        let err = |e: ureq::Error| MemoryError::Embedding(format!("{}: {e}", self.url));
        let resp: EmbedResponse = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { text })
            .map_err(err)?
            .body_mut()
            .read_json()
            .map_err(err)?;
        Vector::new(resp.vector).map_err(|e| MemoryError::Embedding(format!("{}: {e}", self.url)))
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vector, MemoryError> {
        let v = self.fetch(text)?;
        if v.dim() != self.dim {
            return Err(MemoryError::Embedding(format!(
                "{} returned {} dimensions, expected {}",
                self.url,
                v.dim(),
                self.dim
            )));
        }
        Ok(v)
    }
}
