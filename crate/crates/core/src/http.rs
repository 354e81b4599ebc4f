//! Blocking JSON-over-HTTP client shared by the remote embedding provider and
//! the completion backend.
//!
//! Adds three things on top of reqwest: bounded in-flight requests,
//! exponential-backoff retries on transport errors and 429/5xx, and a
//! cassette layer that records `request hash -> response JSON` so test runs
//! can replay a live session without network access.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_AUTH_ENV: &str = "NOISY_ICL_API_KEY";
const CASSETTE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    /// Always hit the network and store every interaction.
    Record,
    /// Never hit the network; a missing interaction is an error.
    Replay,
    /// Replay when recorded, otherwise record.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSettings {
    /// Base URL, e.g. `http://localhost:8000`.
    pub endpoint: String,
    #[serde(default = "default_auth_env")]
    pub auth_env: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    #[serde(default)]
    pub cassette_mode: CassetteMode,
}

fn default_auth_env() -> String {
    DEFAULT_AUTH_ENV.into()
}
fn default_max_in_flight() -> usize {
    8
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_timeout_secs() -> u64 {
    120
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            auth_env: default_auth_env(),
            max_in_flight: default_max_in_flight(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
            cassette: None,
            cassette_mode: CassetteMode::default(),
        }
    }
}

struct Limiter {
    free: Mutex<usize>,
    cond: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cond.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cond.notify_one();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Interaction {
    path: String,
    request: Value,
    response: Value,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CassetteFile {
    version: u32,
    interactions: BTreeMap<String, Interaction>,
}

struct Cassette {
    path: PathBuf,
    mode: CassetteMode,
    file: Mutex<CassetteFile>,
}

impl Cassette {
    fn open(path: &Path, mode: CassetteMode) -> Result<Self> {
        let file = if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: CassetteFile = serde_json::from_str(&text)
                .map_err(|e| Error::json(format!("cassette {}", path.display()), e))?;
            if file.version != CASSETTE_VERSION {
                return Err(Error::Config(format!(
                    "cassette {} has version {}, expected {CASSETTE_VERSION}",
                    path.display(),
                    file.version
                )));
            }
            file
        } else if mode == CassetteMode::Replay {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "cassette not found"),
            ));
        } else {
            CassetteFile {
                version: CASSETTE_VERSION,
                interactions: BTreeMap::new(),
            }
        };
        Ok(Self {
            path: path.to_path_buf(),
            mode,
            file: Mutex::new(file),
        })
    }

    fn lookup(&self, hash: &str) -> Option<Value> {
        let file = self.file.lock().expect("cassette lock");
        file.interactions.get(hash).map(|i| i.response.clone())
    }

    fn store(&self, hash: String, interaction: Interaction) -> Result<()> {
        let mut file = self.file.lock().expect("cassette lock");
        file.interactions.insert(hash, interaction);
        let text = serde_json::to_string_pretty(&*file)
            .map_err(|e| Error::json("serializing cassette", e))?;
        let tmp = self.path.with_extension("tmp");
        std::fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

/// Hash identifying a request in a cassette.
pub fn request_hash(path: &str, body: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(path.as_bytes());
    hasher.update(b"\n");
    hasher.update(body.to_string().as_bytes());
    hex::encode(hasher.finalize())
}

pub struct JsonClient {
    endpoint: String,
    client: reqwest::blocking::Client,
    token: Option<String>,
    max_retries: u32,
    backoff: Duration,
    limiter: Limiter,
    cassette: Option<Cassette>,
}

impl JsonClient {
    pub fn new(settings: &HttpSettings) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("building HTTP client: {e}")))?;
        let cassette = settings
            .cassette
            .as_deref()
            .map(|p| Cassette::open(p, settings.cassette_mode))
            .transpose()?;
        Ok(Self {
            endpoint: settings.endpoint.trim_end_matches('/').to_string(),
            client,
            token: std::env::var(&settings.auth_env).ok().filter(|t| !t.is_empty()),
            max_retries: settings.max_retries,
            backoff: Duration::from_millis(settings.backoff_ms),
            limiter: Limiter::new(settings.max_in_flight),
            cassette,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint, path)
    }

    /// POSTs `body` to `endpoint + path` and returns the parsed JSON reply.
    pub fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let hash = request_hash(path, body);
        if let Some(cassette) = &self.cassette {
            if cassette.mode != CassetteMode::Record {
                if let Some(response) = cassette.lookup(&hash) {
                    return Ok(response);
                }
                if cassette.mode == CassetteMode::Replay {
                    return Err(Error::CassetteMiss {
                        hash,
                        path: cassette.path.clone(),
                    });
                }
            }
        }

        let response = self.post_live(path, body)?;
        if let Some(cassette) = &self.cassette {
            cassette.store(
                hash,
                Interaction {
                    path: path.to_string(),
                    request: body.clone(),
                    response: response.clone(),
                },
            )?;
        }
        Ok(response)
    }

    fn post_live(&self, path: &str, body: &Value) -> Result<Value> {
        let _permit = self.limiter.acquire();
        let url = self.url(path);
        let mut attempt = 0;
        loop {
            match self.send_once(&url, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let delay = self.backoff * 2u32.pow(attempt);
                    log::warn!("{e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn send_once(&self, url: &str, body: &Value) -> Result<Value> {
        let mut request = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let transport = |e: reqwest::Error| Error::Transport {
            endpoint: url.to_string(),
            message: e.to_string(),
        };
        let response = request.send().map_err(transport)?;
        let status = response.status();
        let text = response.text().map_err(transport)?;
        if !status.is_success() {
            return Err(Error::HttpStatus {
                endpoint: url.to_string(),
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| Error::Protocol {
            endpoint: url.to_string(),
            reason: format!("response is not JSON: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn request_hash_is_key_order_independent() {
        let a: Value = serde_json::from_str(r#"{"b":1,"a":2}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a":2,"b":1}"#).unwrap();
        assert_eq!(request_hash("/x", &a), request_hash("/x", &b));
        assert_ne!(request_hash("/x", &a), request_hash("/y", &a));
    }

    #[test]
    fn replay_miss_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"version":1,"interactions":{}}"#,
        )
        .unwrap();
        let mut settings = HttpSettings::new("http://127.0.0.1:9");
        settings.cassette = Some(path);
        settings.cassette_mode = CassetteMode::Replay;
        let client = JsonClient::new(&settings).unwrap();
        let err = client.post("/v1/completions", &json!({"a": 1})).unwrap_err();
        assert!(matches!(err, Error::CassetteMiss { .. }));
    }

    #[test]
    fn replay_requires_existing_cassette() {
        let mut settings = HttpSettings::new("http://127.0.0.1:9");
        settings.cassette = Some(PathBuf::from("/nonexistent/cassette.json"));
        settings.cassette_mode = CassetteMode::Replay;
        assert!(JsonClient::new(&settings).is_err());
    }

    #[test]
    fn connection_refused_is_retried_then_surfaced() {
        let mut settings = HttpSettings::new("http://127.0.0.1:9");
        settings.max_retries = 2;
        settings.backoff_ms = 1;
        let client = JsonClient::new(&settings).unwrap();
        let err = client.post("/v1/completions", &json!({})).unwrap_err();
        match err {
            Error::Transport { endpoint, .. } => assert!(endpoint.ends_with("/v1/completions")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
