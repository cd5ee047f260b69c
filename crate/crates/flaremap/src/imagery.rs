//! Satellite imagery retrieval with an on-disk cache, request pacing, and
//! bounded retry.
//!
//! The HTTP transport and the clock are both trait seams so the full retry,
//! pacing, and caching behavior is testable without a network or real time.
//! The API token is held in a [`ApiToken`] wrapper whose `Debug` output is
//! redacted; no error, log line, cache path, or request key ever contains
//! the token value.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable that overrides any configured API token.
pub const TOKEN_ENV_VAR: &str = "OGINFRA_API_TOKEN";

/// First eight bytes of every PNG file.
pub const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// Bearer token for the imagery service. Debug output is redacted; the raw
/// value is only reachable through [`ApiToken::expose`], which URL building
/// and scrubbing use.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiToken(String);

impl ApiToken {
    pub fn new(value: impl Into<String>) -> Self {
        ApiToken(value.into())
    }

    /// The raw secret. Callers must not place the value in logs, errors,
    /// cache keys, or file names.
    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiToken([redacted])")
    }
}

/// Token resolution order: process environment first, then configuration.
pub fn resolve_token(config_token: Option<&str>) -> Option<ApiToken> {
    resolve_token_from(|name| std::env::var(name).ok(), config_token)
}

/// [`resolve_token`] with an injectable environment lookup.
pub fn resolve_token_from(
    lookup: impl FnOnce(&str) -> Option<String>,
    config_token: Option<&str>,
) -> Option<ApiToken> {
    match lookup(TOKEN_ENV_VAR) {
        Some(v) if !v.is_empty() => Some(ApiToken::new(v)),
        _ => config_token.filter(|t| !t.is_empty()).map(ApiToken::new),
    }
}

/// One imagery request: a styled image of fixed pixel size centered on a
/// point at a given zoom.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRequest {
    pub lon: f64,
    pub lat: f64,
    pub zoom: u8,
    pub width: u32,
    pub height: u32,
    pub style: String,
}

impl ImageRequest {
    /// Deterministic cache key: SHA-256 hex digest of the canonical request
    /// string `style|lon|lat|zoom|WxH` with coordinates at six decimal
    /// places (about 0.1 m, finer than any pixel at practical zooms). The
    /// token is deliberately not an input.
    pub fn key(&self) -> String {
        let canonical = format!(
            "{}|{:.6}|{:.6}|{}|{}x{}",
            self.style, self.lon, self.lat, self.zoom, self.width, self.height
        );
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

/// Client configuration. `requests_per_minute == 0` disables pacing.
#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// URL template with `{lon}`, `{lat}`, `{zoom}`, `{width}`, `{height}`,
    /// `{style}`, and optionally `{token}` placeholders.
    pub endpoint_template: String,
    pub cache_dir: PathBuf,
    pub requests_per_minute: u32,
    /// Retries after the initial attempt; total attempts = 1 + max_retries.
    pub max_retries: u32,
    /// Delay before retry k (1-based) is `backoff_base_ms * 2^(k-1)`.
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint_template: String::new(),
            cache_dir: PathBuf::from("cache"),
            requests_per_minute: 30,
            max_retries: 3,
            backoff_base_ms: 500,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("endpoint template uses {{token}} but no token is configured (set {TOKEN_ENV_VAR})")]
    MissingToken,
    #[error("authentication rejected by imagery service (status {status})")]
    Auth { status: u16 },
    #[error("imagery service error (status {status}) after {attempts} attempt(s)")]
    Upstream { status: u16, attempts: u32 },
    #[error("imagery request rejected (status {status})")]
    Client { status: u16 },
    #[error("network failure after {attempts} attempt(s): {detail}")]
    Network { attempts: u32, detail: String },
    #[error("response for request {key} is not a PNG image")]
    InvalidImage { key: String },
    #[error("cache i/o failure at {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Transport-level failure, before any HTTP status exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Network(String),
}

/// Raw HTTP response as the client consumes it.
#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// Blocking HTTP seam.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError>;
}

/// Time seam: pacing and backoff sleep through this, so tests can run the
/// whole schedule on a virtual clock.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
    fn sleep_ms(&self, ms: u64);
}

/// Wall-clock implementation.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(std::time::Duration::from_millis(ms));
    }
}

/// Deterministic clock whose `sleep_ms` advances time instantly. Cloneable;
/// clones share one timeline.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<Mutex<u64>>);

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        *self.0.lock().unwrap()
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        *self.0.lock().unwrap()
    }

    fn sleep_ms(&self, ms: u64) {
        *self.0.lock().unwrap() += ms;
    }
}

/// ureq-backed transport.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout_ms: u64) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(std::time::Duration::from_millis(timeout_ms)))
            .build();
        UreqTransport {
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

impl Transport for UreqTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        match self.agent.get(url).call() {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let body = response
                    .body_mut()
                    .read_to_vec()
                    .map_err(|e| TransportError::Network(e.to_string()))?;
                Ok(HttpResponse { status, body })
            }
            Err(e) => Err(classify_ureq_error(e)),
        }
    }
}

fn classify_ureq_error(error: ureq::Error) -> TransportError {
    match &error {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
        _ => TransportError::Network(error.to_string()),
    }
}

/// Fill the endpoint template. Coordinates are formatted at six decimal
/// places to match the request key resolution.
pub fn build_url(
    template: &str,
    request: &ImageRequest,
    token: Option<&ApiToken>,
) -> Result<String, ImageryError> {
    let mut url = template.to_string();
    url = url.replace("{lon}", &format!("{:.6}", request.lon));
    url = url.replace("{lat}", &format!("{:.6}", request.lat));
    url = url.replace("{zoom}", &request.zoom.to_string());
    url = url.replace("{width}", &request.width.to_string());
    url = url.replace("{height}", &request.height.to_string());
    url = url.replace("{style}", &request.style);
    if url.contains("{token}") {
        match token {
            Some(t) => url = url.replace("{token}", t.expose()),
            None => return Err(ImageryError::MissingToken),
        }
    }
    Ok(url)
}

/// Even-pacing admission control. Admissions are spaced at least
/// `interval_ms` apart, so n admissions span at least (n-1) intervals.
struct Pacer {
    interval_ms: u64,
    next_allowed_ms: u64,
}

impl Pacer {
    fn new(requests_per_minute: u32) -> Self {
        // Ceiling division: rounding the interval down would let n requests
        // finish marginally faster than the configured rate.
        let interval_ms = if requests_per_minute == 0 {
            0
        } else {
            60_000u64.div_ceil(requests_per_minute as u64)
        };
        Pacer {
            interval_ms,
            next_allowed_ms: 0,
        }
    }

    fn admit(&mut self, clock: &dyn Clock) {
        if self.interval_ms == 0 {
            return;
        }
        let now = clock.now_ms();
        if now < self.next_allowed_ms {
            clock.sleep_ms(self.next_allowed_ms - now);
        }
        let effective = now.max(self.next_allowed_ms);
        self.next_allowed_ms = effective + self.interval_ms;
    }
}

/// Result of one [`ImageryClient::fetch`].
#[derive(Debug, Clone, PartialEq)]
pub struct FetchOutcome {
    /// Cache file holding the PNG bytes.
    pub path: PathBuf,
    pub request_key: String,
    pub from_cache: bool,
    /// HTTP attempts made; 0 on a cache hit.
    pub attempts: u32,
}

/// Imagery fetcher: cache lookup, paced and retried download, atomic cache
/// store. Safe to share across threads; concurrent fetches of the same key
/// are collapsed to one download.
pub struct ImageryClient<T: Transport, C: Clock> {
    config: ClientConfig,
    token: Option<ApiToken>,
    transport: T,
    clock: C,
    pacer: Mutex<Pacer>,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ImageryClient<UreqTransport, SystemClock> {
    pub fn new(config: ClientConfig, token: Option<ApiToken>) -> Self {
        let transport = UreqTransport::new(config.timeout_ms);
        Self::with_parts(config, token, transport, SystemClock)
    }
}

impl<T: Transport, C: Clock> ImageryClient<T, C> {
    pub fn with_parts(config: ClientConfig, token: Option<ApiToken>, transport: T, clock: C) -> Self {
        let pacer = Mutex::new(Pacer::new(config.requests_per_minute));
        ImageryClient {
            config,
            token,
            transport,
            clock,
            pacer,
            inflight: Mutex::new(HashMap::new()),
        }
    }

    /// Cache location for a request key: `<cache_dir>/<first two hex>/<key>.png`.
    pub fn cache_path(&self, key: &str) -> PathBuf {
        self.config.cache_dir.join(&key[..2]).join(format!("{key}.png"))
    }

    /// Fetch one image, consulting the cache first. On a miss the download
    /// is paced, retried on transient failures (HTTP 429, 5xx, timeouts,
    /// network errors) with exponential backoff, validated as PNG, and
    /// stored atomically.
    pub fn fetch(&self, request: &ImageRequest) -> Result<FetchOutcome, ImageryError> {
        let key = request.key();
        let lock = self.key_lock(&key);
        let outcome = {
            let _guard = lock.lock().unwrap();
            self.fetch_locked(request, &key)
        };
        self.release_key_lock(&key, lock);
        outcome
    }

    fn fetch_locked(&self, request: &ImageRequest, key: &str) -> Result<FetchOutcome, ImageryError> {
        let path = self.cache_path(key);
        if path.is_file() {
            return Ok(FetchOutcome {
                path,
                request_key: key.to_string(),
                from_cache: true,
                attempts: 0,
            });
        }

        let url = build_url(&self.config.endpoint_template, request, self.token.as_ref())?;
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            self.pacer.lock().unwrap().admit(&self.clock);
            let failure = match self.transport.get(&url) {
                Ok(response) if response.status == 200 => {
                    if !response.body.starts_with(&PNG_SIGNATURE) {
                        return Err(ImageryError::InvalidImage { key: key.to_string() });
                    }
                    self.store(&path, &response.body)?;
                    return Ok(FetchOutcome {
                        path,
                        request_key: key.to_string(),
                        from_cache: false,
                        attempts,
                    });
                }
                Ok(response) if response.status == 401 || response.status == 403 => {
                    return Err(ImageryError::Auth { status: response.status });
                }
                Ok(response) if response.status == 429 || (500..600).contains(&response.status) => {
                    Retryable::Status(response.status)
                }
                Ok(response) => return Err(ImageryError::Client { status: response.status }),
                Err(e) => Retryable::Transport(e),
            };
            if attempts > self.config.max_retries {
                return Err(match failure {
                    Retryable::Status(status) => ImageryError::Upstream { status, attempts },
                    Retryable::Transport(e) => ImageryError::Network {
                        attempts,
                        detail: self.scrub(&transport_detail(&e)),
                    },
                });
            }
            let delay = self.config.backoff_base_ms.saturating_mul(1u64 << (attempts - 1).min(32));
            self.clock.sleep_ms(delay);
        }
    }

    /// Write-then-rename so readers never observe a partial file.
    fn store(&self, path: &Path, body: &[u8]) -> Result<(), ImageryError> {
        let parent = path.parent().expect("cache paths have a parent");
        let io_err = |source| ImageryError::Cache {
            path: path.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(parent).map_err(io_err)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io_err)?;
        tmp.write_all(body).map_err(io_err)?;
        tmp.persist(path).map_err(|e| io_err(e.error))?;
        Ok(())
    }

    /// Remove any trace of the token from text destined for an error.
    fn scrub(&self, text: &str) -> String {
        match &self.token {
            Some(token) if !token.expose().is_empty() => text.replace(token.expose(), "[redacted]"),
            _ => text.to_string(),
        }
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut map = self.inflight.lock().unwrap();
        map.entry(key.to_string()).or_default().clone()
    }

    fn release_key_lock(&self, key: &str, lock: Arc<Mutex<()>>) {
        let mut map = self.inflight.lock().unwrap();
        // Map holds one clone and we hold another; a count of exactly two
        // means no other fetch is waiting (newcomers need the map lock).
        if Arc::strong_count(&lock) == 2 {
            map.remove(key);
        }
    }
}

enum Retryable {
    Status(u16),
    Transport(TransportError),
}

fn transport_detail(error: &TransportError) -> String {
    match error {
        TransportError::Timeout => "request timed out".to_string(),
        TransportError::Network(detail) => detail.clone(),
    }
}
