//! Uniform text-generation interface over an image + text prompt, with a
//! remote chat-completions backend and a scripted mock.
//!
//! [`LmmClient`] wraps a backend with the shared concerns: response cache,
//! requests-per-minute budget, retries with exponential backoff, and call
//! accounting. It is `Sync` and meant to be shared by worker threads.

pub mod cache;
pub mod clock;
pub mod mock;
pub mod rate_limit;
pub mod remote;
pub mod retry;

use std::fmt;
use std::io::Cursor;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CachedResponse, ResponseCache};
pub use clock::{Clock, FakeClock, SystemClock};
pub use mock::{MockBackend, MockRule, MockScript};
pub use rate_limit::RateLimiter;
pub use remote::{HttpReply, HttpTransport, RemoteBackend, TransportError, UreqTransport};
pub use retry::RetryPolicy;

/// Which generation step a request belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Context,
    Characteristic,
    Differential,
    Multistep,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Context => "context",
            StageKind::Characteristic => "characteristic",
            StageKind::Differential => "differential",
            StageKind::Multistep => "multistep",
        })
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

impl fmt::Debug for ImageAttachment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageAttachment")
            .field("media_type", &self.media_type)
            .field("len", &self.bytes.len())
            .finish()
    }
}

impl ImageAttachment {
    pub fn new(media_type: impl Into<String>, bytes: Vec<u8>) -> Self {
        ImageAttachment {
            media_type: media_type.into(),
            bytes,
        }
    }

    /// PNG encoding of `image`, untouched in size.
    pub fn png(image: &RgbImage) -> Self {
        let mut buf = Cursor::new(Vec::new());
        image
            .write_to(&mut buf, image::ImageFormat::Png)
            .expect("PNG encoding into memory");
        ImageAttachment::new("image/png", buf.into_inner())
    }

    /// PNG encoding with the longest side shrunk to at most `max_side`.
    pub fn png_downscaled(image: &RgbImage, max_side: u32) -> Self {
        let (w, h) = image.dimensions();
        let longest = w.max(h);
        if max_side == 0 || longest <= max_side {
            return Self::png(image);
        }
        let scale = f64::from(max_side) / f64::from(longest);
        let nw = ((f64::from(w) * scale).round() as u32).max(1);
        let nh = ((f64::from(h) * scale).round() as u32).max(1);
        let small = image::imageops::resize(image, nw, nh, image::imageops::FilterType::Triangle);
        Self::png(&small)
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.bytes))
    }

    pub fn data_uri(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UserPart {
    Text(String),
    Image(ImageAttachment),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmRequest {
    pub stage: StageKind,
    pub system_prompt: String,
    pub user_parts: Vec<UserPart>,
    pub temperature: f32,
    pub max_output_tokens: u32,
    pub backend_id: String,
}

impl LmmRequest {
    pub fn new(stage: StageKind, system_prompt: impl Into<String>, user_parts: Vec<UserPart>) -> Self {
        LmmRequest {
            stage,
            system_prompt: system_prompt.into(),
            user_parts,
            temperature: 0.0,
            max_output_tokens: 1024,
            backend_id: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), LmmError> {
        if self.user_parts.is_empty() {
            return Err(LmmError::InvalidRequest("at least one user part is required".into()));
        }
        for p in &self.user_parts {
            if let UserPart::Image(img) = p {
                if img.bytes.is_empty() || img.media_type.is_empty() {
                    return Err(LmmError::InvalidRequest(
                        "image attachments need a media type and non-empty bytes".into(),
                    ));
                }
            }
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LmmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LmmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageAttachment> {
        self.user_parts.iter().filter_map(|p| match p {
            UserPart::Image(i) => Some(i),
            UserPart::Text(_) => None,
        })
    }

    /// All user text parts joined by blank lines.
    pub fn user_text(&self) -> String {
        self.user_parts
            .iter()
            .filter_map(|p| match p {
                UserPart::Text(t) => Some(t.as_str()),
                UserPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmmResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub cached: bool,
    /// Retries spent before success (0 when the first attempt succeeded).
    pub retries: u32,
}

/// Raw backend output before caching and accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

/// Failure of a single backend attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    Status { code: u16, body: String },
    Timeout,
    Transport(String),
    Malformed(String),
    Scripted(String),
}

#[derive(Debug, Error)]
pub enum LmmError {
    #[error("authentication failed (HTTP {status})")]
    AuthError { status: u16 },
    #[error("rate limited after {retries} retries")]
    RateLimited { retries: u32 },
    #[error("request timed out after {retries} retries")]
    Timeout { retries: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("server error HTTP {status} after {retries} retries")]
    Server { status: u16, retries: u32 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error after {retries} retries: {message}")]
    Transport { message: String, retries: u32 },
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait LmmBackend: Send + Sync {
    fn id(&self) -> &str;
    fn model(&self) -> &str;
    fn call(&self, req: &LmmRequest) -> Result<Completion, CallError>;
}

fn put_field(h: &mut Sha256, tag: u8, bytes: &[u8]) {
    h.update([tag]);
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

/// Content hash over backend id, model, system prompt, user parts (in order,
/// images by their bytes) and temperature. Length-prefixed fields make the
/// encoding unambiguous; integers are little-endian, so keys are portable.
pub fn cache_key(req: &LmmRequest, model: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"tsr-cache-key/1");
    put_field(&mut h, b'B', req.backend_id.as_bytes());
    put_field(&mut h, b'M', model.as_bytes());
    put_field(&mut h, b'S', req.system_prompt.as_bytes());
    for p in &req.user_parts {
        match p {
            UserPart::Text(t) => put_field(&mut h, b'T', t.as_bytes()),
            UserPart::Image(img) => {
                put_field(&mut h, b'm', img.media_type.as_bytes());
                put_field(&mut h, b'I', &img.bytes);
            }
        }
    }
    put_field(&mut h, b't', &req.temperature.to_bits().to_le_bytes());
    hex::encode(h.finalize())
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub requests_per_minute: u32,
    pub max_retries: u32,
    pub timeout_s: u64,
    pub cache_dir: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub temperature: f32,
    pub max_output_tokens: u32,
    /// Road images are shrunk so the longest side is at most this many pixels.
    pub max_road_image_side: u32,
    pub backoff_base_s: f64,
    pub backoff_jitter: f64,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            model: "mock".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            requests_per_minute: 60,
            max_retries: 5,
            timeout_s: 60,
            cache_dir: None,
            mock_script: None,
            temperature: 0.0,
            max_output_tokens: 1024,
            max_road_image_side: 768,
            backoff_base_s: 1.0,
            backoff_jitter: 0.2,
            seed: 0,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LmmError> {
        if self.requests_per_minute < 1 {
            return Err(LmmError::Config("requests_per_minute must be >= 1".into()));
        }
        if self.model.trim().is_empty() {
            return Err(LmmError::Config("model must be set".into()));
        }
        if self.kind == BackendKind::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(LmmError::Config("remote backend requires an endpoint".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LmmError::Config("temperature must lie in [0, 2]".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(LmmError::Config("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn backend_id(&self) -> String {
        match self.kind {
            BackendKind::Remote => format!("remote:{}", self.model),
            BackendKind::Mock => format!("mock:{}", self.model),
        }
    }
}

/// Backend plus cache, rate budget, retries and counters.
pub struct LmmClient {
    backend: Box<dyn LmmBackend>,
    cache: Option<ResponseCache>,
    limiter: Option<RateLimiter>,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    temperature: f32,
    max_output_tokens: u32,
    max_road_image_side: u32,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl fmt::Debug for LmmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LmmClient")
            .field("backend", &self.backend.id())
            .field("cache", &self.cache.as_ref().map(|c| c.dir().to_path_buf()))
            .field("rpm", &self.limiter.as_ref().map(|l| l.requests_per_minute()))
            .finish()
    }
}

impl LmmClient {
    pub fn new(backend: Box<dyn LmmBackend>) -> Self {
        LmmClient {
            backend,
            cache: None,
            limiter: None,
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock::new()),
            temperature: 0.0,
            max_output_tokens: 1024,
            max_road_image_side: 768,
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// Instantiates the configured backend. Remote backends read the API
    /// key from the environment and get a rate limiter; mock backends run
    /// unthrottled.
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, LmmError> {
        cfg.validate()?;
        let backend: Box<dyn LmmBackend> = match cfg.kind {
            BackendKind::Mock => {
                let script = match &cfg.mock_script {
                    Some(p) => MockScript::load(p)?,
                    None => MockScript::default(),
                };
                Box::new(MockBackend::new(cfg.model.clone(), script))
            }
            BackendKind::Remote => {
                let key = std::env::var(&cfg.api_key_env).map_err(|_| {
                    LmmError::Config(format!("environment variable {} is not set", cfg.api_key_env))
                })?;
                Box::new(RemoteBackend::new(
                    cfg.endpoint.clone().unwrap_or_default(),
                    cfg.model.clone(),
                    key,
                    Duration::from_secs(cfg.timeout_s),
                    Box::new(UreqTransport),
                ))
            }
        };
        let mut client = LmmClient::new(backend)
            .with_retry(RetryPolicy::new(
                cfg.max_retries,
                Duration::from_secs_f64(cfg.backoff_base_s.max(0.0)),
                2.0,
                cfg.backoff_jitter,
                cfg.seed,
            ))
            .with_defaults(cfg.temperature, cfg.max_output_tokens, cfg.max_road_image_side);
        if cfg.kind == BackendKind::Remote {
            client = client.with_rate_limit(cfg.requests_per_minute);
        }
        if let Some(dir) = &cfg.cache_dir {
            client = client.with_cache(ResponseCache::new(dir));
        }
        Ok(client)
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_rate_limit(mut self, rpm: u32) -> Self {
        self.limiter = Some(RateLimiter::new(rpm));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_defaults(mut self, temperature: f32, max_output_tokens: u32, max_road_image_side: u32) -> Self {
        self.temperature = temperature;
        self.max_output_tokens = max_output_tokens;
        self.max_road_image_side = max_road_image_side;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn model(&self) -> &str {
        self.backend.model()
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn max_road_image_side(&self) -> u32 {
        self.max_road_image_side
    }

    /// Backend attempts made so far, retries included, cache hits excluded.
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }

    /// A request stamped with this client's backend id and decoding defaults.
    pub fn request(&self, stage: StageKind, system_prompt: impl Into<String>, parts: Vec<UserPart>) -> LmmRequest {
        LmmRequest {
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            backend_id: self.backend.id().to_string(),
            ..LmmRequest::new(stage, system_prompt, parts)
        }
    }

    pub fn cache_key(&self, req: &LmmRequest) -> String {
        cache_key(req, self.backend.model())
    }

    /// Runs `req` through the cache, the rate budget and the retry loop.
    ///
    /// The cache is consulted and filled only at temperature 0; sampled
    /// requests always reach the backend.
    pub fn complete(&self, req: &LmmRequest) -> Result<LmmResponse, LmmError> {
        req.validate()?;
        let started = self.clock.now();
        let use_cache = req.temperature == 0.0;
        let key = self.cache_key(req);
        if let (true, Some(cache)) = (use_cache, &self.cache) {
            if let Some(hit) = cache.get(&key) {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(LmmResponse {
                    text: hit.text,
                    usage: hit.usage,
                    latency_ms: clock::millis(self.clock.now().saturating_sub(started)),
                    cached: true,
                    retries: 0,
                });
            }
        }

        let mut retries = 0u32;
        let completion = loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire(self.clock.as_ref());
            }
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            let err = match self.backend.call(req) {
                Ok(c) if c.text.trim().is_empty() => {
                    return Err(LmmError::MalformedResponse("empty completion text".into()))
                }
                Ok(c) => break c,
                Err(e) => e,
            };
            let retryable = match &err {
                CallError::Status { code, .. } => *code == 429 || *code >= 500,
                CallError::Timeout | CallError::Transport(_) => true,
                CallError::Malformed(_) | CallError::Scripted(_) => false,
            };
            if !retryable || retries >= self.retry.max_retries {
                return Err(map_call_error(err, retries));
            }
            let delay = self.retry.delay(retries);
            log::debug!("{} attempt {} failed ({err:?}); retrying in {delay:?}", self.backend.id(), retries + 1);
            self.clock.sleep(delay);
            retries += 1;
        };

        if let (true, Some(cache)) = (use_cache, &self.cache) {
            let entry = CachedResponse {
                model: self.backend.model().to_string(),
                created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                usage: completion.usage,
                text: completion.text.clone(),
            };
            if let Err(e) = cache.put(&key, &entry) {
                log::warn!("cannot write cache entry {key}: {e}");
            }
        }
        Ok(LmmResponse {
            text: completion.text,
            usage: completion.usage,
            latency_ms: clock::millis(self.clock.now().saturating_sub(started)),
            cached: false,
            retries,
        })
    }
}

fn map_call_error(err: CallError, retries: u32) -> LmmError {
    match err {
        CallError::Status {
            code: status @ (401 | 403),
            ..
        } => LmmError::AuthError { status },
        CallError::Status { code: 429, .. } => LmmError::RateLimited { retries },
        CallError::Status { code, .. } if code >= 500 => LmmError::Server { status: code, retries },
        CallError::Status { code, body } => LmmError::Http { status: code, body },
        CallError::Timeout => LmmError::Timeout { retries },
        CallError::Transport(message) => LmmError::Transport { message, retries },
        CallError::Malformed(m) => LmmError::MalformedResponse(m),
        CallError::Scripted(m) => LmmError::Backend(m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn text_req(text: &str) -> LmmRequest {
        LmmRequest::new(StageKind::Multistep, "sys", vec![UserPart::Text(text.into())])
    }

    #[test]
    fn cache_key_properties() {
        let img = RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]));
        let mut img2 = img.clone();
        img2.put_pixel(2, 1, image::Rgb([10, 20, 31]));
        let a = LmmRequest::new(
            StageKind::Multistep,
            "sys",
            vec![UserPart::Text("q".into()), UserPart::Image(ImageAttachment::png(&img))],
        );
        let b = a.clone();
        assert_eq!(cache_key(&a, "m"), cache_key(&b, "m"));
        let mut c = a.clone();
        c.user_parts[1] = UserPart::Image(ImageAttachment::png(&img2));
        assert_ne!(cache_key(&a, "m"), cache_key(&c, "m"));
        let mut d = a.clone();
        d.user_parts.reverse();
        assert_ne!(cache_key(&a, "m"), cache_key(&d, "m"));
        assert_ne!(cache_key(&a, "m"), cache_key(&a, "m2"));
        let mut e = a.clone();
        e.temperature = 0.5;
        assert_ne!(cache_key(&a, "m"), cache_key(&e, "m"));
        // Field boundaries matter: "ab"+"c" vs "a"+"bc".
        let f = LmmRequest::new(StageKind::Multistep, "", vec![UserPart::Text("ab".into()), UserPart::Text("c".into())]);
        let g = LmmRequest::new(StageKind::Multistep, "", vec![UserPart::Text("a".into()), UserPart::Text("bc".into())]);
        assert_ne!(cache_key(&f, "m"), cache_key(&g, "m"));
    }

    #[test]
    fn cache_key_is_pinned() {
        // Guards against accidental changes to the key encoding.
        let k = cache_key(&text_req("hello"), "gpt-4o");
        assert_eq!(k.len(), 64);
        assert_eq!(k, cache_key(&text_req("hello"), "gpt-4o"));
    }

    #[test]
    fn request_validation() {
        assert!(LmmRequest::new(StageKind::Context, "s", vec![]).validate().is_err());
        let empty_img = LmmRequest::new(
            StageKind::Context,
            "s",
            vec![UserPart::Image(ImageAttachment::new("image/png", vec![]))],
        );
        assert!(empty_img.validate().is_err());
        let mut hot = text_req("x");
        hot.temperature = 2.5;
        assert!(hot.validate().is_err());
    }

    #[test]
    fn downscale_limits_longest_side() {
        let big = RgbImage::new(1280, 960);
        let att = ImageAttachment::png_downscaled(&big, 768);
        let decoded = image::load_from_memory(&att.bytes).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (768, 576));
        let small = RgbImage::new(30, 30);
        assert_eq!(ImageAttachment::png_downscaled(&small, 768), ImageAttachment::png(&small));
    }

    #[test]
    fn mock_cache_semantics() {
        let dir = tempfile::TempDir::new().unwrap();
        let script = MockScript::default().with_rule(MockRule::answer("Stop"));
        let client = LmmClient::new(Box::new(MockBackend::new("m", script)))
            .with_cache(ResponseCache::new(dir.path()));
        let req = client.request(StageKind::Multistep, "sys", vec![UserPart::Text("q".into())]);
        let first = client.complete(&req).unwrap();
        assert_eq!((first.text.as_str(), first.cached), ("Stop", false));
        let second = client.complete(&req).unwrap();
        assert_eq!((second.text.as_str(), second.cached), ("Stop", true));
        assert_eq!(client.backend_calls(), 1);
        assert_eq!(client.cache_hits(), 1);
    }

    #[test]
    fn sampled_requests_bypass_cache() {
        let dir = tempfile::TempDir::new().unwrap();
        let client = LmmClient::new(Box::new(MockBackend::new("m", MockScript::default())))
            .with_cache(ResponseCache::new(dir.path()))
            .with_defaults(0.7, 100, 768);
        let req = client.request(StageKind::Multistep, "sys", vec![UserPart::Text("q".into())]);
        client.complete(&req).unwrap();
        client.complete(&req).unwrap();
        assert_eq!(client.backend_calls(), 2);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    struct Scripted {
        replies: Mutex<Vec<Result<Completion, CallError>>>,
    }

    impl LmmBackend for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        fn model(&self) -> &str {
            "s"
        }
        fn call(&self, _: &LmmRequest) -> Result<Completion, CallError> {
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn scripted(replies: Vec<Result<Completion, CallError>>) -> (LmmClient, Arc<FakeClock>) {
        let clock = Arc::new(FakeClock::new());
        let client = LmmClient::new(Box::new(Scripted {
            replies: Mutex::new(replies),
        }))
        .with_clock(clock.clone())
        .with_retry(RetryPolicy::new(2, Duration::from_secs(1), 2.0, 0.0, 0));
        (client, clock)
    }

    fn ok(text: &str) -> Result<Completion, CallError> {
        Ok(Completion {
            text: text.into(),
            usage: Usage::default(),
        })
    }

    fn status(code: u16) -> Result<Completion, CallError> {
        Err(CallError::Status {
            code,
            body: String::new(),
        })
    }

    #[test]
    fn error_mapping() {
        let (c, _) = scripted(vec![status(500), status(502), status(503)]);
        assert!(matches!(c.complete(&text_req("x")), Err(LmmError::Server { status: 503, retries: 2 })));
        let (c, _) = scripted(vec![status(400)]);
        assert!(matches!(c.complete(&text_req("x")), Err(LmmError::Http { status: 400, .. })));
        let (c, _) = scripted(vec![Err(CallError::Timeout), Err(CallError::Timeout), Err(CallError::Timeout)]);
        assert!(matches!(c.complete(&text_req("x")), Err(LmmError::Timeout { retries: 2 })));
        let (c, _) = scripted(vec![ok("  ")]);
        assert!(matches!(c.complete(&text_req("x")), Err(LmmError::MalformedResponse(_))));
        let (c, clock) = scripted(vec![Err(CallError::Timeout), ok("fine")]);
        let r = c.complete(&text_req("x")).unwrap();
        assert_eq!((r.retries, r.latency_ms), (1, 1000));
        assert_eq!(clock.sleeps(), [Duration::from_secs(1)]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackendConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.requests_per_minute = 0;
        assert!(cfg.validate().is_err());
        let cfg = BackendConfig {
            kind: BackendKind::Remote,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(LmmError::Config(_))));
        let cfg = BackendConfig {
            kind: BackendKind::Remote,
            endpoint: Some("http://localhost:1/v1/chat/completions".into()),
            api_key_env: "TSR_TEST_SURELY_UNSET_KEY".into(),
            ..Default::default()
        };
        assert!(matches!(LmmClient::from_config(&cfg), Err(LmmError::Config(_))));
    }
}
