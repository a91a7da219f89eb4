//! Uniform client for all model roles.
//!
//! Every neural model the pipeline talks to — proposer, solver, judge,
//! VQA answerer, cycle judge — sits behind one JSON-over-HTTP protocol
//! (chat completions plus image generations). Each role maps to an
//! endpoint with its own admission limit and retry budget. A deterministic
//! in-process mock backend implements the same surface for offline runs,
//! and a record/replay layer can capture every wire exchange.

mod capture;
mod mock;
mod remote;

pub use capture::CaptureMode;
pub use mock::{
    malformed_judge_fixtures, normalize_tokens, read_image_metadata, ImageMetadata,
    MalformedFixture,
};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, EndpointConfig, PipelineConfig, Role};
use crate::rng::derive_rng;
use crate::store::{sha256_hex, ContentKind, ContentRef, Store, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatPart {
    Text(String),
    Image(ContentRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        // deterministic scoring default; samplers override per call
        DecodeParams {
            temperature: 0.0,
            seed: None,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user_turns: Vec<ChatPart>,
    pub decode: DecodeParams,
}

impl ChatRequest {
    pub fn text_only(system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            system: system.into(),
            user_turns: vec![ChatPart::Text(user.into())],
            decode: DecodeParams::default(),
        }
    }

    /// All text parts joined, with image parts rendered as a placeholder.
    pub fn flat_text(&self) -> String {
        let mut out = String::new();
        if !self.system.is_empty() {
            out.push_str(&self.system);
            out.push_str("\n\n");
        }
        for part in &self.user_turns {
            match part {
                ChatPart::Text(t) => {
                    out.push_str(t);
                    out.push('\n');
                }
                ChatPart::Image(_) => out.push_str("[Image]\n"),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub prompt: String,
    pub seed: u64,
    pub cfg_text_scale: f64,
    pub width: u32,
    pub height: u32,
}

impl ImageRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::Precondition("image prompt is empty".into()));
        }
        if self.cfg_text_scale <= 0.0 {
            return Err(GatewayError::Precondition(
                "cfg_text_scale must be positive".into(),
            ));
        }
        for (label, v) in [("width", self.width), ("height", self.height)] {
            if !(256..=2048).contains(&v) {
                return Err(GatewayError::Precondition(format!(
                    "{label} {v} outside [256, 2048]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("request timed out after {retries} retries")]
    Timeout { retries: u32 },
    #[error("rate limited after {retries} retries")]
    RateLimited { retries: u32 },
    #[error("protocol error (status {status}): {excerpt}")]
    ProtocolError { status: u16, excerpt: String },
    #[error("endpoint returned an empty completion")]
    EmptyCompletion,
    #[error("response bytes do not decode as PNG: {0}")]
    UndecodableImage(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no recorded response for request {key} (replay mode)")]
    ReplayMiss { key: String },
}

impl GatewayError {
    fn retryable(&self) -> bool {
        match self {
            GatewayError::Timeout { .. } | GatewayError::RateLimited { .. } => true,
            GatewayError::ProtocolError { status, .. } => {
                *status == 408 || *status == 429 || *status >= 500
            }
            _ => false,
        }
    }
}

/// The surface stages program against; [`Gateway`] is the real
/// implementation and tests may wrap it to inject faults.
pub trait ModelClient: Sync {
    fn complete_text(&self, role: Role, request: &ChatRequest) -> Result<String, GatewayError>;
    fn generate_image(&self, role: Role, request: &ImageRequest)
        -> Result<ContentRef, GatewayError>;
    /// One question per call; answers must not leak between questions.
    fn answer_visual(
        &self,
        role: Role,
        image: &ContentRef,
        question: &str,
    ) -> Result<String, GatewayError>;
}

/// Counting limiter bounding in-flight requests per endpoint.
struct Limiter {
    max: usize,
    active: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            max,
            active: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.cv.wait(active).unwrap();
        }
        *active += 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().unwrap();
        *active -= 1;
        self.limiter.cv.notify_one();
    }
}

enum Backend {
    Mock(mock::MockBackend),
    Remote(remote::RemoteBackend),
}

struct Endpoint {
    cfg: EndpointConfig,
    limiter: Limiter,
    backend: Backend,
    retries_total: AtomicU64,
    calls_total: AtomicU64,
}

/// Shared client over all configured endpoints.
pub struct Gateway {
    master_seed: u64,
    endpoints: std::collections::BTreeMap<Role, Endpoint>,
    store: Arc<Store>,
    capture: capture::Capture,
}

const BACKOFF_BASE_MS: u64 = 200;
const BACKOFF_CAP_MS: u64 = 4_000;

impl Gateway {
    pub fn new(
        config: &PipelineConfig,
        store: Arc<Store>,
        capture_mode: CaptureMode,
    ) -> Result<Self, GatewayError> {
        let mut endpoints = std::collections::BTreeMap::new();
        for role in Role::ALL {
            let cfg = config.endpoint(role).clone();
            let backend = match cfg.backend {
                BackendKind::Mock => Backend::Mock(mock::MockBackend::new(
                    role,
                    cfg.mock.clone().unwrap_or_default(),
                    config.master_seed,
                    Arc::clone(&store),
                )),
                BackendKind::Remote => {
                    Backend::Remote(remote::RemoteBackend::new(role, &cfg, Arc::clone(&store))?)
                }
            };
            endpoints.insert(
                role,
                Endpoint {
                    limiter: Limiter::new(cfg.max_in_flight),
                    backend,
                    retries_total: AtomicU64::new(0),
                    calls_total: AtomicU64::new(0),
                    cfg,
                },
            );
        }
        Ok(Gateway {
            master_seed: config.master_seed,
            endpoints,
            store,
            capture: capture::Capture::open(capture_mode)?,
        })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    fn endpoint(&self, role: Role) -> &Endpoint {
        self.endpoints.get(&role).expect("all roles configured")
    }

    /// Total retries performed against one endpoint (observability hook).
    pub fn retries(&self, role: Role) -> u64 {
        self.endpoint(role).retries_total.load(Ordering::Relaxed)
    }

    pub fn calls(&self, role: Role) -> u64 {
        self.endpoint(role).calls_total.load(Ordering::Relaxed)
    }

    /// Highest concurrent request count the mock backend has observed.
    pub fn mock_high_water(&self, role: Role) -> Option<usize> {
        match &self.endpoint(role).backend {
            Backend::Mock(m) => Some(m.high_water()),
            Backend::Remote(_) => None,
        }
    }

    fn validate_chat(&self, role: Role, request: &ChatRequest) -> Result<(), GatewayError> {
        if role == Role::Solver {
            return Err(GatewayError::Precondition(
                "role solver does not accept text completion".into(),
            ));
        }
        if request.user_turns.is_empty() {
            return Err(GatewayError::Precondition(
                "chat request needs at least one user part".into(),
            ));
        }
        let image_ok = matches!(role, Role::Vqa | Role::Judge | Role::CycleJudge);
        for part in &request.user_turns {
            if matches!(part, ChatPart::Image(_)) && !image_ok {
                return Err(GatewayError::Precondition(format!(
                    "image parts are not permitted for role {role}"
                )));
            }
        }
        Ok(())
    }

    fn with_retries<T>(
        &self,
        role: Role,
        request_key: &str,
        mut call: impl FnMut() -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let ep = self.endpoint(role);
        let mut jitter = derive_rng(
            self.master_seed,
            "gateway.backoff",
            &format!("{role}/{request_key}"),
        );
        let mut attempt: u32 = 0;
        loop {
            ep.calls_total.fetch_add(1, Ordering::Relaxed);
            let _guard = ep.limiter.acquire();
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() && attempt < ep.cfg.max_retries => {
                    ep.retries_total.fetch_add(1, Ordering::Relaxed);
                    let base = (BACKOFF_BASE_MS << attempt).min(BACKOFF_CAP_MS);
                    let sleep_ms = jitter.gen_range(0..=base);
                    log::warn!(
                        "{role}: retrying after {e} (attempt {} of {}, backoff {sleep_ms}ms)",
                        attempt + 1,
                        ep.cfg.max_retries
                    );
                    drop(_guard);
                    std::thread::sleep(Duration::from_millis(sleep_ms));
                    attempt += 1;
                }
                Err(e) => {
                    // normalize terminal transient errors to carry the retry count
                    return Err(match e {
                        GatewayError::Timeout { .. } => GatewayError::Timeout { retries: attempt },
                        GatewayError::RateLimited { .. } => {
                            GatewayError::RateLimited { retries: attempt }
                        }
                        other => other,
                    });
                }
            }
        }
    }

    fn chat_key(role: Role, request: &ChatRequest) -> String {
        let body = serde_json::to_vec(request).expect("chat request serializes");
        sha256_hex(&[format!("chat/{role}/").as_bytes(), &body].concat())
    }

    fn image_key(role: Role, request: &ImageRequest) -> String {
        let body = serde_json::to_vec(request).expect("image request serializes");
        sha256_hex(&[format!("image/{role}/").as_bytes(), &body].concat())
    }
}

impl ModelClient for Gateway {
    fn complete_text(&self, role: Role, request: &ChatRequest) -> Result<String, GatewayError> {
        self.validate_chat(role, request)?;
        let key = Self::chat_key(role, request);
        if let Some(text) = self.capture.replay_chat(&key)? {
            return Ok(text);
        }
        let ep = self.endpoint(role);
        let text = self.with_retries(role, &key, || match &ep.backend {
            Backend::Mock(m) => m.complete_chat(request),
            Backend::Remote(r) => r.complete_chat(request),
        })?;
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        self.capture.record_chat(role, &key, request, &text)?;
        Ok(text)
    }

    fn generate_image(
        &self,
        role: Role,
        request: &ImageRequest,
    ) -> Result<ContentRef, GatewayError> {
        request.validate()?;
        let key = Self::image_key(role, request);
        if let Some(bytes) = self.capture.replay_image(&key)? {
            decode_png_check(&bytes)?;
            return Ok(self.store.put(&bytes, ContentKind::Image)?);
        }
        let ep = self.endpoint(role);
        let bytes = self.with_retries(role, &key, || match &ep.backend {
            Backend::Mock(m) => m.generate_image(request),
            Backend::Remote(r) => r.generate_image(request),
        })?;
        decode_png_check(&bytes)?;
        let r = self.store.put(&bytes, ContentKind::Image)?;
        self.capture.record_image(role, &key, request, &bytes)?;
        Ok(r)
    }

    fn answer_visual(
        &self,
        role: Role,
        image: &ContentRef,
        question: &str,
    ) -> Result<String, GatewayError> {
        if image.kind != ContentKind::Image {
            return Err(GatewayError::Precondition(format!(
                "answer_visual needs an image ref, got {}",
                image.kind
            )));
        }
        let request = ChatRequest {
            system: String::new(),
            user_turns: vec![
                ChatPart::Image(image.clone()),
                ChatPart::Text(question.to_string()),
            ],
            decode: DecodeParams::default(),
        };
        self.complete_text(role, &request)
    }
}

/// Confirms the bytes decode as a PNG image.
pub fn decode_png_check(bytes: &[u8]) -> Result<(), GatewayError> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    reader
        .next_frame(&mut buf)
        .map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
    Ok(())
}
