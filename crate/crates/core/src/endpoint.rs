//! Chat-with-image endpoints used for guidance generation and simulated review.
//!
//! The HTTP contract is the chat-completions shape: a `POST` to
//! `{base_url}/chat/completions` with one user message holding the prompt text
//! and one image part (a URL or a base64 data URL); the reply text is read
//! from `choices[0].message.content`. Deterministic mock clients implement the
//! same trait so the whole pipeline runs offline.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingestion::CaseEntry;

/// Image payload handed to an endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageData {
    Url(String),
    Inline { mime: &'static str, bytes: Vec<u8> },
}

impl ImageData {
    /// `http(s)://` or `data:` URL as-is, inline bytes as a base64 data URL.
    pub fn to_url(&self) -> String {
        match self {
            ImageData::Url(u) => u.clone(),
            ImageData::Inline { mime, bytes } => format!(
                "data:{mime};base64,{}",
                base64::engine::general_purpose::STANDARD.encode(bytes)
            ),
        }
    }
}

pub fn is_remote_reference(reference: &str) -> bool {
    reference.starts_with("http://") || reference.starts_with("https://") || reference.starts_with("data:")
}

pub fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

/// Resolves a manifest image reference; relative paths are joined to `base_dir`.
pub fn load_image(case: &CaseEntry, base_dir: &Path) -> Result<ImageData> {
    if is_remote_reference(&case.image) {
        return Ok(ImageData::Url(case.image.clone()));
    }
    let path = base_dir.join(&case.image);
    match std::fs::read(&path) {
        Ok(bytes) if !bytes.is_empty() => Ok(ImageData::Inline {
            mime: mime_for(&path),
            bytes,
        }),
        Ok(_) => Err(Error::ImageUnreadable {
            case_id: case.case_id.clone(),
            reason: format!("{} is empty", path.display()),
        }),
        Err(e) => Err(Error::ImageUnreadable {
            case_id: case.case_id.clone(),
            reason: format!("{}: {e}", path.display()),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EndpointError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {0}")]
    Status(u16),
    #[error("malformed endpoint reply: {0}")]
    Malformed(String),
}

pub struct VlmRequest<'a> {
    pub case_id: &'a str,
    pub label: &'a str,
    pub image: &'a ImageData,
    pub prompt: &'a str,
}

pub trait VlmClient: Send + Sync {
    fn model_id(&self) -> &str;

    fn complete(&self, request: &VlmRequest<'_>) -> std::result::Result<String, EndpointError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointKind {
    /// Chat-completions HTTP API.
    Http,
    /// Guidance mock: templated favor/against JSON.
    Mock,
    /// Reviewer mock answering "present" for every flagged label.
    MockEcho,
    /// Reviewer mock answering "absent" for every flagged label.
    MockAbsent,
    /// Reviewer mock answering present/absent from a hash of the request.
    MockHash,
    /// Every call times out.
    MockTimeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmEndpointConfig {
    pub kind: EndpointKind,
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub temperature: f64,
}

impl Default for VlmEndpointConfig {
    fn default() -> Self {
        Self {
            kind: EndpointKind::Mock,
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_id: "mock-vlm".into(),
            token_env: None,
            timeout_secs: 60.0,
            max_retries: 2,
            max_parallel: 4,
            temperature: 0.0,
        }
    }
}

impl VlmEndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(Error::Config("endpoint timeout must be positive".into()));
        }
        if self.max_parallel == 0 {
            return Err(Error::Config("endpoint max_parallel must be at least 1".into()));
        }
        if self.model_id.is_empty() {
            return Err(Error::Config("endpoint model_id must be set".into()));
        }
        Ok(())
    }

    /// Builds the client; `seed` only affects the hash-based mock.
    pub fn client(&self, seed: u64) -> Result<Box<dyn VlmClient>> {
        self.validate()?;
        Ok(match self.kind {
            EndpointKind::Http => Box::new(HttpVlmClient::new(self)?),
            EndpointKind::Mock => Box::new(MockVlm::new(&self.model_id, MockBehavior::Guidance, seed)),
            EndpointKind::MockEcho => Box::new(MockVlm::new(&self.model_id, MockBehavior::Present, seed)),
            EndpointKind::MockAbsent => Box::new(MockVlm::new(&self.model_id, MockBehavior::Absent, seed)),
            EndpointKind::MockHash => Box::new(MockVlm::new(&self.model_id, MockBehavior::Hashed, seed)),
            EndpointKind::MockTimeout => Box::new(MockVlm::new(&self.model_id, MockBehavior::Timeout, seed)),
        })
    }
}

pub struct HttpVlmClient {
    agent: ureq::Agent,
    url: String,
    model_id: String,
    token: Option<String>,
    temperature: f64,
}

impl HttpVlmClient {
    pub fn new(config: &VlmEndpointConfig) -> Result<Self> {
        let token = match &config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model_id: config.model_id.clone(),
            token,
            temperature: config.temperature,
        })
    }
}

impl VlmClient for HttpVlmClient {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &VlmRequest<'_>) -> std::result::Result<String, EndpointError> {
        let body = json!({
            "model": self.model_id,
            "temperature": self.temperature,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": request.prompt},
                    {"type": "image_url", "image_url": {"url": request.image.to_url()}},
                ],
            }],
        });
        let mut call = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = call.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => EndpointError::Timeout,
            other => EndpointError::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(EndpointError::Status(status));
        }
        let reply: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| EndpointError::Malformed(e.to_string()))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| EndpointError::Malformed("no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockBehavior {
    Guidance,
    Present,
    Absent,
    Hashed,
    Timeout,
}

/// Deterministic offline endpoint. Replies depend only on
/// `(seed, case_id, label)` and the behavior.
pub struct MockVlm {
    model_id: String,
    behavior: MockBehavior,
    seed: u64,
    calls: AtomicUsize,
}

const MOCK_ZONES: [&str; 6] = [
    "right upper lobe",
    "right lower lobe",
    "left upper lobe",
    "left lower lobe",
    "left costophrenic angle",
    "perihilar region",
];

const MOCK_MIMICS: [&str; 5] = [
    "overlying soft tissue",
    "vascular crowding from low lung volumes",
    "patient rotation",
    "a normal variant of the cardiac silhouette",
    "subsegmental scarring",
];

impl MockVlm {
    pub fn new(model_id: &str, behavior: MockBehavior, seed: u64) -> Self {
        Self {
            model_id: model_id.to_string(),
            behavior,
            seed,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn digest(&self, case_id: &str, label: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(case_id.as_bytes());
        h.update([0]);
        h.update(label.as_bytes());
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
    }
}

impl VlmClient for MockVlm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &VlmRequest<'_>) -> std::result::Result<String, EndpointError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let h = self.digest(request.case_id, request.label);
        match self.behavior {
            MockBehavior::Timeout => Err(EndpointError::Timeout),
            MockBehavior::Present => Ok("present".into()),
            MockBehavior::Absent => Ok("absent".into()),
            MockBehavior::Hashed => Ok(if h.is_multiple_of(2) { "present" } else { "absent" }.into()),
            MockBehavior::Guidance => {
                let zone = MOCK_ZONES[(h % MOCK_ZONES.len() as u64) as usize];
                let mimic = MOCK_MIMICS[((h >> 8) % MOCK_MIMICS.len() as u64) as usize];
                let body = json!({
                    "label": request.label,
                    "favor": format!(
                        "Increased opacity in the {zone} with ill-defined borders is compatible with {} (case {}, ref {:04x}).",
                        request.label, request.case_id, h & 0xffff
                    ),
                    "against": format!(
                        "The appearance is better explained by {mimic}; the expected distribution of {} is not seen (ref {:04x}).",
                        request.label, (h >> 16) & 0xffff
                    ),
                })
                .to_string();
                Ok(if h.is_multiple_of(3) {
                    format!("Here is my assessment:\n```json\n{body}\n```\n")
                } else {
                    body
                })
            }
        }
    }
}

/// Maps `f` over `items` on at most `max_parallel` worker threads. Results are
/// funnelled through one channel to the calling thread and returned in input
/// order.
pub fn parallel_map<T, R, F>(items: &[T], max_parallel: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = max_parallel.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            slots[i] = Some(r);
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every item produced a result"))
        .collect()
}
