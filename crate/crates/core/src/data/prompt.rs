//! The four-frame caption prompt template and the caption-provider client
//! (deterministic mock for offline use, HTTP client for a real endpoint).

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CAPTION_ENDPOINT_ENV: &str = "SONOTIME_CAPTION_ENDPOINT";
pub const CAPTION_TIMEOUT_ENV: &str = "SONOTIME_CAPTION_TIMEOUT_MS";
const DEFAULT_TIMEOUT_MS: u64 = 5_000;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("caption prompts require exactly four frames, got {0}")]
    WrongFrameCount(usize),
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("network error: {0}")]
    Network(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned status {0}")]
    Status(u16),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("provider not configured: {0}")]
    NotConfigured(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Four frame descriptors plus the task framing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub frames: Vec<String>,
    pub task: String,
    pub instruction: String,
}

/// Renders the four-frame temporal-cue prompt. The keyword column is padded
/// to a fixed width and each frame descriptor is wrapped in `<Img>`
/// delimiters; the exact rendering is pinned by a golden fixture.
pub fn build_caption_prompt(req: &CaptionRequest) -> Result<String, PromptError> {
    if req.frames.len() != 4 {
        return Err(PromptError::WrongFrameCount(req.frames.len()));
    }
    let cues = ["First", "Then", "After that", "Finally"];
    let mut out = String::new();
    for (cue, frame) in cues.iter().zip(req.frames.iter()) {
        out.push_str(&format!("{cue:<10},<Img>{frame}<Img>.\n"));
    }
    out.push_str(&format!("{} {}", req.task, req.instruction));
    Ok(out)
}

/// Anything that can turn a frame sequence into a sound caption.
pub trait CaptionProvider {
    fn describe(&self, req: &CaptionRequest) -> Result<String, ProviderError>;
}

/// Deterministic offline provider: canned captions keyed by the joined frame
/// identifiers, with a stable fallback.
#[derive(Debug, Clone, Default)]
pub struct MockCaptionProvider {
    pub fixtures: BTreeMap<String, String>,
}

impl MockCaptionProvider {
    pub fn with_fixtures(fixtures: BTreeMap<String, String>) -> Self {
        Self { fixtures }
    }

    fn key(req: &CaptionRequest) -> String {
        req.frames.join("|")
    }
}

impl CaptionProvider for MockCaptionProvider {
    fn describe(&self, req: &CaptionRequest) -> Result<String, ProviderError> {
        build_caption_prompt(req)?;
        let key = Self::key(req);
        Ok(self
            .fixtures
            .get(&key)
            .cloned()
            .unwrap_or_else(|| format!("a sound matching frames {key}")))
    }
}

/// HTTP provider: POSTs `{"prompt": ...}` and expects `{"caption": ...}`.
#[derive(Debug, Clone)]
pub struct HttpCaptionProvider {
    pub endpoint: String,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct PromptBody<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CaptionBody {
    caption: String,
}

impl HttpCaptionProvider {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
        }
    }

    /// Reads the endpoint and timeout from the environment.
    pub fn from_env() -> Result<Self, ProviderError> {
        let endpoint = std::env::var(CAPTION_ENDPOINT_ENV)
            .map_err(|_| ProviderError::NotConfigured(format!("{CAPTION_ENDPOINT_ENV} unset")))?;
        let timeout_ms = std::env::var(CAPTION_TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
            .unwrap_or(DEFAULT_TIMEOUT_MS);
        Ok(Self::new(endpoint, Duration::from_millis(timeout_ms)))
    }
}

impl CaptionProvider for HttpCaptionProvider {
    fn describe(&self, req: &CaptionRequest) -> Result<String, ProviderError> {
        let prompt = build_caption_prompt(req)?;
        let response = ureq::post(&self.endpoint)
            .timeout(self.timeout)
            .send_json(PromptBody { prompt: &prompt });
        match response {
            Ok(resp) => resp
                .into_json::<CaptionBody>()
                .map(|b| b.caption)
                .map_err(|e| ProviderError::BadResponse(e.to_string())),
            Err(ureq::Error::Status(code, _)) => Err(ProviderError::Status(code)),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("timeout") {
                    Err(ProviderError::Timeout)
                } else {
                    Err(ProviderError::Network(msg))
                }
            }
        }
    }
}
