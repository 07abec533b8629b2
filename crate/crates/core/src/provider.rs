//! Vision-language provider adapters.
//!
//! Every external model is reached through [`ChatProvider`]: a request goes
//! in, reply text comes out. Four adapters cover the pipeline's needs:
//!
//! * [`mock::MockProvider`] — deterministic offline stand-in that answers
//!   description, debate, judge, and matching prompts from synthetic ground
//!   truth (with a configurable hallucination rate).
//! * [`replay::ReplayProvider`] — serves replies from recorded fixtures,
//!   never touching the network.
//! * [`replay::RecordingProvider`] — wraps another provider and writes each
//!   exchange as a fixture for later replay.
//! * [`http::HttpProvider`] — live JSON-over-HTTPS adapter; endpoint from
//!   configuration, credential from `XMODAL_<NAME>_KEY`.

pub mod http;
pub mod mock;
pub mod replay;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_io::ScenePair;
use crate::util::fnv1a64;

/// Name a provider is registered under (e.g. "gpt4", "gemini", "mock").
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProviderId(pub String);

impl ProviderId {
    pub fn new(name: impl Into<String>) -> Self {
        ProviderId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ProviderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ProviderId {
    fn from(s: &str) -> Self {
        ProviderId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatPart {
    Text(String),
    /// Reference to image content (a path, optionally with a crop region
    /// fragment). Adapters that cannot ship pixels pass the reference on.
    ImageRef(String),
}

/// One request to a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub parts: Vec<ChatPart>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        ChatRequest {
            system_text: None,
            parts: vec![ChatPart::Text(prompt.into())],
            temperature: 0.0,
        }
    }

    pub fn push_image(&mut self, reference: impl Into<String>) {
        self.parts.push(ChatPart::ImageRef(reference.into()));
    }

    /// All text parts joined with newlines; what mocks and fingerprints see.
    pub fn joined_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ChatPart::Text(t) => Some(t.as_str()),
                ChatPart::ImageRef(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Stable content fingerprint, used as the record/replay fixture key.
    pub fn fingerprint(&self) -> String {
        let temp = format!("{:.4}", self.temperature);
        let mut parts: Vec<&[u8]> = Vec::new();
        if let Some(system) = &self.system_text {
            parts.push(system.as_bytes());
        }
        let tagged: Vec<String> = self
            .parts
            .iter()
            .map(|p| match p {
                ChatPart::Text(t) => format!("text:{t}"),
                ChatPart::ImageRef(r) => format!("image:{r}"),
            })
            .collect();
        for t in &tagged {
            parts.push(t.as_bytes());
        }
        parts.push(temp.as_bytes());
        format!("{:016x}", fnv1a64(&parts))
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    /// Transient transport problem; the dispatch layer retries these.
    #[error("provider `{provider}`: transport failure: {message}")]
    Transport { provider: String, message: String },
    #[error("provider `{provider}`: replay miss for request {fingerprint}")]
    ReplayMiss {
        provider: String,
        fingerprint: String,
    },
    #[error("provider `{name}` is not registered")]
    NotRegistered { name: String },
    #[error("provider `{provider}`: {message}")]
    Api { provider: String, message: String },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport { .. })
    }
}

/// A chat-capable model adapter. Implementations must be usable from
/// multiple threads; deterministic providers must answer identical requests
/// identically.
pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &ProviderId;

    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError>;

    /// Hook for providers that need scene context (the mock looks up
    /// ground-truth identities here). Default: ignore.
    fn observe_scene(&self, _scene: &ScenePair) {}
}

/// Number of attempts made for transport failures (1 initial + 2 retries).
pub const RETRY_ATTEMPTS: u32 = 3;

/// Dispatch a request with bounded exponential backoff on transport
/// failures. Non-retryable errors surface immediately.
pub fn chat_with_retry(
    provider: &dyn ChatProvider,
    request: &ChatRequest,
) -> Result<String, ProviderError> {
    let mut delay = Duration::from_millis(25);
    let mut last_err = None;
    for attempt in 0..RETRY_ATTEMPTS {
        match provider.chat(request) {
            Ok(reply) => return Ok(reply),
            Err(err) if err.is_retryable() && attempt + 1 < RETRY_ATTEMPTS => {
                log::warn!(
                    "provider `{}` transport failure, retrying: {err}",
                    provider.id()
                );
                std::thread::sleep(delay);
                delay *= 2;
                last_err = Some(err);
            }
            Err(err) => return Err(err),
        }
    }
    Err(last_err.expect("loop exits via return unless a retryable error was stored"))
}

/// Lookup table for configured providers.
#[derive(Default, Clone)]
pub struct ProviderRegistry {
    providers: BTreeMap<ProviderId, Arc<dyn ChatProvider>>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, provider: Arc<dyn ChatProvider>) {
        self.providers.insert(provider.id().clone(), provider);
    }

    pub fn get(&self, id: &ProviderId) -> Result<&Arc<dyn ChatProvider>, ProviderError> {
        self.providers
            .get(id)
            .ok_or_else(|| ProviderError::NotRegistered {
                name: id.to_string(),
            })
    }

    pub fn contains(&self, id: &ProviderId) -> bool {
        self.providers.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ProviderId> {
        self.providers.keys()
    }

    /// Give every registered provider a look at the scene before any
    /// requests about it are made.
    pub fn observe_scene(&self, scene: &ScenePair) {
        for provider in self.providers.values() {
            provider.observe_scene(scene);
        }
    }
}

impl fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderRegistry")
            .field("providers", &self.providers.keys().collect::<Vec<_>>())
            .finish()
    }
}
