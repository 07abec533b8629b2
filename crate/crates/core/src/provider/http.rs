//! Live JSON-over-HTTPS provider adapter.
//!
//! Speaks a small gateway wire format: the request document is the
//! [`ChatRequest`] serialization itself, the response must carry the reply
//! text under `"reply"`:
//!
//! ```text
//! POST <endpoint>
//! authorization: Bearer $XMODAL_<NAME>_KEY      (when the variable is set)
//! { "system_text": ..., "parts": [{"text": ...}, {"image_ref": ...}], "temperature": 0.0 }
//! -> { "reply": "..." }
//! ```
//!
//! The endpoint comes from configuration (`providers.<name>.endpoint`); the
//! credential is only ever read from the environment, never from files.

use serde::Deserialize;
use ureq::Agent;

use crate::provider::{ChatProvider, ChatRequest, ProviderError, ProviderId};

#[derive(Deserialize)]
struct WireReply {
    reply: String,
}

pub struct HttpProvider {
    id: ProviderId,
    endpoint: String,
    api_key: Option<String>,
    agent: Agent,
}

/// Environment variable holding the credential for a provider name:
/// `XMODAL_<NAME>_KEY` with the name uppercased and non-alphanumerics
/// folded to underscores.
pub fn key_env_var(name: &str) -> String {
    let folded: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("XMODAL_{folded}_KEY")
}

impl HttpProvider {
    pub fn new(id: impl Into<ProviderId>, endpoint: impl Into<String>) -> Self {
        let id = id.into();
        let api_key = std::env::var(key_env_var(id.as_str())).ok();
        HttpProvider {
            id,
            endpoint: endpoint.into(),
            api_key,
            agent: Agent::new_with_defaults(),
        }
    }

    fn transport(&self, message: impl Into<String>) -> ProviderError {
        ProviderError::Transport {
            provider: self.id.to_string(),
            message: message.into(),
        }
    }
}

impl ChatProvider for HttpProvider {
    fn id(&self) -> &ProviderId {
        &self.id
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let mut post = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            post = post.header("authorization", format!("Bearer {key}"));
        }
        let response = post.send_json(request).map_err(|err| match err {
            // client-side request errors are not retryable
            ureq::Error::StatusCode(code) if (400..500).contains(&code) => ProviderError::Api {
                provider: self.id.to_string(),
                message: format!("endpoint returned status {code}"),
            },
            other => self.transport(other.to_string()),
        })?;
        let wire: WireReply =
            response
                .into_body()
                .read_json()
                .map_err(|err| ProviderError::Api {
                    provider: self.id.to_string(),
                    message: format!("response is missing a `reply` field: {err}"),
                })?;
        Ok(wire.reply)
    }
}
