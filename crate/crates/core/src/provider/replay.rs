//! Record/replay fixtures for provider exchanges.
//!
//! Recording wraps a live provider and writes each (request, reply) pair to
//! `<dir>/<fingerprint>.json`; replay serves exclusively from such fixtures
//! and never touches the network. Fixture files keep the full request for
//! debuggability, but lookup goes by content fingerprint alone.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::provider::{ChatProvider, ChatRequest, ProviderError, ProviderId};
use crate::scene_io::{self, ScenePair, SCHEMA_VERSION};

#[derive(Debug, Serialize, Deserialize)]
struct Fixture {
    schema: u32,
    provider: String,
    fingerprint: String,
    request: ChatRequest,
    reply: String,
}

pub struct ReplayProvider {
    id: ProviderId,
    dir: PathBuf,
}

impl ReplayProvider {
    pub fn new(id: impl Into<ProviderId>, dir: impl Into<PathBuf>) -> Self {
        ReplayProvider {
            id: id.into(),
            dir: dir.into(),
        }
    }
}

impl ChatProvider for ReplayProvider {
    fn id(&self) -> &ProviderId {
        &self.id
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let fingerprint = request.fingerprint();
        let path = self.dir.join(format!("{fingerprint}.json"));
        if !path.is_file() {
            return Err(ProviderError::ReplayMiss {
                provider: self.id.to_string(),
                fingerprint,
            });
        }
        let fixture: Fixture = scene_io::load_json(&path).map_err(|err| ProviderError::Api {
            provider: self.id.to_string(),
            message: format!("unreadable fixture: {err}"),
        })?;
        Ok(fixture.reply)
    }
}

/// Wraps another provider and persists every successful exchange.
pub struct RecordingProvider {
    inner: Arc<dyn ChatProvider>,
    dir: PathBuf,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn ChatProvider>, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(RecordingProvider { inner, dir })
    }
}

impl ChatProvider for RecordingProvider {
    fn id(&self) -> &ProviderId {
        self.inner.id()
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let reply = self.inner.chat(request)?;
        let fingerprint = request.fingerprint();
        let fixture = Fixture {
            schema: SCHEMA_VERSION,
            provider: self.inner.id().to_string(),
            fingerprint: fingerprint.clone(),
            request: request.clone(),
            reply: reply.clone(),
        };
        let path = self.dir.join(format!("{fingerprint}.json"));
        scene_io::save_json(&fixture, &path).map_err(|err| ProviderError::Api {
            provider: self.inner.id().to_string(),
            message: format!("failed to record fixture: {err}"),
        })?;
        Ok(reply)
    }

    fn observe_scene(&self, scene: &ScenePair) {
        self.inner.observe_scene(scene);
    }
}
