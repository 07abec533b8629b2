//! Pipeline configuration: a TOML file plus flag overrides.
//!
//! Credentials never appear in configuration files; live providers read
//! their key from `XMODAL_<NAME>_KEY` at construction time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use xmodal_core::debate::{DebateConfig, DEFAULT_JUDGE, DEFAULT_MAX_ROUNDS};
use xmodal_core::matcher::MatchWeights;
use xmodal_core::provider::http::HttpProvider;
use xmodal_core::provider::mock::MockProvider;
use xmodal_core::provider::replay::{RecordingProvider, ReplayProvider};
use xmodal_core::provider::{ChatProvider, ProviderId, ProviderRegistry};
use xmodal_core::scene_io::Modality;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("provider `{0}` is referenced but not configured")]
    UnknownProvider(String),
    #[error("pipeline.roster must not be empty")]
    EmptyRoster,
    #[error("{0}")]
    Bad(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lowercase")]
pub enum MatcherKind {
    Llm,
    Structural,
    Overlap,
}

impl std::fmt::Display for MatcherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatcherKind::Llm => f.write_str("llm"),
            MatcherKind::Structural => f.write_str("structural"),
            MatcherKind::Overlap => f.write_str("overlap"),
        }
    }
}

impl FromStr for MatcherKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "llm" => Ok(MatcherKind::Llm),
            "structural" => Ok(MatcherKind::Structural),
            "overlap" => Ok(MatcherKind::Overlap),
            other => Err(ConfigError::Bad(format!("unknown matcher `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Deterministic offline provider driven by synthetic ground truth.
    Mock {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        hallucination: f64,
    },
    /// Serves recorded fixtures; never touches the network.
    Replay { dir: PathBuf },
    /// Live JSON-over-HTTPS gateway endpoint.
    Http { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    /// Providers asked for descriptions (and debating, when enabled).
    pub roster: Vec<String>,
    pub judge: String,
    pub debate: bool,
    pub max_rounds: usize,
    pub matcher: MatcherKind,
    /// Provider answering matching prompts; defaults to the first roster
    /// entry.
    pub match_provider: Option<String>,
    pub w_pos: f64,
    pub w_attr: f64,
    pub tau: f64,
    /// Overlap-matcher IoU threshold.
    pub iou_thresh: f64,
    /// Evaluation IoU threshold for AP.
    pub ap_iou: f64,
    pub fusion_frame: Modality,
    pub margin_ratio: f64,
    pub parallelism: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        let weights = MatchWeights::default();
        PipelineSettings {
            roster: vec!["mock".to_string()],
            judge: DEFAULT_JUDGE.to_string(),
            debate: false,
            max_rounds: DEFAULT_MAX_ROUNDS,
            matcher: MatcherKind::Structural,
            match_provider: None,
            w_pos: weights.w_pos,
            w_attr: weights.w_attr,
            tau: weights.tau,
            iou_thresh: 0.5,
            ap_iou: xmodal_core::eval::DEFAULT_AP_IOU,
            fusion_frame: Modality::Thermal,
            margin_ratio: xmodal_core::appearance::DEFAULT_MARGIN_RATIO,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineSettings,
    pub providers: BTreeMap<String, ProviderConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut providers = BTreeMap::new();
        providers.insert(
            "mock".to_string(),
            ProviderConfig::Mock {
                seed: 0,
                hallucination: 0.0,
            },
        );
        PipelineConfig {
            pipeline: PipelineSettings::default(),
            providers,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn weights(&self) -> MatchWeights {
        MatchWeights {
            w_pos: self.pipeline.w_pos,
            w_attr: self.pipeline.w_attr,
            tau: self.pipeline.tau,
        }
    }

    pub fn debate_config(&self) -> DebateConfig {
        DebateConfig {
            debaters: self.pipeline.roster.iter().map(ProviderId::new).collect(),
            judge: ProviderId::new(&self.pipeline.judge),
            max_rounds: self.pipeline.max_rounds,
        }
    }

    pub fn match_provider(&self) -> ProviderId {
        ProviderId::new(
            self.pipeline
                .match_provider
                .clone()
                .unwrap_or_else(|| self.pipeline.roster.first().cloned().unwrap_or_default()),
        )
    }

    /// Names the run will actually call providers under.
    fn required_providers(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.pipeline.matcher != MatcherKind::Overlap {
            names.extend(self.pipeline.roster.iter().cloned());
            if self.pipeline.debate {
                names.push(self.pipeline.judge.clone());
            }
            if self.pipeline.matcher == MatcherKind::Llm {
                names.push(self.match_provider().to_string());
            }
        }
        names.sort();
        names.dedup();
        names
    }

    /// Instantiate every required provider.
    ///
    /// `record_dir` wraps each provider so exchanges are written as replay
    /// fixtures; `replay_dir` replaces live (http) providers with replay
    /// versions so nothing touches the network.
    pub fn build_registry(
        &self,
        record_dir: Option<&Path>,
        replay_dir: Option<&Path>,
    ) -> Result<ProviderRegistry, ConfigError> {
        if self.pipeline.matcher != MatcherKind::Overlap && self.pipeline.roster.is_empty() {
            return Err(ConfigError::EmptyRoster);
        }
        let mut registry = ProviderRegistry::new();
        for name in self.required_providers() {
            let entry = self
                .providers
                .get(&name)
                .ok_or_else(|| ConfigError::UnknownProvider(name.clone()))?;
            let provider: Arc<dyn ChatProvider> = match entry {
                ProviderConfig::Mock {
                    seed,
                    hallucination,
                } => Arc::new(MockProvider::new(name.as_str(), *seed, *hallucination)),
                ProviderConfig::Replay { dir } => {
                    Arc::new(ReplayProvider::new(name.as_str(), dir.clone()))
                }
                ProviderConfig::Http { endpoint } => match replay_dir {
                    Some(dir) => Arc::new(ReplayProvider::new(name.as_str(), dir)),
                    None => Arc::new(HttpProvider::new(name.as_str(), endpoint.clone())),
                },
            };
            let provider = match record_dir {
                Some(dir) => Arc::new(RecordingProvider::new(provider, dir).map_err(|e| {
                    ConfigError::Bad(format!(
                        "cannot create record directory {}: {e}",
                        dir.display()
                    ))
                })?) as Arc<dyn ChatProvider>,
                None => provider,
            };
            registry.register(provider);
        }
        Ok(registry)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pipeline.parallelism == 0 {
            return Err(ConfigError::Bad(
                "pipeline.parallelism must be at least 1".into(),
            ));
        }
        if self.pipeline.max_rounds == 0 {
            return Err(ConfigError::Bad(
                "pipeline.max_rounds must be at least 1".into(),
            ));
        }
        if !(self.pipeline.iou_thresh > 0.0 && self.pipeline.iou_thresh < 1.0) {
            return Err(ConfigError::Bad(format!(
                "pipeline.iou_thresh must lie in (0,1), got {}",
                self.pipeline.iou_thresh
            )));
        }
        if !(self.pipeline.ap_iou > 0.0 && self.pipeline.ap_iou < 1.0) {
            return Err(ConfigError::Bad(format!(
                "pipeline.ap_iou must lie in (0,1), got {}",
                self.pipeline.ap_iou
            )));
        }
        if self.pipeline.margin_ratio < 0.0 {
            return Err(ConfigError::Bad(
                "pipeline.margin_ratio must be nonnegative".into(),
            ));
        }
        // surface unknown-provider errors at startup, not mid-run
        for name in self.required_providers() {
            if !self.providers.contains_key(&name) {
                return Err(ConfigError::UnknownProvider(name));
            }
        }
        Ok(())
    }
}
