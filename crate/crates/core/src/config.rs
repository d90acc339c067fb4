//! TOML configuration shared by the library and the CLI. Credentials never
//! live in the file: the API key and webhook secret come from environment
//! variables.

use crate::audiofeat::MfccConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable holding the chat-completion API key.
pub const ENV_API_KEY: &str = "DEPSCREEN_API_KEY";
/// Environment variable holding the webhook HMAC secret.
pub const ENV_WEBHOOK_SECRET: &str = "DEPSCREEN_WEBHOOK_SECRET";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSettings {
    /// Uniform noise overlay amplitude, as a fraction of full scale.
    pub noise_amplitude: f32,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings { noise_amplitude: crate::audiofeat::DEFAULT_NOISE_AMPLITUDE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic offline stub (marker phrases).
    Stub,
    /// Remote chat-completion endpoint.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub backend: BackendKind,
    /// Chat-completions base URL for the remote backend.
    pub base_url: String,
    pub model: String,
    /// Marker phrases the stub keys on.
    pub markers: Vec<String>,
    /// Interview ids used as few-shot exemplars; excluded from all test
    /// sets.
    pub exemplar_ids: Vec<u32>,
    /// Maximum requests per second when classifying in batch (0 = no
    /// ceiling).
    pub rate_limit_per_sec: f64,
    /// Response cache directory; empty string disables caching.
    pub cache_dir: String,
    pub temperature: f64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            backend: BackendKind::Stub,
            base_url: "https://api.openai.com/v1".to_string(),
            model: "gpt-4".to_string(),
            markers: crate::llm::DEPRESSION_MARKERS.iter().map(|s| s.to_string()).collect(),
            exemplar_ids: Vec::new(),
            rate_limit_per_sec: 1.0,
            cache_dir: String::new(),
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub max_epochs: usize,
    /// Share of training interviews used as the early-stop monitor in
    /// cross-validation folds.
    pub val_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { max_epochs: 30, val_fraction: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSettings {
    pub bind: String,
    pub queue_capacity: usize,
    pub workers: usize,
    pub reports_dir: String,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            bind: "127.0.0.1:8080".to_string(),
            queue_capacity: 100,
            workers: 2,
            reports_dir: "reports".to_string(),
        }
    }
}

/// Top-level configuration: `[mfcc]`, `[augment]`, `[llm]`, `[train]`,
/// `[service]` tables, all optional with these defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mfcc: MfccConfig,
    pub augment: AugmentSettings,
    pub llm: LlmSettings,
    pub train: TrainSettings,
    pub service: ServiceSettings,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Malformed {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
    }
}
