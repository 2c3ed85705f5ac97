//! Run configuration: one TOML file, secrets from the environment, flags on top.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, Encoder, HashEncoder, RemoteEncoder, Vector};
use crate::eval::CoverageMode;
use crate::guidance::{Activation, GnnConfig, LossKind};
use crate::llm::{ChatClient, ChatRequest, ClientError, FixtureChatClient, RecordingChatClient, RemoteChatClient};
use crate::projection::DecomposeConfig;
use crate::tracer::BiasConfig;

pub const CHAT_KEY_ENV: &str = "SCHEMATRACE_CHAT_API_KEY";
pub const ENCODER_KEY_ENV: &str = "SCHEMATRACE_ENCODER_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing {0}")]
    Missing(String),
    #[error("{what} {path} does not exist")]
    NoSuchPath { what: String, path: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Full graph for `index` and `datagen`.
    pub graph: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
    /// Where live completions are recorded as replayable fixtures.
    pub record_fixtures: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Hash,
            dim: 256,
            endpoint: None,
            model: None,
            api_key: None,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatKind {
    #[default]
    Fixture,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatSection {
    pub kind: ChatKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

impl Default for ChatSection {
    fn default() -> Self {
        Self {
            kind: ChatKind::Fixture,
            endpoint: None,
            model: None,
            api_key: None,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnSection {
    pub layers: usize,
    pub hidden_dim: usize,
    pub activation: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub loss: String,
    /// Largest analytic vs numeric relative error accepted before saving.
    pub grad_check_tolerance: f64,
}

impl Default for GnnSection {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden_dim: 512,
            activation: "relu".into(),
            learning_rate: 1e-5,
            epochs: 2,
            loss: "positive".into(),
            grad_check_tolerance: 1e-4,
        }
    }
}

impl GnnSection {
    pub fn activation(&self) -> Result<Activation, ConfigError> {
        match self.activation.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(ConfigError::Invalid(format!("gnn.activation `{other}`"))),
        }
    }

    pub fn loss(&self) -> Result<LossKind, ConfigError> {
        match self.loss.to_ascii_lowercase().as_str() {
            "positive" | "positive_only" => Ok(LossKind::PositiveOnly),
            "symmetric" => Ok(LossKind::Symmetric),
            other => Err(ConfigError::Invalid(format!("gnn.loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub samples: usize,
    pub lengths: Vec<usize>,
    pub masked_entities: usize,
    pub temperature: f64,
    pub max_attempts: usize,
    pub llm_strategy: bool,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self {
            samples: 10,
            lengths: vec![1, 2, 3],
            masked_entities: 1,
            temperature: 0.7,
            max_attempts: 3,
            llm_strategy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub trace: bool,
    pub beam: usize,
    pub decompose_temperature: f64,
    pub decompose_attempts: usize,
    pub coverage_mode: CoverageMode,
    pub paths: Paths,
    pub bias: BiasConfig,
    pub gnn: GnnSection,
    pub encoder: EncoderSection,
    pub chat: ChatSection,
    pub datagen: DatagenSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DecomposeConfig::default();
        Self {
            seed: 0,
            jobs: 0,
            trace: false,
            beam: d.beam,
            decompose_temperature: d.temperature,
            decompose_attempts: d.max_attempts,
            coverage_mode: CoverageMode::Exact,
            paths: Paths::default(),
            bias: BiasConfig::default(),
            gnn: GnnSection::default(),
            encoder: EncoderSection::default(),
            chat: ChatSection::default(),
            datagen: DatagenSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses the file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if let Some(base) = path.parent() {
            cfg.paths.resolve_against(base);
        }
        Ok(cfg)
    }

    /// Secrets from the environment replace file values.
    pub fn apply_env(&mut self) {
        if let Ok(k) = std::env::var(CHAT_KEY_ENV) {
            self.chat.api_key = Some(k);
        }
        if let Ok(k) = std::env::var(ENCODER_KEY_ENV) {
            self.encoder.api_key = Some(k);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let b = &self.bias;
        if !(b.entity_bias.is_finite() && b.entity_bias >= 1.0) {
            return bad("bias.entity_bias must be >= 1");
        }
        if !(b.triple_bias.is_finite() && b.triple_bias >= 0.0) {
            return bad("bias.triple_bias must be >= 0");
        }
        if !(b.threshold.is_finite() && (-1.0..=2.0).contains(&b.threshold)) {
            return bad("bias.threshold must lie in [-1, 2]");
        }
        if b.anchor_top_n == 0 {
            return bad("bias.anchor_top_n must be positive");
        }
        if self.beam == 0 || self.decompose_attempts == 0 {
            return bad("beam and decompose_attempts must be positive");
        }
        if !(0.0..=2.0).contains(&self.decompose_temperature) {
            return bad("decompose_temperature must lie in [0, 2]");
        }
        if self.encoder.dim == 0 {
            return bad("encoder.dim must be positive");
        }
        if self.gnn.layers == 0 || self.gnn.hidden_dim == 0 {
            return bad("gnn.layers and gnn.hidden_dim must be positive");
        }
        if !(self.gnn.learning_rate.is_finite() && self.gnn.learning_rate > 0.0) {
            return bad("gnn.learning_rate must be positive");
        }
        self.gnn.activation()?;
        self.gnn.loss()?;
        if self.datagen.lengths.is_empty() || self.datagen.lengths.contains(&0) {
            return bad("datagen.lengths must be non-empty positive lengths");
        }
        if self.datagen.masked_entities == 0 {
            return bad("datagen.masked_entities must be positive");
        }
        if self.encoder.kind == EncoderKind::Remote && self.encoder.endpoint.is_none() {
            return Err(ConfigError::Missing("encoder.endpoint".into()));
        }
        if self.chat.kind == ChatKind::Remote && self.chat.endpoint.is_none() {
            return Err(ConfigError::Missing("chat.endpoint".into()));
        }
        Ok(())
    }

    /// The path must be configured and exist.
    pub fn require_path(&self, what: &str, p: &Option<PathBuf>) -> Result<PathBuf, ConfigError> {
        let p = p.clone().ok_or_else(|| ConfigError::Missing(format!("paths.{what}")))?;
        if !p.exists() {
            return Err(ConfigError::NoSuchPath {
                what: what.to_string(),
                path: p.display().to_string(),
            });
        }
        Ok(p)
    }

    pub fn decompose(&self) -> DecomposeConfig {
        DecomposeConfig {
            beam: self.beam,
            temperature: self.decompose_temperature,
            max_attempts: self.decompose_attempts,
        }
    }

    pub fn gnn_config(&self) -> Result<GnnConfig, ConfigError> {
        Ok(GnnConfig {
            input_dim: self.encoder.dim,
            hidden_dim: self.gnn.hidden_dim,
            layers: self.gnn.layers,
            activation: self.gnn.activation()?,
        })
    }

    pub fn build_encoder(&self) -> Result<AnyEncoder, ConfigError> {
        let e = &self.encoder;
        match e.kind {
            EncoderKind::Hash => Ok(AnyEncoder::Hash(HashEncoder::new(e.dim, self.seed))),
            EncoderKind::Remote => RemoteEncoder::new(
                e.endpoint.clone().ok_or_else(|| ConfigError::Missing("encoder.endpoint".into()))?,
                e.model.clone().unwrap_or_default(),
                e.api_key.clone(),
                e.dim,
                Duration::from_secs(e.timeout_secs),
            )
            .map(AnyEncoder::Remote)
            .map_err(|err| ConfigError::Invalid(err.to_string())),
        }
    }

    pub fn build_chat(&self) -> Result<AnyChat, ConfigError> {
        let c = &self.chat;
        match c.kind {
            ChatKind::Fixture => {
                let path = self.require_path("fixtures", &self.paths.fixtures)?;
                FixtureChatClient::load(&path)
                    .map(AnyChat::Fixture)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            ChatKind::Remote => {
                let remote = RemoteChatClient::new(
                    c.endpoint.clone().ok_or_else(|| ConfigError::Missing("chat.endpoint".into()))?,
                    c.model.clone().unwrap_or_default(),
                    c.api_key.clone(),
                    Duration::from_secs(c.timeout_secs),
                )
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(AnyChat::Remote(Box::new(RecordingChatClient::new(remote))))
            }
        }
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.graph,
            &mut self.questions,
            &mut self.fixtures,
            &mut self.record_fixtures,
            &mut self.checkpoint,
            &mut self.cache,
            &mut self.manifest,
            &mut self.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

pub enum AnyEncoder {
    Hash(HashEncoder),
    Remote(RemoteEncoder),
}

impl Encoder for AnyEncoder {
    fn name(&self) -> &str {
        match self {
            AnyEncoder::Hash(e) => e.name(),
            AnyEncoder::Remote(e) => e.name(),
        }
    }

    fn dimension(&self) -> usize {
        match self {
            AnyEncoder::Hash(e) => e.dimension(),
            AnyEncoder::Remote(e) => e.dimension(),
        }
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vector>, EmbeddingError> {
        match self {
            AnyEncoder::Hash(e) => e.encode_batch(texts),
            AnyEncoder::Remote(e) => e.encode_batch(texts),
        }
    }
}

pub enum AnyChat {
    Fixture(FixtureChatClient),
    /// Live completions are kept so they can be saved as fixtures.
    Remote(Box<RecordingChatClient<RemoteChatClient>>),
}

impl AnyChat {
    pub fn save_recording(&self, path: &Path) -> Result<(), ClientError> {
        match self {
            AnyChat::Fixture(_) => Ok(()),
            AnyChat::Remote(r) => r.save(path),
        }
    }
}

impl ChatClient for AnyChat {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, ClientError> {
        match self {
            AnyChat::Fixture(c) => c.complete(req),
            AnyChat::Remote(c) => c.complete(req),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 7\n[paths]\nquestions = \"q.jsonl\"\n[bias]\nthreshold = 0.5\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.bias.threshold, 0.5);
        assert_eq!(cfg.bias.entity_bias, 1.5);
        assert_eq!(cfg.paths.questions.unwrap(), dir.path().join("q.jsonl"));
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut cfg = RunConfig::default();
        cfg.bias.entity_bias = 0.5;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        let mut cfg = RunConfig::default();
        cfg.gnn.activation = "gelu".into();
        assert!(cfg.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let missing = Some(dir.path().join("nope"));
        assert!(matches!(
            RunConfig::default().require_path("graph", &missing),
            Err(ConfigError::NoSuchPath { .. })
        ));
    }
}
