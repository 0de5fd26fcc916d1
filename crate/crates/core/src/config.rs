//! Pipeline configuration, read from one TOML file.
//!
//! Every section has defaults, so an empty file is a valid mock-backed
//! configuration. A snapshot of the resolved configuration is embedded in
//! every run manifest. Credentials never appear here: hosted backends read
//! them from the environment variables named by their `token_env` fields.
//!
//! ```toml
//! backend = "mock"            # or "live"
//! workers = 4
//!
//! [music]
//! page_duration_s = 30.0
//! transition = "fade"         # or "continuation"
//! overlap_s = 2.0
//!
//! [emotion]
//! checkpoint = "checkpoints/faces"   # zero-shot encoder when absent
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{TransitionMode, DEFAULT_OVERLAP_S};
use crate::baselines::BaselineConfig;
use crate::captioning::CaptioningConfig;
use crate::emotion::{EncoderShape, DEFAULT_PROMPT_TEMPLATE};
use crate::llm::{AskPolicy, OpenAiConfig};
use crate::music::{HttpMusicConfig, DEFAULT_PAGE_DURATION_S};

/// Which pipeline produces the music.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Scenes, emotions, directives and page captions.
    M2m,
    /// Page descriptions turned directly into captions.
    Baseline,
    /// Tracks drawn from a pre-generated pool.
    Random,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::M2m, Condition::Baseline, Condition::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::M2m => "m2m",
            Condition::Baseline => "baseline",
            Condition::Random => "random",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m2m" => Ok(Condition::M2m),
            "baseline" => Ok(Condition::Baseline),
            "random" => Ok(Condition::Random),
            other => Err(format!("unknown condition {other:?} (expected m2m, baseline or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic offline mocks.
    Mock,
    /// Hosted chat and music endpoints.
    Live,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mock" => Ok(BackendKind::Mock),
            "live" => Ok(BackendKind::Live),
            other => Err(format!("unknown backend {other:?} (expected mock or live)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub openai: OpenAiConfig,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            openai: OpenAiConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub policy: AskPolicy,
    /// Replacement for the bundled segmentation exemplar.
    pub exemplar: Option<PathBuf>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            policy: AskPolicy::default(),
            exemplar: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmotionConfig {
    /// Fine-tuned checkpoint directory; the zero-shot encoder is used when absent.
    pub checkpoint: Option<PathBuf>,
    /// Labels of the zero-shot encoder.
    pub labels: Vec<String>,
    pub prompt_template: String,
    pub seed: u64,
    pub shape: EncoderShape,
}

impl Default for EmotionConfig {
    fn default() -> Self {
        EmotionConfig {
            checkpoint: None,
            labels: ["anger", "disgust", "fear", "happy", "neutral", "sad", "surprise"]
                .map(String::from)
                .to_vec(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
            seed: 0,
            shape: EncoderShape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MusicConfig {
    pub page_duration_s: f64,
    pub seed: u64,
    pub transition: TransitionMode,
    pub overlap_s: f64,
    pub http: HttpMusicConfig,
}

impl Default for MusicConfig {
    fn default() -> Self {
        MusicConfig {
            page_duration_s: DEFAULT_PAGE_DURATION_S,
            seed: 0,
            transition: TransitionMode::Fade,
            overlap_s: DEFAULT_OVERLAP_S,
            http: HttpMusicConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub backend: BackendKind,
    /// Upper bound on concurrently executing stage instances.
    pub workers: usize,
    /// Keep running independent branches after a stage fails.
    pub keep_going: bool,
    /// Restrict the run to pages `first..=last`.
    pub page_window: Option<(usize, usize)>,
    /// Directory of `<name>.v<version>.txt` prompt template overrides.
    pub templates_dir: Option<PathBuf>,
    pub llm: LlmConfig,
    pub scenes: SceneConfig,
    pub emotion: EmotionConfig,
    pub captioning: CaptioningConfig,
    pub music: MusicConfig,
    pub baselines: BaselineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backend: BackendKind::Mock,
            workers: 4,
            keep_going: false,
            page_window: None,
            templates_dir: None,
            llm: LlmConfig::default(),
            scenes: SceneConfig::default(),
            emotion: EmotionConfig::default(),
            captioning: CaptioningConfig::default(),
            music: MusicConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<string>"),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if let Some((a, b)) = self.page_window {
            if a > b {
                return bad(format!("page_window {a}..{b} is empty"));
            }
        }
        if !(self.music.page_duration_s > 0.0) {
            return bad("music.page_duration_s must be positive".into());
        }
        if !(self.music.overlap_s >= 0.0) || self.music.overlap_s >= self.music.page_duration_s {
            return bad("music.overlap_s must be in [0, page_duration_s)".into());
        }
        if self.baselines.pool_size == 0 {
            return bad("baselines.pool_size must be at least 1".into());
        }
        if self.emotion.labels.is_empty() && self.emotion.checkpoint.is_none() {
            return bad("emotion.labels must not be empty".into());
        }
        self.captioning
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
