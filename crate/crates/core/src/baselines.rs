//! The two comparison conditions.
//!
//! The page-wise baseline describes each page from its image and dialogue
//! and turns the description straight into a music caption, with no scenes,
//! emotions or directives. The random condition picks a track per page from
//! a pool of pre-generated music.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::captioning::{CaptionError, Generated, PageMusicCaption};
use crate::corpus::{Book, Page};
use crate::digest::json_digest;
use crate::llm::{ask, AskError, AskPolicy, BackendError, ImageInput, LanguageModel, Task};
use crate::scenes::format_transcript;
use crate::template::TemplateSet;

const BUILTIN_POOL_CAPTIONS: &str = include_str!("../assets/pool_captions.v1.txt");

pub const NO_DIALOGUE: &str = "(no dialogue on this page)";

/// Scene id carried by baseline captions, which have no scene.
pub const NO_SCENE: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub max_caption_chars: usize,
    pub policy: AskPolicy,
    pub pool_size: usize,
    pub pool_seed: u64,
    pub selection_seed: u64,
    /// Captions used to generate the random pool; the built-in list when empty.
    pub pool_captions: Vec<String>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            max_caption_chars: 300,
            policy: AskPolicy {
                schema_retries: 1,
                ..AskPolicy::default()
            },
            pool_size: 24,
            pool_seed: 0,
            selection_seed: 0,
            pool_captions: Vec::new(),
        }
    }
}

impl BaselineConfig {
    /// The first `pool_size` captions, cycling through the list if it is shorter.
    pub fn pool_caption_list(&self) -> Vec<String> {
        let source: Vec<String> = if self.pool_captions.is_empty() {
            builtin_pool_captions()
        } else {
            self.pool_captions.clone()
        };
        if source.is_empty() {
            return source;
        }
        (0..self.pool_size).map(|i| source[i % source.len()].clone()).collect()
    }
}

pub fn builtin_pool_captions() -> Vec<String> {
    BUILTIN_POOL_CAPTIONS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error("the music pool is empty")]
    EmptyPool,
    #[error("cannot read page image {path}: {message}")]
    Image { path: String, message: String },
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageDescription {
    pub page_index: usize,
    pub text: String,
}

pub fn media_type(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".png") {
        "image/png"
    } else {
        "image/jpeg"
    }
}

pub fn describe_page(
    book: &Book,
    page: &Page,
    image_bytes: Vec<u8>,
    model: &dyn LanguageModel,
    policy: &AskPolicy,
    templates: &TemplateSet,
) -> Result<Generated<PageDescription>, BaselineError> {
    if !model.supports_images() {
        return Err(BaselineError::Backend(BackendError(format!(
            "{} does not accept images",
            model.id()
        ))));
    }
    let lines: Vec<_> = book.lines_on_page(page.page_index).cloned().collect();
    let dialogue = if lines.is_empty() {
        NO_DIALOGUE.to_string()
    } else {
        format_transcript(&lines)
    };
    let page_index = page.page_index.to_string();
    let prompt = templates
        .render_prompt("describe", &[("page_index", &page_index), ("dialogue", &dialogue)])
        .map_err(|e| BaselineError::Template(e.to_string()))?;
    let feedback = templates.get("retry_feedback").map_err(|e| BaselineError::Template(e.to_string()))?;
    let image = ImageInput {
        media_type: media_type(&page.image_ref).to_string(),
        bytes: image_bytes,
    };
    let answer = ask(
        model,
        Task::PageDescription,
        &prompt.system,
        &prompt.user,
        Some(image),
        policy,
        feedback,
        |raw| {
            let text = raw.trim();
            if text.is_empty() {
                Err("the description is empty".to_string())
            } else {
                Ok(text.to_string())
            }
        },
    )
    .map_err(|e| match e {
        AskError::Backend(b) => BaselineError::Backend(b),
        AskError::Template(t) => BaselineError::Template(t),
        AskError::Invalid { violation, exchanges } => {
            BaselineError::Caption(CaptionError::InvalidResponse { violation, exchanges })
        }
    })?;
    Ok(Generated {
        value: PageDescription {
            page_index: page.page_index,
            text: answer.value,
        },
        exchanges: answer.exchanges,
        templates: prompt.templates,
    })
}

pub fn baseline_caption(
    description: &PageDescription,
    max_chars: usize,
    model: &dyn LanguageModel,
    config: &BaselineConfig,
    templates: &TemplateSet,
) -> Result<Generated<PageMusicCaption>, BaselineError> {
    let max_chars = max_chars.min(config.max_caption_chars);
    let limit = max_chars.to_string();
    let prompt = templates
        .render_prompt(
            "baseline_caption",
            &[("description", &description.text), ("max_chars", &limit)],
        )
        .map_err(|e| BaselineError::Template(e.to_string()))?;
    let feedback = templates.get("retry_feedback").map_err(|e| BaselineError::Template(e.to_string()))?;
    let mut last_len = None;
    let answer = ask(
        model,
        Task::BaselineCaption,
        &prompt.system,
        &prompt.user,
        None,
        &config.policy,
        feedback,
        |raw| {
            let text = raw.trim().trim_matches('"').trim();
            let chars = text.chars().count();
            if text.is_empty() {
                last_len = None;
                return Err("the caption is empty".to_string());
            }
            if chars > max_chars {
                last_len = Some(chars);
                return Err(format!("the caption has {chars} characters; shorten it to at most {max_chars}"));
            }
            Ok(text.to_string())
        },
    )
    .map_err(|e| match e {
        AskError::Backend(b) => BaselineError::Backend(b),
        AskError::Template(t) => BaselineError::Template(t),
        AskError::Invalid { violation, exchanges } => BaselineError::Caption(match last_len {
            Some(length) => CaptionError::OverlongResponse {
                length,
                limit: max_chars,
                unit: "characters".into(),
                exchanges,
            },
            None => CaptionError::InvalidResponse { violation, exchanges },
        }),
    })?;
    Ok(Generated {
        value: PageMusicCaption {
            page_index: description.page_index,
            scene_id: NO_SCENE,
            text: answer.value,
            derived_from: json_digest(description),
        },
        exchanges: answer.exchanges,
        templates: prompt.templates,
    })
}

/// One generated track of the random pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolTrack {
    pub track_index: usize,
    pub caption: String,
    /// WAV file name within the pool directory.
    pub wav: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicPool {
    pub tracks: Vec<PoolTrack>,
    pub seed: u64,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub page_index: usize,
    pub track_index: usize,
    pub caption: String,
}

/// Draw one pool track per page, uniformly, from `seed`.
pub fn random_condition(pages: &[usize], pool: &MusicPool, seed: u64) -> Result<Vec<Selection>, BaselineError> {
    if pool.tracks.is_empty() {
        return Err(BaselineError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pages
        .iter()
        .map(|&page_index| {
            let k = rng.random_range(0..pool.tracks.len());
            Selection {
                page_index,
                track_index: pool.tracks[k].track_index,
                caption: pool.tracks[k].caption.clone(),
            }
        })
        .collect())
}
