//! Scene music directives and page music captions.
//!
//! A directive describes the music for a whole scene from its dialogue and
//! face emotions. Captions specialize it for each page of the scene in a
//! single request, so the model can keep the pages consistent with each
//! other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DialogueLine;
use crate::digest::json_digest;
use crate::emotion::EmotionPrediction;
use crate::llm::{ask, AskError, AskPolicy, BackendError, Exchange, LanguageModel, Task};
use crate::scenes::{format_transcript, Scene};
use crate::template::{Prompt, TemplateRef, TemplateSet};

const BUILTIN_STYLE_SAMPLES: &str = include_str!("../assets/style_samples.v1.json");

pub const NO_FACES: &str = "no face emotions detected";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptioningConfig {
    /// Courtesy word woven into every instruction.
    pub politeness: String,
    pub min_words: usize,
    pub max_words: usize,
    /// Role sentence that opens the page-caption system message.
    pub persona: String,
    /// Upper bound on caption length; the music backend's own limit also applies.
    pub max_caption_chars: usize,
    /// Example text-to-music prompts shown in the directive instructions.
    pub style_samples: Vec<String>,
    pub policy: AskPolicy,
}

impl Default for CaptioningConfig {
    fn default() -> Self {
        CaptioningConfig {
            politeness: "please".into(),
            min_words: 40,
            max_words: 120,
            persona: "You are a music composer who scores manga.".into(),
            max_caption_chars: 300,
            style_samples: builtin_style_samples(),
            policy: AskPolicy {
                schema_retries: 1,
                ..AskPolicy::default()
            },
        }
    }
}

pub fn builtin_style_samples() -> Vec<String> {
    serde_json::from_str(BUILTIN_STYLE_SAMPLES).expect("bundled style samples are valid")
}

impl CaptioningConfig {
    pub fn validate(&self) -> Result<(), CaptionError> {
        if self.style_samples.is_empty() {
            return Err(CaptionError::InvalidConfig("at least one style sample is required".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(CaptionError::InvalidConfig(format!(
                "directive word bounds {}..{} are invalid",
                self.min_words, self.max_words
            )));
        }
        if self.max_caption_chars == 0 {
            return Err(CaptionError::InvalidConfig("max_caption_chars must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaptionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("response of {length} {unit} exceeds the bound of {limit}")]
    OverlongResponse {
        length: usize,
        limit: usize,
        unit: String,
        exchanges: Vec<Exchange>,
    },
    #[error("response of {words} words is below the {limit}-word bound")]
    ShortResponse { words: usize, limit: usize, exchanges: Vec<Exchange> },
    #[error("expected captions for pages {expected:?}, got {got:?}")]
    PageCountMismatch { expected: Vec<usize>, got: Vec<usize>, exchanges: Vec<Exchange> },
    #[error("caption response rejected: {violation}")]
    InvalidResponse { violation: String, exchanges: Vec<Exchange> },
    #[error("invalid captioning config: {0}")]
    InvalidConfig(String),
    #[error("emotion summary covers pages {got:?} but scene {scene_id} has pages {expected:?}")]
    SummaryMismatch { scene_id: u32, expected: Vec<usize>, got: Vec<usize> },
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceEmotion {
    pub character: Option<String>,
    pub top_label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionSummary {
    pub scene_id: u32,
    pub per_page: BTreeMap<usize, Vec<FaceEmotion>>,
}

impl EmotionSummary {
    /// Summary over the scene's pages; pages missing from `predictions` have no faces.
    pub fn new(scene: &Scene, predictions: &BTreeMap<usize, Vec<EmotionPrediction>>) -> Self {
        let per_page = scene
            .pages()
            .map(|p| {
                let faces = predictions
                    .get(&p)
                    .map(|preds| {
                        preds
                            .iter()
                            .map(|e| FaceEmotion {
                                character: e.character.clone(),
                                top_label: e.top_label.clone(),
                                confidence: e.confidence(),
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                (p, faces)
            })
            .collect();
        EmotionSummary {
            scene_id: scene.scene_id,
            per_page,
        }
    }

    pub fn check_covers(&self, scene: &Scene) -> Result<(), CaptionError> {
        let expected: Vec<usize> = scene.pages().collect();
        let got: Vec<usize> = self.per_page.keys().copied().collect();
        if expected != got {
            return Err(CaptionError::SummaryMismatch {
                scene_id: scene.scene_id,
                expected,
                got,
            });
        }
        Ok(())
    }

    pub fn face_count(&self) -> usize {
        self.per_page.values().map(Vec::len).sum()
    }

    /// `page <p>: <character>: <label> (<confidence>); ...`, one line per page.
    pub fn render(&self) -> String {
        if self.face_count() == 0 {
            return NO_FACES.to_string();
        }
        self.per_page
            .iter()
            .map(|(page, faces)| {
                if faces.is_empty() {
                    return format!("page {page}: no faces");
                }
                let faces: Vec<String> = faces
                    .iter()
                    .map(|f| {
                        format!(
                            "{}: {} ({:.2})",
                            f.character.as_deref().unwrap_or("unknown"),
                            f.top_label,
                            f.confidence
                        )
                    })
                    .collect();
                format!("page {page}: {}", faces.join("; "))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMusicDirective {
    pub scene_id: u32,
    pub text: String,
    /// Digest of the scene dialogue and emotion summary the directive was written from.
    pub inputs_digest: String,
}

impl SceneMusicDirective {
    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageMusicCaption {
    pub page_index: usize,
    pub scene_id: u32,
    pub text: String,
    /// Digest of the directive (or page description) the caption came from.
    pub derived_from: String,
}

/// A stage result with the model exchanges and templates behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated<T> {
    pub value: T,
    pub exchanges: Vec<Exchange>,
    pub templates: Vec<TemplateRef>,
}

pub fn inputs_digest(dialogue: &[DialogueLine], emotions: &EmotionSummary) -> String {
    json_digest(&(dialogue, emotions))
}

fn render_samples(samples: &[String]) -> String {
    samples.iter().map(|s| format!("- \"{s}\"")).collect::<Vec<_>>().join("\n")
}

fn dialogue_block(dialogue: &[DialogueLine]) -> String {
    if dialogue.is_empty() {
        "(no dialogue in this scene)".to_string()
    } else {
        format_transcript(dialogue)
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn build_directive_prompt(
    scene: &Scene,
    dialogue: &[DialogueLine],
    emotions: &EmotionSummary,
    config: &CaptioningConfig,
    templates: &TemplateSet,
) -> Result<Prompt, CaptionError> {
    config.validate()?;
    let values = [
        ("politeness", config.politeness.clone()),
        ("style_samples", render_samples(&config.style_samples)),
        ("min_words", config.min_words.to_string()),
        ("max_words", config.max_words.to_string()),
        ("scene_id", scene.scene_id.to_string()),
        ("first_page", scene.page_range.0.to_string()),
        ("last_page", scene.page_range.1.to_string()),
        ("dialogue", dialogue_block(dialogue)),
        ("emotions", emotions.render()),
    ];
    let refs: Vec<(&str, &str)> = values.iter().map(|(k, v)| (*k, v.as_str())).collect();
    templates
        .render_prompt("directive", &refs)
        .map_err(|e| CaptionError::Template(e.to_string()))
}

enum Violation {
    Long(usize),
    Short(usize),
    Pages(Vec<usize>),
    Other,
}

fn map_ask(e: AskError, last: Option<Violation>, expected: &[usize], limit: (usize, usize)) -> CaptionError {
    match e {
        AskError::Backend(b) => CaptionError::Backend(b),
        AskError::Template(t) => CaptionError::Template(t),
        AskError::Invalid { violation, exchanges } => match last {
            Some(Violation::Long(words)) => CaptionError::OverlongResponse {
                length: words,
                limit: limit.1,
                unit: "words".into(),
                exchanges,
            },
            Some(Violation::Short(words)) => CaptionError::ShortResponse {
                words,
                limit: limit.0,
                exchanges,
            },
            Some(Violation::Pages(got)) => CaptionError::PageCountMismatch {
                expected: expected.to_vec(),
                got,
                exchanges,
            },
            _ => CaptionError::InvalidResponse { violation, exchanges },
        },
    }
}

pub fn generate_scene_directive(
    scene: &Scene,
    dialogue: &[DialogueLine],
    emotions: &EmotionSummary,
    model: &dyn LanguageModel,
    config: &CaptioningConfig,
    templates: &TemplateSet,
) -> Result<Generated<SceneMusicDirective>, CaptionError> {
    emotions.check_covers(scene)?;
    let prompt = build_directive_prompt(scene, dialogue, emotions, config, templates)?;
    let feedback = templates.get("retry_feedback").map_err(|e| CaptionError::Template(e.to_string()))?;
    let mut last = None;
    let answer = ask(
        model,
        Task::SceneDirective,
        &prompt.system,
        &prompt.user,
        None,
        &config.policy,
        feedback,
        |raw| {
            let text = raw.trim().to_string();
            let words = word_count(&text);
            if words > config.max_words {
                last = Some(Violation::Long(words));
                return Err(format!(
                    "the directive has {words} words; shorten it to at most {} words",
                    config.max_words
                ));
            }
            if words < config.min_words {
                last = Some(Violation::Short(words));
                return Err(format!(
                    "the directive has {words} words; write at least {} words",
                    config.min_words
                ));
            }
            Ok(text)
        },
    )
    .map_err(|e| map_ask(e, last.take(), &[], (config.min_words, config.max_words)))?;
    let mut used = prompt.templates;
    if answer.exchanges.len() > 1 {
        used.push(feedback.reference());
    }
    Ok(Generated {
        value: SceneMusicDirective {
            scene_id: scene.scene_id,
            text: answer.value,
            inputs_digest: inputs_digest(dialogue, emotions),
        },
        exchanges: answer.exchanges,
        templates: used,
    })
}

pub fn build_caption_prompt(
    scene: &Scene,
    directive: &SceneMusicDirective,
    dialogue: &[DialogueLine],
    emotions: &EmotionSummary,
    max_chars: usize,
    config: &CaptioningConfig,
    templates: &TemplateSet,
) -> Result<Prompt, CaptionError> {
    let pages = scene.pages().map(|p| p.to_string()).collect::<Vec<_>>().join(", ");
    let values = [
        ("persona", config.persona.clone()),
        ("politeness", config.politeness.clone()),
        ("directive", directive.text.clone()),
        ("dialogue", dialogue_block(dialogue)),
        ("emotions", emotions.render()),
        ("pages", pages),
        ("max_chars", max_chars.to_string()),
    ];
    let refs: Vec<(&str, &str)> = values.iter().map(|(k, v)| (*k, v.as_str())).collect();
    templates
        .render_prompt("caption", &refs)
        .map_err(|e| CaptionError::Template(e.to_string()))
}

/// Parse `<page_index>: <caption>` lines.
pub fn parse_page_captions(raw: &str) -> BTreeMap<usize, Vec<String>> {
    let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for line in crate::llm::strip_code_fence(raw).lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((head, caption)) = line.split_once(':') else { continue };
        let head = head.trim().trim_start_matches("page").trim_start_matches("Page").trim();
        if let Ok(page) = head.parse::<usize>() {
            out.entry(page).or_default().push(caption.trim().to_string());
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn generate_page_captions(
    scene: &Scene,
    directive: &SceneMusicDirective,
    dialogue: &[DialogueLine],
    emotions: &EmotionSummary,
    max_chars: usize,
    model: &dyn LanguageModel,
    config: &CaptioningConfig,
    templates: &TemplateSet,
) -> Result<Generated<Vec<PageMusicCaption>>, CaptionError> {
    let max_chars = max_chars.min(config.max_caption_chars);
    let prompt = build_caption_prompt(scene, directive, dialogue, emotions, max_chars, config, templates)?;
    let feedback = templates.get("retry_feedback").map_err(|e| CaptionError::Template(e.to_string()))?;
    let expected: Vec<usize> = scene.pages().collect();
    let derived_from = directive.digest();
    let mut last = None;
    let answer = ask(
        model,
        Task::PageCaptions,
        &prompt.system,
        &prompt.user,
        None,
        &config.policy,
        feedback,
        |raw| {
            let parsed = parse_page_captions(raw);
            let got: Vec<usize> = parsed
                .iter()
                .flat_map(|(p, c)| std::iter::repeat_n(*p, c.len()))
                .collect();
            if got != expected {
                last = Some(Violation::Pages(got.clone()));
                return Err(format!(
                    "expected exactly one caption for each of pages {expected:?}, got pages {got:?}"
                ));
            }
            let mut captions = Vec::new();
            for (page, texts) in parsed {
                let text = texts.into_iter().next().unwrap_or_default();
                let chars = text.chars().count();
                if text.is_empty() || chars > max_chars {
                    last = Some(Violation::Other);
                    return Err(format!(
                        "the caption for page {page} has {chars} characters; it must be between 1 and {max_chars}"
                    ));
                }
                captions.push(PageMusicCaption {
                    page_index: page,
                    scene_id: scene.scene_id,
                    text,
                    derived_from: derived_from.clone(),
                });
            }
            Ok(captions)
        },
    )
    .map_err(|e| map_ask(e, last.take(), &expected, (0, max_chars)))?;
    let mut used = prompt.templates;
    if answer.exchanges.len() > 1 {
        used.push(feedback.reference());
    }
    Ok(Generated {
        value: answer.value,
        exchanges: answer.exchanges,
        templates: used,
    })
}
