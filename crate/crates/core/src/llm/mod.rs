//! Chat-model backends for the text stages.
//!
//! Every stage talks to a [`LanguageModel`] through a [`ChatRequest`]: a
//! system message, a user message, an optional page image and the sampling
//! temperature. The `task` tag is local metadata and never goes on the wire;
//! the offline [`MockLanguageModel`] only uses it to pick a response style.

mod mock;
mod openai;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::MockLanguageModel;
pub use openai::{OpenAiChat, OpenAiConfig};
pub use scripted::ScriptedLanguageModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SceneSegmentation,
    SceneDirective,
    PageCaptions,
    PageDescription,
    BaselineCaption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub task: Task,
    pub system: String,
    pub user: String,
    pub image: Option<ImageInput>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("language model backend error: {0}")]
pub struct BackendError(pub String);

pub trait LanguageModel: Send + Sync {
    fn id(&self) -> String;
    fn supports_images(&self) -> bool;
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

/// One request/response pair as persisted in a stage artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub system_prompt: String,
    pub prompt: String,
    pub raw_response: String,
    /// Why the response was rejected, for attempts that triggered a retry.
    pub violation: Option<String>,
}

/// Call `model`, retrying backend failures up to `retries` extra times.
pub fn complete_with_retries(
    model: &dyn LanguageModel,
    request: &ChatRequest,
    retries: u32,
) -> Result<String, BackendError> {
    let mut last = None;
    for attempt in 0..=retries {
        match model.complete(request) {
            Ok(text) => return Ok(text),
            Err(e) => {
                log::warn!("{} attempt {} failed: {e}", model.id(), attempt + 1);
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// A parsed model answer together with every exchange it took to get it.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer<T> {
    pub value: T,
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AskError {
    Backend(BackendError),
    /// The last response still failed validation after all schema retries.
    Invalid {
        violation: String,
        exchanges: Vec<Exchange>,
    },
    Template(String),
}

/// Settings shared by every text stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AskPolicy {
    pub temperature: f64,
    /// Extra attempts after a backend failure.
    pub backend_retries: u32,
    /// Extra attempts after a response fails validation; each one echoes the
    /// violation back to the model.
    pub schema_retries: u32,
}

impl Default for AskPolicy {
    fn default() -> Self {
        AskPolicy {
            temperature: 0.0,
            backend_retries: 2,
            schema_retries: 3,
        }
    }
}

/// Send `system`/`user` to `model` and parse the reply with `parse`. A reply
/// that fails to parse is sent back through the `feedback` template (with
/// `original_prompt`, `violation` and `previous_response` slots) up to
/// `policy.schema_retries` times.
#[allow(clippy::too_many_arguments)]
pub fn ask<T>(
    model: &dyn LanguageModel,
    task: Task,
    system: &str,
    user: &str,
    image: Option<ImageInput>,
    policy: &AskPolicy,
    feedback: &crate::template::Template,
    mut parse: impl FnMut(&str) -> Result<T, String>,
) -> Result<Answer<T>, AskError> {
    let mut exchanges = Vec::new();
    let mut prompt = user.to_string();
    let mut violation = String::new();
    for _ in 0..=policy.schema_retries {
        let request = ChatRequest {
            task,
            system: system.to_string(),
            user: prompt.clone(),
            image: image.clone(),
            temperature: policy.temperature,
        };
        let raw = complete_with_retries(model, &request, policy.backend_retries)
            .map_err(AskError::Backend)?;
        match parse(&raw) {
            Ok(value) => {
                exchanges.push(Exchange {
                    system_prompt: system.to_string(),
                    prompt,
                    raw_response: raw,
                    violation: None,
                });
                return Ok(Answer { value, exchanges });
            }
            Err(v) => {
                log::info!("{} response rejected: {v}", model.id());
                let next = feedback
                    .render(&[
                        ("original_prompt", user),
                        ("violation", &v),
                        ("previous_response", raw.trim()),
                    ])
                    .map_err(|e| AskError::Template(e.to_string()))?;
                exchanges.push(Exchange {
                    system_prompt: system.to_string(),
                    prompt: std::mem::replace(&mut prompt, next),
                    raw_response: raw,
                    violation: Some(v.clone()),
                });
                violation = v;
            }
        }
    }
    Err(AskError::Invalid {
        violation,
        exchanges,
    })
}

/// Strip a surrounding Markdown code fence, if any.
pub fn strip_code_fence(text: &str) -> &str {
    let trimmed = text.trim();
    if let Some(inner) = trimmed.strip_prefix("```") {
        let inner = inner.split_once('\n').map_or("", |(_, rest)| rest);
        return inner.trim_end().strip_suffix("```").unwrap_or(inner).trim();
    }
    trimmed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_fences() {
        assert_eq!(strip_code_fence("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(strip_code_fence("  plain  "), "plain");
    }

    #[test]
    fn retries_backend_errors() {
        let model = ScriptedLanguageModel::new(vec![
            Err(BackendError("down".into())),
            Ok("fine".into()),
        ]);
        let req = ChatRequest {
            task: Task::SceneDirective,
            system: String::new(),
            user: String::new(),
            image: None,
            temperature: 0.0,
        };
        assert_eq!(complete_with_retries(&model, &req, 1).unwrap(), "fine");
        let model = ScriptedLanguageModel::new(vec![Err(BackendError("down".into()))]);
        assert!(complete_with_retries(&model, &req, 0).is_err());
    }

    fn feedback() -> crate::template::Template {
        crate::template::TemplateSet::default()
            .get("retry_feedback")
            .unwrap()
            .clone()
    }

    fn parse_number(raw: &str) -> Result<u32, String> {
        raw.trim().parse().map_err(|_| format!("{raw:?} is not a number"))
    }

    #[test]
    fn ask_echoes_violations() {
        let model = ScriptedLanguageModel::ok(["seven", "7"]);
        let policy = AskPolicy::default();
        let answer = ask(&model, Task::SceneDirective, "s", "give a number", None, &policy, &feedback(), parse_number).unwrap();
        assert_eq!(answer.value, 7);
        assert_eq!(answer.exchanges.len(), 2);
        assert!(answer.exchanges[0].violation.is_some());
        let second = &model.requests()[1].user;
        assert!(second.starts_with("give a number"));
        assert!(second.contains("\"seven\" is not a number"));
        assert!(second.contains("Previous reply:\nseven"));
    }

    #[test]
    fn ask_gives_up_after_schema_retries() {
        let model = ScriptedLanguageModel::ok(["x"]);
        let policy = AskPolicy {
            schema_retries: 1,
            ..Default::default()
        };
        match ask(&model, Task::SceneDirective, "s", "u", None, &policy, &feedback(), parse_number) {
            Err(AskError::Invalid { exchanges, .. }) => assert_eq!(exchanges.len(), 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(model.call_count(), 2);
    }
}
