use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatRequest, LanguageModel};
use crate::http_client::{self, RetryPolicy};

/// OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub token_env: String,
    pub retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        OpenAiConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            token_env: "OPENAI_API_KEY".into(),
            retries: 3,
            initial_backoff_ms: 1000,
            timeout_s: 120,
        }
    }
}

pub struct OpenAiChat {
    config: OpenAiConfig,
    agent: ureq::Agent,
    policy: RetryPolicy,
}

impl OpenAiChat {
    pub fn new(config: OpenAiConfig) -> Self {
        let policy = RetryPolicy {
            retries: config.retries,
            initial_backoff: Duration::from_millis(config.initial_backoff_ms),
            timeout: Duration::from_secs(config.timeout_s),
        };
        OpenAiChat {
            agent: http_client::agent(&policy),
            policy,
            config,
        }
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let user = match &request.image {
            None => json!(request.user),
            Some(image) => json!([
                {"type": "text", "text": request.user},
                {"type": "image_url", "image_url": {
                    "url": format!("data:{};base64,{}", image.media_type, BASE64.encode(&image.bytes))
                }}
            ]),
        };
        json!({
            "model": self.config.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": user},
            ],
        })
    }
}

pub(crate) fn parse_completion(body: &Value) -> Result<String, BackendError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError(format!("no message content in response: {body}")))
}

impl LanguageModel for OpenAiChat {
    fn id(&self) -> String {
        format!("openai-chat:{}", self.config.model)
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let token = std::env::var(&self.config.token_env).map_err(|_| {
            BackendError(format!("environment variable {} is not set", self.config.token_env))
        })?;
        let body = self.request_body(request);
        let response: Value = http_client::post_json(
            &self.agent,
            &self.config.endpoint,
            Some(&token),
            &body,
            &self.policy,
        )
        .map_err(BackendError)?;
        parse_completion(&response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http_client::test_server;
    use crate::llm::{ImageInput, Task};

    fn request(image: bool) -> ChatRequest {
        ChatRequest {
            task: Task::PageDescription,
            system: "sys".into(),
            user: "describe".into(),
            image: image.then(|| ImageInput {
                media_type: "image/png".into(),
                bytes: vec![1, 2, 3],
            }),
            temperature: 0.0,
        }
    }

    #[test]
    fn body_shape() {
        let chat = OpenAiChat::new(OpenAiConfig::default());
        let body = chat.request_body(&request(false));
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "describe");
        assert_eq!(body["temperature"], 0.0);
        let body = chat.request_body(&request(true));
        assert_eq!(
            body["messages"][1]["content"][1]["image_url"]["url"],
            "data:image/png;base64,AQID"
        );
    }

    #[test]
    fn round_trip_against_local_server() {
        let server = test_server::serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"a quiet page"}}]}"#.into(),
        )]);
        std::env::set_var("M2M_TEST_OPENAI_KEY", "k");
        let chat = OpenAiChat::new(OpenAiConfig {
            endpoint: format!("{}/v1/chat/completions", server.url),
            token_env: "M2M_TEST_OPENAI_KEY".into(),
            ..Default::default()
        });
        assert_eq!(chat.complete(&request(false)).unwrap(), "a quiet page");
        let sent = server.requests.lock().unwrap()[0].to_ascii_lowercase();
        assert!(sent.contains("authorization: bearer k"));
    }

    #[test]
    fn missing_key_is_a_backend_error() {
        let chat = OpenAiChat::new(OpenAiConfig {
            token_env: "M2M_TEST_KEY_THAT_IS_NOT_SET".into(),
            ..Default::default()
        });
        assert!(chat.complete(&request(false)).is_err());
    }

    #[test]
    fn parse_errors() {
        assert!(parse_completion(&json!({"choices": []})).is_err());
    }
}
