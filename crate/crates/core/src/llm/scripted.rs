use std::collections::VecDeque;
use std::sync::Mutex;

use super::{BackendError, ChatRequest, LanguageModel};

/// Returns canned responses in order and records every request it receives.
/// Once the script runs out, the last response repeats.
pub struct ScriptedLanguageModel {
    responses: Mutex<VecDeque<Result<String, BackendError>>>,
    last: Mutex<Option<Result<String, BackendError>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedLanguageModel {
    pub fn new(responses: Vec<Result<String, BackendError>>) -> Self {
        ScriptedLanguageModel {
            responses: Mutex::new(responses.into()),
            last: Mutex::new(None),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn ok<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::new(responses.into_iter().map(|s| Ok(s.into())).collect())
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl LanguageModel for ScriptedLanguageModel {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        let next = self.responses.lock().unwrap().pop_front();
        let mut last = self.last.lock().unwrap();
        match next {
            Some(r) => {
                *last = Some(r.clone());
                r
            }
            None => last
                .clone()
                .unwrap_or_else(|| Err(BackendError("script is empty".into()))),
        }
    }
}
