use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use image::RgbImage;

use super::{BackendIds, OrchestratorError};
use crate::audio::AudioTrack;
use crate::config::{BackendKind, PipelineConfig};
use crate::emotion::{load_checkpoint, DualEncoder, EmotionBackend, EmotionError};
use crate::llm::{BackendError, ChatRequest, LanguageModel, MockLanguageModel, OpenAiChat};
use crate::music::{HttpMusicBackend, MockSynth, MusicBackend, MusicError, MusicRequest};

/// Counts requests locally and into a shared total.
#[derive(Debug, Default)]
pub struct CallCounter {
    local: AtomicU64,
}

impl CallCounter {
    pub fn get(&self) -> u64 {
        self.local.load(Ordering::Relaxed)
    }
}

/// The three model backends of a pipeline, shared by every run.
#[derive(Clone)]
pub struct Backends {
    pub llm: Arc<dyn LanguageModel>,
    pub music: Arc<dyn MusicBackend>,
    pub emotion: Arc<dyn EmotionBackend>,
    total: Arc<AtomicU64>,
}

impl Backends {
    pub fn new(llm: Arc<dyn LanguageModel>, music: Arc<dyn MusicBackend>, emotion: Arc<dyn EmotionBackend>) -> Self {
        Backends {
            llm,
            music,
            emotion,
            total: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Mock or live text and music backends per `config.backend`; the face
    /// encoder is always local.
    pub fn from_config(config: &PipelineConfig) -> Result<Self, OrchestratorError> {
        let emotion = emotion_backend(config)?;
        Ok(match config.backend {
            BackendKind::Mock => Backends::new(
                Arc::new(MockLanguageModel::default()),
                Arc::new(MockSynth::default()),
                emotion,
            ),
            BackendKind::Live => Backends::new(
                Arc::new(OpenAiChat::new(config.llm.openai.clone())),
                Arc::new(HttpMusicBackend::new(config.music.http.clone())),
                emotion,
            ),
        })
    }

    pub fn ids(&self) -> BackendIds {
        BackendIds {
            llm: self.llm.id(),
            music: self.music.id(),
            emotion: self.emotion.id(),
        }
    }

    /// Requests made through counting wrappers since these backends were built.
    pub fn total_calls(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }

    pub(crate) fn counting<'a>(&'a self, counter: &'a CallCounter) -> (CountingLanguageModel<'a>, CountingMusic<'a>, CountingEmotion<'a>) {
        (
            CountingLanguageModel {
                inner: self.llm.as_ref(),
                counter,
                total: &self.total,
            },
            CountingMusic {
                inner: self.music.as_ref(),
                counter,
                total: &self.total,
            },
            CountingEmotion {
                inner: self.emotion.as_ref(),
                counter,
                total: &self.total,
            },
        )
    }
}

fn emotion_backend(config: &PipelineConfig) -> Result<Arc<dyn EmotionBackend>, OrchestratorError> {
    let e = &config.emotion;
    match &e.checkpoint {
        Some(dir) => {
            let (encoder, _) = load_checkpoint(dir).map_err(|err| OrchestratorError::Config(err.to_string()))?;
            Ok(Arc::new(encoder))
        }
        None => Ok(Arc::new(DualEncoder::base(
            e.labels.clone(),
            &e.prompt_template,
            e.shape.clone(),
            e.seed,
        ))),
    }
}

fn bump(counter: &CallCounter, total: &AtomicU64) {
    counter.local.fetch_add(1, Ordering::Relaxed);
    total.fetch_add(1, Ordering::Relaxed);
}

pub struct CountingLanguageModel<'a> {
    inner: &'a dyn LanguageModel,
    counter: &'a CallCounter,
    total: &'a AtomicU64,
}

impl LanguageModel for CountingLanguageModel<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn supports_images(&self) -> bool {
        self.inner.supports_images()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        bump(self.counter, self.total);
        self.inner.complete(request)
    }
}

pub struct CountingMusic<'a> {
    inner: &'a dyn MusicBackend,
    counter: &'a CallCounter,
    total: &'a AtomicU64,
}

impl MusicBackend for CountingMusic<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate()
    }

    fn supports_continuation(&self) -> bool {
        self.inner.supports_continuation()
    }

    fn supports_inpainting(&self) -> bool {
        self.inner.supports_inpainting()
    }

    fn max_caption_chars(&self) -> usize {
        self.inner.max_caption_chars()
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }

    fn generate(&self, request: &MusicRequest) -> Result<AudioTrack, MusicError> {
        bump(self.counter, self.total);
        self.inner.generate(request)
    }
}

pub struct CountingEmotion<'a> {
    inner: &'a dyn EmotionBackend,
    counter: &'a CallCounter,
    total: &'a AtomicU64,
}

impl EmotionBackend for CountingEmotion<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn labels(&self) -> &[String] {
        self.inner.labels()
    }

    fn probabilities(&self, face: &RgbImage) -> Result<Vec<f64>, EmotionError> {
        bump(self.counter, self.total);
        self.inner.probabilities(face)
    }
}
