//! Text-to-music backends.
//!
//! [`MockSynth`] renders a deterministic chord arpeggio from the caption so the
//! whole pipeline runs offline; [`HttpMusicBackend`] talks to a hosted model.

mod http;
mod mock;

use thiserror::Error;

use crate::audio::{AudioError, AudioTrack};

pub use http::{HttpMusicBackend, HttpMusicConfig, MusicHttpRequest, MusicHttpResponse};
pub use mock::{CaptionTraits, Lexicon, MockSynth, Mode, Register};

pub const DEFAULT_PAGE_DURATION_S: f64 = 30.0;
pub const MOCK_SAMPLE_RATE: u32 = 22_050;
/// Length of the previous page's tail passed as conditioning.
pub const CONDITIONING_TAIL_S: f64 = 3.0;
/// Allowed relative deviation of a generated track from the requested duration.
pub const DURATION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum MusicError {
    #[error("music backend error: {0}")]
    Backend(String),
    #[error("backend {0} does not support continuation conditioning")]
    UnsupportedConditioning(String),
    #[error("caption is {len} characters, backend limit is {limit}")]
    CaptionTooLong { len: usize, limit: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend returned {got:.3} s for a {requested:.3} s request")]
    DurationOutOfTolerance { requested: f64, got: f64 },
    #[error("backend returned {got} Hz, declared {declared} Hz")]
    RateMismatch { declared: u32, got: u32 },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MusicRequest {
    pub caption: String,
    pub duration_s: f64,
    /// Tail of the previous page's track, for continuation-capable backends.
    pub conditioning: Option<AudioTrack>,
    pub seed: u64,
}

impl MusicRequest {
    pub fn new(caption: impl Into<String>, duration_s: f64, seed: u64) -> Self {
        MusicRequest {
            caption: caption.into(),
            duration_s,
            conditioning: None,
            seed,
        }
    }

    pub fn with_conditioning(mut self, previous: &AudioTrack) -> Self {
        self.conditioning = Some(previous.tail(CONDITIONING_TAIL_S));
        self
    }

    pub fn validate(&self) -> Result<(), MusicError> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(MusicError::InvalidRequest(format!(
                "duration must be positive, got {}",
                self.duration_s
            )));
        }
        if self.caption.trim().is_empty() {
            return Err(MusicError::InvalidRequest("caption is empty".into()));
        }
        Ok(())
    }
}

pub trait MusicBackend: Send + Sync {
    fn id(&self) -> String;
    fn sample_rate(&self) -> u32;
    fn supports_continuation(&self) -> bool;
    /// In-painting is exposed as a capability flag only; no shipped backend implements it.
    fn supports_inpainting(&self) -> bool {
        false
    }
    fn max_caption_chars(&self) -> usize;
    /// `None` means unlimited concurrent requests.
    fn max_concurrency(&self) -> Option<usize>;
    fn generate(&self, request: &MusicRequest) -> Result<AudioTrack, MusicError>;
}

/// Validate `request`, dispatch it, and check the returned track against the
/// request (duration within 5 %, declared sample rate, sample range).
pub fn synthesize(request: &MusicRequest, backend: &dyn MusicBackend) -> Result<AudioTrack, MusicError> {
    request.validate()?;
    let len = request.caption.chars().count();
    if len > backend.max_caption_chars() {
        return Err(MusicError::CaptionTooLong {
            len,
            limit: backend.max_caption_chars(),
        });
    }
    if request.conditioning.is_some() && !backend.supports_continuation() {
        return Err(MusicError::UnsupportedConditioning(backend.id()));
    }
    let track = backend.generate(request)?;
    if track.sample_rate != backend.sample_rate() {
        return Err(MusicError::RateMismatch {
            declared: backend.sample_rate(),
            got: track.sample_rate,
        });
    }
    track.validate()?;
    let got = track.duration_s();
    if (got - request.duration_s).abs() > DURATION_TOLERANCE * request.duration_s {
        return Err(MusicError::DurationOutOfTolerance {
            requested: request.duration_s,
            got,
        });
    }
    Ok(track)
}
