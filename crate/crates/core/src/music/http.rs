use std::fs;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{MusicBackend, MusicError, MusicRequest};
use crate::audio::AudioTrack;
use crate::digest::{json_digest, sha256_hex};
use crate::http_client::{self, RetryPolicy};

/// Adapter settings. The bearer token is read from the environment variable
/// named by `token_env` at request time, never stored in configs or manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpMusicConfig {
    pub endpoint: String,
    pub token_env: String,
    /// Native rate of the remote model; recorded in every artifact.
    pub sample_rate: u32,
    pub supports_continuation: bool,
    pub max_caption_chars: usize,
    pub max_concurrency: usize,
    /// Minimum spacing between request starts.
    pub min_interval_ms: u64,
    pub retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_s: u64,
    pub cache_dir: Option<PathBuf>,
}

impl Default for HttpMusicConfig {
    fn default() -> Self {
        HttpMusicConfig {
            endpoint: "http://localhost:8700/generate".into(),
            token_env: "M2M_MUSIC_API_TOKEN".into(),
            sample_rate: 24_000,
            supports_continuation: true,
            max_caption_chars: 400,
            max_concurrency: 2,
            min_interval_ms: 0,
            retries: 3,
            initial_backoff_ms: 500,
            timeout_s: 600,
            cache_dir: None,
        }
    }
}

/// Request body sent to the generation endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicHttpRequest {
    pub caption: String,
    pub duration_s: f64,
    pub seed: u64,
    /// 16-bit PCM WAV of the previous page's tail, base64-encoded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditioning_wav_base64: Option<String>,
}

/// Response body expected from the generation endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicHttpResponse {
    pub sample_rate: u32,
    pub audio_wav_base64: String,
}

struct Throttle {
    in_flight: usize,
    last_start: Option<Instant>,
}

pub struct HttpMusicBackend {
    config: HttpMusicConfig,
    agent: ureq::Agent,
    policy: RetryPolicy,
    throttle: Mutex<Throttle>,
    freed: Condvar,
}

impl HttpMusicBackend {
    pub fn new(config: HttpMusicConfig) -> Self {
        let policy = RetryPolicy {
            retries: config.retries,
            initial_backoff: Duration::from_millis(config.initial_backoff_ms),
            timeout: Duration::from_secs(config.timeout_s),
        };
        HttpMusicBackend {
            agent: http_client::agent(&policy),
            policy,
            config,
            throttle: Mutex::new(Throttle {
                in_flight: 0,
                last_start: None,
            }),
            freed: Condvar::new(),
        }
    }

    fn body(request: &MusicRequest) -> Result<MusicHttpRequest, MusicError> {
        let conditioning_wav_base64 = match &request.conditioning {
            Some(tail) => Some(BASE64.encode(tail.to_wav_bytes()?)),
            None => None,
        };
        Ok(MusicHttpRequest {
            caption: request.caption.clone(),
            duration_s: request.duration_s,
            seed: request.seed,
            conditioning_wav_base64,
        })
    }

    fn cache_path(&self, body: &MusicHttpRequest) -> Option<PathBuf> {
        let key = json_digest(&(&self.config.endpoint, body));
        self.config
            .cache_dir
            .as_ref()
            .map(|dir| dir.join(format!("{}.wav", &key[..32])))
    }

    fn acquire(&self) {
        let mut state = self.throttle.lock().expect("throttle poisoned");
        while state.in_flight >= self.config.max_concurrency.max(1) {
            state = self.freed.wait(state).expect("throttle poisoned");
        }
        let interval = Duration::from_millis(self.config.min_interval_ms);
        if let Some(last) = state.last_start {
            let elapsed = last.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        state.last_start = Some(Instant::now());
        state.in_flight += 1;
    }

    fn release(&self) {
        let mut state = self.throttle.lock().expect("throttle poisoned");
        state.in_flight -= 1;
        self.freed.notify_one();
    }
}

impl MusicBackend for HttpMusicBackend {
    fn id(&self) -> String {
        format!("http-music@{}", self.config.endpoint)
    }

    fn sample_rate(&self) -> u32 {
        self.config.sample_rate
    }

    fn supports_continuation(&self) -> bool {
        self.config.supports_continuation
    }

    fn max_caption_chars(&self) -> usize {
        self.config.max_caption_chars
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(self.config.max_concurrency.max(1))
    }

    fn generate(&self, request: &MusicRequest) -> Result<AudioTrack, MusicError> {
        let body = Self::body(request)?;
        let cache = self.cache_path(&body);
        if let Some(path) = &cache {
            if path.is_file() {
                log::debug!("music cache hit {}", path.display());
                return Ok(AudioTrack::read_wav(path)?);
            }
        }
        let token = std::env::var(&self.config.token_env).ok();
        self.acquire();
        let result: Result<MusicHttpResponse, String> = http_client::post_json(
            &self.agent,
            &self.config.endpoint,
            token.as_deref(),
            &body,
            &self.policy,
        );
        self.release();
        let response = result.map_err(MusicError::Backend)?;
        let wav = BASE64
            .decode(response.audio_wav_base64.as_bytes())
            .map_err(|e| MusicError::Backend(format!("audio payload is not base64: {e}")))?;
        let track = AudioTrack::from_wav_bytes(&wav)?;
        if track.sample_rate != response.sample_rate {
            return Err(MusicError::Backend(format!(
                "response declares {} Hz but the WAV is {} Hz",
                response.sample_rate, track.sample_rate
            )));
        }
        if let Some(path) = cache {
            if let Some(dir) = path.parent() {
                let _ = fs::create_dir_all(dir);
            }
            if let Err(e) = fs::write(&path, &wav) {
                log::warn!("could not write music cache {}: {e}", path.display());
            }
        }
        log::info!("generated {:.1} s (wav sha256 {})", track.duration_s(), &sha256_hex(&wav)[..12]);
        Ok(track)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http_client::test_server;
    use crate::music::synthesize;

    fn wav_response(seconds: f64, sr: u32) -> String {
        let track = AudioTrack::mono(vec![0.25; (seconds * sr as f64) as usize], sr);
        serde_json::to_string(&MusicHttpResponse {
            sample_rate: sr,
            audio_wav_base64: BASE64.encode(track.to_wav_bytes().unwrap()),
        })
        .unwrap()
    }

    fn config(url: &str, cache: Option<PathBuf>) -> HttpMusicConfig {
        HttpMusicConfig {
            endpoint: format!("{url}/generate"),
            token_env: "M2M_TEST_MUSIC_TOKEN_UNSET".into(),
            sample_rate: 8000,
            initial_backoff_ms: 1,
            timeout_s: 10,
            cache_dir: cache,
            ..Default::default()
        }
    }

    #[test]
    fn retries_then_caches() {
        let server = test_server::serve(vec![
            (503, "{}".into()),
            (200, wav_response(2.0, 8000)),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let backend = HttpMusicBackend::new(config(&server.url, Some(dir.path().to_path_buf())));
        let req = MusicRequest::new("calm piano", 2.0, 3);
        let track = synthesize(&req, &backend).unwrap();
        assert_eq!(track.sample_rate, 8000);
        assert_eq!(server.requests.lock().unwrap().len(), 2);
        let sent = server.requests.lock().unwrap()[1].clone();
        assert!(sent.contains("\"caption\": \"calm piano\""), "{sent}");
        assert!(!sent.contains("conditioning_wav_base64"));

        // served from cache: the scripted server has no responses left
        let again = synthesize(&req, &backend).unwrap();
        assert_eq!(again, track);
        assert_eq!(server.requests.lock().unwrap().len(), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let server = test_server::serve(vec![(400, r#"{"error":"bad caption"}"#.into())]);
        let backend = HttpMusicBackend::new(config(&server.url, None));
        let err = synthesize(&MusicRequest::new("x", 2.0, 0), &backend).unwrap_err();
        assert!(matches!(err, MusicError::Backend(ref m) if m.contains("400")), "{err}");
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let server = test_server::serve(vec![(200, wav_response(2.0, 16000))]);
        let backend = HttpMusicBackend::new(config(&server.url, None));
        assert!(matches!(
            synthesize(&MusicRequest::new("x", 2.0, 0), &backend),
            Err(MusicError::RateMismatch { declared: 8000, got: 16000 })
        ));
    }
}
