use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MusicBackend, MusicError, MusicRequest, MOCK_SAMPLE_RATE};
use crate::audio::AudioTrack;
use crate::digest::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Register {
    Low,
    Mid,
    High,
}

/// Keyword lists mapping caption words to musical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub slow_words: Vec<String>,
    pub fast_words: Vec<String>,
    pub minor_words: Vec<String>,
    pub major_words: Vec<String>,
    pub low_words: Vec<String>,
    pub high_words: Vec<String>,
    pub slow_bpm: f64,
    pub default_bpm: f64,
    pub fast_bpm: f64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon {
            slow_words: words(&[
                "slow", "calm", "gentle", "serene", "peaceful", "ballad", "lullaby", "tranquil",
                "soft", "melancholic", "wistful", "quiet",
            ]),
            fast_words: words(&[
                "fast", "upbeat", "energetic", "frantic", "action", "intense", "driving", "lively",
                "urgent", "rapid", "racing",
            ]),
            minor_words: words(&[
                "sad", "minor", "melancholic", "dark", "tense", "ominous", "somber", "sorrowful",
                "mysterious", "fearful", "angry", "gloomy", "wistful", "anxious",
            ]),
            major_words: words(&[
                "happy", "major", "bright", "cheerful", "joyful", "warm", "hopeful", "triumphant",
                "playful", "sunny",
            ]),
            low_words: words(&["low", "deep", "bass", "cello", "brooding", "heavy"]),
            high_words: words(&["high", "airy", "celesta", "sparkling", "flute", "bell", "glockenspiel"]),
            slow_bpm: 64.0,
            default_bpm: 100.0,
            fast_bpm: 140.0,
        }
    }
}

/// Parameters the lexicon extracts from a caption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionTraits {
    pub bpm: f64,
    pub mode: Mode,
    pub register: Register,
}

impl Lexicon {
    pub fn traits(&self, caption: &str) -> CaptionTraits {
        let tokens: Vec<String> = caption
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let count = |list: &[String]| tokens.iter().filter(|t| list.contains(t)).count();
        let (slow, fast) = (count(&self.slow_words), count(&self.fast_words));
        let (minor, major) = (count(&self.minor_words), count(&self.major_words));
        let (low, high) = (count(&self.low_words), count(&self.high_words));
        CaptionTraits {
            bpm: if slow > fast {
                self.slow_bpm
            } else if fast > slow {
                self.fast_bpm
            } else {
                self.default_bpm
            },
            mode: if minor > major { Mode::Minor } else { Mode::Major },
            register: if low > high {
                Register::Low
            } else if high > low {
                Register::High
            } else {
                Register::Mid
            },
        }
    }
}

/// Deterministic offline text-to-music stand-in.
///
/// Output depends only on the request: tempo, mode and register come from the
/// lexicon, everything else (root note, progression, voicing) from a hash of
/// the caption mixed with the seed. One arpeggio note sounds per beat.
#[derive(Debug, Clone)]
pub struct MockSynth {
    pub lexicon: Lexicon,
    pub sample_rate: u32,
    pub continuation: bool,
    pub max_caption_chars: usize,
}

impl Default for MockSynth {
    fn default() -> Self {
        MockSynth {
            lexicon: Lexicon::default(),
            sample_rate: MOCK_SAMPLE_RATE,
            continuation: true,
            max_caption_chars: 400,
        }
    }
}

const MAJOR_SCALE: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR_SCALE: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];
/// Scale-degree progressions (0-based), one chord per bar.
const PROGRESSIONS: [[usize; 4]; 6] = [
    [0, 4, 5, 3],
    [0, 5, 3, 4],
    [0, 3, 4, 0],
    [5, 3, 0, 4],
    [0, 2, 5, 4],
    [3, 4, 2, 5],
];
const PATTERNS: [[usize; 4]; 4] = [[0, 1, 2, 1], [0, 2, 1, 2], [2, 1, 0, 1], [0, 1, 2, 3]];
const PEAK: f32 = 0.8;

fn midi_to_hz(note: f64) -> f64 {
    440.0 * 2f64.powf((note - 69.0) / 12.0)
}

impl MockSynth {
    pub fn without_continuation() -> Self {
        MockSynth {
            continuation: false,
            ..Default::default()
        }
    }

    pub fn render(&self, request: &MusicRequest) -> AudioTrack {
        let sr = self.sample_rate as f64;
        let n = (request.duration_s * sr).round() as usize;
        let traits = self.lexicon.traits(&request.caption);

        let hash = sha256_hex(request.caption.as_bytes());
        let caption_seed = u64::from_str_radix(&hash[..16], 16).expect("hex digest");
        let mut rng = ChaCha8Rng::seed_from_u64(caption_seed ^ request.seed.rotate_left(17));
        let root_pc = rng.random_range(0..12) as f64;
        let progression = PROGRESSIONS[rng.random_range(0..PROGRESSIONS.len())];
        let pattern = PATTERNS[rng.random_range(0..PATTERNS.len())];
        let harmonics: [f64; 3] = [1.0, rng.random_range(0.1..0.5), rng.random_range(0.0..0.25)];
        let base = match traits.register {
            Register::Low => 45.0,
            Register::Mid => 57.0,
            Register::High => 69.0,
        } + root_pc;
        let scale = match traits.mode {
            Mode::Major => MAJOR_SCALE,
            Mode::Minor => MINOR_SCALE,
        };

        let beat = 60.0 / traits.bpm;
        let beat_samples = beat * sr;
        let decay = 1.0 / (0.3 * beat);
        let attack = 0.005 * sr;
        let nyquist = sr / 2.0;
        let mut out = vec![0.0f64; n];

        let mut beat_index = 0usize;
        loop {
            let onset = (beat_index as f64 * beat_samples).round() as usize;
            if onset >= n {
                break;
            }
            let bar = beat_index / 4;
            let degree = progression[bar % progression.len()];
            let chord_tone = pattern[beat_index % 4];
            let step = degree + 2 * chord_tone;
            let pitch = base + scale[step % 7] as f64 + 12.0 * (step / 7) as f64;
            let mut voices = vec![(midi_to_hz(pitch), 0.5)];
            if beat_index % 4 == 0 {
                voices.push((midi_to_hz(base - 12.0 + scale[degree] as f64), 0.25));
            }
            let end = (onset + (1.5 * beat_samples) as usize).min(n);
            for (freq, amp) in voices {
                for (k, weight) in harmonics.iter().enumerate() {
                    let f = freq * (k + 1) as f64;
                    if f >= nyquist || *weight == 0.0 {
                        continue;
                    }
                    let w = TAU * f / sr;
                    for (i, slot) in out[onset..end].iter_mut().enumerate() {
                        let t = i as f64 / sr;
                        let env = (i as f64 / attack).min(1.0) * (-decay * t).exp();
                        *slot += amp * weight * env * (w * i as f64).sin();
                    }
                }
            }
            beat_index += 1;
        }

        let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let gain = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
        let mut samples: Vec<f32> = out.iter().map(|s| (s * gain) as f32).collect();

        // Continuation: ramp in from the last conditioning sample so the butt
        // join with the previous page has no step.
        if let Some(tail) = &request.conditioning {
            if let Some(&last) = tail.samples.first().and_then(|c| c.last()) {
                let ramp = ((0.02 * sr) as usize).min(n);
                for (i, s) in samples[..ramp].iter_mut().enumerate() {
                    let r = i as f32 / ramp as f32;
                    *s = last * (1.0 - r) + *s * r;
                }
            }
        }
        AudioTrack::mono(samples, self.sample_rate)
    }
}

impl MusicBackend for MockSynth {
    fn id(&self) -> String {
        "mock-synth@1".into()
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn supports_continuation(&self) -> bool {
        self.continuation
    }

    fn max_caption_chars(&self) -> usize {
        self.max_caption_chars
    }

    fn max_concurrency(&self) -> Option<usize> {
        None
    }

    fn generate(&self, request: &MusicRequest) -> Result<AudioTrack, MusicError> {
        request.validate()?;
        Ok(self.render(request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::synthesize;

    /// Onset times from a 5 ms energy envelope: frames whose energy jumps by
    /// more than 3x over the previous frame, at least 150 ms apart.
    fn onsets(samples: &[f32], sr: u32) -> Vec<f64> {
        let frame = (sr as f64 * 0.005) as usize;
        let energy: Vec<f64> = samples
            .chunks(frame)
            .map(|c| c.iter().map(|s| (*s as f64).powi(2)).sum::<f64>() / c.len() as f64)
            .collect();
        let mut out = Vec::new();
        let mut last = f64::NEG_INFINITY;
        for i in 1..energy.len() {
            let t = (i * frame) as f64 / sr as f64;
            if energy[i] > 3.0 * energy[i - 1] + 1e-6 && t - last > 0.15 {
                out.push(t);
                last = t;
            }
        }
        out
    }

    fn median_spacing(times: &[f64]) -> f64 {
        let mut d: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d[d.len() / 2]
    }

    #[test]
    fn deterministic() {
        let synth = MockSynth::default();
        let req = MusicRequest::new("calm piano", 8.0, 7);
        let a = synthesize(&req, &synth).unwrap();
        let b = synthesize(&req, &synth).unwrap();
        assert_eq!(a.to_wav_bytes().unwrap(), b.to_wav_bytes().unwrap());
    }

    #[test]
    fn captions_change_output() {
        let synth = MockSynth::default();
        let a = synthesize(&MusicRequest::new("calm piano", 4.0, 7), &synth).unwrap();
        let b = synthesize(&MusicRequest::new("stormy brass fanfare", 4.0, 7), &synth).unwrap();
        assert_ne!(a.samples, b.samples);
    }

    #[test]
    fn slow_caption_is_slow() {
        let synth = MockSynth::default();
        let track = synthesize(&MusicRequest::new("a slow piano theme", 12.0, 1), &synth).unwrap();
        let spacing = median_spacing(&onsets(&track.samples[0], track.sample_rate));
        let bpm = 60.0 / spacing;
        assert!(bpm <= 70.0 + 0.5, "measured {bpm} BPM");

        let fast = synthesize(&MusicRequest::new("fast energetic chase", 12.0, 1), &synth).unwrap();
        let fast_bpm = 60.0 / median_spacing(&onsets(&fast.samples[0], fast.sample_rate));
        assert!(fast_bpm > 120.0, "measured {fast_bpm} BPM");
    }

    #[test]
    fn defaults_without_lexicon_match() {
        let t = Lexicon::default().traits("a piano piece");
        assert_eq!(t.bpm, 100.0);
        assert_eq!(t.mode, Mode::Major);
        assert_eq!(t.register, Register::Mid);
        let t = Lexicon::default().traits("Dark, ominous and deep.");
        assert_eq!(t.mode, Mode::Minor);
        assert_eq!(t.register, Register::Low);
    }

    #[test]
    fn sample_count_for_eight_seconds() {
        let track = synthesize(&MusicRequest::new("anything", 8.0, 0), &MockSynth::default()).unwrap();
        let expected = 176_400.0;
        assert!((track.len() as f64 - expected).abs() <= 0.05 * expected);
        assert_eq!(track.len(), 176_400);
        assert!(track.peak() <= 1.0);
    }

    #[test]
    fn conditioning_requires_capability() {
        let prev = AudioTrack::mono(vec![0.1; 22_050 * 4], 22_050);
        let req = MusicRequest::new("calm", 2.0, 0).with_conditioning(&prev);
        assert_eq!(req.conditioning.as_ref().unwrap().len(), 22_050 * 3);
        assert!(matches!(
            synthesize(&req, &MockSynth::without_continuation()),
            Err(MusicError::UnsupportedConditioning(_))
        ));
        let track = synthesize(&req, &MockSynth::default()).unwrap();
        assert!((track.samples[0][0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn over_limit_caption_rejected() {
        let caption = "x".repeat(401);
        assert!(matches!(
            synthesize(&MusicRequest::new(caption, 1.0, 0), &MockSynth::default()),
            Err(MusicError::CaptionTooLong { len: 401, limit: 400 })
        ));
    }

    #[test]
    fn invalid_requests() {
        let synth = MockSynth::default();
        assert!(synthesize(&MusicRequest::new("", 1.0, 0), &synth).is_err());
        assert!(synthesize(&MusicRequest::new("ok", 0.0, 0), &synth).is_err());
        assert!(synthesize(&MusicRequest::new("ok", f64::NAN, 0), &synth).is_err());
    }
}
