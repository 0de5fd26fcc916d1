//! Sampled audio with a per-page segment map, and 16-bit PCM WAV interchange.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("channels have different lengths")]
    RaggedChannels,
    #[error("track has no channels")]
    NoChannels,
    #[error("sample {index} on channel {channel} is {value}, outside [-1, 1]")]
    OutOfRange { channel: usize, index: usize, value: f32 },
    #[error("segment map is not ordered and non-overlapping within the track")]
    BadSegmentMap,
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

/// One page's span within a track, `[start_sample, end_sample)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub page_index: usize,
    pub start_sample: usize,
    pub end_sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    /// One sample vector per channel.
    pub samples: Vec<Vec<f32>>,
    pub sample_rate: u32,
    pub segment_map: Vec<Segment>,
}

impl AudioTrack {
    pub fn new(samples: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self, AudioError> {
        let track = AudioTrack {
            samples,
            sample_rate,
            segment_map: Vec::new(),
        };
        track.validate()?;
        Ok(track)
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioTrack {
            samples: vec![samples],
            sample_rate,
            segment_map: Vec::new(),
        }
    }

    /// Tag the whole track as belonging to one page.
    pub fn for_page(mut self, page_index: usize) -> Self {
        self.segment_map = vec![Segment {
            page_index,
            start_sample: 0,
            end_sample: self.len(),
        }];
        self
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples
            .iter()
            .flatten()
            .fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// The last `seconds` of the track (or the whole track if shorter), without segment map.
    pub fn tail(&self, seconds: f64) -> AudioTrack {
        let n = ((seconds * self.sample_rate as f64).round() as usize).min(self.len());
        let start = self.len() - n;
        AudioTrack {
            samples: self.samples.iter().map(|c| c[start..].to_vec()).collect(),
            sample_rate: self.sample_rate,
            segment_map: Vec::new(),
        }
    }

    /// Trim or loop the track to exactly `n` samples. The segment map is reset.
    pub fn fit_to_len(&self, n: usize) -> AudioTrack {
        let samples = self
            .samples
            .iter()
            .map(|c| {
                if c.is_empty() {
                    vec![0.0; n]
                } else {
                    c.iter().copied().cycle().take(n).collect()
                }
            })
            .collect();
        AudioTrack {
            samples,
            sample_rate: self.sample_rate,
            segment_map: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        let len = self.samples.first().ok_or(AudioError::NoChannels)?.len();
        if self.samples.iter().any(|c| c.len() != len) {
            return Err(AudioError::RaggedChannels);
        }
        for (channel, c) in self.samples.iter().enumerate() {
            if let Some((index, &value)) = c
                .iter()
                .enumerate()
                .find(|(_, s)| !(s.abs() <= 1.0))
            {
                return Err(AudioError::OutOfRange {
                    channel,
                    index,
                    value,
                });
            }
        }
        let mut cursor = 0;
        for seg in &self.segment_map {
            if seg.start_sample < cursor || seg.end_sample < seg.start_sample || seg.end_sample > len {
                return Err(AudioError::BadSegmentMap);
            }
            cursor = seg.end_sample;
        }
        Ok(())
    }

    /// Encode as 16-bit PCM WAV.
    pub fn to_wav_bytes(&self) -> Result<Vec<u8>, AudioError> {
        let spec = hound::WavSpec {
            channels: self.channels() as u16,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cursor = Cursor::new(Vec::new());
        {
            let mut writer = hound::WavWriter::new(&mut cursor, spec)?;
            for i in 0..self.len() {
                for c in &self.samples {
                    writer.write_sample(quantize(c[i]))?;
                }
            }
            writer.finalize()?;
        }
        Ok(cursor.into_inner())
    }

    pub fn from_wav_bytes(bytes: &[u8]) -> Result<Self, AudioError> {
        let mut reader = hound::WavReader::new(Cursor::new(bytes))?;
        let spec = reader.spec();
        let channels = spec.channels as usize;
        let mut samples = vec![Vec::new(); channels];
        match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => {
                for (i, s) in reader.samples::<i16>().enumerate() {
                    samples[i % channels].push(s? as f32 / 32767.0);
                }
            }
            (hound::SampleFormat::Float, 32) => {
                for (i, s) in reader.samples::<f32>().enumerate() {
                    samples[i % channels].push(s?.clamp(-1.0, 1.0));
                }
            }
            (hound::SampleFormat::Int, bits) => {
                let scale = ((1i64 << (bits - 1)) - 1) as f32;
                for (i, s) in reader.samples::<i32>().enumerate() {
                    samples[i % channels].push((s? as f32 / scale).clamp(-1.0, 1.0));
                }
            }
            _ => return Err(AudioError::Wav(hound::Error::Unsupported)),
        }
        for c in samples.iter_mut() {
            for s in c.iter_mut() {
                *s = s.clamp(-1.0, 1.0);
            }
        }
        AudioTrack::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> std::io::Result<()> {
        let bytes = self
            .to_wav_bytes()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        std::fs::write(path, bytes)
    }

    pub fn read_wav(path: &Path) -> Result<Self, AudioError> {
        let bytes = std::fs::read(path).map_err(|e| AudioError::Wav(hound::Error::IoError(e)))?;
        Self::from_wav_bytes(&bytes)
    }
}

fn quantize(sample: f32) -> i16 {
    (sample.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_within_quantization() {
        let samples: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.01).sin() * 0.9).collect();
        let track = AudioTrack::mono(samples.clone(), 22_050);
        let back = AudioTrack::from_wav_bytes(&track.to_wav_bytes().unwrap()).unwrap();
        assert_eq!(back.sample_rate, 22_050);
        assert_eq!(back.len(), 1000);
        for (a, b) in samples.iter().zip(&back.samples[0]) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn rejects_out_of_range_and_ragged() {
        assert!(matches!(
            AudioTrack::new(vec![vec![0.0, 1.5]], 8000),
            Err(AudioError::OutOfRange { .. })
        ));
        assert!(matches!(
            AudioTrack::new(vec![vec![0.0], vec![0.0, 0.0]], 8000),
            Err(AudioError::RaggedChannels)
        ));
        assert!(matches!(
            AudioTrack::new(vec![vec![f32::NAN]], 8000),
            Err(AudioError::OutOfRange { .. })
        ));
    }

    #[test]
    fn fit_to_len_loops_and_trims() {
        let t = AudioTrack::mono(vec![0.1, 0.2, 0.3], 10);
        assert_eq!(t.fit_to_len(7).samples[0], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3, 0.1]);
        assert_eq!(t.fit_to_len(2).samples[0], vec![0.1, 0.2]);
    }

    #[test]
    fn tail_takes_last_seconds() {
        let t = AudioTrack::mono((0..100).map(|i| i as f32 / 100.0).collect(), 10);
        let tail = t.tail(3.0);
        assert_eq!(tail.len(), 30);
        assert_eq!(tail.samples[0][0], 0.7);
    }
}
