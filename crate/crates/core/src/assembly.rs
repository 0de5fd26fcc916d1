//! Joining per-page tracks into one soundtrack.
//!
//! Fade boundaries use an equal-power crossfade: over the overlap, with
//! `t` running from 0 to 1, the outgoing track is weighted `cos(πt/2)` and the
//! incoming one `sin(πt/2)`, so the squared gains always sum to one.
//! Continuation boundaries are plain sample-exact joins, meant for tracks that
//! were generated conditioned on the previous page's tail.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioTrack, Segment};

pub const DEFAULT_OVERLAP_S: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("sample rate {left} Hz does not match {right} Hz")]
    RateMismatch { left: u32, right: u32 },
    #[error("channel count {left} does not match {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("overlap of {overlap} samples exceeds half of the shorter track ({limit})")]
    OverlapTooLong { overlap: usize, limit: usize },
    #[error("overlap must be a non-negative number of seconds, got {0}")]
    NegativeOverlap(f64),
    #[error("plan has {got} transitions for {tracks} tracks")]
    PlanLengthMismatch { got: usize, tracks: usize },
    #[error("nothing to assemble")]
    NoTracks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionMode {
    Fade,
    Continuation,
}

/// How each internal page boundary is joined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionPlan {
    pub modes: Vec<TransitionMode>,
    pub overlap_s: f64,
}

impl TransitionPlan {
    pub fn fades(boundaries: usize, overlap_s: f64) -> Self {
        TransitionPlan {
            modes: vec![TransitionMode::Fade; boundaries],
            overlap_s,
        }
    }

    pub fn continuations(boundaries: usize) -> Self {
        TransitionPlan {
            modes: vec![TransitionMode::Continuation; boundaries],
            overlap_s: 0.0,
        }
    }
}

/// Outgoing gain at normalized overlap position `t ∈ [0, 1]`.
pub fn fade_out_gain(t: f64) -> f64 {
    (FRAC_PI_2 * t).cos()
}

/// Incoming gain at normalized overlap position `t ∈ [0, 1]`.
pub fn fade_in_gain(t: f64) -> f64 {
    (FRAC_PI_2 * t).sin()
}

/// `(outgoing, incoming)` gains for each of `n` overlap samples, sampled at
/// sample centres `t = (i + 0.5) / n`.
pub fn overlap_gains(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            (fade_out_gain(t), fade_in_gain(t))
        })
        .collect()
}

fn overlap_samples(overlap_s: f64, sample_rate: u32) -> Result<usize, AssemblyError> {
    if !(overlap_s >= 0.0) {
        return Err(AssemblyError::NegativeOverlap(overlap_s));
    }
    Ok((overlap_s * sample_rate as f64).round() as usize)
}

fn check_compatible(a: &AudioTrack, b: &AudioTrack) -> Result<(), AssemblyError> {
    if a.sample_rate != b.sample_rate {
        return Err(AssemblyError::RateMismatch {
            left: a.sample_rate,
            right: b.sample_rate,
        });
    }
    if a.channels() != b.channels() {
        return Err(AssemblyError::ChannelMismatch {
            left: a.channels(),
            right: b.channels(),
        });
    }
    Ok(())
}

/// Equal-power crossfade without the output limiter.
fn mix(a: &AudioTrack, b: &AudioTrack, overlap: usize) -> Result<AudioTrack, AssemblyError> {
    check_compatible(a, b)?;
    let limit = a.len().min(b.len()) / 2;
    if overlap > limit {
        return Err(AssemblyError::OverlapTooLong { overlap, limit });
    }
    let (la, lb) = (a.len(), b.len());
    let start = la - overlap;
    let gains = overlap_gains(overlap);
    let samples = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(ca, cb)| {
            let mut out = Vec::with_capacity(la + lb - overlap);
            out.extend_from_slice(&ca[..start]);
            out.extend(gains.iter().enumerate().map(|(i, (ga, gb))| {
                (ca[start + i] as f64 * ga + cb[i] as f64 * gb) as f32
            }));
            out.extend_from_slice(&cb[overlap..]);
            out
        })
        .collect();

    // The page boundary sits at the middle of the overlap.
    let boundary = start + overlap / 2;
    let mut segment_map: Vec<Segment> = a
        .segment_map
        .iter()
        .map(|s| Segment {
            page_index: s.page_index,
            start_sample: s.start_sample.min(boundary),
            end_sample: s.end_sample.min(boundary),
        })
        .collect();
    segment_map.extend(b.segment_map.iter().map(|s| Segment {
        page_index: s.page_index,
        start_sample: (s.start_sample + start).max(boundary),
        end_sample: (s.end_sample + start).max(boundary),
    }));
    Ok(AudioTrack {
        samples,
        sample_rate: a.sample_rate,
        segment_map,
    })
}

/// Scale the track down if any sample exceeds full scale.
pub fn limit_peak(mut track: AudioTrack) -> AudioTrack {
    let peak = track.peak();
    if peak > 1.0 {
        let gain = 1.0 / peak;
        for s in track.samples.iter_mut().flatten() {
            *s = (*s * gain).clamp(-1.0, 1.0);
        }
    }
    track
}

/// Crossfade `a` into `b` over `overlap_s` seconds, then apply the peak limiter.
///
/// The result is `len(a) + len(b) - overlap` samples long.
pub fn crossfade(a: &AudioTrack, b: &AudioTrack, overlap_s: f64) -> Result<AudioTrack, AssemblyError> {
    let overlap = overlap_samples(overlap_s, a.sample_rate)?;
    Ok(limit_peak(mix(a, b, overlap)?))
}

/// Sample-exact join for continuation-generated tracks.
pub fn butt_join(a: &AudioTrack, b: &AudioTrack) -> Result<AudioTrack, AssemblyError> {
    mix(a, b, 0)
}

/// Join tracks left to right according to `plan`, limiting once at the end.
pub fn assemble(tracks: &[AudioTrack], plan: &TransitionPlan) -> Result<AudioTrack, AssemblyError> {
    let (first, rest) = tracks.split_first().ok_or(AssemblyError::NoTracks)?;
    if plan.modes.len() != rest.len() {
        return Err(AssemblyError::PlanLengthMismatch {
            got: plan.modes.len(),
            tracks: tracks.len(),
        });
    }
    if rest.is_empty() {
        return Ok(first.clone());
    }
    let overlap = overlap_samples(plan.overlap_s, first.sample_rate)?;
    let mut acc = first.clone();
    for (track, mode) in rest.iter().zip(&plan.modes) {
        acc = match mode {
            TransitionMode::Fade => mix(&acc, track, overlap)?,
            TransitionMode::Continuation => mix(&acc, track, 0)?,
        };
    }
    Ok(limit_peak(acc))
}

/// Page start times for synchronised playback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueSheet {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub cues: Vec<Cue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    pub page_index: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl CueSheet {
    pub fn from_track(track: &AudioTrack) -> Self {
        let sr = track.sample_rate as f64;
        CueSheet {
            sample_rate: track.sample_rate,
            duration_s: track.duration_s(),
            cues: track
                .segment_map
                .iter()
                .map(|s| Cue {
                    page_index: s.page_index,
                    start_s: s.start_sample as f64 / sr,
                    end_s: s.end_sample as f64 / sr,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, amp: f32, seconds: f64, sr: u32, page: usize) -> AudioTrack {
        let n = (seconds * sr as f64) as usize;
        AudioTrack::mono(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32)
                .collect(),
            sr,
        )
        .for_page(page)
    }

    #[test]
    fn zero_overlap_is_concatenation() {
        let a = tone(220.0, 0.5, 1.0, 8000, 0);
        let b = tone(330.0, 0.5, 1.5, 8000, 1);
        let out = crossfade(&a, &b, 0.0).unwrap();
        let expected: Vec<f32> = a.samples[0].iter().chain(&b.samples[0]).copied().collect();
        assert_eq!(out.samples[0], expected);
        assert_eq!(out.len(), a.len() + b.len());
    }

    #[test]
    fn midpoint_gains_are_equal() {
        let half = 0.5f64.sqrt();
        assert!((fade_out_gain(0.5) - half).abs() < 1e-12);
        assert!((fade_in_gain(0.5) - half).abs() < 1e-12);
        assert_eq!(fade_out_gain(0.0), 1.0);
        assert!(fade_in_gain(0.0).abs() < 1e-12);
    }

    #[test]
    fn full_scale_dc_is_limited() {
        let a = AudioTrack::mono(vec![1.0; 400], 100).for_page(0);
        let b = AudioTrack::mono(vec![1.0; 400], 100).for_page(1);
        let raw = mix(&a, &b, 100).unwrap();
        // cos + sin peaks at √2 at the midpoint
        assert!(raw.peak() as f64 <= 2f64.sqrt() + 1e-6);
        assert!(raw.peak() > 1.0);
        let limited = crossfade(&a, &b, 1.0).unwrap();
        assert!(limited.peak() <= 1.0);
    }

    #[test]
    fn errors() {
        let a = tone(220.0, 0.5, 1.0, 8000, 0);
        let b = tone(220.0, 0.5, 1.0, 16000, 1);
        assert!(matches!(crossfade(&a, &b, 0.1), Err(AssemblyError::RateMismatch { .. })));
        let c = tone(220.0, 0.5, 1.0, 8000, 1);
        assert!(matches!(crossfade(&a, &c, 0.6), Err(AssemblyError::OverlapTooLong { .. })));
        assert!(crossfade(&a, &c, 0.5).is_ok());
        assert!(matches!(
            assemble(&[a.clone(), c.clone(), a.clone(), c], &TransitionPlan::fades(1, 0.1)),
            Err(AssemblyError::PlanLengthMismatch { got: 1, tracks: 4 })
        ));
        assert_eq!(assemble(&[], &TransitionPlan::fades(0, 0.1)), Err(AssemblyError::NoTracks));
    }

    #[test]
    fn single_track_unchanged() {
        let a = tone(220.0, 0.5, 1.0, 8000, 3);
        assert_eq!(assemble(&[a.clone()], &TransitionPlan::fades(0, 2.0)).unwrap(), a);
    }

    #[test]
    fn segment_boundary_at_overlap_midpoint() {
        let a = tone(220.0, 0.3, 1.0, 1000, 0);
        let b = tone(330.0, 0.3, 1.0, 1000, 1);
        let out = crossfade(&a, &b, 0.2).unwrap();
        assert_eq!(out.segment_map[0].end_sample, 900);
        assert_eq!(out.segment_map[1].start_sample, 900);
        assert_eq!(out.segment_map[1].end_sample, 1800);
        out.validate().unwrap();
    }

    #[test]
    fn continuation_joins_sample_exact() {
        let a = tone(220.0, 0.3, 1.0, 1000, 0);
        let b = tone(330.0, 0.3, 0.5, 1000, 1);
        let out = assemble(&[a.clone(), b.clone()], &TransitionPlan::continuations(1)).unwrap();
        assert_eq!(&out.samples[0][..1000], &a.samples[0][..]);
        assert_eq!(&out.samples[0][1000..], &b.samples[0][..]);
    }

    #[test]
    fn equal_rms_inputs_keep_rms_through_overlap() {
        let sr = 8000;
        let a = tone(440.0, 0.5, 2.0, sr, 0);
        let b = tone(523.25, 0.5, 2.0, sr, 1);
        let out = crossfade(&a, &b, 1.0).unwrap();
        let rms = |s: &[f32]| (s.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        let input = rms(&a.samples[0]);
        let overlap = rms(&out.samples[0][8000..16000]);
        let db = 20.0 * (overlap / input).log10();
        assert!(db.abs() <= 1.5, "{db} dB");
    }

    proptest! {
        #[test]
        fn squared_gains_sum_to_one(n in 1usize..5000) {
            for (ga, gb) in overlap_gains(n) {
                prop_assert!((ga * ga + gb * gb - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn fade_bracketing_is_sample_exact(
            lens in proptest::collection::vec(40usize..120, 3),
            overlap in 0usize..20,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tracks: Vec<AudioTrack> = lens
                .iter()
                .enumerate()
                .map(|(p, &n)| AudioTrack::mono((0..n).map(|_| rng.random_range(-0.3f32..0.3)).collect(), 100).for_page(p))
                .collect();
            let o = overlap as f64 / 100.0;
            let left = crossfade(&crossfade(&tracks[0], &tracks[1], o).unwrap(), &tracks[2], o).unwrap();
            let right = crossfade(&tracks[0], &crossfade(&tracks[1], &tracks[2], o).unwrap(), o).unwrap();
            let folded = assemble(&tracks, &TransitionPlan::fades(2, o)).unwrap();
            prop_assert_eq!(&left, &right);
            prop_assert_eq!(&left, &folded);
        }
    }
}
