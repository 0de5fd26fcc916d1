//! Randomized checks of the data invariants each module promises.

use m2m_core::assembly::{assemble, crossfade, TransitionPlan};
use m2m_core::audio::AudioTrack;
use m2m_core::corpus::{Book, DialogueLine, LineKind, Page, BOOK_SCHEMA_VERSION};
use m2m_core::emotion::{EmotionPrediction, MetricReport};
use m2m_core::evaluation::{parse_responses, rm_anova_table, synthetic_table, EvaluationError};
use m2m_core::scenes::{repair, validate_partition, ProposedBoundary};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn book(lines_per_page: &[usize]) -> Book {
    let mut dialogue = Vec::new();
    for (p, &count) in lines_per_page.iter().enumerate() {
        for k in 0..count {
            dialogue.push(DialogueLine {
                line_id: dialogue.len() as u32 + 1,
                source_id: format!("t{}", dialogue.len()),
                page_index: p,
                speaker: "Aki".into(),
                text: format!("{p}/{k}"),
                reading_order: k as u32,
                kind: LineKind::Speech,
            });
        }
    }
    Book {
        schema_version: BOOK_SCHEMA_VERSION,
        book_id: "prop".into(),
        pages: (0..lines_per_page.len())
            .map(|i| Page {
                page_index: i,
                image_ref: format!("{i}.png"),
                width: 10,
                height: 10,
                face_regions: vec![],
            })
            .collect(),
        dialogue,
    }
}

fn noise(seed: u64, n: usize, amp: f32, sr: u32) -> AudioTrack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioTrack::mono((0..n).map(|_| rng.random_range(-amp..amp)).collect(), sr)
}

fn rms(x: &[f32]) -> f64 {
    (x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn repaired_scenes_partition_pages_and_lines(
        pages in vec(0usize..4, 1..15),
        ends in vec(-5i64..60, 1..8),
    ) {
        let mut pages = pages;
        if pages.iter().all(|c| *c == 0) {
            pages[0] = 1;
        }
        let b = book(&pages);
        let proposals: Vec<ProposedBoundary> = ends
            .iter()
            .map(|&e| ProposedBoundary { last_line: e, first_line: None, rationale: String::new() })
            .collect();
        if let Ok((scenes, _)) = repair(&b, &proposals) {
            prop_assert!(validate_partition(&b, &scenes).is_ok());
            for p in 0..b.page_count() {
                prop_assert_eq!(scenes.iter().filter(|s| s.contains_page(p)).count(), 1);
            }
            prop_assert!(scenes.windows(2).all(|w| w[0].first_line_id < w[1].first_line_id));
        }
    }

    #[test]
    fn emotion_distributions_are_normalized(
        probs in vec(0.0f64..5.0, 2..8),
        tie in any::<bool>(),
    ) {
        let mut probs = probs;
        if tie {
            let m = probs.iter().cloned().fold(0.0, f64::max);
            let last = probs.len() - 1;
            probs[last] = m;
        }
        prop_assume!(probs.iter().sum::<f64>() > 0.0);
        let labels: Vec<String> = (0..probs.len()).map(|i| format!("l{}", probs.len() - i)).collect();
        let pred = EmotionPrediction::new("f1", None, &labels, &probs).unwrap();
        prop_assert!((pred.distribution.values().sum::<f64>() - 1.0).abs() <= 1e-6);
        let best = pred.distribution.values().cloned().fold(f64::MIN, f64::max);
        let first_best = pred.distribution.iter().find(|(_, p)| **p == best).unwrap().0;
        prop_assert_eq!(&pred.top_label, first_best);
    }

    #[test]
    fn metric_fractions_stay_in_range(
        k in 2usize..6,
        cells in vec(0u64..20, 36),
    ) {
        let labels: Vec<String> = (0..k).map(|i| i.to_string()).collect();
        let confusion: Vec<Vec<u64>> = (0..k).map(|r| cells[r * 6..r * 6 + k].to_vec()).collect();
        let total: u64 = confusion.iter().flatten().sum();
        let report = MetricReport::from_confusion(&labels, confusion);
        for v in [report.micro, report.macro_, report.weighted, report.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for c in report.per_class.values() {
            for v in [c.precision, c.recall, c.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        prop_assert_eq!(report.per_class.values().map(|c| c.support).sum::<u64>(), total);
    }

    #[test]
    fn anova_ignores_shifts_and_subject_order(
        n in 3usize..25,
        k in 2usize..5,
        seed in any::<u64>(),
        shift in -10.0f64..10.0,
    ) {
        let means: Vec<f64> = (0..k).map(|j| 3.0 + 0.2 * j as f64).collect();
        let rows = synthetic_table(&means, n, 0.7, 0.4, seed);
        let base = rm_anova_table(&rows);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
        let mut reordered = rows.clone();
        reordered.reverse();
        reordered.rotate_left(seed as usize % n);
        for other in [rm_anova_table(&shifted), rm_anova_table(&reordered)] {
            prop_assert!((other.f - base.f).abs() <= 1e-9 * base.f.abs().max(1.0));
            prop_assert!((other.p - base.p).abs() <= 1e-9);
        }
        prop_assert!((0.0..=1.0).contains(&base.p));
        prop_assert_eq!(base.df, ((k - 1) as f64, ((k - 1) * (n - 1)) as f64));
    }

    #[test]
    fn equal_power_fade_keeps_loudness(seed in any::<u64>(), overlap_ms in 100u32..500) {
        let sr = 16_000;
        let a = noise(seed, sr as usize, 0.5, sr);
        let b = noise(seed ^ 0x9e37, sr as usize, 0.5, sr);
        let o = overlap_ms as f64 / 1000.0;
        let out = crossfade(&a, &b, o).unwrap();
        let n = (o * sr as f64).round() as usize;
        let start = a.len() - n;
        let reference = (rms(&a.samples[0]) + rms(&b.samples[0])) / 2.0;
        let db = 20.0 * (rms(&out.samples[0][start..start + n]) / reference).log10();
        prop_assert!(db.abs() <= 1.5, "overlap level {db:.2} dB");
    }

    #[test]
    fn assembled_audio_stays_in_range(
        lens in vec(200usize..600, 1..6),
        overlap in 0usize..100,
        amp in 0.1f32..1.0,
    ) {
        let tracks: Vec<AudioTrack> = lens
            .iter()
            .enumerate()
            .map(|(p, &n)| noise(p as u64, n, amp, 1000).for_page(p))
            .collect();
        let out = assemble(&tracks, &TransitionPlan::fades(tracks.len() - 1, overlap as f64 / 1000.0)).unwrap();
        prop_assert!(out.peak() <= 1.0);
        prop_assert!(out.validate().is_ok());
        let expected = lens.iter().sum::<usize>() - overlap * (lens.len() - 1);
        prop_assert_eq!(out.len(), expected);
        prop_assert!(out.segment_map.windows(2).all(|w| w[0].end_sample <= w[1].start_sample));
    }

    #[test]
    fn fitted_tracks_have_requested_length(len in 1usize..500, target in 0usize..2000) {
        let t = noise(3, len, 0.5, 1000);
        prop_assert_eq!(t.fit_to_len(target).len(), target);
    }

    #[test]
    fn likert_scores_outside_scale_are_rejected(score in 0u32..20) {
        let csv = format!("participant_id,stimulus_id,condition,metric,score\np1,s1,m2m,relevancy,{score}\n");
        let parsed = parse_responses(csv.as_bytes());
        if (1..=5).contains(&score) {
            prop_assert_eq!(parsed.unwrap()[0].score as u32, score);
        } else {
            let rejected = matches!(parsed, Err(EvaluationError::InvalidScore { .. }));
            prop_assert!(rejected);
        }
    }
}
