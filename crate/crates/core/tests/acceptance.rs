//! Acceptance suite: one PASS/FAIL line per pipeline guarantee.
//!
//! Runs without the libtest harness so the report reads top to bottom. Exits
//! non-zero when any check fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use m2m_core::assembly::{assemble, crossfade, TransitionPlan};
use m2m_core::audio::AudioTrack;
use m2m_core::config::{Condition, PipelineConfig};
use m2m_core::corpus::{load_emotion_dataset, Book, DialogueLine, LineKind, Page, Split, BOOK_SCHEMA_VERSION};
use m2m_core::emotion::{evaluate_backend, finetune_dataset, DualEncoder, EncoderShape, MetricReport, TrainingConfig, DEFAULT_PROMPT_TEMPLATE};
use m2m_core::evaluation::{permutation_p, rm_anova_table, synthetic_table};
use m2m_core::llm::{AskPolicy, ScriptedLanguageModel};
use m2m_core::orchestrator::{
    load_library_book, CaptionOutput, EmotionOutput, Orchestrator, RunStore, SegmentOutput, Stage, StageStatus,
};
use m2m_core::scenes::{segment_scenes, SceneError, SceneExemplar};
use m2m_core::template::TemplateSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 7] = [
        ("end-to-end determinism", determinism),
        ("scene partition", partition),
        ("classification metrics", metrics),
        ("crossfade math", crossfade_math),
        ("repeated-measures anova", anova),
        ("condition isolation", isolation),
        ("override semantics", overrides),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let lib = library(dir.path());
    let config = PipelineConfig::default();
    let started = Instant::now();
    let mut trees = Vec::new();
    for root in ["a", "b"] {
        let orch = Orchestrator::new(dir.path().join(root), mock_backends(&config));
        let report = orch.run(&lib, BOOK_ID, Condition::M2m, &config, None).map_err(e)?;
        ensure!(report.manifest.is_complete(), "run {root} did not complete");
        trees.push(tree(&dir.path().join(root)));
    }
    let elapsed = started.elapsed().as_secs_f64();
    let (a, b) = (&trees[0], &trees[1]);
    let names_a: BTreeSet<&String> = a.keys().collect();
    let names_b: BTreeSet<&String> = b.keys().collect();
    ensure!(names_a == names_b, "file sets differ: {:?}", names_a.symmetric_difference(&names_b).collect::<Vec<_>>());
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    ensure!(differing.is_empty(), "files differ: {differing:?}");
    let wavs = a.keys().filter(|k| k.ends_with(".wav")).count();
    ensure!(wavs > 0, "no audio was written");
    ensure!(elapsed < 60.0, "two runs took {elapsed:.1} s (limit 60 s)");
    Ok(format!("{} files ({wavs} wav) identical across two runs in {elapsed:.1} s", a.len()))
}

// ------------------------------------------------------------------ partition

/// `pages[i]` dialogue lines on page i; pages with 0 lines have none.
fn synthetic_book(pages: &[usize], id: &str) -> Book {
    let mut dialogue = Vec::new();
    for (p, &count) in pages.iter().enumerate() {
        for k in 0..count {
            dialogue.push(DialogueLine {
                line_id: dialogue.len() as u32 + 1,
                source_id: format!("t{}", dialogue.len()),
                page_index: p,
                speaker: ["Aki", "Ren", "Mio"][k % 3].into(),
                text: format!("line {k} on page {p}"),
                reading_order: k as u32,
                kind: LineKind::Speech,
            });
        }
    }
    Book {
        schema_version: BOOK_SCHEMA_VERSION,
        book_id: id.into(),
        pages: (0..pages.len())
            .map(|i| Page {
                page_index: i,
                image_ref: format!("{i:03}.png"),
                width: 100,
                height: 150,
                face_regions: vec![],
            })
            .collect(),
        dialogue,
    }
}

/// One model reply: well-formed, repairable or unusable.
fn random_reply(rng: &mut ChaCha8Rng, n_lines: i64) -> String {
    let mut ends: Vec<i64> = (0..rng.random_range(1..6)).map(|_| rng.random_range(-3..n_lines + 4)).collect();
    match rng.random_range(0..10) {
        0 => "I think the scenes are fine as they are.".into(),
        1 => json!({ "scenes": [] }).to_string(),
        2 => json!({ "scenes": [{ "rationale": "no line given" }] }).to_string(),
        3 => {
            ends.sort();
            let items: Vec<Value> = ends.iter().map(|x| json!(format!("L{x}"))).collect();
            format!("```json\n{}\n```", json!({ "scenes": items }))
        }
        4 => json!(ends).to_string(),
        5 => {
            ends.sort();
            ends.push(n_lines);
            ends.dedup();
            let items: Vec<Value> = ends
                .iter()
                .map(|x| json!({ "last_line": x, "rationale": "the mood turns" }))
                .collect();
            json!({ "scenes": items }).to_string()
        }
        _ => {
            let items: Vec<Value> = ends
                .iter()
                .map(|x| json!({ "last_line": x, "first_line": x - 2, "rationale": "shift" }))
                .collect();
            json!({ "scenes": items }).to_string()
        }
    }
}

fn check_partition(book: &Book, scenes: &[m2m_core::scenes::Scene]) -> Result<(), String> {
    for p in 0..book.page_count() {
        let owners = scenes.iter().filter(|s| s.contains_page(p)).count();
        ensure!(owners == 1, "page {p} belongs to {owners} scenes");
    }
    for line in &book.dialogue {
        let owners: Vec<&m2m_core::scenes::Scene> = scenes
            .iter()
            .filter(|s| (s.first_line_id..=s.last_line_id).contains(&line.line_id))
            .collect();
        ensure!(owners.len() == 1, "line {} belongs to {} scenes", line.line_id, owners.len());
        ensure!(
            owners[0].contains_page(line.page_index),
            "line {} is outside the pages of its scene",
            line.line_id
        );
    }
    Ok(())
}

fn partition() -> Outcome {
    let fixture = {
        let dir = tempfile::tempdir().map_err(e)?;
        load_library_book(&library(dir.path()), BOOK_ID).map_err(e)?
    };
    let exemplar = SceneExemplar::builtin();
    let templates = TemplateSet::default();
    let policy = AskPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ce9e);
    let (mut ok, mut unrepairable) = (0, 0);
    for case in 0..50 {
        let book = if case % 2 == 0 {
            fixture.clone()
        } else {
            let pages: Vec<usize> = (0..rng.random_range(1..12))
                .map(|_| if rng.random_bool(0.25) { 0 } else { rng.random_range(1..5) })
                .collect();
            let mut book = synthetic_book(&pages, &format!("random{case}"));
            if book.dialogue.is_empty() {
                book = synthetic_book(&[2], "tiny");
            }
            book
        };
        let n_lines = book.dialogue.len() as i64;
        let script: Vec<String> = (0..rng.random_range(1..6)).map(|_| random_reply(&mut rng, n_lines)).collect();
        let model = ScriptedLanguageModel::ok(script.clone());
        match segment_scenes(&book, &model, &exemplar, &templates, &policy) {
            Ok(seg) => {
                check_partition(&book, &seg.scenes).map_err(|m| format!("case {case}: {m}; script {script:?}"))?;
                ok += 1;
            }
            Err(SceneError::UnrepairableResponse { exchanges, .. }) => {
                ensure!(
                    exchanges.len() as u32 == policy.schema_retries + 1,
                    "case {case}: gave up after {} attempts",
                    exchanges.len()
                );
                unrepairable += 1;
            }
            Err(other) => return Err(format!("case {case}: unexpected error {other}")),
        }
    }
    ensure!(ok > 0 && unrepairable > 0, "cases did not cover both outcomes ({ok} partitions, {unrepairable} failures)");
    Ok(format!("50 cases: {ok} total partitions, {unrepairable} UnrepairableResponse"))
}

// -------------------------------------------------------------------- metrics

/// Per-class counts straight from label pairs, independent of the report code.
fn oracle_f1(pairs: &[(usize, usize)], k: usize) -> (f64, f64, f64, f64) {
    let f1 = |tp: f64, fp: f64, fn_: f64| if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let (mut all_tp, mut all_fp, mut all_fn) = (0.0, 0.0, 0.0);
    let (mut macro_sum, mut macro_n, mut weighted) = (0.0, 0, 0.0);
    for c in 0..k {
        let tp = pairs.iter().filter(|(t, p)| *t == c && *p == c).count() as f64;
        let fp = pairs.iter().filter(|(t, p)| *t != c && *p == c).count() as f64;
        let fn_ = pairs.iter().filter(|(t, p)| *t == c && *p != c).count() as f64;
        all_tp += tp;
        all_fp += fp;
        all_fn += fn_;
        let score = f1(tp, fp, fn_);
        if tp + fp + fn_ > 0.0 {
            macro_sum += score;
            macro_n += 1;
        }
        weighted += score * (tp + fn_);
    }
    let n = pairs.len() as f64;
    let accuracy = pairs.iter().filter(|(t, p)| t == p).count() as f64 / n;
    (f1(all_tp, all_fp, all_fn), macro_sum / macro_n as f64, weighted / n, accuracy)
}

fn desk_training() -> Result<(f64, f64, f64, f64), String> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/emotion");
    let dataset = load_emotion_dataset(&root).map_err(e)?;
    let base = DualEncoder::base(dataset.labels.clone(), DEFAULT_PROMPT_TEMPLATE, EncoderShape::default(), 0);
    let test = dataset.split(Split::Test);
    let zero_shot = evaluate_backend(&base, &root, &test).map_err(e)?;
    let config = TrainingConfig {
        learning_rate: 1e-2,
        ..TrainingConfig::default()
    };
    ensure!(config.epochs == 10, "default schedule is {} epochs", config.epochs);
    let (_, log, tuned) = finetune_dataset(&root, &dataset, base, &config).map_err(e)?;
    Ok((log.first_loss().unwrap(), log.final_loss().unwrap(), zero_shot.weighted, tuned.weighted))
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf1);
    let mut worst: f64 = 0.0;
    let cases = 25;
    for case in 0..cases {
        let k = rng.random_range(2..7);
        let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let confusion: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..k).map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(0..15) }).collect())
            .collect();
        let mut pairs = Vec::new();
        for (t, row) in confusion.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                pairs.extend(std::iter::repeat_n((t, p), count as usize));
            }
        }
        if pairs.is_empty() {
            pairs.push((0, 0));
        }
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng);
        let (truth, predicted): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        let report = MetricReport::from_predictions(&labels, &truth, &predicted);
        let (micro, macro_, weighted, accuracy) = oracle_f1(&pairs, k);
        for (name, got, want) in [
            ("micro", report.micro, micro),
            ("macro", report.macro_, macro_),
            ("weighted", report.weighted, weighted),
        ] {
            let diff = (got - want).abs();
            worst = worst.max(diff);
            ensure!(diff <= 1e-9, "case {case}: {name} F1 {got} vs oracle {want}");
        }
        ensure!(
            (report.micro - accuracy).abs() <= 1e-9 && (report.accuracy - accuracy).abs() <= 1e-9,
            "case {case}: micro F1 {} differs from accuracy {accuracy}",
            report.micro
        );
    }
    let (first, last, zero_shot, tuned) = desk_training()?;
    ensure!(last < first, "training loss went from {first:.4} to {last:.4}");
    ensure!(tuned > zero_shot, "fine-tuned weighted F1 {tuned:.3} does not beat zero-shot {zero_shot:.3}");
    Ok(format!(
        "{cases} matrices, max deviation {worst:.1e}; desk loss {first:.3} -> {last:.3}, weighted F1 {zero_shot:.3} -> {tuned:.3}"
    ))
}

// ------------------------------------------------------------------ crossfade

fn crossfade_math() -> Outcome {
    let sr = 22_050;
    let overlap_s = 2.0;
    let n_overlap = (overlap_s * sr as f64) as usize;
    let ones = AudioTrack::mono(vec![1.0; 4 * sr as usize], sr);
    let zeros = AudioTrack::mono(vec![0.0; 4 * sr as usize], sr);
    let start = ones.len() - n_overlap;
    let outgoing = crossfade(&ones, &zeros, overlap_s).map_err(e)?;
    let incoming = crossfade(&zeros, &ones, overlap_s).map_err(e)?;
    let mut worst: f64 = 0.0;
    for i in 0..n_overlap {
        let ga = outgoing.samples[0][start + i] as f64;
        let gb = incoming.samples[0][start + i] as f64;
        worst = worst.max((ga * ga + gb * gb - 1.0).abs());
    }
    ensure!(worst <= 1e-6, "squared gains deviate from 1 by {worst:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = |rng: &mut ChaCha8Rng, n: usize| AudioTrack::mono((0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect(), sr);
    let a = noise(&mut rng, 30_001);
    let b = noise(&mut rng, 17_777);
    let joined = crossfade(&a, &b, 0.0).map_err(e)?;
    let concatenated: Vec<f32> = a.samples[0].iter().chain(&b.samples[0]).copied().collect();
    ensure!(joined.samples[0] == concatenated, "zero overlap is not plain concatenation");

    let mut cases = 0;
    for (n, d, o) in [(2usize, 4.0, 1.0), (5, 10.0, 2.0), (8, 3.0, 0.5), (3, 7.3, 0.0), (12, 5.0, 2.5)] {
        let len = (d * sr as f64).round() as usize;
        let tracks: Vec<AudioTrack> = (0..n).map(|p| noise(&mut rng, len).for_page(p)).collect();
        let out = assemble(&tracks, &TransitionPlan::fades(n - 1, o)).map_err(e)?;
        let expected = (n as f64 * d - (n as f64 - 1.0) * o) * sr as f64;
        ensure!(
            (out.len() as f64 - expected).abs() <= 1.0,
            "n={n} d={d} o={o}: {} samples, expected {expected}",
            out.len()
        );
        cases += 1;
    }
    Ok(format!("max |g_out^2 + g_in^2 - 1| = {worst:.1e}; zero overlap exact; {cases} duration cases within 1 sample"))
}

// ---------------------------------------------------------------------- anova

fn brute_force(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let k = rows[0].len();
    let cells: Vec<f64> = rows.iter().flatten().copied().collect();
    let grand = cells.iter().sum::<f64>() / cells.len() as f64;
    let mut ss_cond = 0.0;
    for j in 0..k {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        ss_cond += n as f64 * (m - grand).powi(2);
    }
    let mut ss_subj = 0.0;
    for r in rows {
        let m = r.iter().sum::<f64>() / k as f64;
        ss_subj += k as f64 * (m - grand).powi(2);
    }
    let ss_total: f64 = cells.iter().map(|x| (x - grand).powi(2)).sum();
    let ss_err = ss_total - ss_cond - ss_subj;
    (ss_cond / (k - 1) as f64) / (ss_err / ((k - 1) * (n - 1)) as f64)
}

fn anova() -> Outcome {
    let table = |rows: &[&[f64]]| rows.iter().map(|r| r.to_vec()).collect::<Vec<Vec<f64>>>();
    // F worked out by hand with exact fractions
    let toys = [
        (table(&[&[5., 4., 2.], &[4., 4., 3.], &[5., 3., 1.], &[3., 3., 3.]]), 147.0 / 31.0, 49.0 / 6.0),
        (
            table(&[&[1., 2., 3., 4.], &[2., 2., 4., 5.], &[3., 5., 4., 4.], &[1., 1., 2., 3.], &[2., 3., 3., 5.]]),
            614.0 / 59.0,
            307.0 / 20.0,
        ),
        (table(&[&[4., 2.], &[5., 3.], &[3., 3.], &[4., 1.], &[2., 2.], &[5., 4.]]), 80.0 / 11.0, 16.0 / 3.0),
    ];
    for (i, (rows, f_hand, ss_hand)) in toys.iter().enumerate() {
        let stats = rm_anova_table(rows);
        let brute = brute_force(rows);
        ensure!((stats.f - brute).abs() <= 1e-9, "table {i}: F {} vs brute force {brute}", stats.f);
        ensure!((stats.f - f_hand).abs() <= 1e-9, "table {i}: F {} vs hand value {f_hand}", stats.f);
        ensure!(
            (stats.ss_conditions - ss_hand).abs() <= 1e-9,
            "table {i}: SS conditions {} vs {ss_hand}",
            stats.ss_conditions
        );
    }

    let moderate = synthetic_table(&[3.0, 3.1, 3.2], 22, 0.5, 0.5, 11);
    let stats = rm_anova_table(&moderate);
    let perm = permutation_p(&moderate, 100_000, 5);
    ensure!(
        (stats.p - perm).abs() <= 0.01,
        "F-distribution p {:.4} vs permutation p {perm:.4}",
        stats.p
    );

    let survey = synthetic_table(&[3.4, 3.25, 2.34], 22, 0.5, 0.5, 2024);
    let effect = rm_anova_table(&survey);
    ensure!(effect.df == (2.0, 42.0), "df {:?}", effect.df);
    ensure!(effect.p < 0.001, "synthetic survey p = {:.2e}", effect.p);
    Ok(format!(
        "3 toy tables exact; p {:.4} vs permutation {perm:.4}; synthetic survey F({}, {}) = {:.1}, p = {:.1e}",
        stats.p, effect.df.0, effect.df.1, effect.f, effect.p
    ))
}

// ------------------------------------------------------------------ isolation

fn stages_in(store: &RunStore) -> Result<BTreeSet<Stage>, String> {
    store
        .artifact_ids()
        .map_err(e)?
        .iter()
        .map(|id| Stage::of_artifact(id).ok_or_else(|| format!("unrecognised artifact {id}")))
        .collect()
}

fn isolation() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let lib = library(dir.path());
    let config = quick_config();
    let orch = Orchestrator::new(dir.path().join("runs"), mock_backends(&config));

    let base = orch.run(&lib, BOOK_ID, Condition::Baseline, &config, None).map_err(e)?;
    ensure!(base.manifest.is_complete(), "baseline run did not complete");
    let base_stages = stages_in(&orch.store(&base.manifest.run_id))?;
    let forbidden: Vec<&Stage> = base_stages
        .iter()
        .filter(|s| matches!(s, Stage::Segment | Stage::Emotion | Stage::Directive | Stage::Caption))
        .collect();
    ensure!(forbidden.is_empty(), "baseline run wrote {forbidden:?}");

    let random = orch.run(&lib, BOOK_ID, Condition::Random, &config, None).map_err(e)?;
    ensure!(random.manifest.is_complete(), "random run did not complete");
    let ids = orch.store(&random.manifest.run_id).artifact_ids().map_err(e)?;
    ensure!(ids == ["assemble", "random_select"], "random run wrote {ids:?}");
    ensure!(random.backend_calls > 0, "random pool made no synthesis calls");
    Ok(format!(
        "baseline stages {:?}; random artifacts {ids:?}",
        base_stages.iter().map(|s| s.as_str()).collect::<Vec<_>>()
    ))
}

// ------------------------------------------------------------------ overrides

struct Layout {
    /// scene id to its pages
    scenes: BTreeMap<u32, Vec<usize>>,
    pages: Vec<usize>,
}

impl Layout {
    fn read(store: &RunStore) -> Result<Self, String> {
        let seg: SegmentOutput = store
            .read_artifact("segment")
            .map_err(e)?
            .ok_or("no segmentation")?
            .payload()
            .map_err(e)?;
        let scenes: BTreeMap<u32, Vec<usize>> = seg.scenes.iter().map(|s| (s.scene_id, s.pages().collect())).collect();
        let pages = scenes.values().flatten().copied().collect();
        Ok(Layout { scenes, pages })
    }

    fn synths(&self, pages: &[usize]) -> BTreeSet<String> {
        pages.iter().map(|p| format!("synth-p{p:03}")).collect()
    }

    /// What must go stale when one artifact of a scene-structured run changes.
    fn closure_of_scene_stage(&self, stage: Stage, scene: u32) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if stage == Stage::Emotion {
            out.insert(format!("directive-s{scene:02}"));
        }
        if matches!(stage, Stage::Emotion | Stage::Directive) {
            out.insert(format!("caption-s{scene:02}"));
        }
        out.extend(self.synths(&self.scenes[&scene]));
        out.insert("assemble".into());
        out
    }
}

/// Artifact bytes keyed by file name, for checking what a rerun touched.
fn artifact_files(store: &RunStore) -> BTreeMap<String, Vec<u8>> {
    tree(&store.artifacts_dir())
}

/// Override, compare the stale set, rerun, and confirm only those regenerated.
fn override_round(orch: &Orchestrator, run_id: &str, target: &str, payload: Value, expected: &BTreeSet<String>) -> Result<(usize, u64), String> {
    let store = orch.store(run_id);
    let manifest = orch.override_artifact(run_id, target, payload).map_err(|err| format!("{target}: {err}"))?;
    let stale = manifest.ids_with_status(StageStatus::Stale);
    ensure!(&stale == expected, "{target}: stale {stale:?}, expected {expected:?}");
    let pending = manifest.ids_with_status(StageStatus::Pending);
    ensure!(pending.is_empty(), "{target}: pending after override {pending:?}");

    let before = artifact_files(&store);
    let calls_before = orch.backends().total_calls();
    let report = orch.rerun(run_id).map_err(e)?;
    let executed: BTreeSet<String> = report.executed.iter().cloned().collect();
    // a regenerated input identical to the old one leaves its consumers done
    ensure!(executed.is_subset(expected), "{target}: rerun executed {executed:?} outside {expected:?}");
    ensure!(report.manifest.is_complete(), "{target}: run incomplete after rerun");
    let after = artifact_files(&store);
    for (name, bytes) in &before {
        let owner = match name.split('.').next().unwrap_or(name) {
            "cue_sheet" => "assemble",
            other => other.split("-p").next().filter(|o| *o == "random_select").unwrap_or(other),
        };
        if !expected.contains(owner) {
            ensure!(after.get(name) == Some(bytes), "{target}: non-stale file {name} changed");
        }
    }
    let attributed: u64 = report
        .executed
        .iter()
        .map(|id| store.read_artifact(id).map(|a| a.map_or(0, |a| a.backend_calls)))
        .sum::<Result<u64, _>>()
        .map_err(e)?;
    let spent = orch.backends().total_calls() - calls_before;
    ensure!(spent == attributed, "{target}: {spent} backend calls, {attributed} attributed to regenerated stages");
    Ok((executed.len(), spent))
}

/// Round summary, requiring every stale artifact to have been regenerated.
fn exact(stage: &str, stale: usize, ran: usize, calls: u64) -> Result<String, String> {
    ensure!(ran == stale, "{stage}: {ran} regenerated of {stale} stale");
    Ok(format!("{stage} {stale}/{ran}/{calls}"))
}

fn parsed(store: &RunStore, id: &str) -> Result<Value, String> {
    Ok(store.read_artifact(id).map_err(e)?.ok_or(format!("missing {id}"))?.parsed)
}

fn silence_b64(seconds: f64, store: &RunStore, id: &str) -> Result<Value, String> {
    use base64::Engine;
    let current = AudioTrack::from_wav_bytes(&store.read_audio(&format!("{id}.wav")).map_err(e)?).map_err(e)?;
    let n = (seconds * current.sample_rate as f64) as usize;
    let n = if id == "assemble" { current.len() } else { n };
    let bytes = AudioTrack::mono(vec![0.0; n], current.sample_rate).to_wav_bytes().map_err(e)?;
    Ok(json!({ "wav_base64": base64::engine::general_purpose::STANDARD.encode(bytes) }))
}

fn overrides() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let lib = library(dir.path());
    let config = quick_config();
    let orch = Orchestrator::new(dir.path().join("runs"), mock_backends(&config));
    let mut rounds = Vec::new();

    orch.run(&lib, BOOK_ID, Condition::M2m, &config, Some("m2m")).map_err(e)?;
    let store = orch.store("m2m");
    let layout = Layout::read(&store)?;
    let first_scene = *layout.scenes.keys().next().ok_or("no scenes")?;
    let last_scene = *layout.scenes.keys().last().unwrap();
    let book = store.read_book().map_err(e)?;

    // segmentation: every scene record changes, so everything below it does
    let mut seg = parsed(&store, "segment")?;
    for s in seg["scenes"].as_array_mut().unwrap() {
        s["rationale"] = json!("edited by a reviewer");
    }
    let everything: BTreeSet<String> = store
        .artifact_ids()
        .map_err(e)?
        .into_iter()
        .filter(|id| id != "segment")
        .collect();
    let (ran, calls) = override_round(&orch, "m2m", "segment", seg, &everything)?;
    rounds.push(format!("segment {}/{ran}/{calls}", everything.len()));

    // emotions of a scene that has faces
    let face_scene = *layout
        .scenes
        .iter()
        .find(|(_, pages)| pages.iter().any(|p| !book.pages[*p].face_regions.is_empty()))
        .ok_or("no scene has faces")?
        .0;
    let id = Stage::Emotion.scene_artifact(face_scene);
    let mut emo: EmotionOutput = serde_json::from_value(parsed(&store, &id)?).map_err(e)?;
    let pred = emo.pages.values_mut().flatten().next().unwrap();
    let flipped = pred.distribution.keys().find(|l| **l != pred.top_label).unwrap().clone();
    for (label, p) in pred.distribution.iter_mut() {
        *p = if *label == flipped { 1.0 } else { 0.0 };
    }
    pred.top_label = flipped;
    let expected = layout.closure_of_scene_stage(Stage::Emotion, face_scene);
    let (ran, calls) = override_round(&orch, "m2m", &id, serde_json::to_value(&emo).unwrap(), &expected)?;
    rounds.push(exact("emotion", expected.len(), ran, calls)?);

    let id = Stage::Directive.scene_artifact(last_scene);
    let mut directive = parsed(&store, &id)?;
    directive["text"] = json!("Sparse music box melody over distant gulls, slow and wistful.");
    let expected = layout.closure_of_scene_stage(Stage::Directive, last_scene);
    let (ran, calls) = override_round(&orch, "m2m", &id, directive, &expected)?;
    rounds.push(exact("directive", expected.len(), ran, calls)?);

    let id = Stage::Caption.scene_artifact(first_scene);
    let mut captions: CaptionOutput = serde_json::from_value(parsed(&store, &id)?).map_err(e)?;
    for c in captions.captions.iter_mut() {
        c.text = format!("Warm acoustic guitar for page {}, gentle and bright.", c.page_index);
    }
    let expected = layout.closure_of_scene_stage(Stage::Caption, first_scene);
    let (ran, calls) = override_round(&orch, "m2m", &id, serde_json::to_value(&captions).unwrap(), &expected)?;
    rounds.push(exact("caption", expected.len(), ran, calls)?);

    let page = layout.pages[layout.pages.len() / 2];
    let id = Stage::Synth.page_artifact(page);
    let payload = silence_b64(config.music.page_duration_s, &store, &id)?;
    let expected = BTreeSet::from(["assemble".to_string()]);
    let (ran, calls) = override_round(&orch, "m2m", &id, payload, &expected)?;
    rounds.push(exact("synth", expected.len(), ran, calls)?);

    let payload = silence_b64(0.0, &store, "assemble")?;
    let (ran, calls) = override_round(&orch, "m2m", "assemble", payload, &BTreeSet::new())?;
    rounds.push(exact("assemble", 0, ran, calls)?);

    // baseline text stages
    orch.run(&lib, BOOK_ID, Condition::Baseline, &config, Some("base")).map_err(e)?;
    let store = orch.store("base");
    let id = Stage::Describe.page_artifact(1);
    let mut describe = parsed(&store, &id)?;
    describe["text"] = json!("Two friends argue on a windy pier at dusk.");
    let expected = BTreeSet::from(["baseline_caption-p001".to_string(), "synth-p001".into(), "assemble".into()]);
    let (ran, calls) = override_round(&orch, "base", &id, describe, &expected)?;
    rounds.push(exact("describe", expected.len(), ran, calls)?);

    let id = Stage::BaselineCaption.page_artifact(2);
    let mut caption = parsed(&store, &id)?;
    caption["text"] = json!("Tense low strings with a steady pulse.");
    let expected = BTreeSet::from(["synth-p002".to_string(), "assemble".into()]);
    let (ran, calls) = override_round(&orch, "base", &id, caption, &expected)?;
    rounds.push(exact("baseline_caption", expected.len(), ran, calls)?);

    // random selection
    orch.run(&lib, BOOK_ID, Condition::Random, &config, Some("rand")).map_err(e)?;
    let store = orch.store("rand");
    let mut selection = parsed(&store, "random_select")?;
    for s in selection["selections"].as_array_mut().unwrap() {
        let next = (s["track_index"].as_u64().unwrap() + 1) % config.baselines.pool_size as u64;
        s["track_index"] = json!(next);
    }
    let expected = BTreeSet::from(["assemble".to_string()]);
    let (ran, calls) = override_round(&orch, "rand", "random_select", json!({ "selections": selection["selections"] }), &expected)?;
    rounds.push(exact("random_select", expected.len(), ran, calls)?);

    Ok(format!("stale/regenerated/backend calls per override: {}", rounds.join(", ")))
}
