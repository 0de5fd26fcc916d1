//! Stage executors and override validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backends::CallCounter;
use super::plan::{DigestCache, NodeSpec, Projection};
use super::store::{write_atomic, RunStore};
use super::{Backends, ModelInfo, OrchestratorError, RunContext, Stage, StageArtifact};
use crate::assembly::{assemble, CueSheet, TransitionMode, TransitionPlan};
use crate::audio::AudioTrack;
use crate::baselines::{
    baseline_caption, describe_page, random_condition, BaselineError, MusicPool, PageDescription, PoolTrack, Selection,
    NO_SCENE,
};
use crate::captioning::{
    generate_page_captions, generate_scene_directive, CaptionError, EmotionSummary, PageMusicCaption, SceneMusicDirective,
};
use crate::digest::{json_digest, sha256_hex};
use crate::emotion::{classify_faces, open_image, EmotionBackend, EmotionPrediction};
use crate::llm::{Exchange, LanguageModel};
use crate::music::{synthesize, MusicBackend, MusicRequest};
use crate::scenes::{segment_scenes, validate_partition, Scene, SceneError, SceneExemplar};
use crate::template::TemplateRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutput {
    pub scenes: Vec<Scene>,
    /// Corrections applied to the model's boundaries.
    #[serde(default)]
    pub repairs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionOutput {
    pub scene_id: u32,
    /// Every page of the scene, including pages without faces.
    pub pages: BTreeMap<usize, Vec<EmotionPrediction>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutput {
    pub scene_id: u32,
    pub captions: Vec<PageMusicCaption>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub page_index: usize,
    pub scene_id: u32,
    pub caption: String,
    pub seed: u64,
    pub requested_s: f64,
    /// Whether the track was conditioned on the previous page's tail.
    pub conditioned: bool,
    pub sample_rate: u32,
    pub samples: usize,
    pub wav: String,
    pub wav_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembleOutput {
    pub pages: Vec<usize>,
    pub transitions: TransitionPlan,
    pub sample_rate: u32,
    pub samples: usize,
    pub duration_s: f64,
    pub wav: String,
    pub wav_sha256: String,
    pub cue_sheet: CueSheet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSelectOutput {
    pub pool_key: String,
    pub pool_backend: String,
    pub pool_size: usize,
    pub seed: u64,
    /// Pool tracks are looped or trimmed to this length per page.
    pub page_duration_s: f64,
    pub selections: Vec<Selection>,
    pub wavs: Vec<String>,
}

pub(crate) struct StageFailure {
    pub message: String,
    pub exchanges: Vec<Exchange>,
}

impl StageFailure {
    fn new(message: impl std::fmt::Display) -> Self {
        StageFailure {
            message: message.to_string(),
            exchanges: Vec::new(),
        }
    }
}

impl From<OrchestratorError> for StageFailure {
    fn from(e: OrchestratorError) -> Self {
        StageFailure::new(e)
    }
}

impl From<SceneError> for StageFailure {
    fn from(e: SceneError) -> Self {
        let exchanges = match &e {
            SceneError::UnrepairableResponse { exchanges, .. } => exchanges.clone(),
            _ => Vec::new(),
        };
        StageFailure {
            message: e.to_string(),
            exchanges,
        }
    }
}

impl From<CaptionError> for StageFailure {
    fn from(e: CaptionError) -> Self {
        let exchanges = match &e {
            CaptionError::OverlongResponse { exchanges, .. }
            | CaptionError::ShortResponse { exchanges, .. }
            | CaptionError::PageCountMismatch { exchanges, .. }
            | CaptionError::InvalidResponse { exchanges, .. } => exchanges.clone(),
            _ => Vec::new(),
        };
        StageFailure {
            message: e.to_string(),
            exchanges,
        }
    }
}

impl From<BaselineError> for StageFailure {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Caption(c) => c.into(),
            other => StageFailure::new(other),
        }
    }
}

pub(crate) struct StageOutput {
    pub artifact: StageArtifact,
    pub audio: Vec<(String, Vec<u8>)>,
}

struct Body {
    parsed: Value,
    exchanges: Vec<Exchange>,
    templates: Vec<TemplateRef>,
    model_info: ModelInfo,
    audio: Vec<(String, Vec<u8>)>,
}

impl Body {
    fn new<T: Serialize>(parsed: &T, model_info: ModelInfo) -> Self {
        Body {
            parsed: serde_json::to_value(parsed).expect("serializable payload"),
            exchanges: Vec::new(),
            templates: Vec::new(),
            model_info,
            audio: Vec::new(),
        }
    }
}

fn info(backend_id: String, parameters: Value) -> ModelInfo {
    ModelInfo { backend_id, parameters }
}

fn payload<T: serde::de::DeserializeOwned>(cache: &mut DigestCache, id: &str) -> Result<T, StageFailure> {
    let a = cache
        .artifact(id)?
        .ok_or_else(|| StageFailure::new(format!("input {id} is missing")))?;
    Ok(a.payload()?)
}

fn scene(cache: &mut DigestCache, scene_id: u32) -> Result<Scene, StageFailure> {
    payload::<SegmentOutput>(cache, "segment")?
        .scenes
        .into_iter()
        .find(|s| s.scene_id == scene_id)
        .ok_or_else(|| StageFailure::new(format!("segmentation has no scene {scene_id}")))
}

pub(crate) fn execute(ctx: &RunContext, backends: &Backends, node: &NodeSpec) -> Result<StageOutput, StageFailure> {
    let counter = CallCounter::default();
    let (llm, music, emotion) = backends.counting(&counter);
    let mut cache = DigestCache::new(ctx.book, ctx.store);
    let input_digests = cache
        .input_digests(node)?
        .ok_or_else(|| StageFailure::new("an input artifact is missing"))?;
    let body = match node.stage {
        Stage::Segment => run_segment(ctx, &llm)?,
        Stage::Emotion => run_emotion(ctx, &mut cache, &emotion, node)?,
        Stage::Directive => run_directive(ctx, &mut cache, &llm, node)?,
        Stage::Caption => run_caption(ctx, &mut cache, &llm, &music, node)?,
        Stage::Synth => run_synth(ctx, &mut cache, &music, node)?,
        Stage::Assemble => run_assemble(ctx, &mut cache, node)?,
        Stage::Describe => run_describe(ctx, &llm, node)?,
        Stage::BaselineCaption => run_baseline_caption(ctx, &mut cache, &llm, &music, node)?,
        Stage::RandomSelect => run_random_select(ctx, &music)?,
    };
    let last = body.exchanges.last();
    let artifact = StageArtifact {
        artifact_id: node.artifact_id.clone(),
        stage: node.stage,
        book_id: ctx.book.book_id.clone(),
        scene_id: node.scene_id,
        page_index: node.page_index,
        prompt: last.map(|e| e.prompt.clone()),
        raw_response: last.map(|e| e.raw_response.clone()),
        exchanges: body.exchanges,
        templates: body.templates,
        output_digest: json_digest(&body.parsed),
        parsed: body.parsed,
        model_info: body.model_info,
        backend_calls: counter.get(),
        created_at: String::new(),
        sequence: 0,
        overridden: false,
        original: None,
        input_digests,
        audio: body.audio.iter().map(|(n, _)| n.clone()).collect(),
    };
    Ok(StageOutput {
        artifact,
        audio: body.audio,
    })
}

fn policy_params(p: &crate::llm::AskPolicy) -> Value {
    json!({
        "temperature": p.temperature,
        "backend_retries": p.backend_retries,
        "schema_retries": p.schema_retries,
    })
}

fn run_segment(ctx: &RunContext, llm: &dyn LanguageModel) -> Result<Body, StageFailure> {
    let exemplar = match &ctx.config.scenes.exemplar {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| StageFailure::new(format!("{}: {e}", path.display())))?;
            SceneExemplar::from_json(&text)?
        }
        None => SceneExemplar::builtin(),
    };
    let seg = segment_scenes(ctx.book, llm, &exemplar, ctx.templates, &ctx.config.scenes.policy)?;
    let mut params = policy_params(&ctx.config.scenes.policy);
    params["exemplar_lines"] = json!(exemplar.dialogue.len());
    let mut body = Body::new(
        &SegmentOutput {
            scenes: seg.scenes,
            repairs: seg.repairs,
        },
        info(llm.id(), params),
    );
    body.exchanges = seg.exchanges;
    body.templates = seg.templates;
    Ok(body)
}

fn run_emotion(
    ctx: &RunContext,
    cache: &mut DigestCache,
    backend: &dyn EmotionBackend,
    node: &NodeSpec,
) -> Result<Body, StageFailure> {
    let scene = scene(cache, node.scene_id.expect("scene node"))?;
    let mut pages = BTreeMap::new();
    for p in scene.pages() {
        let page = &ctx.book.pages[p];
        let predictions = if page.face_regions.is_empty() {
            Vec::new()
        } else {
            let image = open_image(&ctx.book_dir.join(&page.image_ref)).map_err(StageFailure::new)?;
            classify_faces(page, &image, backend).map_err(StageFailure::new)?
        };
        pages.insert(p, predictions);
    }
    Ok(Body::new(
        &EmotionOutput {
            scene_id: scene.scene_id,
            pages,
        },
        info(backend.id(), json!({ "labels": backend.labels() })),
    ))
}

fn scene_inputs(cache: &mut DigestCache, ctx: &RunContext, scene_id: u32) -> Result<(Scene, Vec<crate::corpus::DialogueLine>, EmotionSummary), StageFailure> {
    let scene = scene(cache, scene_id)?;
    let emotions: EmotionOutput = payload(cache, &Stage::Emotion.scene_artifact(scene_id))?;
    let summary = EmotionSummary::new(&scene, &emotions.pages);
    let dialogue = ctx.book.lines_in_pages(scene.page_range.0, scene.page_range.1);
    Ok((scene, dialogue, summary))
}

fn run_directive(ctx: &RunContext, cache: &mut DigestCache, llm: &dyn LanguageModel, node: &NodeSpec) -> Result<Body, StageFailure> {
    let (scene, dialogue, summary) = scene_inputs(cache, ctx, node.scene_id.expect("scene node"))?;
    let cfg = &ctx.config.captioning;
    let generated = generate_scene_directive(&scene, &dialogue, &summary, llm, cfg, ctx.templates)?;
    let mut params = policy_params(&cfg.policy);
    params["min_words"] = json!(cfg.min_words);
    params["max_words"] = json!(cfg.max_words);
    let mut body = Body::new(&generated.value, info(llm.id(), params));
    body.exchanges = generated.exchanges;
    body.templates = generated.templates;
    Ok(body)
}

fn run_caption(
    ctx: &RunContext,
    cache: &mut DigestCache,
    llm: &dyn LanguageModel,
    music: &dyn MusicBackend,
    node: &NodeSpec,
) -> Result<Body, StageFailure> {
    let scene_id = node.scene_id.expect("scene node");
    let (scene, dialogue, summary) = scene_inputs(cache, ctx, scene_id)?;
    let directive: SceneMusicDirective = payload(cache, &Stage::Directive.scene_artifact(scene_id))?;
    let cfg = &ctx.config.captioning;
    let max_chars = music.max_caption_chars();
    let generated = generate_page_captions(&scene, &directive, &dialogue, &summary, max_chars, llm, cfg, ctx.templates)?;
    let mut params = policy_params(&cfg.policy);
    params["max_caption_chars"] = json!(max_chars.min(cfg.max_caption_chars));
    let mut body = Body::new(
        &CaptionOutput {
            scene_id,
            captions: generated.value,
        },
        info(llm.id(), params),
    );
    body.exchanges = generated.exchanges;
    body.templates = generated.templates;
    Ok(body)
}

fn wav_bytes(track: &AudioTrack) -> Result<Vec<u8>, StageFailure> {
    track.to_wav_bytes().map_err(StageFailure::new)
}

fn read_track(ctx: &RunContext, name: &str, page: usize) -> Result<AudioTrack, StageFailure> {
    let bytes = ctx.store.read_audio(name)?;
    Ok(AudioTrack::from_wav_bytes(&bytes).map_err(StageFailure::new)?.for_page(page))
}

fn run_synth(ctx: &RunContext, cache: &mut DigestCache, music: &dyn MusicBackend, node: &NodeSpec) -> Result<Body, StageFailure> {
    let p = node.page_index.expect("page node");
    let caption_input = &node.inputs[0];
    let caption = match caption_input.projection {
        Projection::PageCaption(_) => payload::<CaptionOutput>(cache, &caption_input.artifact_id)?
            .captions
            .into_iter()
            .find(|c| c.page_index == p)
            .ok_or_else(|| StageFailure::new(format!("no caption for page {p}")))?,
        _ => payload::<PageMusicCaption>(cache, &caption_input.artifact_id)?,
    };
    let m = &ctx.config.music;
    let seed = m.seed.wrapping_add(p as u64);
    let mut request = MusicRequest::new(caption.text.clone(), m.page_duration_s, seed);
    let conditioned = node.inputs.len() > 1;
    if conditioned {
        let prev: SynthOutput = payload(cache, &node.inputs[1].artifact_id)?;
        let track = read_track(ctx, &prev.wav, prev.page_index)?;
        request = request.with_conditioning(&track);
    }
    let track = synthesize(&request, music).map_err(StageFailure::new)?.for_page(p);
    let wav = format!("{}.wav", node.artifact_id);
    let bytes = wav_bytes(&track)?;
    let out = SynthOutput {
        page_index: p,
        scene_id: caption.scene_id,
        caption: caption.text,
        seed,
        requested_s: m.page_duration_s,
        conditioned,
        sample_rate: track.sample_rate,
        samples: track.len(),
        wav_sha256: sha256_hex(&bytes),
        wav: wav.clone(),
    };
    let mut body = Body::new(
        &out,
        info(
            music.id(),
            json!({ "duration_s": m.page_duration_s, "seed": seed, "conditioned": conditioned }),
        ),
    );
    body.audio.push((wav, bytes));
    Ok(body)
}

fn run_assemble(ctx: &RunContext, cache: &mut DigestCache, node: &NodeSpec) -> Result<Body, StageFailure> {
    let m = &ctx.config.music;
    let mut tracks = Vec::new();
    let mut conditioned = Vec::new();
    let mut pages = Vec::new();
    if node.inputs.len() == 1 && node.inputs[0].artifact_id == "random_select" {
        let sel: RandomSelectOutput = payload(cache, "random_select")?;
        for (s, wav) in sel.selections.iter().zip(&sel.wavs) {
            tracks.push(read_track(ctx, wav, s.page_index)?);
            conditioned.push(false);
            pages.push(s.page_index);
        }
    } else {
        for input in &node.inputs {
            let synth: SynthOutput = payload(cache, &input.artifact_id)?;
            tracks.push(read_track(ctx, &synth.wav, synth.page_index)?);
            conditioned.push(synth.conditioned);
            pages.push(synth.page_index);
        }
    }
    let modes: Vec<TransitionMode> = conditioned
        .iter()
        .skip(1)
        .map(|c| if *c { TransitionMode::Continuation } else { TransitionMode::Fade })
        .collect();
    let plan = TransitionPlan {
        modes,
        overlap_s: m.overlap_s,
    };
    let track = assemble(&tracks, &plan).map_err(StageFailure::new)?;
    let bytes = wav_bytes(&track)?;
    let out = AssembleOutput {
        pages,
        transitions: plan,
        sample_rate: track.sample_rate,
        samples: track.len(),
        duration_s: track.duration_s(),
        wav: "assemble.wav".into(),
        wav_sha256: sha256_hex(&bytes),
        cue_sheet: CueSheet::from_track(&track),
    };
    let mut body = Body::new(&out, info("assembler".into(), json!({ "overlap_s": m.overlap_s })));
    body.audio.push(("assemble.wav".into(), bytes));
    Ok(body)
}

fn run_describe(ctx: &RunContext, llm: &dyn LanguageModel, node: &NodeSpec) -> Result<Body, StageFailure> {
    let p = node.page_index.expect("page node");
    let page = &ctx.book.pages[p];
    let path = ctx.book_dir.join(&page.image_ref);
    let bytes = fs::read(&path).map_err(|e| StageFailure::new(format!("{}: {e}", path.display())))?;
    let image_sha256 = sha256_hex(&bytes);
    let generated = describe_page(ctx.book, page, bytes, llm, &ctx.config.baselines.policy, ctx.templates)?;
    let mut params = policy_params(&ctx.config.baselines.policy);
    params["image_sha256"] = json!(image_sha256);
    let mut body = Body::new(&generated.value, info(llm.id(), params));
    body.exchanges = generated.exchanges;
    body.templates = generated.templates;
    Ok(body)
}

fn run_baseline_caption(
    ctx: &RunContext,
    cache: &mut DigestCache,
    llm: &dyn LanguageModel,
    music: &dyn MusicBackend,
    node: &NodeSpec,
) -> Result<Body, StageFailure> {
    let description: PageDescription = payload(cache, &node.inputs[0].artifact_id)?;
    let max_chars = music.max_caption_chars();
    let generated = baseline_caption(&description, max_chars, llm, &ctx.config.baselines, ctx.templates)?;
    let mut params = policy_params(&ctx.config.baselines.policy);
    params["max_caption_chars"] = json!(max_chars.min(ctx.config.baselines.max_caption_chars));
    let mut body = Body::new(&generated.value, info(llm.id(), params));
    body.exchanges = generated.exchanges;
    body.templates = generated.templates;
    Ok(body)
}

fn pool_key(ctx: &RunContext, music: &dyn MusicBackend) -> String {
    let b = &ctx.config.baselines;
    json_digest(&(b.pool_caption_list(), ctx.config.music.page_duration_s, b.pool_seed, music.id()))[..16].to_string()
}

fn read_pool(dir: &Path) -> Result<Option<MusicPool>, StageFailure> {
    let path = dir.join("pool.json");
    match fs::read_to_string(&path) {
        Ok(t) => serde_json::from_str(&t)
            .map(Some)
            .map_err(|e| StageFailure::new(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(StageFailure::new(format!("{}: {e}", path.display()))),
    }
}

/// Load the pool for this configuration, generating it on first use.
fn ensure_pool(ctx: &RunContext, music: &dyn MusicBackend) -> Result<(String, MusicPool), StageFailure> {
    let key = pool_key(ctx, music);
    let dir = ctx.pools_dir.join(&key);
    if let Some(pool) = read_pool(&dir)? {
        return Ok((key, pool));
    }
    let b = &ctx.config.baselines;
    let duration = ctx.config.music.page_duration_s;
    let captions = b.pool_caption_list();
    let rendered: Vec<Result<(PoolTrack, Vec<u8>), StageFailure>> = captions
        .par_iter()
        .enumerate()
        .map(|(i, caption)| {
            let request = MusicRequest::new(caption.clone(), duration, b.pool_seed.wrapping_add(i as u64));
            let track = synthesize(&request, music).map_err(StageFailure::new)?;
            let bytes = wav_bytes(&track)?;
            Ok((
                PoolTrack {
                    track_index: i,
                    caption: caption.clone(),
                    wav: format!("track-{i:03}.wav"),
                    duration_s: track.duration_s(),
                },
                bytes,
            ))
        })
        .collect();
    let mut tracks = Vec::new();
    for r in rendered {
        let (track, bytes) = r?;
        write_atomic(&dir.join(&track.wav), &bytes)?;
        tracks.push(track);
    }
    let pool = MusicPool {
        tracks,
        seed: b.pool_seed,
        backend_id: music.id(),
    };
    let text = serde_json::to_string_pretty(&pool).expect("serializable") + "\n";
    write_atomic(&dir.join("pool.json"), text.as_bytes())?;
    Ok((key, pool))
}

fn materialize_selections(
    ctx: &RunContext,
    key: &str,
    pool: &MusicPool,
    selections: &[Selection],
) -> Result<Vec<(String, Vec<u8>)>, StageFailure> {
    let dir = ctx.pools_dir.join(key);
    let mut out = Vec::new();
    for s in selections {
        let track = pool
            .tracks
            .iter()
            .find(|t| t.track_index == s.track_index)
            .ok_or_else(|| StageFailure::new(format!("pool has no track {}", s.track_index)))?;
        let path = dir.join(&track.wav);
        let audio = AudioTrack::read_wav(&path).map_err(StageFailure::new)?;
        let n = (ctx.config.music.page_duration_s * audio.sample_rate as f64).round() as usize;
        let fitted = audio.fit_to_len(n).for_page(s.page_index);
        out.push((Stage::RandomSelect.page_artifact(s.page_index) + ".wav", wav_bytes(&fitted)?));
    }
    Ok(out)
}

fn run_random_select(ctx: &RunContext, music: &dyn MusicBackend) -> Result<Body, StageFailure> {
    let (key, pool) = ensure_pool(ctx, music)?;
    let seed = ctx.config.baselines.selection_seed;
    let selections = random_condition(ctx.pages, &pool, seed)?;
    let audio = materialize_selections(ctx, &key, &pool, &selections)?;
    let out = RandomSelectOutput {
        pool_key: key,
        pool_backend: pool.backend_id.clone(),
        pool_size: pool.tracks.len(),
        seed,
        page_duration_s: ctx.config.music.page_duration_s,
        selections,
        wavs: audio.iter().map(|(n, _)| n.clone()).collect(),
    };
    let mut body = Body::new(&out, info(pool.backend_id.clone(), json!({ "selection_seed": seed })));
    body.audio = audio;
    Ok(body)
}

pub(crate) fn write_cue_sheet(store: &RunStore, artifact: &StageArtifact) -> Result<(), OrchestratorError> {
    let out: AssembleOutput = artifact.payload()?;
    store.write_json("cue_sheet.json", &out.cue_sheet)
}

pub(crate) struct StagedOverride {
    pub parsed: Value,
    pub audio: Vec<(String, Vec<u8>)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AudioOverride {
    wav_base64: String,
}

/// Check a replacement payload against the artifact's stage schema.
pub(crate) fn validate_override(
    ctx: &RunContext,
    backends: &Backends,
    artifact: &StageArtifact,
    payload: Value,
) -> Result<StagedOverride, OrchestratorError> {
    let stage = artifact.stage;
    let violation = |message: String| OrchestratorError::SchemaViolation {
        artifact_id: artifact.artifact_id.clone(),
        stage,
        message,
    };
    fn parse<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, String> {
        serde_json::from_value(v).map_err(|e| e.to_string())
    }
    let plain = |v: Value| StagedOverride { parsed: v, audio: Vec::new() };
    let current_scene = |scene_id: u32| -> Result<Scene, OrchestratorError> {
        let seg = ctx
            .store
            .read_artifact("segment")?
            .ok_or_else(|| OrchestratorError::UnknownArtifact("segment".into()))?;
        seg.payload::<SegmentOutput>()?
            .scenes
            .into_iter()
            .find(|s| s.scene_id == scene_id)
            .ok_or_else(|| violation(format!("the current segmentation has no scene {scene_id}")))
    };
    let caption_limit = ctx.config.captioning.max_caption_chars.min(backends.music.max_caption_chars());
    let check_text = |text: &str, limit: Option<usize>| -> Result<(), OrchestratorError> {
        if text.trim().is_empty() {
            return Err(violation("text must not be empty".into()));
        }
        if let Some(limit) = limit {
            let n = text.chars().count();
            if n > limit {
                return Err(violation(format!("text has {n} characters; the limit is {limit}")));
            }
        }
        Ok(())
    };
    match stage {
        Stage::Segment => {
            let out: SegmentOutput = parse(payload).map_err(violation)?;
            validate_partition(ctx.book, &out.scenes).map_err(|e| violation(e.to_string()))?;
            Ok(plain(serde_json::to_value(out).expect("serializable")))
        }
        Stage::Emotion => {
            let out: EmotionOutput = parse(payload).map_err(violation)?;
            let scene_id = artifact.scene_id.expect("scene artifact");
            if out.scene_id != scene_id {
                return Err(violation(format!("scene_id must stay {scene_id}")));
            }
            let scene = current_scene(scene_id)?;
            let expected: Vec<usize> = scene.pages().collect();
            let got: Vec<usize> = out.pages.keys().copied().collect();
            if got != expected {
                return Err(violation(format!("pages must be {expected:?}, got {got:?}")));
            }
            for (p, preds) in &out.pages {
                let regions: Vec<&str> = ctx.book.pages[*p].face_regions.iter().map(|f| f.region_id.as_str()).collect();
                let named: Vec<&str> = preds.iter().map(|x| x.region_id.as_str()).collect();
                if regions != named {
                    return Err(violation(format!("page {p} must list faces {regions:?}, got {named:?}")));
                }
                for x in preds {
                    let total: f64 = x.distribution.values().sum();
                    if x.distribution.values().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
                        return Err(violation(format!("{}: distribution must be non-negative and sum to 1", x.region_id)));
                    }
                    if !x.distribution.contains_key(&x.top_label) {
                        return Err(violation(format!("{}: top_label {:?} is not in the distribution", x.region_id, x.top_label)));
                    }
                }
            }
            Ok(plain(serde_json::to_value(out).expect("serializable")))
        }
        Stage::Directive => {
            let out: SceneMusicDirective = parse(payload).map_err(violation)?;
            let scene_id = artifact.scene_id.expect("scene artifact");
            if out.scene_id != scene_id {
                return Err(violation(format!("scene_id must stay {scene_id}")));
            }
            check_text(&out.text, None)?;
            Ok(plain(serde_json::to_value(out).expect("serializable")))
        }
        Stage::Caption => {
            let out: CaptionOutput = parse(payload).map_err(violation)?;
            let scene_id = artifact.scene_id.expect("scene artifact");
            if out.scene_id != scene_id || out.captions.iter().any(|c| c.scene_id != scene_id) {
                return Err(violation(format!("scene_id must stay {scene_id}")));
            }
            let expected: Vec<usize> = current_scene(scene_id)?.pages().collect();
            let got: Vec<usize> = out.captions.iter().map(|c| c.page_index).collect();
            if got != expected {
                return Err(violation(format!("captions must cover pages {expected:?} in order, got {got:?}")));
            }
            for c in &out.captions {
                check_text(&c.text, Some(caption_limit))?;
            }
            Ok(plain(serde_json::to_value(out).expect("serializable")))
        }
        Stage::Describe => {
            let out: PageDescription = parse(payload).map_err(violation)?;
            if Some(out.page_index) != artifact.page_index {
                return Err(violation("page_index must not change".into()));
            }
            check_text(&out.text, None)?;
            Ok(plain(serde_json::to_value(out).expect("serializable")))
        }
        Stage::BaselineCaption => {
            let out: PageMusicCaption = parse(payload).map_err(violation)?;
            if Some(out.page_index) != artifact.page_index || out.scene_id != NO_SCENE {
                return Err(violation(format!("page_index must not change and scene_id must be {NO_SCENE}")));
            }
            let limit = ctx.config.baselines.max_caption_chars.min(backends.music.max_caption_chars());
            check_text(&out.text, Some(limit))?;
            Ok(plain(serde_json::to_value(out).expect("serializable")))
        }
        Stage::Synth | Stage::Assemble => {
            let req: AudioOverride = parse(payload).map_err(violation)?;
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(req.wav_base64.trim())
                .map_err(|e| violation(format!("wav_base64 is not base64: {e}")))?;
            let track = AudioTrack::from_wav_bytes(&bytes).map_err(|e| violation(format!("not a readable WAV: {e}")))?;
            if stage == Stage::Synth {
                let mut out: SynthOutput = artifact.payload()?;
                if track.sample_rate != out.sample_rate {
                    return Err(violation(format!("sample rate must be {} Hz", out.sample_rate)));
                }
                out.samples = track.len();
                out.wav_sha256 = sha256_hex(&bytes);
                Ok(StagedOverride {
                    audio: vec![(out.wav.clone(), bytes)],
                    parsed: serde_json::to_value(out).expect("serializable"),
                })
            } else {
                let mut out: AssembleOutput = artifact.payload()?;
                if track.sample_rate != out.sample_rate || track.len() != out.samples {
                    return Err(violation(format!(
                        "replacement must keep {} samples at {} Hz so the cue sheet still lines up",
                        out.samples, out.sample_rate
                    )));
                }
                out.wav_sha256 = sha256_hex(&bytes);
                Ok(StagedOverride {
                    audio: vec![(out.wav.clone(), bytes)],
                    parsed: serde_json::to_value(out).expect("serializable"),
                })
            }
        }
        Stage::RandomSelect => {
            #[derive(Deserialize)]
            struct Edit {
                selections: Vec<Selection>,
            }
            let edit: Edit = parse(payload).map_err(violation)?;
            let mut out: RandomSelectOutput = artifact.payload()?;
            let pages: Vec<usize> = edit.selections.iter().map(|s| s.page_index).collect();
            if pages != ctx.pages {
                return Err(violation(format!("selections must cover pages {:?} in order", ctx.pages)));
            }
            let dir = ctx.pools_dir.join(&out.pool_key);
            let pool = read_pool(&dir)
                .map_err(|f| violation(f.message))?
                .ok_or_else(|| violation(format!("pool {} is not available", out.pool_key)))?;
            let mut selections = Vec::new();
            for s in edit.selections {
                let track = pool
                    .tracks
                    .iter()
                    .find(|t| t.track_index == s.track_index)
                    .ok_or_else(|| violation(format!("pool has no track {}", s.track_index)))?;
                selections.push(Selection {
                    page_index: s.page_index,
                    track_index: s.track_index,
                    caption: track.caption.clone(),
                });
            }
            let audio = materialize_selections(ctx, &out.pool_key, &pool, &selections).map_err(|f| violation(f.message))?;
            out.selections = selections;
            Ok(StagedOverride {
                parsed: serde_json::to_value(out).expect("serializable"),
                audio,
            })
        }
    }
}
