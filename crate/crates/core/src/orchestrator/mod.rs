//! Stage graph execution over a book, with a human-readable artifact store.
//!
//! Each run lives in its own directory:
//!
//! ```text
//! <run_root>/<run_id>/
//!   manifest.json          run metadata, config snapshot, stage statuses
//!   book.json              canonical book snapshot
//!   artifacts/
//!     segment.json         one JSON file per stage instance
//!     synth-p003.json
//!     synth-p003.wav       audio next to the artifact that produced it
//!     assemble.json
//!     assemble.wav
//!     cue_sheet.json
//! <run_root>/pools/<key>/  pre-generated tracks for the random condition
//! ```
//!
//! Every artifact records the digests of the inputs it was computed from. An
//! artifact is stale when any recorded digest no longer matches its input or
//! an input is itself not done. Overriding an artifact keeps the replaced
//! payload in `original`; downstream instances then become stale and
//! [`Orchestrator::rerun`] regenerates exactly those.

mod backends;
mod plan;
mod stages;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::{BackendKind, Condition, PipelineConfig};
use crate::corpus::{load_book, Book, CorpusError};
use crate::digest::json_digest;
use crate::llm::Exchange;
use crate::template::{TemplateRef, TemplateSet};

pub use backends::{Backends, CallCounter, CountingEmotion, CountingLanguageModel, CountingMusic};
pub use plan::{InputRef, NodeSpec, Plan, Projection, BOOK};
pub use stages::{
    AssembleOutput, CaptionOutput, EmotionOutput, RandomSelectOutput, SegmentOutput, SynthOutput,
};
pub use store::{list_runs, RunLock, RunStore};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Segment,
    Emotion,
    Directive,
    Caption,
    Synth,
    Assemble,
    Describe,
    BaselineCaption,
    RandomSelect,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Segment,
        Stage::Emotion,
        Stage::Directive,
        Stage::Caption,
        Stage::Synth,
        Stage::Assemble,
        Stage::Describe,
        Stage::BaselineCaption,
        Stage::RandomSelect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Segment => "segment",
            Stage::Emotion => "emotion",
            Stage::Directive => "directive",
            Stage::Caption => "caption",
            Stage::Synth => "synth",
            Stage::Assemble => "assemble",
            Stage::Describe => "describe",
            Stage::BaselineCaption => "baseline_caption",
            Stage::RandomSelect => "random_select",
        }
    }

    /// Stage of an artifact id such as `caption-s02` or `synth-p005`.
    pub fn of_artifact(artifact_id: &str) -> Option<Stage> {
        let head = artifact_id.split_once('-').map_or(artifact_id, |(h, _)| h);
        head.parse().ok()
    }

    pub fn scene_artifact(self, scene_id: u32) -> String {
        format!("{}-s{scene_id:02}", self.as_str())
    }

    pub fn page_artifact(self, page_index: usize) -> String {
        format!("{}-p{page_index:03}", self.as_str())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub artifact_id: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub backend_id: String,
    pub parameters: Value,
}

/// The persisted record of one stage instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageArtifact {
    pub artifact_id: String,
    pub stage: Stage,
    pub book_id: String,
    pub scene_id: Option<u32>,
    pub page_index: Option<usize>,
    /// User prompt of the accepted attempt.
    pub prompt: Option<String>,
    /// Raw reply of the accepted attempt.
    pub raw_response: Option<String>,
    /// Every attempt, including rejected ones, verbatim.
    pub exchanges: Vec<Exchange>,
    pub templates: Vec<TemplateRef>,
    pub parsed: Value,
    pub model_info: ModelInfo,
    /// Backend requests made while producing this artifact.
    pub backend_calls: u64,
    pub created_at: String,
    /// Position in the run's execution order; inputs always have smaller values.
    pub sequence: u64,
    pub overridden: bool,
    /// Payload this artifact had before its first override.
    pub original: Option<Value>,
    pub input_digests: Vec<InputDigest>,
    pub output_digest: String,
    /// WAV files written next to this artifact.
    pub audio: Vec<String>,
}

impl StageArtifact {
    pub fn payload<T: serde::de::DeserializeOwned>(&self) -> Result<T, OrchestratorError> {
        serde_json::from_value(self.parsed.clone()).map_err(|e| OrchestratorError::CorruptArtifact {
            artifact_id: self.artifact_id.clone(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Done,
    Stale,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifact_id: String,
    pub stage: Stage,
    pub status: StageStatus,
    pub sequence: Option<u64>,
    pub overridden: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendIds {
    pub llm: String,
    pub music: String,
    pub emotion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub run_id: String,
    pub book_id: String,
    pub book_digest: String,
    /// Library directory the book was ingested into, as given.
    pub library: String,
    pub condition: Condition,
    pub config: PipelineConfig,
    pub config_digest: String,
    pub backends: BackendIds,
    /// Pages the run covers, after applying the page window.
    pub pages: Vec<usize>,
    /// Stage instances in execution order, then instances no longer planned.
    pub stages: Vec<StageRecord>,
    pub next_sequence: u64,
    pub final_audio: Option<String>,
}

impl RunManifest {
    pub fn status(&self, artifact_id: &str) -> Option<StageStatus> {
        self.stages.iter().find(|s| s.artifact_id == artifact_id).map(|s| s.status)
    }

    pub fn ids_with_status(&self, status: StageStatus) -> BTreeSet<String> {
        self.stages
            .iter()
            .filter(|s| s.status == status)
            .map(|s| s.artifact_id.clone())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Done)
    }
}

/// What one call to [`Orchestrator::run`] or [`Orchestrator::rerun`] did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest: RunManifest,
    /// Artifacts written, in execution order.
    pub executed: Vec<String>,
    pub failed: Vec<String>,
    /// Artifacts deleted because the plan no longer contains them.
    pub removed: Vec<String>,
    /// Backend requests made during this call.
    pub backend_calls: u64,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("run {0} does not exist")]
    UnknownRun(String),
    #[error("run {0} already exists with a different configuration or book")]
    RunMismatch(String),
    #[error("run {0} is locked by another writer")]
    RunLocked(String),
    #[error("artifact {0} does not exist in this run")]
    UnknownArtifact(String),
    #[error("payload for {artifact_id} does not match the {stage} schema: {message}")]
    SchemaViolation {
        artifact_id: String,
        stage: Stage,
        message: String,
    },
    #[error("artifact {artifact_id} is unreadable: {message}")]
    CorruptArtifact { artifact_id: String, message: String },
    #[error("page window {first}..={last} lies outside the book's {pages} pages")]
    InvalidWindow { first: usize, last: usize, pages: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("book in the library no longer matches the run's snapshot")]
    BookChanged,
}

pub(crate) fn io_err(path: &Path, e: impl fmt::Display) -> OrchestratorError {
    OrchestratorError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Load a book from a dataset root and write it into `library/<book_id>/`
/// together with its page images, so runs are independent of the dataset.
pub fn ingest(dataset_root: &Path, book_id: &str, library: &Path) -> Result<Book, OrchestratorError> {
    let book = load_book(dataset_root, book_id)?;
    let dir = library.join(book_id);
    for page in &book.pages {
        let src = dataset_root.join(&page.image_ref);
        let dst = dir.join(&page.image_ref);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::copy(&src, &dst).map_err(|e| io_err(&src, e))?;
    }
    store::write_atomic(&dir.join("book.json"), book.to_canonical_json().as_bytes())?;
    Ok(book)
}

/// Read an ingested book from `library/<book_id>/book.json`.
pub fn load_library_book(library: &Path, book_id: &str) -> Result<Book, OrchestratorError> {
    let path = library.join(book_id).join("book.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(Book::from_json(&text)?)
}

/// Deterministic default run id for a book, condition and configuration.
pub fn default_run_id(book_id: &str, condition: Condition, config: &PipelineConfig) -> String {
    format!("{book_id}-{condition}-{}", &json_digest(config)[..8])
}

/// Executes runs under one run root with one set of backends.
pub struct Orchestrator {
    run_root: PathBuf,
    backends: Backends,
}

pub(crate) struct RunContext<'a> {
    pub book: &'a Book,
    pub book_dir: PathBuf,
    pub config: &'a PipelineConfig,
    pub pages: &'a [usize],
    pub templates: &'a TemplateSet,
    pub store: &'a RunStore,
    pub pools_dir: PathBuf,
}

impl Orchestrator {
    pub fn new(run_root: impl Into<PathBuf>, backends: Backends) -> Self {
        Orchestrator {
            run_root: run_root.into(),
            backends,
        }
    }

    pub fn run_root(&self) -> &Path {
        &self.run_root
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn store(&self, run_id: &str) -> RunStore {
        RunStore::new(self.run_root.join(run_id))
    }

    /// Start a run, or resume it if a run with this id and the same book and
    /// configuration already exists.
    pub fn run(
        &self,
        library: &Path,
        book_id: &str,
        condition: Condition,
        config: &PipelineConfig,
        run_id: Option<&str>,
    ) -> Result<RunReport, OrchestratorError> {
        config.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        let book = load_library_book(library, book_id)?;
        let pages = window_pages(&book, config.page_window)?;
        let run_id = run_id
            .map(str::to_string)
            .unwrap_or_else(|| default_run_id(book_id, condition, config));
        let store = self.store(&run_id);
        let _lock = store.lock(&run_id)?;
        let fresh = RunManifest {
            format: MANIFEST_FORMAT,
            run_id: run_id.clone(),
            book_id: book_id.to_string(),
            book_digest: json_digest(&book),
            library: library.display().to_string(),
            condition,
            config: config.clone(),
            config_digest: json_digest(config),
            backends: self.backends.ids(),
            pages,
            stages: Vec::new(),
            next_sequence: 1,
            final_audio: None,
        };
        let manifest = match store.read_manifest() {
            Ok(existing) => {
                if existing.book_digest != fresh.book_digest
                    || existing.config_digest != fresh.config_digest
                    || existing.condition != condition
                {
                    return Err(OrchestratorError::RunMismatch(run_id));
                }
                existing
            }
            Err(OrchestratorError::UnknownRun(_)) => {
                store.create(&book)?;
                store.write_manifest(&fresh)?;
                fresh
            }
            Err(e) => return Err(e),
        };
        self.execute(&store, manifest, &book)
    }

    /// Regenerate every pending, stale or failed instance of an existing run.
    pub fn rerun(&self, run_id: &str) -> Result<RunReport, OrchestratorError> {
        let store = self.store(run_id);
        let manifest = store.read_manifest()?;
        let _lock = store.lock(run_id)?;
        let book = store.read_book()?;
        if json_digest(&book) != manifest.book_digest {
            return Err(OrchestratorError::BookChanged);
        }
        self.execute(&store, manifest, &book)
    }

    /// Stage instances of a run as currently planned, in execution order.
    pub fn plan(&self, run_id: &str) -> Result<Vec<NodeSpec>, OrchestratorError> {
        let store = self.store(run_id);
        let manifest = store.read_manifest()?;
        Ok(plan::build(&manifest, &store)?.nodes)
    }

    /// Planned instances that transitively consume `artifact_id`.
    pub fn downstream(&self, run_id: &str, artifact_id: &str) -> Result<BTreeSet<String>, OrchestratorError> {
        let store = self.store(run_id);
        let manifest = store.read_manifest()?;
        let plan = plan::build(&manifest, &store)?;
        Ok(plan::downstream(&plan, artifact_id).into_iter().collect())
    }

    /// Recompute statuses from the artifact store without executing anything.
    pub fn refresh(&self, run_id: &str) -> Result<RunManifest, OrchestratorError> {
        let store = self.store(run_id);
        let manifest = store.read_manifest()?;
        let _lock = store.lock(run_id)?;
        let book = store.read_book()?;
        let manifest = self.update_statuses(&store, manifest, &book, &BTreeMap::new())?;
        store.write_manifest(&manifest)?;
        Ok(manifest)
    }

    /// Replace an artifact's payload with a human edit and mark everything
    /// downstream stale. The run is left untouched when validation fails.
    pub fn override_artifact(
        &self,
        run_id: &str,
        artifact_id: &str,
        payload: Value,
    ) -> Result<RunManifest, OrchestratorError> {
        let store = self.store(run_id);
        let manifest = store.read_manifest()?;
        let _lock = store.lock(run_id)?;
        let book = store.read_book()?;
        let mut artifact = store
            .read_artifact(artifact_id)?
            .ok_or_else(|| OrchestratorError::UnknownArtifact(artifact_id.to_string()))?;
        let templates = load_templates(&manifest.config)?;
        let ctx = RunContext {
            book: &book,
            book_dir: PathBuf::from(&manifest.library).join(&manifest.book_id),
            config: &manifest.config,
            pages: &manifest.pages,
            templates: &templates,
            store: &store,
            pools_dir: self.run_root.join("pools"),
        };
        let staged = stages::validate_override(&ctx, &self.backends, &artifact, payload)?;
        if artifact.original.is_none() {
            artifact.original = Some(artifact.parsed.clone());
            for wav in &artifact.audio {
                store.preserve_original_audio(wav)?;
            }
        }
        for (name, bytes) in &staged.audio {
            store.write_audio(name, bytes)?;
        }
        artifact.parsed = staged.parsed;
        artifact.output_digest = json_digest(&artifact.parsed);
        artifact.overridden = true;
        store.write_artifact(&artifact)?;
        if artifact.stage == Stage::Assemble {
            stages::write_cue_sheet(&store, &artifact)?;
        }
        let manifest = self.update_statuses(&store, manifest, &book, &BTreeMap::new())?;
        store.write_manifest(&manifest)?;
        Ok(manifest)
    }

    fn update_statuses(
        &self,
        store: &RunStore,
        mut manifest: RunManifest,
        book: &Book,
        errors: &BTreeMap<String, String>,
    ) -> Result<RunManifest, OrchestratorError> {
        let plan = plan::build(&manifest, store)?;
        let statuses = plan::statuses(&plan, book, store)?;
        let previous: BTreeMap<String, StageRecord> =
            manifest.stages.drain(..).map(|r| (r.artifact_id.clone(), r)).collect();
        let mut records = Vec::new();
        let planned: BTreeSet<&str> = plan.nodes.iter().map(|n| n.artifact_id.as_str()).collect();
        for node in &plan.nodes {
            let artifact = store.read_artifact(&node.artifact_id)?;
            let mut status = statuses[&node.artifact_id];
            let mut error = None;
            if status != StageStatus::Done {
                error = errors.get(&node.artifact_id).cloned().or_else(|| {
                    previous
                        .get(&node.artifact_id)
                        .filter(|prev| prev.status == StageStatus::Failed)
                        .and_then(|prev| prev.error.clone())
                });
                if error.is_some() {
                    status = StageStatus::Failed;
                }
            }
            records.push(StageRecord {
                artifact_id: node.artifact_id.clone(),
                stage: node.stage,
                status,
                sequence: artifact.as_ref().map(|a| a.sequence),
                overridden: artifact.as_ref().is_some_and(|a| a.overridden),
                error,
            });
        }
        for id in store.artifact_ids()? {
            if !planned.contains(id.as_str()) {
                let artifact = store.read_artifact(&id)?.expect("listed artifact exists");
                records.push(StageRecord {
                    stage: artifact.stage,
                    artifact_id: id,
                    status: StageStatus::Stale,
                    sequence: Some(artifact.sequence),
                    overridden: artifact.overridden,
                    error: None,
                });
            }
        }
        manifest.stages = records;
        manifest.final_audio = match manifest.status("assemble") {
            Some(StageStatus::Done) => Some("artifacts/assemble.wav".into()),
            _ => None,
        };
        Ok(manifest)
    }

    fn execute(&self, store: &RunStore, mut manifest: RunManifest, book: &Book) -> Result<RunReport, OrchestratorError> {
        let templates = load_templates(&manifest.config)?;
        let config = manifest.config.clone();
        let pages = manifest.pages.clone();
        let ctx = RunContext {
            book,
            book_dir: PathBuf::from(&manifest.library).join(&manifest.book_id),
            config: &config,
            pages: &pages,
            templates: &templates,
            store,
            pools_dir: self.run_root.join("pools"),
        };
        let calls_before = self.backends.total_calls();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        let mut executed = Vec::new();
        let mut failed: Vec<String> = Vec::new();
        let mut errors: BTreeMap<String, String> = BTreeMap::new();
        let mut removed = Vec::new();
        loop {
            let plan = plan::build(&manifest, store)?;
            if plan.settled {
                let planned: BTreeSet<&str> = plan.nodes.iter().map(|n| n.artifact_id.as_str()).collect();
                for id in store.artifact_ids()? {
                    if !planned.contains(id.as_str()) {
                        store.remove_artifact(&id)?;
                        removed.push(id);
                    }
                }
            }
            let statuses = plan::statuses(&plan, book, store)?;
            let ready: Vec<&NodeSpec> = plan
                .nodes
                .iter()
                .filter(|n| {
                    matches!(statuses[&n.artifact_id], StageStatus::Pending | StageStatus::Stale)
                        && !failed.contains(&n.artifact_id)
                        && n.inputs
                            .iter()
                            .all(|i| i.is_book() || statuses.get(&i.artifact_id) == Some(&StageStatus::Done))
                })
                .collect();
            if ready.is_empty() {
                break;
            }
            let results: Vec<_> = pool.install(|| {
                ready
                    .par_iter()
                    .map(|node| stages::execute(&ctx, &self.backends, node))
                    .collect()
            });
            let mut halt = false;
            for (node, result) in ready.iter().zip(results) {
                match result {
                    Ok(mut out) => {
                        out.artifact.sequence = manifest.next_sequence;
                        out.artifact.created_at = timestamp(&config, manifest.next_sequence);
                        manifest.next_sequence += 1;
                        store.clear_failure(&node.artifact_id)?;
                        for (name, bytes) in &out.audio {
                            store.write_audio(name, bytes)?;
                        }
                        store.write_artifact(&out.artifact)?;
                        if node.stage == Stage::Assemble {
                            stages::write_cue_sheet(store, &out.artifact)?;
                        }
                        executed.push(node.artifact_id.clone());
                    }
                    Err(failure) => {
                        log::error!("{} failed: {}", node.artifact_id, failure.message);
                        store.write_failure(&node.artifact_id, node.stage, &failure)?;
                        errors.insert(node.artifact_id.clone(), failure.message.clone());
                        failed.push(node.artifact_id.clone());
                        if !config.keep_going {
                            halt = true;
                        }
                    }
                }
            }
            manifest = self.update_statuses(store, manifest, book, &errors)?;
            store.write_manifest(&manifest)?;
            if halt {
                break;
            }
        }
        manifest = self.update_statuses(store, manifest, book, &errors)?;
        store.write_manifest(&manifest)?;
        Ok(RunReport {
            manifest,
            executed,
            failed,
            removed,
            backend_calls: self.backends.total_calls() - calls_before,
        })
    }
}

fn load_templates(config: &PipelineConfig) -> Result<TemplateSet, OrchestratorError> {
    match &config.templates_dir {
        Some(dir) => TemplateSet::with_overrides(dir).map_err(|e| OrchestratorError::Config(e.to_string())),
        None => Ok(TemplateSet::default()),
    }
}

fn window_pages(book: &Book, window: Option<(usize, usize)>) -> Result<Vec<usize>, OrchestratorError> {
    let n = book.page_count();
    match window {
        None => Ok((0..n).collect()),
        Some((first, last)) if first <= last && last < n => Ok((first..=last).collect()),
        Some((first, last)) => Err(OrchestratorError::InvalidWindow { first, last, pages: n }),
    }
}

/// Mock runs use a logical clock so repeated runs are byte-identical.
fn timestamp(config: &PipelineConfig, sequence: u64) -> String {
    match config.backend {
        BackendKind::Mock => {
            let t = chrono::DateTime::UNIX_EPOCH + chrono::Duration::seconds(sequence as i64);
            t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        }
        BackendKind::Live => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
    }
}
