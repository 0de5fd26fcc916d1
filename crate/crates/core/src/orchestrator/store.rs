//! On-disk layout of one run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stages::StageFailure;
use super::{io_err, OrchestratorError, RunManifest, Stage, StageArtifact};
use crate::corpus::Book;
use crate::llm::Exchange;

const MANIFEST: &str = "manifest.json";
const BOOK: &str = "book.json";
const ARTIFACTS: &str = "artifacts";
const LOCK: &str = ".lock";
const FAILED_SUFFIX: &str = ".failed.json";
const ORIGINAL_SUFFIX: &str = ".original.wav";

/// Write through a temporary file and rename, so readers never see a torn file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), OrchestratorError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn to_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text.into_bytes()
}

/// A failed attempt, kept so every prompt that was sent stays on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub artifact_id: String,
    pub stage: Stage,
    pub error: String,
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl RunStore {
    pub fn new(dir: PathBuf) -> Self {
        RunStore { dir }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.dir.join(ARTIFACTS)
    }

    pub fn exists(&self) -> bool {
        self.dir.join(MANIFEST).is_file()
    }

    pub fn lock(&self, run_id: &str) -> Result<RunLock, OrchestratorError> {
        fs::create_dir_all(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        let path = self.dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(OrchestratorError::RunLocked(run_id.to_string()))
            }
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub fn is_locked(&self) -> bool {
        self.dir.join(LOCK).exists()
    }

    pub(crate) fn create(&self, book: &Book) -> Result<(), OrchestratorError> {
        let artifacts = self.artifacts_dir();
        fs::create_dir_all(&artifacts).map_err(|e| io_err(&artifacts, e))?;
        write_atomic(&self.dir.join(BOOK), book.to_canonical_json().as_bytes())
    }

    pub fn read_manifest(&self) -> Result<RunManifest, OrchestratorError> {
        let path = self.dir.join(MANIFEST);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let id = self.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                return Err(OrchestratorError::UnknownRun(id));
            }
            Err(e) => return Err(io_err(&path, e)),
        };
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }

    pub(crate) fn write_manifest(&self, manifest: &RunManifest) -> Result<(), OrchestratorError> {
        write_atomic(&self.dir.join(MANIFEST), &to_pretty(manifest))
    }

    pub fn read_book(&self) -> Result<Book, OrchestratorError> {
        let path = self.dir.join(BOOK);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        Ok(Book::from_json(&text)?)
    }

    fn artifact_path(&self, id: &str) -> PathBuf {
        self.artifacts_dir().join(format!("{id}.json"))
    }

    pub fn read_artifact(&self, id: &str) -> Result<Option<StageArtifact>, OrchestratorError> {
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Ok(None);
        }
        let path = self.artifact_path(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path, e)),
        };
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| OrchestratorError::CorruptArtifact {
                artifact_id: id.to_string(),
                message: e.to_string(),
            })
    }

    /// Raw bytes of an artifact file, exactly as stored.
    pub fn read_artifact_bytes(&self, id: &str) -> Result<Option<Vec<u8>>, OrchestratorError> {
        if self.read_artifact(id)?.is_none() {
            return Ok(None);
        }
        let path = self.artifact_path(id);
        fs::read(&path).map(Some).map_err(|e| io_err(&path, e))
    }

    pub(crate) fn write_artifact(&self, artifact: &StageArtifact) -> Result<(), OrchestratorError> {
        write_atomic(&self.artifact_path(&artifact.artifact_id), &to_pretty(artifact))
    }

    /// Ids of all stored artifacts, sorted.
    pub fn artifact_ids(&self) -> Result<Vec<String>, OrchestratorError> {
        let dir = self.artifacts_dir();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir, e)),
        };
        let mut ids = Vec::new();
        for entry in entries {
            let name = entry.map_err(|e| io_err(&dir, e))?.file_name().to_string_lossy().into_owned();
            if name.ends_with(FAILED_SUFFIX) || name == "cue_sheet.json" {
                continue;
            }
            if let Some(id) = name.strip_suffix(".json") {
                if Stage::of_artifact(id).is_some() {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub(crate) fn remove_artifact(&self, id: &str) -> Result<(), OrchestratorError> {
        if let Some(a) = self.read_artifact(id)? {
            for wav in &a.audio {
                let _ = fs::remove_file(self.artifacts_dir().join(wav));
                let _ = fs::remove_file(self.artifacts_dir().join(original_name(wav)));
            }
        }
        let path = self.artifact_path(id);
        fs::remove_file(&path).map_err(|e| io_err(&path, e))
    }

    /// Path of a WAV file written next to the artifacts.
    pub fn audio_path(&self, name: &str) -> Option<PathBuf> {
        if name.contains(['/', '\\']) || name.starts_with('.') || !name.ends_with(".wav") {
            return None;
        }
        Some(self.artifacts_dir().join(name))
    }

    pub(crate) fn write_audio(&self, name: &str, bytes: &[u8]) -> Result<(), OrchestratorError> {
        write_atomic(&self.artifacts_dir().join(name), bytes)
    }

    pub fn read_audio(&self, name: &str) -> Result<Vec<u8>, OrchestratorError> {
        let path = self
            .audio_path(name)
            .ok_or_else(|| OrchestratorError::UnknownArtifact(name.to_string()))?;
        fs::read(&path).map_err(|e| io_err(&path, e))
    }

    pub(crate) fn preserve_original_audio(&self, name: &str) -> Result<(), OrchestratorError> {
        let from = self.artifacts_dir().join(name);
        let to = self.artifacts_dir().join(original_name(name));
        fs::copy(&from, &to).map(|_| ()).map_err(|e| io_err(&from, e))
    }

    pub(crate) fn write_failure(&self, id: &str, stage: Stage, failure: &StageFailure) -> Result<(), OrchestratorError> {
        let record = FailureRecord {
            artifact_id: id.to_string(),
            stage,
            error: failure.message.clone(),
            exchanges: failure.exchanges.clone(),
        };
        write_atomic(&self.artifacts_dir().join(format!("{id}{FAILED_SUFFIX}")), &to_pretty(&record))
    }

    pub fn read_failure(&self, id: &str) -> Result<Option<FailureRecord>, OrchestratorError> {
        let path = self.artifacts_dir().join(format!("{id}{FAILED_SUFFIX}"));
        match fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t).map(Some).map_err(|e| io_err(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub(crate) fn clear_failure(&self, id: &str) -> Result<(), OrchestratorError> {
        let path = self.artifacts_dir().join(format!("{id}{FAILED_SUFFIX}"));
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub(crate) fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), OrchestratorError> {
        write_atomic(&self.artifacts_dir().join(name), &to_pretty(value))
    }
}

pub fn original_name(wav: &str) -> String {
    format!("{}{ORIGINAL_SUFFIX}", wav.trim_end_matches(".wav"))
}

/// Run ids under `run_root` that have a manifest, sorted.
pub fn list_runs(run_root: &Path) -> Result<Vec<String>, OrchestratorError> {
    let entries = match fs::read_dir(run_root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(run_root, e)),
    };
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(run_root, e))?;
        if entry.path().join(MANIFEST).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}
