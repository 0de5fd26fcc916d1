//! Python bindings. Structured values cross the boundary as JSON text so the
//! Python side sees exactly what the run directories store.

use std::path::{Path, PathBuf};

use m2m_core::assembly::{crossfade as crossfade_tracks, overlap_gains as gains};
use m2m_core::audio::AudioTrack;
use m2m_core::config::{Condition, PipelineConfig};
use m2m_core::emotion::MetricReport;
use m2m_core::evaluation::{evaluate, load_responses, rm_anova_table, MissingPolicy, Study, StudyDesign};
use m2m_core::orchestrator::{ingest as ingest_book, Backends, Orchestrator, RunStore};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(m2m_py, M2mError, PyException, "Pipeline error raised by the Rust core.");

fn err(e: impl std::fmt::Display) -> PyErr {
    M2mError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize + ?Sized>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(err)
}

/// Parse a config given as TOML text, or the default when absent.
pub fn parse_config(toml: Option<&str>) -> Result<PipelineConfig, String> {
    match toml {
        Some(t) => PipelineConfig::from_toml_str(t).map_err(|e| e.to_string()),
        None => Ok(PipelineConfig::default()),
    }
}

fn orchestrator(run_root: &Path, config: &PipelineConfig) -> PyResult<Orchestrator> {
    Ok(Orchestrator::new(run_root, Backends::from_config(config).map_err(err)?))
}

fn run_config(run_root: &Path, run_id: &str) -> PyResult<PipelineConfig> {
    Ok(RunStore::new(run_root.join(run_id)).read_manifest().map_err(err)?.config)
}

/// Default pipeline configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    PipelineConfig::default().to_toml_string()
}

/// Copy a book into the library; returns the book as JSON.
#[pyfunction]
fn ingest(dataset: PathBuf, book_id: &str, library: PathBuf) -> PyResult<String> {
    to_json(&ingest_book(&dataset, book_id, &library).map_err(err)?)
}

/// Run or resume one condition; returns the run report as JSON.
#[pyfunction]
#[pyo3(signature = (library, book_id, condition, run_root, config=None, run_id=None))]
fn run(
    py: Python<'_>,
    library: PathBuf,
    book_id: &str,
    condition: &str,
    run_root: PathBuf,
    config: Option<&str>,
    run_id: Option<&str>,
) -> PyResult<String> {
    let condition: Condition = condition.parse().map_err(PyValueError::new_err)?;
    let config = parse_config(config).map_err(PyValueError::new_err)?;
    let orch = orchestrator(&run_root, &config)?;
    let report = py
        .detach(|| orch.run(&library, book_id, condition, &config, run_id))
        .map_err(err)?;
    to_json(&report)
}

/// Replace an artifact's payload (JSON text); returns the manifest as JSON.
#[pyfunction]
fn override_artifact(run_root: PathBuf, run_id: &str, artifact_id: &str, payload: &str) -> PyResult<String> {
    let value: serde_json::Value = serde_json::from_str(payload).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let orch = orchestrator(&run_root, &run_config(&run_root, run_id)?)?;
    to_json(&orch.override_artifact(run_id, artifact_id, value).map_err(err)?)
}

/// Regenerate stale, pending and failed artifacts; returns the run report as JSON.
#[pyfunction]
fn rerun(py: Python<'_>, run_root: PathBuf, run_id: &str) -> PyResult<String> {
    let orch = orchestrator(&run_root, &run_config(&run_root, run_id)?)?;
    to_json(&py.detach(|| orch.rerun(run_id)).map_err(err)?)
}

#[pyfunction]
fn manifest(run_root: PathBuf, run_id: &str) -> PyResult<String> {
    to_json(&RunStore::new(run_root.join(run_id)).read_manifest().map_err(err)?)
}

#[pyfunction]
fn artifact(run_root: PathBuf, run_id: &str, artifact_id: &str) -> PyResult<String> {
    let a = RunStore::new(run_root.join(run_id))
        .read_artifact(artifact_id)
        .map_err(err)?
        .ok_or_else(|| err(format!("artifact {artifact_id} does not exist in this run")))?;
    to_json(&a)
}

/// `(outgoing, incoming)` equal-power gains for `n` overlap samples.
#[pyfunction]
fn overlap_gains(n: usize) -> Vec<(f64, f64)> {
    gains(n)
}

/// Equal-power crossfade of two mono signals.
#[pyfunction]
fn crossfade(a: Vec<f32>, b: Vec<f32>, sample_rate: u32, overlap_s: f64) -> PyResult<Vec<f32>> {
    let out = crossfade_tracks(&AudioTrack::mono(a, sample_rate), &AudioTrack::mono(b, sample_rate), overlap_s)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(out.samples.into_iter().next().unwrap_or_default())
}

/// Repeated-measures ANOVA on a subjects-by-conditions table: `(F, df1, df2, p)`.
#[pyfunction]
fn rm_anova(rows: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64, f64)> {
    let k = rows.first().map_or(0, Vec::len);
    if rows.len() < 2 || k < 2 || rows.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err("need a rectangular table of at least 2 subjects and 2 conditions"));
    }
    let s = rm_anova_table(&rows);
    Ok((s.f, s.df.0, s.df.1, s.p))
}

/// Micro, macro and weighted F1 plus accuracy for label indices.
#[pyfunction]
fn f1_scores(labels: Vec<String>, truth: Vec<usize>, predicted: Vec<usize>) -> PyResult<(f64, f64, f64, f64)> {
    if truth.len() != predicted.len() || truth.iter().chain(&predicted).any(|&i| i >= labels.len()) {
        return Err(PyValueError::new_err("truth and predicted must be equal-length indices into labels"));
    }
    let r = MetricReport::from_predictions(&labels, &truth, &predicted);
    Ok((r.micro, r.macro_, r.weighted, r.accuracy))
}

/// ANOVA report for a survey CSV, as JSON.
#[pyfunction]
#[pyo3(signature = (responses, study="within_scene", listwise=false, participants=None, scenes=None))]
fn evaluate_survey(
    responses: PathBuf,
    study: &str,
    listwise: bool,
    participants: Option<usize>,
    scenes: Option<usize>,
) -> PyResult<String> {
    let study = match study {
        "within_scene" => Study::WithinScene,
        "between_scenes" => Study::BetweenScenes,
        other => return Err(PyValueError::new_err(format!("unknown study {other:?}"))),
    };
    let mut design = StudyDesign::for_study(study);
    if let Some(n) = participants {
        design.n_participants = n;
    }
    if let Some(n) = scenes {
        design.n_scenes = n;
    }
    let policy = if listwise { MissingPolicy::Listwise } else { MissingPolicy::Strict };
    let data = load_responses(&responses).map_err(err)?;
    to_json(&evaluate(&data, &design, policy).map_err(err)?)
}

#[pymodule]
fn m2m_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("M2mError", m.py().get_type::<M2mError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(override_artifact, m)?)?;
    m.add_function(wrap_pyfunction!(rerun, m)?)?;
    m.add_function(wrap_pyfunction!(manifest, m)?)?;
    m.add_function(wrap_pyfunction!(artifact, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_gains, m)?)?;
    m.add_function(wrap_pyfunction!(crossfade, m)?)?;
    m.add_function(wrap_pyfunction!(rm_anova, m)?)?;
    m.add_function(wrap_pyfunction!(f1_scores, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_survey, m)?)?;
    Ok(())
}
