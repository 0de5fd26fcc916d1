//! JSON-over-HTTP access to a run root for the review client.
//!
//! Reads go straight to the run directories. Writes (override and rerun)
//! go through the orchestrator, which takes the per-run lock; a request that
//! finds the lock held gets `409 Conflict` instead of waiting.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/api/runs` | [`RunSummary`] list |
//! | GET | `/api/runs/{run}` | manifest |
//! | GET | `/api/runs/{run}/plan` | [`PlanNode`] list |
//! | GET | `/api/runs/{run}/book` | book snapshot |
//! | GET | `/api/runs/{run}/pages/{page}/image` | page image |
//! | GET | `/api/runs/{run}/artifacts/{id}` | artifact file, verbatim |
//! | GET | `/api/runs/{run}/artifacts/{id}/failure` | failure record |
//! | GET | `/api/runs/{run}/audio/{file}` | WAV |
//! | POST | `/api/runs/{run}/artifacts/{id}/override` | payload in, manifest out |
//! | POST | `/api/runs/{run}/rerun` | run report |

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use m2m_core::orchestrator::{list_runs, InputRef, Orchestrator, OrchestratorError, RunStore, Stage, StageStatus};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Error body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    /// Machine-readable kind, e.g. `schema_violation` or `run_locked`.
    pub error: String,
    pub message: String,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        ApiError {
            error: error.into(),
            message: message.into(),
            status: status.as_u16(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let (status, kind) = match &e {
            OrchestratorError::UnknownRun(_) => (StatusCode::NOT_FOUND, "unknown_run"),
            OrchestratorError::UnknownArtifact(_) => (StatusCode::NOT_FOUND, "unknown_artifact"),
            OrchestratorError::SchemaViolation { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "schema_violation"),
            OrchestratorError::RunLocked(_) => (StatusCode::CONFLICT, "run_locked"),
            OrchestratorError::RunMismatch(_) => (StatusCode::CONFLICT, "run_mismatch"),
            OrchestratorError::BookChanged => (StatusCode::CONFLICT, "book_changed"),
            OrchestratorError::InvalidWindow { .. } | OrchestratorError::Config(_) => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// One entry of `GET /api/runs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub book_id: String,
    pub condition: String,
    pub complete: bool,
    pub locked: bool,
    pub pending: usize,
    pub stale: usize,
    pub failed: usize,
}

/// One stage instance with its inputs and current status, for drawing the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub artifact_id: String,
    pub stage: Stage,
    pub scene_id: Option<u32>,
    pub page_index: Option<usize>,
    pub inputs: Vec<InputRef>,
    pub status: Option<StageStatus>,
    pub overridden: bool,
}

#[derive(Clone)]
struct AppState {
    orch: Arc<Orchestrator>,
}

pub fn router(orch: Arc<Orchestrator>) -> Router {
    Router::new()
        .route("/api/runs", get(runs))
        .route("/api/runs/{run}", get(manifest))
        .route("/api/runs/{run}/plan", get(plan))
        .route("/api/runs/{run}/book", get(book))
        .route("/api/runs/{run}/pages/{page}/image", get(page_image))
        .route("/api/runs/{run}/artifacts/{id}", get(artifact))
        .route("/api/runs/{run}/artifacts/{id}/failure", get(failure))
        .route("/api/runs/{run}/artifacts/{id}/override", post(override_artifact))
        .route("/api/runs/{run}/audio/{file}", get(audio))
        .route("/api/runs/{run}/rerun", post(rerun))
        .with_state(AppState { orch })
}

/// Serve until the process is stopped.
pub async fn serve(orch: Arc<Orchestrator>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", orch.run_root().display(), listener.local_addr()?);
    axum::serve(listener, router(orch)).await
}

/// Run ids become directory names; refuse anything that could leave the run root.
fn checked_run(state: &AppState, run: &str) -> ApiResult<RunStore> {
    let ok = !run.is_empty()
        && !run.starts_with('.')
        && run.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !ok {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", format!("invalid run id {run:?}")));
    }
    let store = state.orch.store(run);
    if !store.exists() {
        return Err(OrchestratorError::UnknownRun(run.to_string()).into());
    }
    Ok(store)
}

/// Filesystem and lock work happens off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn bytes_response(content_type: &'static str, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], Body::from(bytes)).into_response()
}

async fn runs(State(state): State<AppState>) -> ApiResult<Json<Vec<RunSummary>>> {
    blocking(move || {
        let mut out = Vec::new();
        for run_id in list_runs(state.orch.run_root())? {
            let store = state.orch.store(&run_id);
            let Ok(m) = store.read_manifest() else { continue };
            out.push(RunSummary {
                complete: m.is_complete(),
                locked: store.is_locked(),
                pending: m.ids_with_status(StageStatus::Pending).len(),
                stale: m.ids_with_status(StageStatus::Stale).len(),
                failed: m.ids_with_status(StageStatus::Failed).len(),
                condition: m.condition.to_string(),
                book_id: m.book_id,
                run_id,
            });
        }
        Ok(Json(out))
    })
    .await
}

async fn manifest(State(state): State<AppState>, UrlPath(run): UrlPath<String>) -> ApiResult<Response> {
    blocking(move || {
        let store = checked_run(&state, &run)?;
        Ok(Json(store.read_manifest()?).into_response())
    })
    .await
}

async fn plan(State(state): State<AppState>, UrlPath(run): UrlPath<String>) -> ApiResult<Json<Vec<PlanNode>>> {
    blocking(move || {
        let store = checked_run(&state, &run)?;
        let manifest = store.read_manifest()?;
        let nodes = state.orch.plan(&run)?;
        Ok(Json(
            nodes
                .into_iter()
                .map(|n| {
                    let record = manifest.stages.iter().find(|r| r.artifact_id == n.artifact_id);
                    PlanNode {
                        status: record.map(|r| r.status),
                        overridden: record.is_some_and(|r| r.overridden),
                        artifact_id: n.artifact_id,
                        stage: n.stage,
                        scene_id: n.scene_id,
                        page_index: n.page_index,
                        inputs: n.inputs,
                    }
                })
                .collect(),
        ))
    })
    .await
}

async fn book(State(state): State<AppState>, UrlPath(run): UrlPath<String>) -> ApiResult<Response> {
    blocking(move || {
        let store = checked_run(&state, &run)?;
        Ok(Json(store.read_book()?).into_response())
    })
    .await
}

fn image_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn page_image(State(state): State<AppState>, UrlPath((run, page)): UrlPath<(String, usize)>) -> ApiResult<Response> {
    blocking(move || {
        let store = checked_run(&state, &run)?;
        let manifest = store.read_manifest()?;
        let book = store.read_book()?;
        let page = book
            .pages
            .get(page)
            .ok_or_else(|| ApiError::not_found(format!("book has no page {page}")))?;
        let path: PathBuf = Path::new(&manifest.library).join(&manifest.book_id).join(&page.image_ref);
        let bytes = std::fs::read(&path).map_err(|e| ApiError::not_found(format!("{}: {e}", path.display())))?;
        Ok(bytes_response(image_type(&path), bytes))
    })
    .await
}

async fn artifact(State(state): State<AppState>, UrlPath((run, id)): UrlPath<(String, String)>) -> ApiResult<Response> {
    blocking(move || {
        let store = checked_run(&state, &run)?;
        let bytes = store
            .read_artifact_bytes(&id)?
            .ok_or(OrchestratorError::UnknownArtifact(id))?;
        Ok(bytes_response("application/json", bytes))
    })
    .await
}

async fn failure(State(state): State<AppState>, UrlPath((run, id)): UrlPath<(String, String)>) -> ApiResult<Response> {
    blocking(move || {
        let store = checked_run(&state, &run)?;
        let record = store
            .read_failure(&id)?
            .ok_or_else(|| ApiError::not_found(format!("{id} has no recorded failure")))?;
        Ok(Json(record).into_response())
    })
    .await
}

async fn audio(State(state): State<AppState>, UrlPath((run, file)): UrlPath<(String, String)>) -> ApiResult<Response> {
    blocking(move || {
        let store = checked_run(&state, &run)?;
        if store.audio_path(&file).is_none_or(|p| !p.is_file()) {
            return Err(ApiError::not_found(format!("no audio file {file:?}")));
        }
        Ok(bytes_response("audio/wav", store.read_audio(&file)?))
    })
    .await
}

async fn override_artifact(
    State(state): State<AppState>,
    UrlPath((run, id)): UrlPath<(String, String)>,
    body: Result<Json<Value>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(payload) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()))?;
    blocking(move || {
        checked_run(&state, &run)?;
        let manifest = state.orch.override_artifact(&run, &id, payload)?;
        Ok(Json(manifest).into_response())
    })
    .await
}

async fn rerun(State(state): State<AppState>, UrlPath(run): UrlPath<String>) -> ApiResult<Response> {
    blocking(move || {
        checked_run(&state, &run)?;
        Ok(Json(state.orch.rerun(&run)?).into_response())
    })
    .await
}
