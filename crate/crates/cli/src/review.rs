//! Localhost HTTP+JSON surface over the queue files. The UI reads queues and
//! posts resolutions here and never touches engine files itself.

use std::path::PathBuf;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use cornercase_core::model::SampleId;
use cornercase_core::pipeline::{pending_escalations, pending_relabel, pending_triage, round_states, submit, Submission};
use cornercase_core::project::Project;
use cornercase_core::Error;

#[derive(Debug, Clone)]
struct Ctx {
    root: PathBuf,
}

/// Routes: `GET /queue/{triage|escalations|relabel}`, `POST /resolutions`,
/// `GET /sample/{id}/image`, `GET /rounds/state`.
pub fn router(project_root: PathBuf) -> Router {
    Router::new()
        .route("/queue/{kind}", get(queue))
        .route("/resolutions", post(resolutions))
        .route("/sample/{id}/image", get(image))
        .route("/rounds/state", get(rounds))
        .with_state(Ctx { root: project_root })
}

/// Error body shared with the CLI's `--json` output.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError { status, kind: kind.into(), message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Refused(_) => StatusCode::CONFLICT,
            Error::Json { .. } | Error::Parse(_) | Error::Data(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": { "kind": self.kind, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Run blocking project IO off the async workers.
async fn blocking<T, F>(ctx: Ctx, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Project) -> Result<T, Error> + Send + 'static,
{
    tokio::task::spawn_blocking(move || {
        let project = Project::open(&ctx.root)?;
        f(&project)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
    .map_err(ApiError::from)
}

fn json<T: Serialize>(value: T) -> Response {
    Json(value).into_response()
}

async fn queue(State(ctx): State<Ctx>, Path(kind): Path<String>) -> ApiResult<Response> {
    match kind.as_str() {
        "triage" => blocking(ctx, pending_triage).await.map(json),
        "escalations" => blocking(ctx, pending_escalations).await.map(json),
        "relabel" => blocking(ctx, pending_relabel).await.map(json),
        other => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no queue named {other:?}"))),
    }
}

async fn resolutions(State(ctx): State<Ctx>, body: axum::body::Bytes) -> ApiResult<Response> {
    let submission: Submission =
        serde_json::from_slice(&body).map_err(|e| ApiError::from(Error::json("resolution body", e)))?;
    blocking(ctx, move |p| submit(p, &submission)).await.map(json)
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next().map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(State(ctx): State<Ctx>, Path(id): Path<String>) -> ApiResult<Response> {
    let id: SampleId =
        id.parse().map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "parse", format!("bad sample id {id:?}")))?;
    let found = blocking(ctx, move |p| {
        let Some(sample) = p.load_manifest()?.into_iter().find(|s| s.id == id) else {
            return Ok(None);
        };
        let bytes = p.read_image(&sample)?;
        Ok(Some((content_type(&sample.image_path), bytes)))
    })
    .await?;
    match found {
        Some((ct, bytes)) => Ok(([(header::CONTENT_TYPE, ct)], bytes).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no sample {id}"))),
    }
}

async fn rounds(State(ctx): State<Ctx>) -> ApiResult<Response> {
    blocking(ctx, round_states).await.map(json)
}
