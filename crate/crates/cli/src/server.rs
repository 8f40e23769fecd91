//! JSON-over-HTTP annotation service.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/api/images` | | image list |
//! | GET | `/api/images/{image_id}` | | base64 PNG of the image |
//! | POST | `/api/sessions` | `{image_id, category, prompt}` | session + image |
//! | GET | `/api/sessions/{id}` | | session summary |
//! | POST | `/api/sessions/{id}/clicks` | `{x, y, polarity}` | mask |
//! | POST | `/api/sessions/{id}/undo` | | mask |
//! | PUT | `/api/sessions/{id}/prompt` | prompt | mask |
//! | GET | `/api/sessions/{id}/mask` | | mask |
//! | POST | `/api/sessions/{id}/export` | | `{path}` |
//!
//! Errors reply `{"error": kind, "message": text}`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use adclick_core::clicks::Polarity;
use adclick_core::session::{ImageEntry, MaskView, PromptChoice, SessionManager, SessionSummary};
use adclick_core::Error;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::UnknownSession(_) | Error::UnknownImage(_) => StatusCode::NOT_FOUND,
        Error::SessionExported(_) => StatusCode::CONFLICT,
        Error::ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
        Error::UnknownPrompt(_)
        | Error::OutOfBounds { .. }
        | Error::ZeroClicks
        | Error::InvalidArgument(_)
        | Error::ClicksInSegMode => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.0.kind().to_string(),
            message: self.0.to_string(),
        };
        (status_for(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = Arc<SessionManager>;

/// Model calls are CPU-bound; keep them off the async workers.
async fn blocking<T, F>(mgr: Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&SessionManager) -> adclick_core::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&mgr))
        .await
        .map_err(|e| ApiError(Error::InvalidArgument(format!("worker failed: {e}"))))?
        .map(Json)
        .map_err(ApiError)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OpenRequest {
    pub image_id: String,
    pub category: String,
    pub prompt: PromptChoice,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OpenResponse {
    pub session: SessionSummary,
    /// Base64 PNG of the image at model resolution.
    pub image_png: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickRequest {
    pub x: usize,
    pub y: usize,
    pub polarity: Polarity,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImagePng {
    pub image_id: String,
    pub image_png: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportResponse {
    pub path: String,
}

async fn list_images(State(mgr): State<Shared>) -> Json<Vec<ImageEntry>> {
    Json(mgr.list_images())
}

async fn image(State(mgr): State<Shared>, Path(image_id): Path<String>) -> ApiResult<ImagePng> {
    blocking(mgr, move |m| {
        Ok(ImagePng {
            image_png: m.image_png(&image_id)?,
            image_id,
        })
    })
    .await
}

async fn open_session(State(mgr): State<Shared>, Json(req): Json<OpenRequest>) -> ApiResult<OpenResponse> {
    blocking(mgr, move |m| {
        let session = m.open_session(&req.image_id, &req.category, &req.prompt)?;
        Ok(OpenResponse {
            image_png: m.image_png(&req.image_id)?,
            session,
        })
    })
    .await
}

async fn summary(State(mgr): State<Shared>, Path(id): Path<String>) -> ApiResult<SessionSummary> {
    blocking(mgr, move |m| m.summary(&id)).await
}

async fn submit_click(
    State(mgr): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<ClickRequest>,
) -> ApiResult<MaskView> {
    blocking(mgr, move |m| m.submit_click(&id, req.x, req.y, req.polarity)).await
}

async fn undo_click(State(mgr): State<Shared>, Path(id): Path<String>) -> ApiResult<MaskView> {
    blocking(mgr, move |m| m.undo_click(&id)).await
}

async fn set_prompt(
    State(mgr): State<Shared>,
    Path(id): Path<String>,
    Json(prompt): Json<PromptChoice>,
) -> ApiResult<MaskView> {
    blocking(mgr, move |m| m.set_prompt(&id, &prompt)).await
}

async fn get_mask(State(mgr): State<Shared>, Path(id): Path<String>) -> ApiResult<MaskView> {
    blocking(mgr, move |m| m.get_mask(&id)).await
}

async fn export(State(mgr): State<Shared>, Path(id): Path<String>) -> ApiResult<ExportResponse> {
    blocking(mgr, move |m| {
        Ok(ExportResponse {
            path: m.export(&id)?.display().to_string(),
        })
    })
    .await
}

pub fn router(mgr: Shared) -> Router {
    Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/*image_id", get(image))
        .route("/api/sessions", post(open_session))
        .route("/api/sessions/:id", get(summary))
        .route("/api/sessions/:id/clicks", post(submit_click))
        .route("/api/sessions/:id/undo", post(undo_click))
        .route("/api/sessions/:id/prompt", put(set_prompt))
        .route("/api/sessions/:id/mask", get(get_mask))
        .route("/api/sessions/:id/export", post(export))
        .route("/health", get(|| async { "ok" }))
        .with_state(mgr)
}

/// Serves until the process is stopped, evicting idle sessions once a minute.
pub async fn serve(mgr: Shared, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let evictor = mgr.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = evictor.evict_idle(Instant::now());
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(mgr)).await
}
