//! HTTP/JSON routes over [`AnnotationService`].
//!
//! | method | path                          | body                | response            |
//! |--------|-------------------------------|---------------------|---------------------|
//! | GET    | `/api/health`                 |                     | `{"status":"ok"}`   |
//! | POST   | `/api/sessions`               |                     | `CreatedSession`    |
//! | GET    | `/api/sessions/{id}`          |                     | `SessionView`       |
//! | POST   | `/api/sessions/{id}/messages` | `{"text"}`          | `ChatReply`         |
//! | POST   | `/api/sessions/{id}/ratings`  | `RatingRequest`     | `PublicRecord`      |
//! | GET    | `/api/sessions/{id}/record`   |                     | `PublicRecord`      |
//! | GET    | `/api/aggregate`              |                     | blinded or admin    |
//!
//! `/api/aggregate` is unblinded only with an `x-admin-token` header equal
//! to the token the server was started with. Errors are `{"error": msg}`
//! with a 4xx status for client mistakes.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use metasim::service::{AnnotationService, Ratings, ServiceError};
use serde::Deserialize;
use serde_json::json;

pub const ADMIN_HEADER: &str = "x-admin-token";

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<AnnotationService>,
    pub admin_token: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Debug, Deserialize)]
pub struct RatingRequest {
    pub annotator_id: String,
    pub success: u8,
    pub efficiency: u8,
    pub naturalness: u8,
    pub satisfaction: u8,
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Closed(_) | ServiceError::AlreadyRated(_) => StatusCode::CONFLICT,
            ServiceError::InvalidRating(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Core(metasim::Error::Terminated) => StatusCode::CONFLICT,
            ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Service calls hold std mutexes and may run the reference system, so
/// they go to the blocking pool.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AnnotationService) -> Result<T, ServiceError> + Send + 'static,
{
    let svc = state.service.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(ServiceError::BadRequest(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(
    State(st): State<AppState>,
) -> Result<(StatusCode, Json<metasim::service::CreatedSession>), ApiError> {
    let created = blocking(&st, |s| s.create_session()).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn view_session(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<metasim::service::SessionView> {
    blocking(&st, move |s| s.view(&id)).await.map(Json)
}

async fn post_message(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<MessageRequest>,
) -> ApiResult<metasim::service::ChatReply> {
    blocking(&st, move |s| s.message(&id, &req.text))
        .await
        .map(Json)
}

async fn post_rating(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<RatingRequest>,
) -> Result<(StatusCode, Json<metasim::service::PublicRecord>), ApiError> {
    let ratings = Ratings {
        success: req.success,
        efficiency: req.efficiency,
        naturalness: req.naturalness,
        satisfaction: req.satisfaction,
    };
    let record = blocking(&st, move |s| s.rate(&id, &req.annotator_id, ratings)).await?;
    Ok((StatusCode::CREATED, Json(record.public())))
}

async fn get_record(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<metasim::service::PublicRecord> {
    blocking(&st, move |s| s.record(&id))
        .await
        .map(|r| Json(r.public()))
}

async fn aggregate(State(st): State<AppState>, headers: HeaderMap) -> Response {
    let Some(given) = headers.get(ADMIN_HEADER) else {
        return Json(st.service.blinded_aggregate()).into_response();
    };
    match &st.admin_token {
        Some(token) if given.as_bytes() == token.as_bytes() => {
            Json(st.service.admin_aggregate()).into_response()
        }
        _ => (
            StatusCode::FORBIDDEN,
            Json(json!({ "error": "invalid admin token" })),
        )
            .into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(view_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .route("/api/sessions/{id}/ratings", post(post_rating))
        .route("/api/sessions/{id}/record", get(get_record))
        .route("/api/aggregate", get(aggregate))
        .with_state(state)
}
