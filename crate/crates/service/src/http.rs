//! JSON-over-HTTP interface.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/documents` | ingest proposals or a synthetic page |
//! | GET | `/documents/:id` | full record |
//! | GET | `/documents/:id/layout` | layout JSON |
//! | POST | `/documents/:id/corrections` | submit an edit batch |
//! | GET | `/train/staged` | corrections waiting for training |
//! | POST | `/train/incremental` | start a training job |
//! | GET | `/train/jobs/:id` | job status |
//! | GET | `/models/current` | current model |
//! | GET | `/models/:version` | any published model |
//!
//! Errors are `{"error": kind, "message": text, "fields": [{field, message}]}`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use docstruct_core::incremental::TrainConfig;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::service::{Service, ServiceError, TriggerOutcome};
use crate::validate::{correction_request, ingest_request, FieldError};

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>, fields: Vec<FieldError>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "invalid_request",
            message: message.into(),
            fields,
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Validation(fields) => Self::bad_request("validation failed", fields),
            ServiceError::NotFound { .. } => Self {
                status: StatusCode::NOT_FOUND,
                kind: "not_found",
                message: e.to_string(),
                fields: Vec::new(),
            },
            other => {
                log::error!("request failed: {other}");
                Self {
                    status: StatusCode::INTERNAL_SERVER_ERROR,
                    kind: "internal",
                    message: other.to_string(),
                    fields: Vec::new(),
                }
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": self.kind,
            "message": self.message,
            "fields": self.fields.iter().map(|f| json!({"field": f.field, "message": f.message})).collect::<Vec<_>>(),
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a request body as JSON, mapping syntax errors to a 400.
fn parse_body(body: &Bytes, allow_empty: bool) -> ApiResult<Value> {
    if allow_empty && body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Value::Object(Default::default()));
    }
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("body is not valid JSON: {e}"), Vec::new()))
}

/// Runs blocking service work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            message: e.to_string(),
            fields: Vec::new(),
        })?
        .map_err(ApiError::from)
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/documents", post(ingest))
        .route("/documents/:id", get(document))
        .route("/documents/:id/layout", get(layout))
        .route("/documents/:id/corrections", post(correct))
        .route("/train/staged", get(staged))
        .route("/train/incremental", post(train))
        .route("/train/jobs/:id", get(job))
        .route("/models/current", get(current_model))
        .route("/models/:version", get(model))
        .with_state(service)
}

async fn ingest(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<Response> {
    let req = ingest_request(&parse_body(&body, false)?)
        .map_err(|f| ApiError::bad_request("validation failed", f))?;
    let ack = blocking(move || svc.ingest(req)).await?;
    Ok((StatusCode::CREATED, Json(ack)).into_response())
}

async fn document(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(svc.document(&id)?).into_response())
}

async fn layout(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    let body = svc.layout_json(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn correct(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let value = parse_body(&body, false)?;
    let req =
        correction_request(&value).map_err(|f| ApiError::bad_request("validation failed", f))?;
    if let Some(p) = value.get("page_id").and_then(Value::as_str) {
        if p != id {
            return Err(ApiError::bad_request(
                "validation failed",
                vec![FieldError::new(
                    "page_id",
                    format!("does not match the path ({id})"),
                )],
            ));
        }
    }
    let ack = blocking(move || svc.submit_correction(&id, req)).await?;
    Ok((StatusCode::ACCEPTED, Json(ack)).into_response())
}

async fn staged(State(svc): State<Arc<Service>>) -> ApiResult<Response> {
    let staged = svc.staged();
    Ok(Json(json!({"count": staged.len(), "corrections": staged})).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    /// Wait for the job to finish before responding.
    #[serde(default)]
    wait: bool,
    #[serde(default)]
    config: Option<TrainConfig>,
}

async fn train(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<Response> {
    let value = parse_body(&body, true)?;
    let req: TrainRequest = serde_json::from_value(value).map_err(|e| {
        ApiError::bad_request(
            "validation failed",
            vec![FieldError::new("body", e.to_string())],
        )
    })?;
    if let Some(cfg) = &req.config {
        cfg.validate().map_err(|e| {
            ApiError::bad_request(
                "validation failed",
                vec![FieldError::new("config", e.to_string())],
            )
        })?;
    }
    let starter = svc.clone();
    let outcome = blocking(move || starter.start_training()).await?;
    let job = match outcome {
        TriggerOutcome::Noop { .. } => return Ok((StatusCode::OK, Json(outcome)).into_response()),
        TriggerOutcome::Started { job } => job,
    };
    let id = job.id;
    let config = req.config;
    let handle = tokio::task::spawn_blocking(move || {
        if let Err(e) = svc.run_job(id, config.as_ref()) {
            log::error!("training job {id}: {e}");
        }
        svc.job(id)
    });
    if req.wait {
        let job = handle
            .await
            .map_err(|e| ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                kind: "internal",
                message: e.to_string(),
                fields: Vec::new(),
            })?
            .map_err(ApiError::from)?;
        return Ok((StatusCode::OK, Json(TriggerOutcome::Started { job })).into_response());
    }
    Ok((StatusCode::ACCEPTED, Json(TriggerOutcome::Started { job })).into_response())
}

async fn job(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    let id: u64 = id.parse().map_err(|_| {
        ApiError::bad_request(
            "validation failed",
            vec![FieldError::new("id", "must be a job number")],
        )
    })?;
    Ok(Json(svc.job(id)?).into_response())
}

async fn current_model(State(svc): State<Arc<Service>>) -> ApiResult<Response> {
    Ok(Json(svc.current_model()?).into_response())
}

async fn model(
    State(svc): State<Arc<Service>>,
    Path(version): Path<String>,
) -> ApiResult<Response> {
    let v: u32 = version.trim_start_matches('v').parse().map_err(|_| {
        ApiError::bad_request(
            "validation failed",
            vec![FieldError::new("version", "must be a model version")],
        )
    })?;
    Ok(Json(svc.model(v)?).into_response())
}
