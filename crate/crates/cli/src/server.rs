//! HTTP front end over a [`SnapshotStore`].

use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use iospe::corpus::ProductRecord;
use iospe::pipeline::{extract_selling_points, serve_assign, AssignRequest, Models, PipelineConfig, SnapshotStore};
use iospe::supervision::{aggregate, EventRecord, TimeWindow};

pub struct AppState {
    pub store: SnapshotStore,
    pub models: Option<Models>,
    pub config: PipelineConfig,
    pub logs: Mutex<Vec<EventRecord>>,
}

impl AppState {
    pub fn new(store: SnapshotStore, models: Option<Models>, config: PipelineConfig) -> Arc<Self> {
        Arc::new(AppState {
            store,
            models,
            config,
            logs: Mutex::new(Vec::new()),
        })
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Unprocessable(String),
    Unavailable(String),
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match &self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(ErrorBody { error: msg })).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::Unprocessable(r.body_text())
    }
}

impl From<iospe::Error> for ApiError {
    fn from(e: iospe::Error) -> Self {
        match e {
            iospe::Error::NotFound(m) => ApiError::NotFound(m),
            iospe::Error::InvalidArgument(m) => ApiError::Unprocessable(m),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn require(field: &str, value: &str) -> Result<(), ApiError> {
    if value.trim().is_empty() {
        return Err(ApiError::Unprocessable(format!("{field} must be non-empty")));
    }
    Ok(())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/extract", post(extract))
        .route("/v1/assign", post(assign))
        .route("/v1/pool/{sku_id}", get(pool))
        .route("/v1/logs", post(logs))
        .route("/v1/metrics", get(metrics))
        .with_state(state)
}

async fn extract(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ProductRecord>, JsonRejection>,
) -> ApiResult<Vec<iospe::pipeline::SellingPoint>> {
    let Json(product) = body?;
    require("sku_id", &product.sku_id)?;
    let models = state
        .models
        .as_ref()
        .ok_or_else(|| ApiError::Unavailable("service started without models".into()))?;
    Ok(Json(extract_selling_points(&product, models, &state.config)?))
}

async fn assign(
    State(state): State<Arc<AppState>>,
    body: Result<Json<AssignRequest>, JsonRejection>,
) -> ApiResult<iospe::pipeline::AssignResponse> {
    let Json(req) = body?;
    require("customer_id", &req.customer_id)?;
    require("sku_id", &req.sku_id)?;
    let snapshot = state.store.load();
    Ok(Json(serve_assign(&snapshot, &req)?))
}

async fn pool(State(state): State<Arc<AppState>>, Path(sku_id): Path<String>) -> ApiResult<Vec<iospe::pipeline::SellingPoint>> {
    let snapshot = state.store.load();
    let entries = snapshot
        .entries(&sku_id)
        .ok_or_else(|| ApiError::NotFound(format!("sku {sku_id}")))?;
    Ok(Json(entries.to_vec()))
}

#[derive(Serialize)]
struct Accepted {
    accepted: usize,
}

async fn logs(State(state): State<Arc<AppState>>, body: Result<Json<Vec<EventRecord>>, JsonRejection>) -> ApiResult<Accepted> {
    let Json(batch) = body?;
    for (i, r) in batch.iter().enumerate() {
        if r.sku_id.trim().is_empty() || r.selling_point_id.trim().is_empty() {
            return Err(ApiError::Unprocessable(format!("record {i}: sku_id and selling_point_id must be non-empty")));
        }
    }
    let n = batch.len();
    state.logs.lock().unwrap_or_else(|p| p.into_inner()).extend(batch);
    Ok(Json(Accepted { accepted: n }))
}

async fn metrics(State(state): State<Arc<AppState>>) -> ApiResult<Vec<iospe::supervision::SupervisionAggregate>> {
    let logs = state.logs.lock().unwrap_or_else(|p| p.into_inner());
    Ok(Json(aggregate(&logs, &TimeWindow::all()).aggregates))
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
