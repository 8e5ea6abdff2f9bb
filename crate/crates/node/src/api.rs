//! HTTP/JSON operations service.
//!
//! | method | path               | body                | reply              |
//! |--------|--------------------|---------------------|--------------------|
//! | GET    | /health            |                     | `{"status":"ok"}`  |
//! | POST   | /v1/simulate       | `SimulateRequest`   | `SimulateReport`   |
//! | POST   | /v1/compensate     | `CompensateRequest` | `CompensateReport` |
//! | POST   | /v1/histogram      | `HistogramRequest`  | `HistogramReport`  |
//! | GET    | /v1/node/status    |                     | `NodeStatus`       |
//! | GET    | /v1/node/metrics   |                     | metrics CSV        |
//!
//! Failures come back as `ErrorBody`, 400 for config errors and 500 otherwise.

use crate::error::NodeError;
use crate::ops::{self, SimulateOptions};
use crate::status::SharedStatus;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use plink_core::api::*;
use plink_core::config::ConfigError;
use plink_core::metrics::{BlockPipelineState, MetricsLog};
use serde::de::DeserializeOwned;
use std::future::Future;
use tokio::net::TcpListener;

#[derive(Clone, Default)]
pub struct AppState {
    /// Status of a node running in this process, if any.
    pub node: Option<SharedStatus>,
}

pub struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn config(message: impl Into<String>) -> Self {
        ApiError(
            StatusCode::BAD_REQUEST,
            ErrorBody {
                kind: ErrorKind::Config,
                message: message.into(),
            },
        )
    }
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        if e.is_config() {
            return ApiError::config(e.to_string());
        }
        ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            ErrorBody {
                kind: ErrorKind::Runtime,
                message: e.to_string(),
            },
        )
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        ApiError::config(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::config(format!("request body: {e}")))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, NodeError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| NodeError::Output(format!("worker task failed: {e}")))?
        .map_err(Into::into)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn simulate(body: Bytes) -> ApiResult<SimulateReport> {
    let req: SimulateRequest = parse(&body)?;
    let cfg = req.spec.resolve()?;
    let opts = SimulateOptions {
        out_dir: req.out_dir,
        dump_tags: req.dump_tags,
        ..Default::default()
    };
    let run = ops::simulate(&cfg, req.duration_s, opts).await?;
    Ok(Json(run.report))
}

async fn compensate(body: Bytes) -> ApiResult<CompensateReport> {
    let req: CompensateRequest = parse(&body)?;
    let cfg = req.spec.resolve()?;
    blocking(move || ops::compensate(&cfg, req.t_h, req.sweep)).await.map(Json)
}

async fn histogram(body: Bytes) -> ApiResult<HistogramReport> {
    let req: HistogramRequest = parse(&body)?;
    blocking(move || ops::histogram_files(&req.alice_tags, &req.bob_tags, &req.params))
        .await
        .map(Json)
}

fn node_status(st: &AppState) -> Result<NodeStatus, ApiError> {
    match &st.node {
        Some(s) => Ok(s.read().unwrap().clone()),
        None => Err(ApiError(
            StatusCode::NOT_FOUND,
            ErrorBody {
                kind: ErrorKind::Runtime,
                message: "no node runs in this service".into(),
            },
        )),
    }
}

async fn status(State(st): State<AppState>) -> ApiResult<NodeStatus> {
    node_status(&st).map(Json)
}

async fn metrics(State(st): State<AppState>) -> Result<Response, ApiError> {
    let s = node_status(&st)?;
    let mut log = MetricsLog::new(Vec::new());
    for m in s.history {
        let state = BlockPipelineState {
            block_id: m.block_id,
            duration_s: 0.0,
            metrics: m,
        };
        log.append(&state)
            .map_err(|e| ApiError::from(NodeError::Output(e.to_string())))?;
    }
    let csv = log
        .into_inner()
        .map_err(|e| ApiError::from(NodeError::Output(e.to_string())))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/simulate", post(simulate))
        .route("/v1/compensate", post(compensate))
        .route("/v1/histogram", post(histogram))
        .route("/v1/node/status", get(status))
        .route("/v1/node/metrics", get(metrics))
        .with_state(state)
}

pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
