//! Thin async client for the plink operations service.
//!
//! ```no_run
//! # async fn demo() -> Result<(), plink_client::ClientError> {
//! use plink_client::Client;
//! use plink_core::api::{ConfigSpec, SimulateRequest};
//!
//! let c = Client::new("http://127.0.0.1:7800");
//! let report = c
//!     .simulate(&SimulateRequest {
//!         spec: ConfigSpec::default(),
//!         duration_s: 300.0,
//!         out_dir: None,
//!         dump_tags: false,
//!     })
//!     .await?;
//! println!("{:.1} bits/s", report.mean_final_rate);
//! # Ok(())
//! # }
//! ```

use plink_core::api::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    /// The service rejected the request or failed running it.
    #[error("{}", .0.message)]
    Api(ErrorBody),
    #[error("cannot reach service: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("unexpected reply ({status}): {body}")]
    Unexpected { status: u16, body: String },
}

impl ClientError {
    pub fn is_config(&self) -> bool {
        matches!(self, ClientError::Api(ErrorBody { kind: ErrorKind::Config, .. }))
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` like `http://127.0.0.1:7800`; a bare `host:port` gets `http://`.
    pub fn new(base: &str) -> Self {
        let base = base.trim_end_matches('/');
        let base = if base.contains("://") {
            base.to_string()
        } else {
            format!("http://{base}")
        };
        Self {
            base,
            http: reqwest::Client::new(),
        }
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        let body = resp.bytes().await?;
        if status.is_success() {
            return serde_json::from_slice(&body).map_err(|e| ClientError::Unexpected {
                status: status.as_u16(),
                body: format!("{e}: {}", String::from_utf8_lossy(&body)),
            });
        }
        match serde_json::from_slice::<ErrorBody>(&body) {
            Ok(e) => Err(ClientError::Api(e)),
            Err(_) => Err(ClientError::Unexpected {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&body).into_owned(),
            }),
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Self::decode(resp).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::decode(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    pub async fn health(&self) -> Result<(), ClientError> {
        self.get::<serde_json::Value>("/health").await.map(|_| ())
    }

    pub async fn simulate(&self, req: &SimulateRequest) -> Result<SimulateReport, ClientError> {
        self.post("/v1/simulate", req).await
    }

    pub async fn compensate(&self, req: &CompensateRequest) -> Result<CompensateReport, ClientError> {
        self.post("/v1/compensate", req).await
    }

    pub async fn histogram(&self, req: &HistogramRequest) -> Result<HistogramReport, ClientError> {
        self.post("/v1/histogram", req).await
    }

    pub async fn node_status(&self) -> Result<NodeStatus, ClientError> {
        self.get("/v1/node/status").await
    }

    /// Metrics CSV of the node running in the service.
    pub async fn node_metrics(&self) -> Result<String, ClientError> {
        let resp = self.http.get(format!("{}/v1/node/metrics", self.base)).send().await?;
        if resp.status().is_success() {
            return Ok(resp.text().await?);
        }
        Self::decode::<serde_json::Value>(resp).await.map(|_| String::new())
    }
}
