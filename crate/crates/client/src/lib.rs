//! Async client for the sarad HTTP service.

use std::time::Duration;

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use sarad_core::api::*;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("service answered {status}: {message}")]
    Api { status: StatusCode, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` like `http://127.0.0.1:8717`.
    pub fn new(base: impl Into<String>) -> Self {
        Client { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn call<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ApiError>(&text).map(|e| e.error).unwrap_or(text);
        Err(ClientError::Api { status, message })
    }

    pub async fn health(&self) -> Result<Health> {
        self.call::<(), _>(Method::GET, "/health", None).await
    }

    pub async fn start_training(&self, req: &TrainRequest) -> Result<JobId> {
        self.call(Method::POST, "/runs", Some(req)).await
    }

    pub async fn runs(&self) -> Result<Vec<JobStatus>> {
        self.call::<(), _>(Method::GET, "/runs", None).await
    }

    pub async fn run_status(&self, id: u64) -> Result<JobStatus> {
        self.call::<(), _>(Method::GET, &format!("/runs/{id}"), None).await
    }

    pub async fn cancel_run(&self, id: u64) -> Result<JobStatus> {
        self.call::<(), _>(Method::DELETE, &format!("/runs/{id}"), None).await
    }

    /// Polls until the run finishes, reporting each status to `on_status`.
    pub async fn wait_for_run(&self, id: u64, poll: Duration, mut on_status: impl FnMut(&JobStatus)) -> Result<JobStatus> {
        loop {
            let status = self.run_status(id).await?;
            on_status(&status);
            if status.state.is_finished() {
                return Ok(status);
            }
            tokio::time::sleep(poll).await;
        }
    }

    pub async fn collect_risk_data(&self, req: &CollectRequest) -> Result<CollectResponse> {
        self.call(Method::POST, "/risk/collect", Some(req)).await
    }

    pub async fn train_risk_model(&self, req: &TrainRiskRequest) -> Result<TrainRiskResponse> {
        self.call(Method::POST, "/risk/train", Some(req)).await
    }

    pub async fn plot(&self, req: &PlotRequest) -> Result<PlotResponse> {
        self.call(Method::POST, "/plots", Some(req)).await
    }

    pub async fn compare(&self, req: &CompareRequest) -> Result<CompareResponse> {
        self.call(Method::POST, "/compare", Some(req)).await
    }

    pub async fn gate(&self, req: &GateRequest) -> Result<GateResponse> {
        self.call(Method::POST, "/gate", Some(req)).await
    }
}
