//! Typed async client for the proseco HTTP service.

use std::time::Duration;

use proseco_api as api;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {msg}")]
    Transport { url: String, msg: String },

    /// The service answered with its `{kind, message}` error body.
    #[error("{}", .body.message)]
    Api { status: u16, body: api::ErrorBody },

    #[error("unexpected response from {url}: {msg}")]
    Decode { url: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Client { http: reqwest::Client::new(), base: base.into().trim_end_matches('/').to_string() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder, url: &str) -> Result<T> {
        let resp = req.send().await.map_err(|e| ClientError::Transport { url: url.into(), msg: e.to_string() })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| ClientError::Transport { url: url.into(), msg: e.to_string() })?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode { url: url.into(), msg: e.to_string() });
        }
        match serde_json::from_slice::<api::ErrorBody>(&bytes) {
            Ok(body) => Err(ClientError::Api { status: status.as_u16(), body }),
            Err(_) => Err(ClientError::Decode {
                url: url.into(),
                msg: format!("status {status}: {}", String::from_utf8_lossy(&bytes)),
            }),
        }
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.get(&url), &url).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.post(&url).json(body), &url).await
    }

    pub async fn health(&self) -> Result<api::Health> {
        self.get(api::HEALTH).await
    }

    pub async fn verify(&self, suite: &str, seed: u64) -> Result<api::VerifyResponse> {
        self.post(api::VERIFY, &api::VerifyRequest { suite: suite.into(), seed }).await
    }

    pub async fn ss_precompute(&self, images: &str, out: &str) -> Result<api::PrecomputeResponse> {
        self.post(api::SS_PRECOMPUTE, &api::PrecomputeRequest { images: images.into(), out: out.into() }).await
    }

    pub async fn inspect_cache(&self, cache: &str, image_id: &str) -> Result<api::InspectResponse> {
        self.post(api::CACHE_INSPECT, &api::InspectRequest { cache: cache.into(), image_id: image_id.into() }).await
    }

    pub async fn start_pretrain(&self, config: serde_json::Value) -> Result<api::JobAccepted> {
        self.post(api::PRETRAIN, &api::PretrainRequest { config }).await
    }

    pub async fn job(&self, job_id: u64, since: usize) -> Result<api::JobStatus> {
        self.get(&format!("{}/{job_id}?since={since}", api::JOBS)).await
    }

    /// Polls a job until it leaves the running state, handing every new
    /// metrics row to `on_row` in order.
    pub async fn wait_job(
        &self,
        job_id: u64,
        poll: Duration,
        mut on_row: impl FnMut(&api::MetricsRow),
    ) -> Result<api::JobStatus> {
        let mut seen = 0;
        loop {
            let status = self.job(job_id, seen).await?;
            status.rows.iter().for_each(&mut on_row);
            seen += status.rows.len();
            if status.state != api::JobState::Running {
                return Ok(status);
            }
            tokio::time::sleep(poll).await;
        }
    }

    pub async fn export_plots(&self, metrics: &str, out: &str) -> Result<api::PlotsResponse> {
        self.post(api::PLOTS_EXPORT, &api::PlotsRequest { metrics: metrics.into(), out: out.into() }).await
    }

    pub async fn hungarian(&self, costs: Vec<Vec<f64>>) -> Result<api::HungarianResponse> {
        self.post(api::HUNGARIAN, &api::HungarianRequest { costs }).await
    }

    pub async fn box_metrics(&self, a: [f32; 4], b: [f32; 4]) -> Result<api::BoxMetricsResponse> {
        self.post(api::BOX_METRICS, &api::BoxMetricsRequest { a, b }).await
    }
}
