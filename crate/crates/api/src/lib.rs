//! Request and response bodies of the proseco HTTP service.
//!
//! Paths travel as strings and are read by the service process, so clients
//! should send absolute paths.

use serde::{Deserialize, Serialize};

pub const HEALTH: &str = "/health";
pub const VERIFY: &str = "/v1/verify";
pub const SS_PRECOMPUTE: &str = "/v1/ss/precompute";
pub const CACHE_INSPECT: &str = "/v1/cache/inspect";
pub const PRETRAIN: &str = "/v1/pretrain";
pub const JOBS: &str = "/v1/jobs";
pub const PLOTS_EXPORT: &str = "/v1/plots/export";
pub const HUNGARIAN: &str = "/v1/ops/hungarian";
pub const BOX_METRICS: &str = "/v1/ops/box-metrics";

/// Failure class; decides HTTP status on the server and exit code in the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Contract,
    Config,
    Io,
    Format,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRequest {
    /// One of all, matching, objectives, geometry, grad.
    pub suite: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub passed: usize,
    pub total: usize,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub ok: bool,
    pub checks: Vec<Check>,
    /// Human-readable report, one line per check plus a total.
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecomputeRequest {
    pub images: String,
    pub out: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeResponse {
    pub cache: String,
    pub manifest: String,
    pub images: usize,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectRequest {
    pub cache: String,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectResponse {
    pub image_id: String,
    pub box_count: usize,
    /// Normalized `[cx, cy, w, h]` rows.
    pub boxes: Vec<[f32; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRequest {
    /// Run configuration in the same JSON shape as a config file.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub job_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_total: f32,
    pub loss_contrast: f32,
    pub loss_coord: f32,
    pub loss_giou: f32,
    pub matched_cosine: f64,
    pub positives_per_proposal: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainResult {
    pub final_step: u64,
    pub metrics_path: Option<String>,
    pub checkpoint_path: Option<String>,
}

/// Job snapshot. `rows` holds the rows this job produced from index `since`
/// onward; rows a resumed run kept from before the resume are only in the
/// metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: u64,
    pub state: JobState,
    pub iterations: u64,
    pub rows_total: usize,
    pub rows: Vec<MetricsRow>,
    pub result: Option<PretrainResult>,
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotsRequest {
    pub metrics: String,
    pub out: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotsResponse {
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HungarianRequest {
    /// Row-major cost matrix; rows may outnumber columns or the reverse.
    pub costs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HungarianResponse {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxMetricsRequest {
    /// Normalized `[cx, cy, w, h]`.
    pub a: [f32; 4],
    pub b: [f32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxMetricsResponse {
    pub iou: f64,
    pub giou: f64,
    pub giou_loss: f64,
    pub l1: f64,
}
