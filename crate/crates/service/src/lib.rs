//! HTTP/JSON front end over `proseco-core`.
//!
//! Every compute-heavy request runs on the blocking pool. Pretraining runs
//! as a background job that clients poll at `/v1/jobs/{id}`.

mod error;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::QueryRejection;
use axum::extract::{FromRequest, Path as UrlPath, Query, Request, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use proseco_api as api;
use proseco_core::geometry::{giou, giou_loss, iou, l1_coord_loss, BoxN};
use proseco_core::matching::{hungarian, CostMatrix};
use proseco_core::proposals::{manifest_path, precompute_cache, ProposalCache, SsParams};
use proseco_core::train::{data::thread_pool, export_plots, pretrain_observed, MetricsRow};
use proseco_core::verify::{self, Suite};
use proseco_core::RunConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;

pub use error::{error_body, ApiError};

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone, Default)]
pub struct AppState {
    jobs: Arc<Mutex<Jobs>>,
}

#[derive(Default)]
struct Jobs {
    next: u64,
    map: HashMap<u64, Arc<Mutex<Job>>>,
}

struct Job {
    state: api::JobState,
    iterations: u64,
    rows: Vec<api::MetricsRow>,
    result: Option<api::PretrainResult>,
    error: Option<api::ErrorBody>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route(api::HEALTH, get(health))
        .route(api::VERIFY, post(run_verify))
        .route(api::SS_PRECOMPUTE, post(ss_precompute))
        .route(api::CACHE_INSPECT, post(inspect_cache))
        .route(api::PRETRAIN, post(start_pretrain))
        .route(&format!("{}/{{id}}", api::JOBS), get(job_status))
        .route(api::PLOTS_EXPORT, post(plots))
        .route(api::HUNGARIAN, post(solve_assignment))
        .route(api::BOX_METRICS, post(box_metrics))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::default())).await
}

/// JSON body whose rejections use the service error shape.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(r) => Err(ApiError::new(StatusCode::BAD_REQUEST, api::ErrorKind::Contract, r.body_text())),
        }
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> proseco_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            api::ErrorKind::Contract,
            format!("worker failed: {e}"),
        )),
    }
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn wire_row(r: &MetricsRow) -> api::MetricsRow {
    api::MetricsRow {
        step: r.step,
        loss_total: r.loss_total,
        loss_contrast: r.loss_contrast,
        loss_coord: r.loss_coord,
        loss_giou: r.loss_giou,
        matched_cosine: r.matched_cosine,
        positives_per_proposal: r.positives_per_proposal,
        wall_ms: r.wall_ms,
    }
}

async fn health() -> Json<api::Health> {
    Json(api::Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into() })
}

async fn run_verify(Body(req): Body<api::VerifyRequest>) -> ApiResult<api::VerifyResponse> {
    let suite = Suite::from_str(&req.suite)?;
    let report = blocking(move || verify::run(suite, req.seed)).await?;
    let checks = report
        .checks
        .iter()
        .map(|c| api::Check {
            suite: c.suite.clone(),
            name: c.name.clone(),
            passed: c.passed,
            total: c.total,
            detail: c.detail.clone(),
        })
        .collect();
    Ok(Json(api::VerifyResponse { ok: report.ok(), checks, report: report.render() }))
}

async fn ss_precompute(Body(req): Body<api::PrecomputeRequest>) -> ApiResult<api::PrecomputeResponse> {
    let (images, out) = (PathBuf::from(req.images), PathBuf::from(req.out));
    let manifest = {
        let out = out.clone();
        blocking(move || thread_pool()?.install(|| precompute_cache(&images, &SsParams::default(), &out))).await?
    };
    Ok(Json(api::PrecomputeResponse {
        cache: path_string(&out),
        manifest: path_string(&manifest_path(&out)),
        images: manifest.lines.len(),
        skipped: manifest.skipped().map(String::from).collect(),
    }))
}

async fn inspect_cache(Body(req): Body<api::InspectRequest>) -> ApiResult<api::InspectResponse> {
    let path = PathBuf::from(&req.cache);
    let cache = blocking(move || ProposalCache::load(&path)).await?;
    let entry = cache
        .get(&req.image_id)
        .ok_or_else(|| ApiError::not_found(format!("image {:?} is not in cache {}", req.image_id, req.cache)))?;
    Ok(Json(api::InspectResponse {
        image_id: req.image_id.clone(),
        box_count: entry.len(),
        boxes: entry.boxes.iter().map(BoxN::to_array).collect(),
    }))
}

async fn start_pretrain(
    State(state): State<AppState>,
    Body(req): Body<api::PretrainRequest>,
) -> Result<(StatusCode, Json<api::JobAccepted>), ApiError> {
    let cfg = RunConfig::from_json(&req.config.to_string())?;
    let job = Arc::new(Mutex::new(Job {
        state: api::JobState::Running,
        iterations: cfg.iterations,
        rows: Vec::new(),
        result: None,
        error: None,
    }));
    let job_id = {
        let mut jobs = state.jobs.lock().expect("job table poisoned");
        jobs.next += 1;
        let id = jobs.next;
        jobs.map.insert(id, job.clone());
        id
    };
    tracing::info!("job {job_id}: pretraining for {} iterations", cfg.iterations);
    tokio::task::spawn_blocking(move || {
        let outcome = pretrain_observed(&cfg, &mut |row| {
            job.lock().expect("job poisoned").rows.push(wire_row(row));
        });
        let mut j = job.lock().expect("job poisoned");
        match outcome {
            Ok(report) => {
                j.state = api::JobState::Succeeded;
                j.result = Some(api::PretrainResult {
                    final_step: report.final_step,
                    metrics_path: report.metrics_path.as_deref().map(path_string),
                    checkpoint_path: report.checkpoint_path.as_deref().map(path_string),
                });
            }
            Err(e) => {
                tracing::warn!("job {job_id} failed: {e}");
                j.state = api::JobState::Failed;
                j.error = Some(error_body(&e));
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(api::JobAccepted { job_id })))
}

#[derive(Deserialize)]
struct Since {
    #[serde(default)]
    since: usize,
}

async fn job_status(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    since: Result<Query<Since>, QueryRejection>,
) -> ApiResult<api::JobStatus> {
    let since = since.map_err(|r| ApiError::contract(r.body_text()))?.since;
    let job_id: u64 = id.parse().map_err(|_| ApiError::not_found(format!("no job {id:?}")))?;
    let job = state.jobs.lock().expect("job table poisoned").map.get(&job_id).cloned();
    let job = job.ok_or_else(|| ApiError::not_found(format!("no job {job_id}")))?;
    let j = job.lock().expect("job poisoned");
    Ok(Json(api::JobStatus {
        job_id,
        state: j.state,
        iterations: j.iterations,
        rows_total: j.rows.len(),
        rows: j.rows.get(since..).unwrap_or_default().to_vec(),
        result: j.result.clone(),
        error: j.error.clone(),
    }))
}

async fn plots(Body(req): Body<api::PlotsRequest>) -> ApiResult<api::PlotsResponse> {
    let (metrics, out) = (PathBuf::from(req.metrics), PathBuf::from(req.out));
    let files = blocking(move || export_plots(&metrics, &out)).await?;
    Ok(Json(api::PlotsResponse { files: files.iter().map(|p| path_string(p)).collect() }))
}

async fn solve_assignment(Body(req): Body<api::HungarianRequest>) -> ApiResult<api::HungarianResponse> {
    let costs = CostMatrix::from_rows(&req.costs)?;
    let m = blocking(move || Ok(hungarian(&costs))).await?;
    Ok(Json(api::HungarianResponse { pairs: m.pairs, total_cost: m.total_cost }))
}

async fn box_metrics(Body(req): Body<api::BoxMetricsRequest>) -> ApiResult<api::BoxMetricsResponse> {
    let parse = |b: [f32; 4]| BoxN::new(b[0], b[1], b[2], b[3]);
    let (a, b) = (parse(req.a)?, parse(req.b)?);
    Ok(Json(api::BoxMetricsResponse {
        iou: iou(&a, &b),
        giou: giou(&a, &b),
        giou_loss: giou_loss(&a, &b),
        l1: l1_coord_loss(&a, &b),
    }))
}
