//! HTTP/JSON service over the training harness. Blocking work runs on the
//! tokio blocking pool; training runs are asynchronous jobs polled by id.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

use sarad_core::api::*;
use sarad_core::harness::{collect_risk_dataset, compare_variants, emit_plots, run_training_with, HarnessError, Progress};
use sarad_core::safety::{train_risk_model, RiskDataset, RiskGate, RiskModel, SafetyError};
use sarad_core::sim::EgoObservation;

#[derive(Debug)]
pub struct ServiceError {
    pub status: StatusCode,
    pub message: String,
}

impl ServiceError {
    fn bad_request(message: impl Into<String>) -> Self {
        ServiceError { status: StatusCode::BAD_REQUEST, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ServiceError { status: StatusCode::NOT_FOUND, message: message.into() }
    }
}

fn io_status(e: &std::io::Error) -> StatusCode {
    if e.kind() == std::io::ErrorKind::NotFound {
        StatusCode::NOT_FOUND
    } else {
        StatusCode::INTERNAL_SERVER_ERROR
    }
}

impl From<HarnessError> for ServiceError {
    fn from(e: HarnessError) -> Self {
        let status = match &e {
            HarnessError::Config(_) | HarnessError::Sim(_) | HarnessError::EmptyEpisode | HarnessError::Csv(_) => {
                StatusCode::BAD_REQUEST
            }
            HarnessError::Io(io) => io_status(io),
            HarnessError::Cancelled(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ServiceError { status, message: e.to_string() }
    }
}

impl From<SafetyError> for ServiceError {
    fn from(e: SafetyError) -> Self {
        let status = match &e {
            SafetyError::Io(io) => io_status(io),
            _ => StatusCode::BAD_REQUEST,
        };
        ServiceError { status, message: e.to_string() }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError { status: io_status(&e), message: e.to_string() }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status, Json(ApiError { error: self.message })).into_response()
    }
}

type Reply<T> = Result<Json<T>, ServiceError>;

struct Job {
    status: JobStatus,
    cancel: Arc<AtomicBool>,
}

#[derive(Clone)]
pub struct AppState {
    root: Arc<PathBuf>,
    jobs: Arc<Mutex<BTreeMap<u64, Job>>>,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        AppState { root: Arc::new(root.into()), jobs: Arc::default(), next_id: Arc::new(AtomicU64::new(1)) }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut JobStatus)) {
        if let Some(job) = self.jobs.lock().expect("job table").get_mut(&id) {
            f(&mut job.status);
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/runs", post(start_run).get(list_runs))
        .route("/runs/{id}", get(run_status).delete(cancel_run))
        .route("/risk/collect", post(collect))
        .route("/risk/train", post(train_risk))
        .route("/plots", post(plots))
        .route("/compare", post(compare))
        .route("/gate", post(gate))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, root: impl Into<PathBuf>) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(root))).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError { status: StatusCode::INTERNAL_SERVER_ERROR, message: format!("worker failed: {e}") })?
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into() })
}

async fn start_run(
    State(state): State<AppState>,
    Json(mut req): Json<TrainRequest>,
) -> Result<(StatusCode, Json<JobId>), ServiceError> {
    req.config.validate()?;
    if let Some(p) = req.config.safety.model_path.as_mut() {
        *p = state.resolve(p);
    }
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let cancel = Arc::new(AtomicBool::new(false));
    let status = JobStatus { id, state: JobState::Running, progress: None, output: None, error: None };
    state.jobs.lock().expect("job table").insert(id, Job { status, cancel: cancel.clone() });
    let out_dir = state.resolve(&req.out_dir);
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut hook = |p: &Progress| {
            worker.update(id, |s| s.progress = Some(*p));
            !cancel.load(Ordering::Relaxed)
        };
        let result = run_training_with(&req.config, &out_dir, &mut hook);
        worker.update(id, |s| match result {
            Ok(out) => {
                s.state = JobState::Succeeded;
                s.output = Some(out);
            }
            Err(HarnessError::Cancelled(step)) => {
                s.state = JobState::Cancelled;
                s.error = Some(format!("cancelled at step {step}"));
            }
            Err(e) => {
                log::error!("run {id} failed: {e}");
                s.state = JobState::Failed;
                s.error = Some(e.to_string());
            }
        });
    });
    Ok((StatusCode::ACCEPTED, Json(JobId { id })))
}

async fn list_runs(State(state): State<AppState>) -> Json<Vec<JobStatus>> {
    Json(state.jobs.lock().expect("job table").values().map(|j| j.status.clone()).collect())
}

async fn run_status(State(state): State<AppState>, UrlPath(id): UrlPath<u64>) -> Reply<JobStatus> {
    let jobs = state.jobs.lock().expect("job table");
    jobs.get(&id).map(|j| Json(j.status.clone())).ok_or_else(|| ServiceError::not_found(format!("no run {id}")))
}

async fn cancel_run(State(state): State<AppState>, UrlPath(id): UrlPath<u64>) -> Reply<JobStatus> {
    let jobs = state.jobs.lock().expect("job table");
    let job = jobs.get(&id).ok_or_else(|| ServiceError::not_found(format!("no run {id}")))?;
    job.cancel.store(true, Ordering::Relaxed);
    Ok(Json(job.status.clone()))
}

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

async fn collect(State(state): State<AppState>, Json(req): Json<CollectRequest>) -> Reply<CollectResponse> {
    if req.episodes == 0 || req.per_class == 0 {
        return Err(ServiceError::bad_request("episodes and per_class must be positive"));
    }
    req.sim.validate().map_err(|e| ServiceError::bad_request(e.to_string()))?;
    let out = state.resolve(&req.out);
    blocking(move || {
        let (trajs, dataset) = collect_risk_dataset(&req.sim, req.episodes, req.per_class, req.seed)?;
        ensure_parent(&out)?;
        dataset.write_jsonl(BufWriter::new(File::create(&out)?))?;
        let (negatives, positives) = dataset.counts();
        Ok(Json(CollectResponse {
            dataset: out,
            episodes: trajs.len(),
            collision_episodes: trajs.iter().filter(|t| t.iter().any(|r| r.collided)).count(),
            negatives,
            positives,
        }))
    })
    .await
}

async fn train_risk(State(state): State<AppState>, Json(req): Json<TrainRiskRequest>) -> Reply<TrainRiskResponse> {
    let dataset_path = state.resolve(&req.dataset);
    let out = state.resolve(&req.out);
    blocking(move || {
        let dataset = RiskDataset::read_jsonl(BufReader::new(File::open(&dataset_path)?))?;
        let (model, report) = train_risk_model(&dataset, req.variant, req.seed)?;
        ensure_parent(&out)?;
        model.save(&out)?;
        Ok(Json(TrainRiskResponse { model: out, report }))
    })
    .await
}

fn gather_logs(state: &AppState, logs: &[PathBuf], dir: Option<&Path>) -> Result<Vec<PathBuf>, ServiceError> {
    let mut out: Vec<PathBuf> = logs.iter().map(|p| state.resolve(p)).collect();
    if let Some(dir) = dir {
        let mut found: Vec<PathBuf> = std::fs::read_dir(state.resolve(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        found.sort();
        out.extend(found);
    }
    if out.is_empty() {
        return Err(ServiceError::bad_request("no metrics logs given"));
    }
    Ok(out)
}

async fn plots(State(state): State<AppState>, Json(req): Json<PlotRequest>) -> Reply<PlotResponse> {
    let logs = gather_logs(&state, &req.logs, req.log_dir.as_deref())?;
    let out_dir = state.resolve(&req.out_dir);
    blocking(move || Ok(Json(PlotResponse { files: emit_plots(&logs, &out_dir, req.window.max(1))? }))).await
}

async fn compare(State(state): State<AppState>, Json(req): Json<CompareRequest>) -> Reply<CompareResponse> {
    let logs = gather_logs(&state, &req.logs, req.log_dir.as_deref())?;
    blocking(move || {
        let (rows, table) = compare_variants(&logs, req.window)?;
        Ok(Json(CompareResponse { rows, table }))
    })
    .await
}

async fn gate(State(state): State<AppState>, Json(req): Json<GateRequest>) -> Reply<GateResponse> {
    if req.observation.len() != sarad_core::sim::OBS_DIM {
        return Err(ServiceError::bad_request(format!("observation needs {} values", sarad_core::sim::OBS_DIM)));
    }
    let model_path = state.resolve(&req.model);
    blocking(move || {
        let model = RiskModel::load(&model_path)?;
        let mut gate = RiskGate::new(model, req.predictor, req.thresholds);
        let (action, tier, risk) = gate.gate(&EgoObservation(req.observation), req.action, &req.sim);
        Ok(Json(GateResponse { action, tier, risk }))
    })
    .await
}
