//! Webhook-driven batch inference service.
//!
//! A signed webhook enqueues an [`InferenceJob`]; a pool of worker threads
//! drains the bounded queue, runs the full pipeline per recording, and
//! persists clinical reports into an append-only directory with an index
//! file. The HTTP surface:
//!
//! * `POST /webhooks/recording-completed` — HMAC-signed `{interview_id,
//!   recording_path}`; 202 with a job id, 401 on a bad signature, 503 when
//!   the queue is full.
//! * `GET /jobs/{id}` — job record with its state ladder.
//! * `GET /reports` — report index, newest first.
//! * `GET /reports/{id}` — one full clinical report (keyed by job id).

use crate::webhook::{verify, SIGNATURE_HEADER};
use axum::extract::{Path as AxumPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Json, Response};
use axum::routing::{get, post};
use axum::Router;
use chrono::{DateTime, Utc};
use depscreen_core::corpus::load_interview;
use depscreen_core::llm::{ClinicalReport, LlmClient};
use depscreen_core::pipeline::{process_recording_with, InferenceArtifacts, Stage};
use depscreen_core::transcript::AcronymTable;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WebhookPayload {
    pub interview_id: u32,
    /// Corpus root holding the `<id>_P/` recording directory.
    pub recording_path: String,
}

/// Job lifecycle; transitions follow this order and terminal states are
/// immutable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Preprocessing,
    Features,
    Llm,
    Inference,
    Reporting,
    Done,
    Failed,
}

impl From<Stage> for JobState {
    fn from(stage: Stage) -> Self {
        match stage {
            Stage::Preprocessing => JobState::Preprocessing,
            Stage::Features => JobState::Features,
            Stage::Llm => JobState::Llm,
            Stage::Inference => JobState::Inference,
            Stage::Reporting => JobState::Reporting,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub interview_id: u32,
    pub recording_path: String,
    pub state: JobState,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
struct Job {
    job_id: String,
    payload: WebhookPayload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportIndexEntry {
    pub job_id: String,
    pub interview_id: u32,
    pub diagnosis: String,
    pub confidence: f64,
    pub completed_at: DateTime<Utc>,
}

/// Append-only report persistence: one JSON file per completed job plus an
/// index file; writes are temp-then-rename so a crash never leaves a torn
/// report behind.
pub struct ReportStore {
    dir: PathBuf,
    index: Mutex<Vec<ReportIndexEntry>>,
}

impl ReportStore {
    pub fn open(dir: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let index_path = dir.join("index.json");
        let index = if index_path.is_file() {
            serde_json::from_str(&std::fs::read_to_string(&index_path)?)?
        } else {
            Vec::new()
        };
        Ok(ReportStore { dir, index: Mutex::new(index) })
    }

    fn atomic_write(path: &Path, contents: &str) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, contents)?;
        std::fs::rename(&tmp, path)
    }

    pub fn save(&self, job_id: &str, report: &ClinicalReport) -> anyhow::Result<()> {
        let path = self.dir.join(format!("{job_id}.json"));
        Self::atomic_write(&path, &serde_json::to_string_pretty(report)?)?;
        let mut index = self.index.lock().expect("index lock");
        index.push(ReportIndexEntry {
            job_id: job_id.to_string(),
            interview_id: report.interview_id,
            diagnosis: report.diagnosis.to_string(),
            confidence: report.confidence,
            completed_at: Utc::now(),
        });
        let serialized = serde_json::to_string_pretty(&*index)?;
        Self::atomic_write(&self.dir.join("index.json"), &serialized)?;
        Ok(())
    }

    /// Entries newest-first by completion time.
    pub fn list(&self) -> Vec<ReportIndexEntry> {
        let mut entries = self.index.lock().expect("index lock").clone();
        entries.sort_by(|a, b| b.completed_at.cmp(&a.completed_at));
        entries
    }

    pub fn get(&self, job_id: &str) -> Option<ClinicalReport> {
        let path = self.dir.join(format!("{job_id}.json"));
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }
}

pub struct ServiceConfig {
    pub bind: String,
    pub secret: String,
    pub queue_capacity: usize,
    pub workers: usize,
    pub reports_dir: PathBuf,
    pub artifacts: Arc<InferenceArtifacts>,
    pub client: Arc<LlmClient>,
    pub acronyms: AcronymTable,
}

struct ServiceState {
    secret: String,
    /// `None` once the service is shutting down; dropping the sender is
    /// what lets the worker pool drain and exit.
    queue_tx: Mutex<Option<crossbeam_channel::Sender<Job>>>,
    jobs: Mutex<BTreeMap<String, JobRecord>>,
    reports: Arc<ReportStore>,
    job_seq: AtomicU64,
    boot_nonce: u64,
}

impl ServiceState {
    fn next_job_id(&self) -> String {
        let seq = self.job_seq.fetch_add(1, Ordering::SeqCst);
        format!("job-{:08x}-{seq:06}", self.boot_nonce)
    }

    fn close_queue(&self) {
        *self.queue_tx.lock().expect("queue lock") = None;
    }

    fn try_enqueue(&self, job: Job) -> Result<(), crossbeam_channel::TrySendError<Job>> {
        match self.queue_tx.lock().expect("queue lock").as_ref() {
            Some(tx) => tx.try_send(job),
            None => Err(crossbeam_channel::TrySendError::Disconnected(job)),
        }
    }

    fn update_job(&self, job_id: &str, state: JobState, error: Option<String>) {
        let mut jobs = self.jobs.lock().expect("jobs lock");
        if let Some(record) = jobs.get_mut(job_id) {
            // Terminal states never regress.
            if matches!(record.state, JobState::Done | JobState::Failed) {
                return;
            }
            record.state = state;
            record.error = error;
            record.updated_at = Utc::now();
        }
    }
}

/// A running service: HTTP listener plus worker pool. Dropping the handle
/// does not stop it; call [`RunningService::shutdown`].
pub struct RunningService {
    pub addr: SocketAddr,
    state: Arc<ServiceState>,
    shutdown_tx: Option<tokio::sync::oneshot::Sender<()>>,
    server_thread: Option<JoinHandle<()>>,
    worker_threads: Vec<JoinHandle<()>>,
}

impl RunningService {
    pub fn shutdown(self) {
        drop(self);
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown_tx.take() {
            let _ = tx.send(());
        }
        if let Some(handle) = self.server_thread.take() {
            let _ = handle.join();
        }
        // Closing the queue drops the only sender, so workers drain what is
        // left and exit.
        self.state.close_queue();
        for handle in self.worker_threads.drain(..) {
            let _ = handle.join();
        }
    }
}

fn worker_loop(
    rx: crossbeam_channel::Receiver<Job>,
    state: Arc<ServiceState>,
    artifacts: Arc<InferenceArtifacts>,
    client: Arc<LlmClient>,
    acronyms: AcronymTable,
) {
    while let Ok(job) = rx.recv() {
        let job_id = job.job_id.clone();
        let result = load_interview(Path::new(&job.payload.recording_path), job.payload.interview_id)
            .map_err(depscreen_core::pipeline::PipelineError::from)
            .and_then(|interview| {
                process_recording_with(&interview, &artifacts, &client, &acronyms, &mut |stage| {
                    state.update_job(&job_id, stage.into(), None);
                })
            });
        match result {
            Ok((report, _)) => match state.reports.save(&job_id, &report) {
                Ok(()) => state.update_job(&job_id, JobState::Done, None),
                Err(e) => state.update_job(
                    &job_id,
                    JobState::Failed,
                    Some(format!("reporting: {e}")),
                ),
            },
            Err(e) => {
                log::warn!("job {job_id} failed at {}: {e}", e.stage());
                state.update_job(&job_id, JobState::Failed, Some(e.to_string()));
            }
        }
    }
}

fn error_body(status: StatusCode, message: &str) -> Response {
    (status, Json(serde_json::json!({ "error": message }))).into_response()
}

async fn handle_webhook(
    State(state): State<Arc<ServiceState>>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> Response {
    let Some(signature) = headers.get(SIGNATURE_HEADER).and_then(|v| v.to_str().ok()) else {
        return error_body(StatusCode::UNAUTHORIZED, "missing signature");
    };
    if !verify(&body, &state.secret, signature) {
        return error_body(StatusCode::UNAUTHORIZED, "invalid signature");
    }
    let payload: WebhookPayload = match serde_json::from_slice(&body) {
        Ok(p) => p,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, &format!("malformed payload: {e}")),
    };

    let job_id = state.next_job_id();
    let job = Job { job_id: job_id.clone(), payload: payload.clone() };
    // Reserve the record first so a successful enqueue is immediately
    // visible, but roll it back if the queue is full.
    {
        let now = Utc::now();
        state.jobs.lock().expect("jobs lock").insert(
            job_id.clone(),
            JobRecord {
                job_id: job_id.clone(),
                interview_id: payload.interview_id,
                recording_path: payload.recording_path.clone(),
                state: JobState::Queued,
                error: None,
                created_at: now,
                updated_at: now,
            },
        );
    }
    match state.try_enqueue(job) {
        Ok(()) => (StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job_id })))
            .into_response(),
        Err(crossbeam_channel::TrySendError::Full(_)) => {
            state.jobs.lock().expect("jobs lock").remove(&job_id);
            error_body(StatusCode::SERVICE_UNAVAILABLE, "queue full")
        }
        Err(crossbeam_channel::TrySendError::Disconnected(_)) => {
            state.jobs.lock().expect("jobs lock").remove(&job_id);
            error_body(StatusCode::SERVICE_UNAVAILABLE, "service shutting down")
        }
    }
}

async fn get_job(
    State(state): State<Arc<ServiceState>>,
    AxumPath(job_id): AxumPath<String>,
) -> Response {
    match state.jobs.lock().expect("jobs lock").get(&job_id) {
        Some(record) => Json(record.clone()).into_response(),
        None => error_body(StatusCode::NOT_FOUND, "unknown job"),
    }
}

async fn list_reports(State(state): State<Arc<ServiceState>>) -> Response {
    Json(state.reports.list()).into_response()
}

async fn get_report(
    State(state): State<Arc<ServiceState>>,
    AxumPath(job_id): AxumPath<String>,
) -> Response {
    match state.reports.get(&job_id) {
        Some(report) => Json(report).into_response(),
        None => error_body(StatusCode::NOT_FOUND, "unknown report"),
    }
}

/// Binds the listener, spawns the worker pool, and returns once the socket
/// is accepting. Reports persisted by earlier runs of the same
/// `reports_dir` stay visible.
pub fn start(config: ServiceConfig) -> anyhow::Result<RunningService> {
    let (queue_tx, queue_rx) = crossbeam_channel::bounded::<Job>(config.queue_capacity);
    let reports = Arc::new(ReportStore::open(&config.reports_dir)?);
    let state = Arc::new(ServiceState {
        secret: config.secret,
        queue_tx: Mutex::new(Some(queue_tx)),
        jobs: Mutex::new(BTreeMap::new()),
        reports,
        job_seq: AtomicU64::new(0),
        boot_nonce: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64 & 0xffff_ffff)
            .unwrap_or(0),
    });

    let mut worker_threads = Vec::with_capacity(config.workers.max(1));
    for n in 0..config.workers.max(1) {
        let rx = queue_rx.clone();
        let state = Arc::clone(&state);
        let artifacts = Arc::clone(&config.artifacts);
        let client = Arc::clone(&config.client);
        let acronyms = config.acronyms.clone();
        worker_threads.push(
            std::thread::Builder::new()
                .name(format!("depscreen-worker-{n}"))
                .spawn(move || worker_loop(rx, state, artifacts, client, acronyms))?,
        );
    }
    drop(queue_rx);

    let router = Router::new()
        .route("/webhooks/recording-completed", post(handle_webhook))
        .route("/jobs/:id", get(get_job))
        .route("/reports", get(list_reports))
        .route("/reports/:id", get(get_report))
        .with_state(Arc::clone(&state));

    let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel::<anyhow::Result<SocketAddr>>();
    let bind = config.bind.clone();
    let server_thread = std::thread::Builder::new()
        .name("depscreen-http".to_string())
        .spawn(move || {
            let runtime = match tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
            {
                Ok(rt) => rt,
                Err(e) => {
                    let _ = addr_tx.send(Err(e.into()));
                    return;
                }
            };
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::bind(&bind).await {
                    Ok(l) => l,
                    Err(e) => {
                        let _ = addr_tx.send(Err(e.into()));
                        return;
                    }
                };
                let addr = listener.local_addr().expect("bound socket has an address");
                let _ = addr_tx.send(Ok(addr));
                let server = axum::serve(listener, router).with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("http server error: {e}");
                }
            });
        })?;

    let addr = addr_rx.recv()??;
    log::info!("service listening on {addr}");
    Ok(RunningService {
        addr,
        state,
        shutdown_tx: Some(shutdown_tx),
        server_thread: Some(server_thread),
        worker_threads,
    })
}
