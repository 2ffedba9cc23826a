//! HTTP API over a loaded pipeline. Sessions hold an uploaded first frame and
//! its trajectories; jobs run one at a time, in submission order, on a
//! dedicated worker thread.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use trajvid_core::Frame;

use crate::io::flo;
use crate::io::raster;
use crate::io::trajectory_json::{FieldError, TrajectoryJson};
use crate::model::SamplerConfig;
use crate::pipeline::{frame_file_name, Pipeline, HEATMAP_FILE};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no {what} {id:?}"))
    }

    fn invalid(fields: Vec<FieldError>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: "validation failed".into(),
            fields,
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        Self::invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::field("body", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if !self.fields.is_empty() {
            body["fields"] = json!(self.fields);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    fn rank(self) -> u8 {
        match self {
            JobStatus::Queued => 0,
            JobStatus::Running => 1,
            JobStatus::Done | JobStatus::Failed => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub job_id: String,
    pub session_id: String,
    pub trajectory_id: String,
    pub seed: u64,
    pub steps: usize,
    pub status: JobStatus,
    /// Fraction of sampler steps done.
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub frames: usize,
    pub flow_frames: usize,
    #[serde(skip)]
    dir: PathBuf,
}

impl Job {
    fn advance(&mut self, to: JobStatus) {
        assert!(to.rank() > self.status.rank(), "job {} cannot go from {:?} to {to:?}", self.job_id, self.status);
        self.status = to;
    }
}

struct Session {
    image: Frame,
    trajectories: Vec<(String, TrajectoryJson)>,
}

#[derive(Default)]
struct Registry {
    sessions: HashMap<String, Session>,
    jobs: HashMap<String, Job>,
    next_id: u64,
}

impl Registry {
    fn id(&mut self, prefix: &str) -> String {
        self.next_id += 1;
        format!("{prefix}{:06}", self.next_id)
    }
}

/// Shared service state. Cloning shares the registry and the queue.
#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Pipeline>,
    registry: Arc<Mutex<Registry>>,
    queue: mpsc::Sender<String>,
    work_dir: PathBuf,
    sampler: SamplerConfig,
}

impl AppState {
    /// Starts the generation worker. Job outputs go under `work_dir/jobs`.
    pub fn new(pipeline: Pipeline, work_dir: PathBuf, sampler: SamplerConfig) -> Self {
        let (tx, rx) = mpsc::channel::<String>();
        let state = Self {
            pipeline: Arc::new(pipeline),
            registry: Arc::new(Mutex::new(Registry::default())),
            queue: tx,
            work_dir,
            sampler,
        };
        let worker = state.clone();
        std::thread::Builder::new()
            .name("generation".into())
            .spawn(move || {
                for job_id in rx {
                    worker.run(&job_id);
                }
            })
            .expect("worker thread starts");
        state
    }

    fn registry(&self) -> std::sync::MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn run(&self, job_id: &str) {
        let work = {
            let mut reg = self.registry();
            let Some(job) = reg.jobs.get_mut(job_id) else { return };
            job.advance(JobStatus::Running);
            let job = job.clone();
            let session = &reg.sessions[&job.session_id];
            let traj = session
                .trajectories
                .iter()
                .find(|(id, _)| *id == job.trajectory_id)
                .map(|(_, t)| t.clone())
                .expect("trajectory checked at submission");
            (job, session.image.clone(), traj)
        };
        let (job, image, traj) = work;
        let sampler = SamplerConfig {
            steps: job.steps,
            ..self.sampler.clone()
        };
        log::info!("job {job_id}: seed {} steps {}", job.seed, job.steps);
        let result = self
            .pipeline
            .generate(&image, &traj, job.seed, &sampler, |done, total| {
                if let Some(j) = self.registry().jobs.get_mut(job_id) {
                    j.progress = done as f64 / total.max(1) as f64;
                }
            })
            .and_then(|g| g.write(&job.dir).map(|_| g));
        let mut reg = self.registry();
        let j = reg.jobs.get_mut(job_id).expect("jobs are never removed");
        match result {
            Ok(g) => {
                j.frames = g.video.frames();
                j.flow_frames = g.flow.frames();
                j.progress = 1.0;
                j.advance(JobStatus::Done);
            }
            Err(e) => {
                log::warn!("job {job_id} failed: {e}");
                j.error = Some(e.to_string());
                j.advance(JobStatus::Failed);
            }
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/trajectories", post(add_trajectory))
        .route("/api/sessions/{id}/jobs", post(submit_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/frames/{k}", get(job_frame))
        .route("/api/jobs/{id}/heatmap", get(job_heatmap))
        .route("/api/jobs/{id}/flow/{t}", get(job_flow))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

/// Serves until the process is interrupted.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    /// Base64 PNG, optionally as a `data:` URL.
    image: String,
}

fn decode_image(text: &str) -> ApiResult<Frame> {
    let b64 = match text.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => text,
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::field("image", format!("not base64: {e}")))?;
    raster::decode_rgb(&bytes).map_err(|e| ApiError::field("image", e.to_string()))
}

fn session_json(id: &str, s: &Session) -> serde_json::Value {
    json!({
        "session_id": id,
        "width": s.image.width(),
        "height": s.image.height(),
        "trajectories": s.trajectories.iter().map(|(id, _)| id).collect::<Vec<_>>(),
    })
}

async fn create_session(State(st): State<AppState>, body: std::result::Result<Json<NewSession>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let image = decode_image(&req.image)?;
    let mut reg = st.registry();
    let id = reg.id("s");
    let session = Session {
        image,
        trajectories: Vec::new(),
    };
    let body = session_json(&id, &session);
    reg.sessions.insert(id, session);
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let reg = st.registry();
    let s = reg.sessions.get(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    Ok(Json(session_json(&id, s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreviewVector {
    pub x: f32,
    pub y: f32,
    pub dx: f32,
    pub dy: f32,
}

async fn add_trajectory(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: std::result::Result<Json<TrajectoryJson>, JsonRejection>,
) -> ApiResult<Response> {
    let (w, h) = {
        let reg = st.registry();
        let s = reg.sessions.get(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
        (s.image.width(), s.image.height())
    };
    let Json(traj) = body?;
    let errors = st.pipeline.validate(&traj, w, h);
    if !errors.is_empty() {
        return Err(ApiError::invalid(errors));
    }
    let sparse = st
        .pipeline
        .sparse_flow(&traj, w, h)
        .map_err(|e| ApiError::field("tracks", e.to_string()))?;
    // final-frame displacement of every control pixel, in source pixels
    let c = &st.pipeline.model.config;
    let (sx, sy) = (w as f32 / c.width as f32, h as f32 / c.height as f32);
    let last = sparse.flow().frames() - 1;
    let preview: Vec<PreviewVector> = sparse
        .sources(last)
        .into_iter()
        .map(|(x, y, dx, dy)| PreviewVector {
            x: (x as f32 + 0.5) * sx - 0.5,
            y: (y as f32 + 0.5) * sy - 0.5,
            dx: dx * sx,
            dy: dy * sy,
        })
        .collect();
    let mut reg = st.registry();
    let tid = reg.id("t");
    reg.sessions
        .get_mut(&id)
        .ok_or_else(|| ApiError::not_found("session", &id))?
        .trajectories
        .push((tid.clone(), traj));
    Ok((
        StatusCode::CREATED,
        Json(json!({ "trajectory_id": tid, "sparse_flow_preview": preview })),
    )
        .into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewJob {
    trajectory_id: String,
    #[serde(default)]
    seed: u64,
    steps: Option<usize>,
}

async fn submit_job(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: std::result::Result<Json<NewJob>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let steps = req.steps.unwrap_or(st.sampler.steps);
    let total = st.pipeline.model.config.schedule.num_steps;
    if steps == 0 || steps > total {
        return Err(ApiError::field("steps", format!("steps must lie in 1..={total}")));
    }
    let mut reg = st.registry();
    let s = reg.sessions.get(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    if !s.trajectories.iter().any(|(t, _)| *t == req.trajectory_id) {
        return Err(ApiError::field(
            "trajectory_id",
            format!("no trajectory {:?} in session {id}", req.trajectory_id),
        ));
    }
    let job_id = reg.id("j");
    let job = Job {
        job_id: job_id.clone(),
        session_id: id,
        trajectory_id: req.trajectory_id,
        seed: req.seed,
        steps,
        status: JobStatus::Queued,
        progress: 0.0,
        error: None,
        frames: 0,
        flow_frames: 0,
        dir: st.work_dir.join("jobs").join(&job_id),
    };
    reg.jobs.insert(job_id.clone(), job);
    drop(reg);
    st.queue
        .send(job_id.clone())
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "generation worker stopped"))?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response())
}

async fn get_job(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    let reg = st.registry();
    reg.jobs.get(&id).cloned().map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

/// A finished job, or the reason its results are unavailable.
fn finished(st: &AppState, id: &str) -> ApiResult<Job> {
    let reg = st.registry();
    let job = reg.jobs.get(id).ok_or_else(|| ApiError::not_found("job", id))?;
    match job.status {
        JobStatus::Done => Ok(job.clone()),
        JobStatus::Failed => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job failed: {}", job.error.as_deref().unwrap_or("unknown error")),
        )),
        s => Err(ApiError::new(StatusCode::CONFLICT, format!("job is {s:?}").to_lowercase())),
    }
}

fn file_response(path: PathBuf, content_type: &'static str) -> ApiResult<Response> {
    let bytes = std::fs::read(&path).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type)], Bytes::from(bytes)).into_response())
}

async fn job_frame(State(st): State<AppState>, Path((id, k)): Path<(String, usize)>) -> ApiResult<Response> {
    let job = finished(&st, &id)?;
    if k >= job.frames {
        return Err(ApiError::not_found("frame", &k.to_string()));
    }
    file_response(job.dir.join(frame_file_name(k)), "image/png")
}

async fn job_heatmap(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = finished(&st, &id)?;
    file_response(job.dir.join(HEATMAP_FILE), "image/png")
}

async fn job_flow(State(st): State<AppState>, Path((id, t)): Path<(String, usize)>) -> ApiResult<Response> {
    let job = finished(&st, &id)?;
    if t >= job.flow_frames {
        return Err(ApiError::not_found("flow frame", &t.to_string()));
    }
    file_response(job.dir.join(flo::file_name(t)), "application/octet-stream")
}
