//! JSON API over the pipeline.
//!
//! Mutating steps are submitted as jobs after synchronous parameter
//! validation; reads go straight to the workspace. Calibration sessions live
//! in memory, one per shift, while their verdicts and results are persisted
//! as they arrive.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use shiftkit::filtering::InspectionVerdict;
use shiftkit::ShiftSpec;

use crate::adapter::{self, AdapterState};
use crate::backend::BackendChoice;
use crate::error::{Result, ServiceError};
use crate::jobs::{Job, JobKind, JobManager, JobOutput};
use crate::pipeline::{
    self, CalibrateClassParams, CalibrateShiftParams, CalibrationRun, CalibrationView, Context, EvaluateParams,
    FilterParams, GenerateParams, LearnParams, ReportsView, SampleQuery, ScoreParams, TokensView,
};

#[derive(Clone)]
pub struct AppState {
    pub ctx: Arc<Context>,
    pub jobs: Arc<JobManager>,
    sessions: Arc<Mutex<HashMap<String, CalibrationRun>>>,
}

impl AppState {
    pub fn new(ctx: Context) -> Self {
        AppState {
            ctx: Arc::new(ctx),
            jobs: JobManager::new(),
            sessions: Arc::default(),
        }
    }
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl From<shiftkit::Error> for ApiError {
    fn from(e: shiftkit::Error) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let kind = self.0.kind();
        let status = match kind {
            "not_found" => StatusCode::NOT_FOUND,
            "invalid" => StatusCode::UNPROCESSABLE_ENTITY,
            "conflict" | "uncalibratable" => StatusCode::CONFLICT,
            "adapter" => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({
            "error": self.0.to_string(),
            "kind": kind,
            "field": self.0.field(),
        });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Runs blocking workspace work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Conflict(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Submitted {
    pub job_id: String,
}

fn output<T: Serialize>(value: &T, result_ref: String) -> Result<JobOutput> {
    Ok(JobOutput {
        result: serde_json::to_value(value).map_err(shiftkit::Error::from)?,
        result_ref,
    })
}

/// A parameter naming something that does not exist is a bad request, not a missing resource.
fn as_validation(e: ServiceError) -> ServiceError {
    if e.kind() == "not_found" {
        let field = e.field().unwrap_or("params").to_string();
        return ServiceError::invalid(field, e.to_string());
    }
    e
}

async fn submit<P, V, R>(
    state: AppState,
    kind: JobKind,
    params: P,
    validate: V,
    run: R,
) -> ApiResult<(StatusCode, Json<Submitted>)>
where
    P: Send + Sync + 'static,
    V: FnOnce(&Context, &P) -> Result<()> + Send + 'static,
    R: FnOnce(&Context, &P, &dyn Fn(f64)) -> Result<JobOutput> + Send + 'static,
{
    let ctx = state.ctx.clone();
    let params = Arc::new(params);
    let p = params.clone();
    blocking(move || validate(&ctx, &p).map_err(as_validation)).await?;
    let ctx = state.ctx.clone();
    let job_id = state.jobs.submit(kind, move |progress| run(&ctx, &params, progress));
    Ok((StatusCode::ACCEPTED, Json(Submitted { job_id })))
}

async fn get_tokens(State(s): State<AppState>) -> ApiResult<Json<TokensView>> {
    Ok(Json(blocking(move || pipeline::tokens_view(&s.ctx)).await?))
}

async fn learn_tokens(
    State(s): State<AppState>,
    Json(p): Json<LearnParams>,
) -> ApiResult<(StatusCode, Json<Submitted>)> {
    submit(
        s,
        JobKind::Learn,
        p,
        |_, p| p.validate().map(|_| ()),
        |ctx, p, progress| {
            let out = pipeline::learn_tokens(ctx, p, None, progress)?;
            output(&out, format!("tokens/{}", crate::workspace::version_name(out.version)))
        },
    )
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryView {
    pub version: Option<u32>,
    pub shifts: Vec<ShiftSpec>,
}

async fn get_registry(State(s): State<AppState>) -> ApiResult<Json<RegistryView>> {
    Ok(Json(
        blocking(move || {
            let (registry, version) = s.ctx.registry()?;
            Ok(RegistryView {
                version,
                shifts: registry.specs().to_vec(),
            })
        })
        .await?,
    ))
}

async fn generate(
    State(s): State<AppState>,
    Json(p): Json<GenerateParams>,
) -> ApiResult<(StatusCode, Json<Submitted>)> {
    submit(
        s,
        JobKind::Generate,
        p,
        |ctx, p| p.validate(ctx),
        |ctx, p, progress| {
            let out = pipeline::generate(ctx, p, progress)?;
            output(&out, "samples".into())
        },
    )
    .await
}

async fn score(State(s): State<AppState>, Json(p): Json<ScoreParams>) -> ApiResult<(StatusCode, Json<Submitted>)> {
    submit(
        s,
        JobKind::Score,
        p,
        |ctx, p| p.validate(ctx),
        |ctx, p, progress| {
            let out = pipeline::score(ctx, p, progress)?;
            output(&out, format!("scores/{}", p.shift))
        },
    )
    .await
}

async fn calibrate_classes(
    State(s): State<AppState>,
    Json(p): Json<CalibrateClassParams>,
) -> ApiResult<(StatusCode, Json<Submitted>)> {
    submit(
        s,
        JobKind::CalibrateClass,
        p,
        |_, p| pipeline::select_classes(pipeline::dataset_classes(&p.dataset_root)?, &p.classes).map(|_| ()),
        |ctx, p, progress| {
            let out = pipeline::calibrate_classes(ctx, p, progress)?;
            output(
                &out,
                format!("thresholds/{}", crate::workspace::version_name(out.version)),
            )
        },
    )
    .await
}

async fn filter(State(s): State<AppState>, Json(p): Json<FilterParams>) -> ApiResult<(StatusCode, Json<Submitted>)> {
    submit(
        s,
        JobKind::Filter,
        p,
        |ctx, p| p.validate(ctx),
        |ctx, p, progress| {
            let out = pipeline::filter(ctx, p, progress)?;
            output(
                &out,
                format!("filtered/{}/{}", p.shift, crate::workspace::version_name(out.version)),
            )
        },
    )
    .await
}

async fn evaluate(
    State(s): State<AppState>,
    Json(p): Json<EvaluateParams>,
) -> ApiResult<(StatusCode, Json<Submitted>)> {
    submit(
        s,
        JobKind::Evaluate,
        p,
        |ctx, p| p.validate(ctx),
        |ctx, p, progress| {
            let out = pipeline::evaluate(ctx, p, progress)?;
            output(
                &out,
                format!(
                    "evaluations/{}/{}",
                    p.shift,
                    crate::workspace::version_name(out.version)
                ),
            )
        },
    )
    .await
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    Ok(Json(s.jobs.get(&id)?))
}

async fn get_samples(State(s): State<AppState>, Query(q): Query<SampleQuery>) -> ApiResult<Json<Value>> {
    let samples = blocking(move || pipeline::list_samples(&s.ctx, &q)).await?;
    Ok(Json(json!({ "samples": samples })))
}

async fn get_image(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || pipeline::sample_png(&s.ctx, &id)).await?;
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "image/png")
        .body(Body::from(bytes))
        .expect("static response parts"))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OpenCalibration {
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub inspection_count: Option<usize>,
    /// Discards an open session for the shift instead of resuming it.
    #[serde(default)]
    pub restart: bool,
}

async fn open_calibration(
    State(s): State<AppState>,
    Path(shift): Path<String>,
    body: Option<Json<OpenCalibration>>,
) -> ApiResult<Json<CalibrationView>> {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let view = blocking(move || {
        let mut sessions = s.sessions.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(run) = sessions.get(&shift) {
            if run.is_open() && !body.restart {
                return Ok(run.view());
            }
        }
        let run = CalibrationRun::open(
            &s.ctx,
            &CalibrateShiftParams {
                shift: shift.clone(),
                grid: body.grid,
                inspection_count: body.inspection_count,
            },
        )?;
        let view = run.view();
        sessions.insert(shift, run);
        Ok(view)
    })
    .await?;
    Ok(Json(view))
}

async fn next_calibration(State(s): State<AppState>, Path(shift): Path<String>) -> ApiResult<Json<CalibrationView>> {
    let sessions = s.sessions.lock().unwrap_or_else(|e| e.into_inner());
    let run = sessions
        .get(&shift)
        .ok_or_else(|| ServiceError::not_found("calibration session", shift.clone()))?;
    Ok(Json(run.view()))
}

async fn decide_calibration(
    State(s): State<AppState>,
    Path(shift): Path<String>,
    Json(verdict): Json<InspectionVerdict>,
) -> ApiResult<Json<CalibrationView>> {
    let view = blocking(move || {
        let _write = s.jobs.write_lock();
        let mut sessions = s.sessions.lock().unwrap_or_else(|e| e.into_inner());
        let run = sessions
            .get_mut(&shift)
            .ok_or_else(|| ServiceError::not_found("calibration session", shift.clone()))?;
        run.submit(&s.ctx, verdict)
    })
    .await?;
    Ok(Json(view))
}

async fn get_reports(State(s): State<AppState>) -> ApiResult<Json<ReportsView>> {
    let view = blocking(move || {
        pipeline::reports_view(&s.ctx)?.ok_or_else(|| ServiceError::not_found("report", "no evaluations yet"))
    })
    .await?;
    Ok(Json(view))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/tokens", get(get_tokens))
        .route("/api/tokens/learn", post(learn_tokens))
        .route("/api/registry", get(get_registry))
        .route("/api/generate", post(generate))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/samples", get(get_samples))
        .route("/api/score", post(score))
        .route("/api/calibration/classes", post(calibrate_classes))
        .route("/api/filter", post(filter))
        .route("/api/calibration/{shift}/open", post(open_calibration))
        .route("/api/calibration/{shift}/next", get(next_calibration))
        .route("/api/calibration/{shift}/decision", post(decide_calibration))
        .route("/api/evaluate", post(evaluate))
        .route("/api/reports/shifts", get(get_reports))
        .route("/api/images/{sample_id}", get(get_image))
        .with_state(state.clone());
    // a local backend is also served over the adapter protocol
    if state.ctx.backend == BackendChoice::Toy {
        if let (Ok(g), Ok(e)) = (state.ctx.backend.generator(), state.ctx.backend.embedder()) {
            return api.nest("/adapter", adapter::router(AdapterState::new(g, e)));
        }
    }
    api
}

/// Serves the API until the process is interrupted.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
