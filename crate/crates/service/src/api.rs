//! HTTP API over the case store.

use std::sync::Arc;

use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use oga_core::agents::ClinicianObservation;
use oga_core::pipeline::{InputConfig, JsonlPromptLog, ObservationSetting, DEFAULT_RUNS};
use oga_core::wgs::{EvidenceRef, ReportTemplate};

use crate::engine::{completion, Engine, RunSettings};
use crate::metrics::{metrics, MetricsFilter};
use crate::store::{write_atomic, NewCase, ReportEdit, RunCompletion, RunRequest, RunStatus, Store, StoreError, TrialUpload};

pub const TOKEN_ENV: &str = "OGA_API_TOKEN";

pub struct AppState {
    pub store: Store,
    pub engine: Engine,
    /// Required bearer token; requests are unauthenticated when absent.
    pub token: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Invalid(_) => StatusCode::BAD_REQUEST,
            StoreError::Conflict(_) => StatusCode::CONFLICT,
            StoreError::Semantic(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Io { .. } | StoreError::Corrupt { .. } => {
                tracing::error!(error = %e, "store failure");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "status": self.status.as_u16(), "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body whose rejections are reported as 400 with the API's error shape.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: serde::de::DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|r| ApiError::bad_request(r.body_text()))
    }
}

/// Runs blocking store work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/cases", post(create_case).get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/trials", post(attach_trial))
        .route("/cases/{id}/observations", post(add_observations))
        .route("/cases/{id}/run", post(start_run))
        .route("/cases/{id}/reports", get(list_reports))
        .route("/runs/{token}", get(get_run))
        .route("/reports/{id}", get(get_report).patch(edit_report))
        .route("/reports/{id}/finalize", post(finalize_report))
        .route("/reports/{id}/evidence/{evidence}", get(get_evidence))
        .route("/eval/metrics", get(eval_metrics))
        .route("/config/scoring", get(scoring_config))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .merge(protected)
        .with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn create_case(State(s): State<Arc<AppState>>, Body(new): Body<NewCase>) -> ApiResult<impl IntoResponse> {
    let record = blocking(move || Ok(s.store.create_case(new)?)).await?;
    let location = HeaderValue::from_str(&format!("/cases/{}", record.id)).expect("ids are header-safe");
    Ok((StatusCode::CREATED, [(header::LOCATION, location)], Json(record)))
}

async fn list_cases(State(s): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    #[derive(Serialize)]
    struct Item {
        id: String,
        state: crate::store::CaseState,
        trials: usize,
        reports: usize,
        updated_at: String,
    }
    let cases = blocking(move || Ok(s.store.cases()?)).await?;
    let items: Vec<Item> = cases
        .into_iter()
        .map(|c| Item {
            trials: c.trials.len(),
            reports: c.report_ids.len(),
            id: c.id,
            state: c.state,
            updated_at: c.updated_at,
        })
        .collect();
    Ok(Json(items))
}

async fn get_case(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || Ok(s.store.case(&id)?)).await?))
}

/// Trial upload; archives are base64-encoded ZIPs of `frame_<index>.png`.
#[derive(Debug, Deserialize)]
pub struct TrialBody {
    pub id: String,
    #[serde(default)]
    pub reference_total: Option<f64>,
    #[serde(default)]
    pub trajectory_csv: Option<String>,
    pub frontal_zip: String,
    pub sagittal_zip: String,
}

async fn attach_trial(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body(body): Body<TrialBody>,
) -> ApiResult<impl IntoResponse> {
    let decode = |name: &str, text: &str| {
        base64::engine::general_purpose::STANDARD
            .decode(text.trim())
            .map_err(|e| ApiError::bad_request(format!("{name}: {e}")))
    };
    let upload = TrialUpload {
        frontal_zip: decode("frontal_zip", &body.frontal_zip)?,
        sagittal_zip: decode("sagittal_zip", &body.sagittal_zip)?,
        id: body.id,
        reference_total: body.reference_total,
        trajectory_csv: body.trajectory_csv.map(String::into_bytes),
    };
    Ok(Json(blocking(move || Ok(s.store.attach_trial(&id, upload)?)).await?))
}

#[derive(Debug, Deserialize)]
pub struct ObservationsBody {
    pub observations: Vec<ClinicianObservation>,
}

async fn add_observations(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body(body): Body<ObservationsBody>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || Ok(s.store.add_observations(&id, body.observations)?)).await?))
}

fn default_provider() -> String {
    oga_core::agents::MOCK_PROVIDER_ID.to_string()
}

fn default_runs() -> usize {
    DEFAULT_RUNS
}

#[derive(Debug, Deserialize)]
pub struct RunBody {
    /// Input flags such as `RTD` or `R+T+D`.
    pub inputs: String,
    #[serde(default)]
    pub observations: Option<String>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_provider")]
    pub provider: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub template: ReportTemplate,
    #[serde(default)]
    pub parallel_runs: bool,
}

async fn start_run(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body(body): Body<RunBody>,
) -> ApiResult<impl IntoResponse> {
    let observations: ObservationSetting = body
        .observations
        .as_deref()
        .unwrap_or("none")
        .parse()
        .map_err(|e: oga_core::pipeline::InputConfigError| ApiError::bad_request(e.to_string()))?;
    let input = InputConfig::parse_flags(&body.inputs)
        .map_err(|e| ApiError::bad_request(e.to_string()))?
        .with_observations(observations);
    if body.runs == 0 {
        return Err(ApiError::bad_request("runs must be at least 1"));
    }
    if !s.engine.has_provider(&body.provider) {
        return Err(ApiError::bad_request(format!(
            "unknown provider {:?}; available: {}",
            body.provider,
            s.engine.provider_ids().join(", ")
        )));
    }
    let settings = RunSettings {
        input: input.clone(),
        provider: body.provider.clone(),
        runs: body.runs,
        seed: body.seed,
        template: body.template,
        parallel_runs: body.parallel_runs,
    };
    let request = RunRequest {
        input,
        provider: body.provider,
        runs: body.runs,
        seed: body.seed,
        template: body.template,
    };
    let state = s.clone();
    let run = blocking(move || Ok(state.store.start_run(&id, request)?)).await?;
    let (case_id, token) = (run.case_id.clone(), run.token.clone());
    tokio::task::spawn_blocking(move || execute(&s, &case_id, &token, &settings));
    let location = HeaderValue::from_str(&format!("/runs/{}", run.token)).expect("tokens are header-safe");
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, location)], Json(run)))
}

/// Background worker body: runs the pipeline and records the outcome.
pub fn execute(state: &AppState, case_id: &str, token: &str, settings: &RunSettings) {
    let result = (|| -> Result<RunCompletion, String> {
        let bundle = state.store.bundle(case_id).map_err(|e| e.to_string())?;
        let dir = state.store.run_dir(case_id, token);
        let log = JsonlPromptLog::create(&dir.join("prompts.jsonl")).map_err(|e| e.to_string())?;
        let run = state.engine.run(&bundle, settings, Some(&log)).map_err(|e| e.to_string())?;
        for trial in &run.trials {
            for plot in &trial.plots {
                let path = dir.join(&trial.trial_id).join("plots").join(plot.file_name());
                write_atomic(&path, &plot.png).map_err(|e| e.to_string())?;
            }
        }
        Ok(completion(&run))
    })();
    let done = result.unwrap_or_else(|error| RunCompletion {
        error: Some(error),
        ..RunCompletion::default()
    });
    match state.store.finish_run(token, done) {
        Ok(run) => tracing::info!(token, status = ?run.status, reports = run.report_ids.len(), "run finished"),
        Err(e) => tracing::error!(token, error = %e, "could not record run outcome"),
    }
}

async fn get_run(State(s): State<Arc<AppState>>, Path(token): Path<String>) -> ApiResult<Response> {
    let run = blocking(move || Ok(s.store.run(&token)?)).await?;
    let status = if run.status == RunStatus::Failed && run.provider_failure {
        StatusCode::BAD_GATEWAY
    } else {
        StatusCode::OK
    };
    Ok((status, Json(run)).into_response())
}

async fn list_reports(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || Ok(s.store.reports(&id)?)).await?))
}

fn wants_markdown(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/markdown"))
}

async fn get_report(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let state = s.clone();
    let record = blocking(move || Ok(state.store.report(&id)?)).await?;
    if wants_markdown(&headers) {
        let text = record.current().report.render_markdown(&s.engine.scoring);
        return Ok(([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], text).into_response());
    }
    Ok(Json(record).into_response())
}

async fn edit_report(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body(edit): Body<ReportEdit>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || Ok(s.store.edit_report(&id, edit, &s.engine.scoring)?)).await?))
}

#[derive(Debug, Deserialize)]
pub struct FinalizeBody {
    pub editor: String,
}

async fn finalize_report(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body(body): Body<FinalizeBody>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || Ok(s.store.finalize_report(&id, &body.editor)?)).await?))
}

async fn get_evidence(
    State(s): State<Arc<AppState>>,
    Path((id, evidence)): Path<(String, String)>,
) -> ApiResult<Response> {
    let evidence: EvidenceRef = evidence.parse().map_err(ApiError::bad_request)?;
    blocking(move || {
        let record = s.store.report(&id)?;
        let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("evidence {evidence} not found"));
        match &evidence {
            EvidenceRef::Frame { view, index } => {
                let (bytes, media) = s.store.frame(&record.case_id, &record.trial_id, *view, *index)?;
                Ok(([(header::CONTENT_TYPE, media)], bytes).into_response())
            }
            EvidenceRef::Plot(plot) => {
                if plot.contains(['/', '\\']) || plot.contains("..") {
                    return Err(ApiError::bad_request("invalid plot id"));
                }
                let path = s
                    .store
                    .run_dir(&record.case_id, &record.run_token)
                    .join(&record.trial_id)
                    .join("plots")
                    .join(format!("{plot}.png"));
                let bytes = std::fs::read(path).map_err(|_| not_found())?;
                Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
            }
            EvidenceRef::Note(i) => {
                let entry = record
                    .current()
                    .report
                    .reconciliation
                    .iter()
                    .find(|r| r.observation_index == *i)
                    .ok_or_else(not_found)?;
                Ok(Json(json!({ "index": i, "text": entry.observation })).into_response())
            }
        }
    })
    .await
}

async fn eval_metrics(
    State(s): State<Arc<AppState>>,
    Query(filter): Query<MetricsFilter>,
) -> ApiResult<impl IntoResponse> {
    let entries = blocking(move || {
        let cases = s
            .store
            .case_ids()?
            .iter()
            .map(|id| s.store.case_docs(id))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(metrics(&cases, &filter)?)
    })
    .await?;
    Ok(Json(json!({ "entries": entries })))
}

async fn scoring_config(State(s): State<Arc<AppState>>) -> impl IntoResponse {
    Json(s.engine.scoring.clone())
}

/// Marks runs left in progress by a previous process as failed.
pub fn recover_interrupted(store: &Store) -> Result<usize, StoreError> {
    let mut count = 0;
    for case in store.cases()? {
        for run in case.runs.iter().filter(|r| r.status == RunStatus::Running) {
            store.finish_run(
                &run.token,
                RunCompletion {
                    error: Some("interrupted by a service restart".into()),
                    ..RunCompletion::default()
                },
            )?;
            count += 1;
        }
    }
    Ok(count)
}
