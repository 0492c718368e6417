#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use serde_json::{json, Value};
use tower::ServiceExt;

use oga_core::pipeline::{load_bundle, write_frame_archive, CaseBundle, FixedClock, TrialData};
use oga_core::synth::write_workspace;
use oga_core::wgs::ScoringConfig;
use oga_service::api::{router, AppState};
use oga_service::engine::Engine;
use oga_service::store::Store;

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub state: Arc<AppState>,
    pub app: Router,
    pub bundle: CaseBundle,
    pub scoring: ScoringConfig,
}

/// A store plus one synthetic three-trial case with zero deviation from
/// its matched normative subject.
pub fn harness(token: Option<&str>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let scoring = ScoringConfig::default_wgs();
    let ws = write_workspace(&dir.path().join("ws"), 1, 0.0, 7, &scoring).unwrap();
    let bundle = load_bundle(&ws.case_dirs[0]).unwrap();
    let clock = Arc::new(FixedClock::default());
    let engine = Engine::new(scoring.clone(), clock.clone())
        .with_normative_dir(&ws.normative_dir)
        .unwrap();
    let store = Store::open(&dir.path().join("store"), clock).unwrap();
    let state = Arc::new(AppState {
        store,
        engine,
        token: token.map(str::to_string),
    });
    Harness {
        app: router(state.clone()),
        dir,
        state,
        bundle,
        scoring,
    }
}

pub async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    headers: &[(&str, &str)],
) -> (StatusCode, HeaderMap, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(v) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(serde_json::to_vec(&v).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, headers, bytes.to_vec())
}

pub async fn json_call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, _, bytes) = call(app, method, uri, body, &[]).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub fn case_body(bundle: &CaseBundle) -> Value {
    json!({
        "id": bundle.id,
        "synthetic": bundle.synthetic,
        "reference_total": bundle.reference_total,
        "profile": bundle.profile,
    })
}

pub fn trial_body(trial: &TrialData) -> Value {
    let b64 = |bytes: &[u8]| base64::engine::general_purpose::STANDARD.encode(bytes);
    json!({
        "id": trial.id,
        "reference_total": trial.reference_total,
        "trajectory_csv": trial.trajectory_csv.as_deref().map(|b| String::from_utf8(b.to_vec()).unwrap()),
        "frontal_zip": b64(&write_frame_archive(&trial.frontal).unwrap()),
        "sagittal_zip": b64(&write_frame_archive(&trial.sagittal).unwrap()),
    })
}

/// Creates the case and attaches every trial.
pub async fn create_case(h: &Harness) {
    let (status, _) = json_call(&h.app, Method::POST, "/cases", Some(case_body(&h.bundle))).await;
    assert_eq!(status, StatusCode::CREATED);
    for t in &h.bundle.trials {
        let uri = format!("/cases/{}/trials", h.bundle.id);
        let (status, body) = json_call(&h.app, Method::POST, &uri, Some(trial_body(t))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
    }
}

/// Polls a run token until the run leaves the running state.
pub async fn wait_run(app: &Router, token: &str) -> (StatusCode, Value) {
    for _ in 0..600 {
        let (status, body) = json_call(app, Method::GET, &format!("/runs/{token}"), None).await;
        if body["status"] != "running" {
            return (status, body);
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("run {token} did not finish");
}

/// Starts a run and waits for it; returns the finished run document.
pub async fn run_to_completion(h: &Harness, body: Value) -> (StatusCode, Value) {
    let uri = format!("/cases/{}/run", h.bundle.id);
    let (status, run) = json_call(&h.app, Method::POST, &uri, Some(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{run}");
    wait_run(&h.app, run["token"].as_str().unwrap()).await
}
