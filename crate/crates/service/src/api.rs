use std::path::{Path, PathBuf};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forgeval_core::attack::AttackKind;
use forgeval_core::config::{from_value, FieldError};
use forgeval_core::detector::{DetectorKind, DetectorRegistry, MetricStat, RESERVED_CONFIG_KEYS};
use forgeval_core::pipeline::{detect, model_manifest_path, DetectRequest, ErrorClass, JobSpec, CALIBRATION_FILE};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::jobs::SubmitError;
use crate::{AppState, MAX_LOG_WAIT};

pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into(), fields: vec![] }
    }

    fn invalid(fields: Vec<FieldError>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: "invalid config".into(), fields }
    }

    fn not_found(what: &str, id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.message});
        if !self.fields.is_empty() {
            body["fields"] = json!(self.fields);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(|| async { Json(json!({"status": "ok", "protocol": forgeval_core::SCHEMA_VERSION})) }))
        .route("/api/jobs", post(submit_job).get(list_jobs))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/logs", get(get_logs))
        .route("/api/runs/{id}", get(list_run))
        .route("/api/runs/{id}/report", get(get_report))
        .route("/api/runs/{id}/predictions", get(get_predictions))
        .route("/api/runs/{id}/manifest", get(get_manifest))
        .route("/api/runs/{id}/files/{name}", get(get_file))
        .route("/api/registry/detectors", get(list_detectors))
        .route("/api/registry/attacks", get(list_attacks))
        .route("/api/demo/detect", post(demo_detect))
        .with_state(state)
}

fn parse_json(body: &Bytes) -> ApiResult<Value> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::invalid(vec![FieldError::new("(body)", format!("invalid JSON: {e}"))]))
}

async fn submit_job(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let Value::Object(mut obj) = parse_json(&body)? else {
        return Err(ApiError::invalid(vec![FieldError::new("(body)", "expected an object")]));
    };
    let mut errors = Vec::new();
    let kind = match obj.remove("kind") {
        Some(Value::String(k)) => k,
        Some(_) => {
            errors.push(FieldError::new("kind", "must be a string"));
            String::new()
        }
        None => {
            errors.push(FieldError::new("kind", "missing field"));
            String::new()
        }
    };
    let config = obj.remove("config").unwrap_or(Value::Object(Map::new()));
    let job_id = match obj.remove("job_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => {
            errors.push(FieldError::new("job_id", "must be a string"));
            None
        }
    };
    for key in obj.keys() {
        errors.push(FieldError::new(key.as_str(), "unknown field (expected kind, config, job_id)"));
    }
    if !errors.is_empty() {
        return Err(ApiError::invalid(errors));
    }
    let spec = JobSpec::parse(&kind, config.clone()).map_err(ApiError::invalid)?;
    let job = state.store.submit(job_id, spec, config).map_err(|e| match e {
        SubmitError::Duplicate(id) => ApiError::new(StatusCode::CONFLICT, format!("job {id:?} already exists")),
        SubmitError::InvalidId(id) => ApiError::invalid(vec![FieldError::new(
            "job_id",
            format!("{id:?} must be 1-64 characters of [A-Za-z0-9_-]"),
        )]),
    })?;
    let record = job.snapshot();
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": record.job_id, "status": record.status}))).into_response())
}

async fn list_jobs(State(state): State<AppState>) -> Json<Value> {
    Json(json!({"jobs": state.store.list()}))
}

async fn get_job(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let job = state.store.get(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    Ok(Json(serde_json::to_value(job.snapshot()).expect("job serializes")))
}

#[derive(Deserialize)]
struct LogQuery {
    #[serde(default)]
    since: usize,
    #[serde(default)]
    wait_ms: u64,
}

async fn get_logs(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<LogQuery>,
) -> ApiResult<Json<Value>> {
    let job = state.store.get(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    if q.wait_ms > 0 {
        job.wait_for(q.since, Duration::from_millis(q.wait_ms).min(MAX_LOG_WAIT)).await;
    }
    let (lines, next) = job.logs_since(q.since);
    Ok(Json(json!({"lines": lines, "next": next, "status": job.status()})))
}

fn run_dir(state: &AppState, id: &str) -> ApiResult<PathBuf> {
    if !crate::jobs::valid_job_id(id) {
        return Err(ApiError::not_found("run", id));
    }
    let dir = state.store.run_dir(id);
    if dir.is_dir() {
        Ok(dir)
    } else {
        Err(ApiError::not_found("run", id))
    }
}

async fn file_response(path: &Path, content_type: &str) -> ApiResult<Response> {
    let file = tokio::fs::File::open(path).await.map_err(|_| {
        ApiError::new(StatusCode::NOT_FOUND, format!("{} not found", path.file_name().unwrap_or_default().to_string_lossy()))
    })?;
    let stream = tokio_util::io::ReaderStream::new(file);
    Ok(([(header::CONTENT_TYPE, content_type.to_string())], Body::from_stream(stream)).into_response())
}

fn content_type(name: &str) -> &'static str {
    if name.ends_with(".jsonl") {
        "application/x-ndjson"
    } else if name.ends_with(".json") {
        "application/json"
    } else if name.ends_with(".csv") {
        "text/csv; charset=utf-8"
    } else {
        "text/plain; charset=utf-8"
    }
}

async fn list_run(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let dir = run_dir(&state, &id)?;
    let mut files = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))? {
        let Ok(entry) = entry else { continue };
        let Ok(meta) = entry.metadata() else { continue };
        if meta.is_file() {
            files.push(json!({"name": entry.file_name().to_string_lossy(), "bytes": meta.len()}));
        }
    }
    files.sort_by(|a, b| a["name"].as_str().cmp(&b["name"].as_str()));
    Ok(Json(json!({"run_id": id, "files": files})))
}

async fn get_report(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let dir = run_dir(&state, &id)?;
    file_response(&dir.join(forgeval_core::reporting::REPORT_JSON), "application/json").await
}

async fn get_predictions(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let dir = run_dir(&state, &id)?;
    file_response(&dir.join(forgeval_core::reporting::PREDICTIONS_FILE), "application/x-ndjson").await
}

async fn get_manifest(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let dir = run_dir(&state, &id)?;
    let plain = dir.join(forgeval_core::pipeline::MANIFEST_FILE);
    let path = if plain.is_file() { plain } else { model_manifest_path(&dir.join(CALIBRATION_FILE)) };
    file_response(&path, "application/json").await
}

async fn get_file(State(state): State<AppState>, UrlPath((id, name)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let dir = run_dir(&state, &id)?;
    if name.is_empty() || name.contains('/') || name.contains('\\') || name.starts_with('.') {
        return Err(ApiError::not_found("file", &name));
    }
    file_response(&dir.join(&name), content_type(&name)).await
}

fn detector_config_schema(kind: DetectorKind) -> Value {
    let output = json!({"key": "output", "type": "string", "enum": ["raw", "probability", "logit"], "default": "raw"});
    let reserved: Vec<Value> = RESERVED_CONFIG_KEYS
        .iter()
        .map(|k| json!({"key": k, "type": "number", "reserved": true}))
        .collect();
    let mut keys = match kind {
        DetectorKind::BuiltinMetric => vec![json!({
            "key": "statistic",
            "type": "string",
            "enum": MetricStat::ALL.iter().map(|s| s.name()).collect::<Vec<_>>(),
        })],
        DetectorKind::ExternalProcess => vec![
            json!({"key": "command", "type": "array<string>", "required": true}),
            json!({"key": "pool", "type": "integer", "default": 1}),
            json!({"key": "timeout_ms", "type": "integer", "default": forgeval_core::detector::DEFAULT_EXTERNAL_TIMEOUT_MS}),
            output,
        ],
        DetectorKind::ExternalHttp => vec![
            json!({"key": "url", "type": "string", "required": true}),
            json!({"key": "timeout_ms", "type": "integer", "default": forgeval_core::detector::DEFAULT_EXTERNAL_TIMEOUT_MS}),
            output,
        ],
    };
    keys.extend(reserved);
    Value::from(keys)
}

async fn list_detectors() -> Json<Value> {
    let reg = DetectorRegistry::with_builtins();
    let detectors: Vec<Value> = reg
        .list()
        .into_iter()
        .map(|h| {
            json!({
                "name": h.name,
                "kind": h.kind,
                "sign": h.sign,
                "config": h.config,
                "config_schema": detector_config_schema(h.kind),
            })
        })
        .collect();
    let kinds: Vec<Value> = [DetectorKind::BuiltinMetric, DetectorKind::ExternalProcess, DetectorKind::ExternalHttp]
        .into_iter()
        .map(|k| json!({"kind": k, "config_schema": detector_config_schema(k)}))
        .collect();
    Json(json!({"detectors": detectors, "kinds": kinds}))
}

async fn list_attacks() -> Json<Value> {
    let attacks: Vec<Value> = AttackKind::ALL
        .iter()
        .map(|k| {
            json!({
                "name": k.name(),
                "granularity": k.granularity(),
                "uses_backend": k.uses_backend(),
                "description": k.description(),
                "config_schema": {
                    "rate": {"type": "number", "min": 0.0, "max": 1.0},
                    "seed": {"type": "integer", "default": 0},
                    "params": k.param_names(),
                },
            })
        })
        .collect();
    Json(json!({"attacks": attacks}))
}

async fn demo_detect(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let mut req: DetectRequest = from_value(parse_json(&body)?).map_err(ApiError::invalid)?;
    // a bare run id refers to the calibration artifact of that run
    if let Some(model) = &req.model {
        let as_run = model.to_str().filter(|s| crate::jobs::valid_job_id(s)).map(|s| state.store.run_dir(s));
        if let Some(dir) = as_run.filter(|d| d.is_dir() && !model.exists()) {
            req.model = Some(dir.join(CALIBRATION_FILE));
        }
    }
    let task = tokio::task::spawn_blocking(move || detect(&req));
    let outcome = tokio::time::timeout(state.demo_budget, task).await.map_err(|_| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            format!("detection exceeded the {} s budget", state.demo_budget.as_secs_f64()),
        )
    })?;
    let verdict = outcome
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| {
            let status = match e.class() {
                ErrorClass::Backend => StatusCode::SERVICE_UNAVAILABLE,
                ErrorClass::Usage | ErrorClass::Data => StatusCode::BAD_REQUEST,
            };
            ApiError { status, message: e.to_string(), fields: e.field_errors().to_vec() }
        })?;
    Ok(Json(serde_json::to_value(verdict).expect("verdict serializes")))
}
