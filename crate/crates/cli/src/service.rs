//! HTTP rendering service.
//!
//! `GET /info` describes the served model, `POST /render` turns a JSON
//! conditioning into a PNG, and every other `GET` is answered from the static
//! UI directory (or a small placeholder page when none is configured).

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dnp::field::{ConditioningInput, Drive, LatentInput};
use dnp::model::{DriveMode, Model, Range};
use dnp::render::Renderer;
use serde::Serialize;
use serde_json::Value;
use tower_http::services::ServeDir;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub n_exp: usize,
    pub n_v: usize,
    pub n_f: usize,
    /// Length of the drive block: `n_exp`, or the audio code width.
    pub drive: usize,
}

/// Body of `GET /info`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Info {
    pub variant: String,
    pub mode: DriveMode,
    pub dims: Dims,
    pub n_exp: usize,
    pub pose_ranges: Vec<Range>,
    pub expression_ranges: Vec<Range>,
    pub gaze_ranges: Vec<Range>,
}

impl Info {
    pub fn of(model: &Model) -> Self {
        let c = &model.config;
        Self {
            variant: c.variant.name().to_string(),
            mode: c.mode,
            dims: Dims {
                height: c.height,
                width: c.width,
                n_exp: c.n_exp,
                n_v: if c.variant.uses_latent() { c.n_v } else { 0 },
                n_f: c.field.n_f,
                drive: c.drive_len(),
            },
            n_exp: c.n_exp,
            pose_ranges: c.ranges.pose.clone(),
            expression_ranges: c.ranges.expression.clone(),
            gaze_ranges: c.ranges.gaze.clone(),
        }
    }
}

pub struct AppState {
    renderer: Renderer,
    info: Info,
}

impl AppState {
    pub fn new(model: Model) -> dnp::Result<Self> {
        let info = Info::of(&model);
        Ok(Self {
            renderer: Renderer::new(model)?,
            info,
        })
    }
}

/// A request rejected before rendering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub error: String,
}

impl FieldError {
    fn new(field: &str, error: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            error: format!("{field}: {}", error.into()),
        }
    }
}

fn numbers(body: &Value, field: &str, len: usize) -> Result<Vec<f64>, FieldError> {
    let v = body.get(field).ok_or_else(|| FieldError::new(field, "missing"))?;
    let arr = v
        .as_array()
        .ok_or_else(|| FieldError::new(field, "expected an array of numbers"))?;
    if arr.len() != len {
        return Err(FieldError::new(field, format!("expected {len} numbers, got {}", arr.len())));
    }
    arr.iter()
        .enumerate()
        .map(|(k, x)| {
            x.as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| FieldError::new(field, format!("element {k} is not a finite number")))
        })
        .collect()
}

/// Parses a `/render` body against the served model's dimensions.
pub fn parse_render_request(bytes: &[u8], info: &Info) -> Result<ConditioningInput, FieldError> {
    let body: Value = serde_json::from_slice(bytes).map_err(|e| FieldError::new("body", format!("malformed JSON: {e}")))?;
    if !body.is_object() {
        return Err(FieldError::new("body", "expected a JSON object"));
    }
    let pose = numbers(&body, "pose", 6)?;
    let drive = match info.mode {
        DriveMode::Expression => Drive::Expression(numbers(&body, "expression", info.n_exp)?),
        DriveMode::Audio => Drive::AudioCode(numbers(&body, "audio", info.dims.drive)?),
    };
    let gaze = numbers(&body, "gaze", 2)?;
    Ok(ConditioningInput {
        pose: std::array::from_fn(|k| pose[k]),
        drive,
        gaze: [gaze[0], gaze[1]],
        latent: LatentInput::Mean,
    })
}

async fn info(State(state): State<Arc<AppState>>) -> Json<Info> {
    Json(state.info.clone())
}

async fn render(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let cond = match parse_render_request(&body, &state.info) {
        Ok(c) => c,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(e)).into_response(),
    };
    let worker = state.clone();
    let png = tokio::task::spawn_blocking(move || worker.renderer.render(&cond).and_then(|img| img.to_png_bytes())).await;
    match png {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, Json(FieldError::new("render", e.to_string()))).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(FieldError::new("render", e.to_string()))).into_response(),
    }
}

const PLACEHOLDER: &str = "<!doctype html>
<html><head><meta charset=\"utf-8\"><title>dnp</title></head>
<body><h1>dnp rendering service</h1>
<p>No UI directory configured. Endpoints: <code>GET /info</code>, <code>POST /render</code>.</p>
</body></html>
";

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER)
}

/// Routes for a loaded model; static assets come from `ui_dir` when given.
pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/info", get(info))
        .route("/render", post(render))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.route("/", get(placeholder)),
    }
}

/// Serves until interrupted.
pub async fn serve(state: Arc<AppState>, ui_dir: Option<PathBuf>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
