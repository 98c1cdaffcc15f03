//! HTTP and WebSocket service for interactive steering.

pub mod session;

use crate::config::{patch_optics, FieldError, RunConfig};
use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use session::{FrameSnapshot, Session};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use turbsim_core::psf::{displacement_map, PsfSynth};
use turbsim_core::raster::Raster;

pub const DEFAULT_SESSION: &str = "default";
/// Longest a frame request waits for the worker.
pub const FRAME_TIMEOUT: Duration = Duration::from_secs(120);
pub const MAX_PSF_GRID: usize = 32;

pub struct AppState {
    base: RunConfig,
    seed: u64,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(base: RunConfig, seed: u64) -> anyhow::Result<Arc<Self>> {
        let state = Arc::new(Self { base, seed, sessions: Mutex::default(), next_id: AtomicU64::new(1) });
        let default = Session::start(DEFAULT_SESSION.into(), state.base.clone(), seed)?;
        state.sessions.lock().unwrap().insert(DEFAULT_SESSION.into(), Arc::new(default));
        Ok(state)
    }

    fn session(&self, id: Option<&str>) -> Result<Arc<Session>, ApiError> {
        let id = id.unwrap_or(DEFAULT_SESSION);
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/params", get(get_params).put(put_params))
        .route("/api/source", post(post_source))
        .route("/api/frame", get(get_frame))
        .route("/api/psf-grid", get(get_psf_grid))
        .route("/api/displacement", get(get_displacement))
        .route("/api/stats", get(get_stats))
        .route("/api/stream", get(stream))
        .route("/api/events", get(events))
        .with_state(state)
}

pub async fn serve(config: RunConfig, seed: u64, port: u16) -> anyhow::Result<()> {
    let state = AppState::new(config, seed)?;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(Vec<FieldError>),
    NotFound(String),
    Unavailable(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest(errors) => (StatusCode::BAD_REQUEST, Json(json!({ "errors": errors }))).into_response(),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, Json(json!({ "error": m }))).into_response(),
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "error": m }))).into_response(),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": m }))).into_response(),
        }
    }
}

fn bad(field: &str, message: impl Into<String>) -> ApiError {
    ApiError::BadRequest(vec![FieldError { field: field.into(), message: message.into() }])
}

#[derive(Debug, Deserialize)]
pub struct SessionQuery {
    session: Option<String>,
}

async fn create_session(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let s = Session::start(id.clone(), state.base.clone(), state.seed).map_err(|e| ApiError::Internal(format!("{e:#}")))?;
    state.sessions.lock().unwrap().insert(id.clone(), Arc::new(s));
    Ok((StatusCode::CREATED, Json(json!({ "session": id }))).into_response())
}

async fn get_params(State(state): State<Arc<AppState>>, Query(q): Query<SessionQuery>) -> Result<Response, ApiError> {
    let s = state.session(q.session.as_deref())?;
    let (optics, _) = s.shared.optics();
    Ok(Json(optics).into_response())
}

async fn put_params(State(state): State<Arc<AppState>>, Query(q): Query<SessionQuery>, body: Bytes) -> Result<Response, ApiError> {
    let s = state.session(q.session.as_deref())?;
    let patch: serde_json::Value = serde_json::from_slice(&body).map_err(|e| bad("", format!("invalid JSON: {e}")))?;
    let (current, _) = s.shared.optics();
    let next = patch_optics(&current, &patch).map_err(ApiError::BadRequest)?;
    let version = s.shared.set_optics(next.clone());
    let mut out = serde_json::to_value(&next).expect("config serializes");
    out["config_version"] = json!(version);
    Ok(Json(out).into_response())
}

async fn post_source(State(state): State<Arc<AppState>>, Query(q): Query<SessionQuery>, body: Bytes) -> Result<Response, ApiError> {
    let s = state.session(q.session.as_deref())?;
    let img = image::load_from_memory(&body).map_err(|e| bad("source", format!("not a decodable image: {e}")))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(bad("source", "image is empty"));
    }
    let version = s.shared.set_source(body.to_vec());
    Ok(Json(json!({ "source_version": version })).into_response())
}

/// Waits for a frame rendered under the current configuration and source.
async fn current_frame(s: &Session) -> Result<Arc<FrameSnapshot>, ApiError> {
    let (cv, sv) = s.shared.versions();
    let mut rx = s.shared.frames.subscribe();
    let deadline = tokio::time::Instant::now() + FRAME_TIMEOUT;
    loop {
        s.shared.demand();
        {
            let snap = rx.borrow_and_update();
            if let Some(f) = snap.as_ref() {
                if f.config_version >= cv && f.source_version >= sv {
                    return Ok(f.clone());
                }
            }
        }
        if tokio::time::Instant::now() >= deadline {
            return Err(ApiError::Unavailable("no frame for the current configuration yet".into()));
        }
        // Wake periodically to keep the demand window open during long preparations.
        let _ = tokio::time::timeout(Duration::from_millis(500), rx.changed()).await;
    }
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_frame(State(state): State<Arc<AppState>>, Query(q): Query<SessionQuery>) -> Result<Response, ApiError> {
    let s = state.session(q.session.as_deref())?;
    let f = current_frame(&s).await?;
    let headers = [
        (header::CONTENT_TYPE, "image/png".to_string()),
        (header::HeaderName::from_static("x-frame-index"), f.index.to_string()),
        (header::HeaderName::from_static("x-config-version"), f.config_version.to_string()),
        (header::HeaderName::from_static("x-stale-basis"), f.stale_basis.to_string()),
    ];
    Ok((headers, f.png.as_ref().clone()).into_response())
}

#[derive(Debug, Deserialize)]
pub struct GridQuery {
    session: Option<String>,
    n: Option<usize>,
}

/// `n × n` mosaic of exact PSFs sampled at the cell centres of the latest field,
/// each tile scaled to its own peak.
pub fn psf_mosaic(frame: &FrameSnapshot, n: usize) -> anyhow::Result<Raster> {
    let o = &frame.optics;
    let k = o.psf_kernel_px;
    let mut synth = PsfSynth::new(o)?;
    let mut psf = vec![0.0; k * k];
    let side = n * k;
    let mut data = vec![0.0; side * side];
    let f = &frame.field;
    for ty in 0..n {
        for tx in 0..n {
            let y = ((2 * ty + 1) * f.height) / (2 * n);
            let x = ((2 * tx + 1) * f.width) / (2 * n);
            synth.psf_from_coeffs(f.coeffs(y, x), &mut psf)?;
            let peak = psf.iter().cloned().fold(0.0, f64::max);
            let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
            for r in 0..k {
                for c in 0..k {
                    data[(ty * k + r) * side + tx * k + c] = psf[r * k + c] * scale;
                }
            }
        }
    }
    Ok(Raster::gray(side, side, data)?)
}

async fn get_psf_grid(State(state): State<Arc<AppState>>, Query(q): Query<GridQuery>) -> Result<Response, ApiError> {
    let s = state.session(q.session.as_deref())?;
    let n = q.n.unwrap_or(8);
    if n == 0 || n > MAX_PSF_GRID {
        return Err(bad("n", format!("must lie in 1..={MAX_PSF_GRID}")));
    }
    let f = current_frame(&s).await?;
    let png = tokio::task::spawn_blocking(move || psf_mosaic(&f, n).and_then(|r| Ok(r.to_png_bytes(false)?)))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(format!("{e:#}")))?;
    Ok(png_response(png))
}

#[derive(Debug, Deserialize)]
pub struct DisplacementQuery {
    session: Option<String>,
    step: Option<usize>,
}

async fn get_displacement(State(state): State<Arc<AppState>>, Query(q): Query<DisplacementQuery>) -> Result<Response, ApiError> {
    let s = state.session(q.session.as_deref())?;
    let f = current_frame(&s).await?;
    let step = q.step.unwrap_or_else(|| (f.width.min(f.height) / 32).max(1));
    if step == 0 {
        return Err(bad("step", "must be at least 1"));
    }
    let d = displacement_map(&f.field, &f.optics).map_err(|e| ApiError::Internal(e.to_string()))?;
    let rows: Vec<Vec<[f64; 2]>> =
        (0..f.height).step_by(step).map(|y| (0..f.width).step_by(step).map(|x| d[y * f.width + x]).collect()).collect();
    Ok(Json(json!({
        "frame_index": f.index,
        "width": f.width,
        "height": f.height,
        "step": step,
        "rows": rows,
    }))
    .into_response())
}

async fn get_stats(State(state): State<Arc<AppState>>, Query(q): Query<SessionQuery>) -> Result<Response, ApiError> {
    let s = state.session(q.session.as_deref())?;
    let status = s.shared.status.borrow().clone();
    let (cv, sv) = s.shared.versions();
    let latest = s.shared.latest();
    Ok(Json(json!({
        "sample_ms": latest.as_ref().map(|f| f.times.sample_ms),
        "beta_ms": latest.as_ref().map(|f| f.times.beta_ms),
        "render_ms": latest.as_ref().map(|f| f.times.render_ms),
        "encode_ms": latest.as_ref().map(|f| f.encode_ms),
        "fps": status.fps,
        "refitting": status.refitting,
        "preparing": status.preparing,
        "frame_index": latest.as_ref().map(|f| f.index),
        "frame_config_version": latest.as_ref().map(|f| f.config_version),
        "stale_basis": latest.as_ref().map(|f| f.stale_basis),
        "config_version": cv,
        "source_version": sv,
        "last_error": status.last_error,
    }))
    .into_response())
}

/// Binary stream message: little-endian `u32` frame index, width and height, then the PNG.
pub fn stream_message(f: &FrameSnapshot) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + f.png.len());
    out.extend_from_slice(&(f.index as u32).to_le_bytes());
    out.extend_from_slice(&(f.width as u32).to_le_bytes());
    out.extend_from_slice(&(f.height as u32).to_le_bytes());
    out.extend_from_slice(&f.png);
    out
}

async fn stream(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>, Query(q): Query<SessionQuery>) -> Result<Response, ApiError> {
    let s = state.session(q.session.as_deref())?;
    Ok(ws.on_upgrade(move |socket| stream_frames(socket, s)))
}

async fn stream_frames(mut socket: WebSocket, s: Arc<Session>) {
    let mut rx = s.shared.frames.subscribe();
    rx.mark_changed();
    let mut sent = 0u64;
    loop {
        s.shared.demand();
        tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
            changed = tokio::time::timeout(Duration::from_millis(500), rx.changed()) => {
                if matches!(changed, Ok(Err(_))) {
                    return;
                }
                let snap = rx.borrow_and_update().clone();
                if let Some(f) = snap {
                    if f.index > sent {
                        sent = f.index;
                        if socket.send(Message::Binary(stream_message(&f).into())).await.is_err() {
                            return;
                        }
                    }
                }
            }
        }
    }
}

async fn events(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>, Query(q): Query<SessionQuery>) -> Result<Response, ApiError> {
    let s = state.session(q.session.as_deref())?;
    Ok(ws.on_upgrade(move |socket| push_status(socket, s)))
}

async fn push_status(mut socket: WebSocket, s: Arc<Session>) {
    let mut rx = s.shared.status.subscribe();
    rx.mark_changed();
    loop {
        tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
            changed = rx.changed() => {
                if changed.is_err() {
                    return;
                }
                let text = serde_json::to_string(&*rx.borrow_and_update()).expect("status serializes");
                if socket.send(Message::Text(text.into())).await.is_err() {
                    return;
                }
            }
        }
    }
}
