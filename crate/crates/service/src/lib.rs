//! Render service: model metadata, presets, one-shot PNG renders and a
//! WebSocket frame stream.
//!
//! Stream protocol: the client sends text messages
//! `{"seq": k, "mode": m, "params": {...}}`; each reply is a binary message
//! holding `seq` as 8 little-endian bytes followed by the PNG. Failures come
//! back as text `{"seq": k, "error": ..., "field"|"stage": ...}`. Replies keep
//! request order within a connection.

use std::net::SocketAddr;
use std::sync::Arc;

use avatar_core::head_model::{OffsetSpace, JOINT_NAMES};
use avatar_core::params::{params_from_value, presets};
use avatar_core::pipeline::{Avatar, FrameRequest, RenderMode};
use avatar_core::Error;
use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::net::TcpListener;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServiceConfig {
    pub port: u16,
    /// Side of frames rendered when a request gives no size.
    pub frame_size: usize,
    pub max_frame_size: usize,
    pub default_mode: RenderMode,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { port: 8080, frame_size: 128, max_frame_size: 512, default_mode: RenderMode::Depth }
    }
}

impl ServiceConfig {
    pub fn validate(&self, avatar: &Avatar) -> avatar_core::Result<()> {
        if self.port == 0 {
            return Err(Error::Config("port must be in 1..=65535".into()));
        }
        if self.frame_size > self.max_frame_size {
            return Err(Error::Config(format!(
                "frame size {} exceeds the maximum {}",
                self.frame_size, self.max_frame_size
            )));
        }
        avatar.network.check_frame(self.frame_size, self.frame_size).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone)]
struct AppState {
    avatar: Arc<Avatar>,
    config: ServiceConfig,
}

pub fn router(avatar: Arc<Avatar>, config: ServiceConfig) -> avatar_core::Result<Router> {
    config.validate(&avatar)?;
    let state = AppState { avatar, config };
    Ok(Router::new()
        .route("/v1/model", get(model_info))
        .route("/v1/presets", get(list_presets))
        .route("/v1/render", post(render))
        .route("/v1/stream", get(stream))
        .with_state(state))
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}

/// Bind `0.0.0.0:port` and serve.
pub async fn run(avatar: Arc<Avatar>, config: ServiceConfig) -> Result<(), Box<dyn std::error::Error>> {
    let app = router(avatar, config)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve(listener, app).await?;
    Ok(())
}

fn dims(v: &Value, cfg: &ServiceConfig) -> avatar_core::Result<(usize, usize)> {
    let get = |k: &str| -> avatar_core::Result<Option<usize>> {
        match v.get(k) {
            None | Some(Value::Null) => Ok(None),
            Some(x) => x
                .as_u64()
                .map(|n| Some(n as usize))
                .ok_or_else(|| Error::Param { field: k.into(), msg: "expected a positive integer".into() }),
        }
    };
    let size = get("size")?;
    let w = get("width")?.or(size).unwrap_or(cfg.frame_size);
    let h = get("height")?.or(size).unwrap_or(cfg.frame_size);
    if w > cfg.max_frame_size || h > cfg.max_frame_size {
        return Err(Error::Param {
            field: "size".into(),
            msg: format!("{w}x{h} exceeds the maximum frame size {}", cfg.max_frame_size),
        });
    }
    Ok((w, h))
}

/// A frame request from JSON. Parameter fields are read from `params` when
/// present, otherwise from the top level.
pub fn parse_request(v: &Value, cfg: &ServiceConfig) -> avatar_core::Result<FrameRequest> {
    let mode = match v.get("mode") {
        None | Some(Value::Null) => cfg.default_mode,
        Some(Value::String(s)) => s.parse().map_err(|e: Error| Error::Param { field: "mode".into(), msg: e.to_string() })?,
        Some(_) => return Err(Error::Param { field: "mode".into(), msg: "expected a string".into() }),
    };
    let params = params_from_value(v.get("params").unwrap_or(v))?;
    let source = match v.get("source") {
        None | Some(Value::Null) => None,
        Some(s) => Some(params_from_value(s).map_err(|e| prefix_field(e, "source"))?),
    };
    let space = match v.get("offset_space") {
        None | Some(Value::Null) => OffsetSpace::Canonical,
        Some(Value::String(s)) => s.parse().map_err(|e: Error| Error::Param { field: "offset_space".into(), msg: e.to_string() })?,
        Some(_) => return Err(Error::Param { field: "offset_space".into(), msg: "expected a string".into() }),
    };
    let (width, height) = dims(v, cfg)?;
    Ok(FrameRequest { params, source, mode, width, height, space })
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Param { field, msg } => Error::Param { field: format!("{prefix}.{field}"), msg },
        other => other,
    }
}

/// Status and JSON body for a failed request.
pub fn classify(e: &Error) -> (StatusCode, Value) {
    match e {
        Error::Param { field, .. } => (StatusCode::BAD_REQUEST, json!({ "error": e.to_string(), "field": field })),
        Error::Stage { stage, .. } => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string(), "stage": stage })),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string(), "stage": "render" })),
    }
}

/// Parse, render and encode off the async executor.
async fn render_png(state: &AppState, v: Value) -> avatar_core::Result<Vec<u8>> {
    let avatar = Arc::clone(&state.avatar);
    let cfg = state.config;
    tokio::task::spawn_blocking(move || {
        let req = parse_request(&v, &cfg)?;
        let frame = avatar.render(&req)?;
        frame.image.encode_png().map_err(Error::at_stage("encode"))
    })
    .await
    .unwrap_or_else(|e| Err(Error::Stage { stage: "render".into(), source: Box::new(Error::Invariant(e.to_string())) }))
}

async fn model_info(State(s): State<AppState>) -> Json<Value> {
    let m = &s.avatar.model;
    Json(json!({
        "n_vertices": m.n_vertices(),
        "n_coarse": m.n_coarse(),
        "shape_dims": m.shape_dims(),
        "expr_dims": m.expr_dims(),
        "joints": JOINT_NAMES[..m.n_joints()].to_vec(),
        "pose_dims": m.pose_dims(),
        "frame_size": s.config.frame_size,
        "max_frame_size": s.config.max_frame_size,
        "frame_multiple": s.avatar.network.frame_multiple(),
        "modes": RenderMode::ALL.map(RenderMode::name),
        "default_mode": s.config.default_mode.name(),
    }))
}

async fn list_presets(State(s): State<AppState>) -> Json<Value> {
    let list: Vec<Value> = presets(&s.avatar.model).into_iter().map(|(name, p)| json!({ "name": name, "params": p })).collect();
    Json(json!({ "presets": list }))
}

async fn render(State(s): State<AppState>, body: Bytes) -> Response {
    let v: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({ "error": e.to_string(), "field": "body" }))).into_response(),
    };
    match render_png(&s, v).await {
        Ok(png) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Err(e) => {
            let (code, body) = classify(&e);
            (code, Json(body)).into_response()
        }
    }
}

async fn stream(State(s): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| handle_stream(s, socket))
}

/// Encode a stream reply: `seq` little-endian then the PNG bytes.
pub fn frame_message(seq: u64, png: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + png.len());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(png);
    out
}

async fn handle_stream(state: AppState, mut socket: WebSocket) {
    // Messages are handled one at a time, so replies keep request order.
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Binary(b) => match String::from_utf8(b) {
                Ok(t) => t,
                Err(_) => continue,
            },
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<Value>(&text) {
            Err(e) => Message::Text(json!({ "seq": null, "error": e.to_string(), "field": "message" }).to_string()),
            Ok(v) => match v.get("seq").and_then(Value::as_u64) {
                None => Message::Text(json!({ "seq": null, "error": "missing integer seq", "field": "seq" }).to_string()),
                Some(seq) => match render_png(&state, v).await {
                    Ok(png) => Message::Binary(frame_message(seq, &png)),
                    Err(e) => {
                        let (_, mut body) = classify(&e);
                        body["seq"] = json!(seq);
                        Message::Text(body.to_string())
                    }
                },
            },
        };
        if socket.send(reply).await.is_err() {
            break;
        }
    }
}
