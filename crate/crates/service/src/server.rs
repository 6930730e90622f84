//! HTTP and WebSocket front end.
//!
//! | route           | method | body                              |
//! |-----------------|--------|-----------------------------------|
//! | `/predict`      | POST   | trial record in, prediction out   |
//! | `/health`       | GET    | status, checkpoint and config hash |
//! | `/experts`      | GET    | loaded expert registry             |
//! | `/session`      | WS     | see [`crate::session`]             |

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use magnet::datagen::TrialRecord;
use magnet::model::MagnetModel;
use serde::Serialize;

use crate::session::{ServerMessage, Session};

/// Shared, read-only after start-up.
pub struct AppState {
    pub model: MagnetModel,
    /// SHA-256 of the loaded checkpoint; `None` for an untrained model.
    pub checkpoint_hash: Option<String>,
    pub config_hash: String,
    next_session: AtomicU64,
}

impl AppState {
    pub fn new(model: MagnetModel, checkpoint_hash: Option<String>) -> magnet::Result<Self> {
        let config_hash = model.config_hash()?;
        Ok(Self { model, checkpoint_hash, config_hash, next_session: AtomicU64::new(1) })
    }
}

#[derive(Serialize)]
struct Health<'a> {
    status: &'static str,
    checkpoint_hash: Option<&'a str>,
    config_hash: &'a str,
    dim: usize,
    experts: Vec<&'a str>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .route("/experts", get(experts))
        .route("/session", get(session))
        .with_state(state)
}

fn json_bytes(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error_response(status: StatusCode, code: &str, msg: String) -> Response {
    let body = serde_json::to_vec(&ServerMessage::error(code, msg)).unwrap_or_default();
    json_bytes(status, body)
}

/// Serialized exactly as `serde_json::to_vec(&model.predict(trial))`.
async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let trial: TrialRecord = match serde_json::from_slice(&body) {
        Ok(t) => t,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "malformed", e.to_string()),
    };
    let result = tokio::task::spawn_blocking(move || {
        state.model.predict(&trial).and_then(|p| Ok(serde_json::to_vec(&p)?))
    })
    .await;
    match result {
        Ok(Ok(bytes)) => json_bytes(StatusCode::OK, bytes),
        Ok(Err(e)) => error_response(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    Json(Health {
        status: "ok",
        checkpoint_hash: state.checkpoint_hash.as_deref(),
        config_hash: &state.config_hash,
        dim: state.model.registry.dim(),
        experts: state.model.registry.ids(),
    })
    .into_response()
}

async fn experts(State(state): State<Arc<AppState>>) -> Response {
    match state.model.registry.to_json() {
        Ok(text) => json_bytes(StatusCode::OK, text.into_bytes()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

async fn session(State(state): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| run_session(socket, state))
}

async fn run_session(mut socket: WebSocket, state: Arc<AppState>) {
    let id = state.next_session.fetch_add(1, Ordering::Relaxed);
    let mut session = Session::new(id);
    tracing::info!(session = id, "session opened");
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => match String::from_utf8(b.to_vec()) {
                Ok(t) => t,
                Err(_) => {
                    if send(&mut socket, &ServerMessage::error("malformed", "binary frame is not UTF-8")).await.is_err() {
                        break;
                    }
                    continue;
                }
            },
            Message::Close(_) => break,
            _ => continue,
        };
        // the session moves into the blocking pool for the model call and back
        let st = state.clone();
        let joined = tokio::task::spawn_blocking(move || {
            let reply = session.handle_text(&text, &st.model);
            (session, reply)
        })
        .await;
        let reply = match joined {
            Ok((s, reply)) => {
                session = s;
                reply
            }
            Err(e) => {
                tracing::error!(session = id, "handler panicked: {e}");
                break;
            }
        };
        if let Some(reply) = reply {
            if send(&mut socket, &reply).await.is_err() {
                break;
            }
        }
    }
    tracing::info!(session = id, "session closed");
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> Result<(), axum::Error> {
    let text = serde_json::to_string(msg).expect("server messages serialize");
    socket.send(Message::Text(text.into())).await
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
