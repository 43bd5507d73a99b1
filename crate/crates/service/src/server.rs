//! HTTP routes and the WebSocket endpoint.
//!
//! - `GET /healthz` liveness
//! - `GET /session` session info with the latest snapshot
//! - `POST /session/reset` back to the scenario's initial state
//! - `GET /ws` telemetry stream and command channel
//! - anything else is served from the UI directory when one is configured

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde_json::json;
use tokio::sync::{broadcast, mpsc};
use tower_http::services::ServeDir;

use crate::protocol::{error_message, Command, Message, PROTOCOL_VERSION};
use crate::session::{Queued, Reply, Session};

#[derive(Clone)]
pub struct AppState {
    pub session: Arc<Session>,
}

pub fn router(session: Arc<Session>, ui_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/healthz", get(healthz))
        .route("/session", get(session_info))
        .route("/session/reset", post(reset))
        .route("/ws", get(ws))
        .with_state(AppState { session });
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": PROTOCOL_VERSION }))
}

async fn session_info(State(s): State<AppState>) -> Response {
    Json(s.session.info()).into_response()
}

async fn reset(State(s): State<AppState>) -> Response {
    match s.session.command(Command::Reset).await {
        Ok(Ok(())) => Json(json!({ "reset": true, "run": s.session.info().run })).into_response(),
        Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "reset": false, "error": e }))).into_response(),
        Err(e) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "reset": false, "error": e.to_string() }))).into_response(),
    }
}

async fn ws(upgrade: WebSocketUpgrade, State(s): State<AppState>) -> Response {
    upgrade.on_upgrade(move |socket| client(socket, s.session))
}

async fn client(socket: WebSocket, session: Arc<Session>) {
    let _guard = session.register_subscriber();
    let (mut sink, mut stream) = socket.split();
    let mut telemetry = session.subscribe();
    let (reply_tx, mut reply_rx) = mpsc::channel::<String>(64);
    let writer = tokio::spawn(async move {
        loop {
            let text = tokio::select! {
                biased;
                r = reply_rx.recv() => match r {
                    Some(t) => t,
                    None => break,
                },
                r = telemetry.recv() => match r {
                    Ok(t) => t.to_string(),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::debug!("subscriber lagged, dropped {n} frames");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            };
            if sink.send(WsMessage::Text(text.into())).await.is_err() {
                break;
            }
        }
    });
    let mut local_seq = 0u64;
    let mut reject = |code: &str, msg: String, ack: Option<u64>| {
        local_seq += 1;
        error_message(local_seq, 0.0, code, msg, ack).to_json()
    };
    while let Some(Ok(frame)) = stream.next().await {
        match frame {
            WsMessage::Text(text) => match Message::parse_command(&text) {
                Ok((seq, command)) => {
                    let q = Queued { seq, command, reply: Reply::Socket(reply_tx.clone()) };
                    if session.submit(q).await.is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = reply_tx.send(reject(e.code(), e.to_string(), Message::peek_seq(&text))).await;
                }
            },
            WsMessage::Binary(_) => {
                let _ = reply_tx.send(reject("malformed", "binary frames are not supported".into(), None)).await;
            }
            WsMessage::Close(_) => break,
            _ => {}
        }
    }
    drop(reply_tx);
    writer.abort();
}
