//! Live simulation sessions exposed over HTTP and WebSocket.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{Command, Message, Payload, ProtocolError, Snapshot, PROTOCOL_VERSION};
pub use server::router;
pub use session::{Session, SessionConfig, SessionError, SessionInfo};

/// Serves `app` on `listener` until the process exits.
pub async fn serve(listener: tokio::net::TcpListener, app: axum::Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}
