//! Serves the pipeline commands over HTTP. Each `POST /v1/{command}` takes a
//! [`RunRequest`] and answers with the command's JSON output, or an
//! [`ErrorBody`] with a non-2xx status.

use std::net::SocketAddr;

use axum::extract::Path;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use e2t_core::pipeline::api::{dispatch, ErrorBody, RunRequest, COMMANDS};
use e2t_core::{Error, ErrorKind};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/commands", get(commands))
        .route("/v1/{command}", post(run))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn commands() -> Json<Value> {
    Json(json!({ "commands": COMMANDS }))
}

fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::Config => StatusCode::BAD_REQUEST,
        ErrorKind::Data | ErrorKind::Transfer => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Numeric | ErrorKind::Io | ErrorKind::Contract => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_response(e: &Error) -> Response {
    let body = ErrorBody::from(e);
    (status_for(body.kind), Json(body)).into_response()
}

async fn run(Path(command): Path<String>, Json(req): Json<RunRequest>) -> Response {
    if !COMMANDS.contains(&command.as_str()) {
        let body = ErrorBody {
            kind: ErrorKind::Config,
            message: format!("unknown command {command:?}"),
            exit_code: ErrorKind::Config.exit_code(),
        };
        return (StatusCode::NOT_FOUND, Json(body)).into_response();
    }
    tracing::info!(%command, "request");
    // Training runs are CPU-bound; keep them off the async workers.
    let cmd = command.clone();
    let result = tokio::task::spawn_blocking(move || dispatch(&cmd, &req)).await;
    match result {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => {
            tracing::error!(%command, error = %e, "command failed");
            error_response(&e)
        }
        Err(join) => error_response(&Error::Contract(format!("worker panicked: {join}"))),
    }
}

/// Serves on an already bound listener until the process exits.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

/// Binds `addr` (port 0 picks a free one) and serves in the background.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(listener))))
}
