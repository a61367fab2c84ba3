//! HTTP face of the engine: the flow-defined webhook entries, `/health`,
//! `/actions` and the `/admin/*` surface.
//!
//! Admin routes are open unless a shared secret is configured, in which case
//! requests must carry it in the `x-flowfill-admin-token` header.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::broadcast::error::RecvError;

use crate::engine::{Engine, EngineError, EngineOptions, ExecutionResult};
use crate::flow::{parse_flow, serialize_flow};
use crate::nodes::{HttpMethod, NodeRegistry};
use crate::protocol::{
    action_request_from_value, parse_action_request, serialize_action_response, serialize_error,
};

pub const ADMIN_TOKEN_ENV: &str = "FLOWFILL_ADMIN_TOKEN";
pub const ADMIN_TOKEN_HEADER: &str = "x-flowfill-admin-token";
pub const DEFAULT_BIND: &str = "127.0.0.1:5055";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogLevel {
    Error,
    Warn,
    #[default]
    Info,
    Debug,
}

impl LogLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            LogLevel::Error => "error",
            LogLevel::Warn => "warn",
            LogLevel::Info => "info",
            LogLevel::Debug => "debug",
        }
    }
}

impl FromStr for LogLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "error" => Ok(LogLevel::Error),
            "warn" => Ok(LogLevel::Warn),
            "info" => Ok(LogLevel::Info),
            "debug" => Ok(LogLevel::Debug),
            other => Err(format!(
                "unknown log level '{other}' (error, warn, info, debug)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub bind_address: String,
    pub flow_path: Option<std::path::PathBuf>,
    pub strict_templates: bool,
    pub drain_timeout_ms: u64,
    pub log_level: LogLevel,
    pub admin_token: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind_address: DEFAULT_BIND.into(),
            flow_path: None,
            strict_templates: false,
            drain_timeout_ms: 30_000,
            log_level: LogLevel::Info,
            admin_token: None,
        }
    }
}

impl ServerConfig {
    /// Parses `bind_address`; the port must be in 1-65535.
    pub fn socket_addr(&self) -> Result<SocketAddr, String> {
        let addr: SocketAddr = self
            .bind_address
            .parse()
            .map_err(|e| format!("invalid bind address '{}': {e}", self.bind_address))?;
        if addr.port() == 0 {
            return Err(format!(
                "invalid bind address '{}': port must be 1-65535",
                self.bind_address
            ));
        }
        Ok(addr)
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            strict_templates: self.strict_templates,
            drain_timeout: Duration::from_millis(self.drain_timeout_ms),
            ..EngineOptions::default()
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    started: Instant,
    admin_token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, admin_token: Option<String>) -> Self {
        AppState {
            engine,
            started: Instant::now(),
            admin_token: admin_token.filter(|t| !t.is_empty()).map(Into::into),
        }
    }

    /// A fresh engine with the standard palette.
    pub fn from_config(config: &ServerConfig) -> Self {
        let engine = Engine::new(NodeRegistry::standard(), config.engine_options());
        AppState::new(Arc::new(engine), config.admin_token.clone())
    }
}

pub fn router(state: AppState) -> Router {
    let admin = Router::new()
        .route("/admin/flow", get(get_flow).post(post_flow))
        .route("/admin/nodes", get(get_nodes))
        .route("/admin/debug", get(debug_stream))
        .route("/admin/inject", axum::routing::post(inject))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .route("/actions", get(actions))
        .merge(admin)
        .fallback(webhook)
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Serves until `shutdown` resolves.
pub async fn serve_with_shutdown<F>(
    listener: TcpListener,
    state: AppState,
    shutdown: F,
) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

fn json_bytes(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn json_error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({"error": message.to_string()}))).into_response()
}

async fn require_token(
    State(state): State<AppState>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    if let Some(expected) = &state.admin_token {
        let given = headers
            .get(ADMIN_TOKEN_HEADER)
            .and_then(|v| v.to_str().ok());
        if given != Some(expected.as_ref()) {
            return json_error(StatusCode::UNAUTHORIZED, "missing or wrong admin token");
        }
    }
    next.run(req).await
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "flow_version": state.engine.version(),
        "uptime_ms": state.started.elapsed().as_millis() as u64,
    }))
}

async fn actions(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(
        state
            .engine
            .current()
            .map(|f| f.actions().to_vec())
            .unwrap_or_default(),
    )
}

async fn get_flow(State(state): State<AppState>) -> Response {
    match state.engine.current() {
        Some(flow) => json_bytes(StatusCode::OK, serialize_flow(flow.document())),
        None => json_error(StatusCode::NOT_FOUND, "no flow deployed"),
    }
}

async fn post_flow(State(state): State<AppState>, body: Bytes) -> Response {
    let doc = match parse_flow(&body) {
        Ok(doc) => doc,
        Err(e) => return json_error(StatusCode::BAD_REQUEST, e),
    };
    match state.engine.deploy(&doc) {
        Ok(version) => (StatusCode::OK, Json(json!({"version": version}))).into_response(),
        Err(e) => (StatusCode::UNPROCESSABLE_ENTITY, Json(e.report)).into_response(),
    }
}

async fn get_nodes(State(state): State<AppState>) -> Response {
    Json(state.engine.registry().specs()).into_response()
}

async fn debug_stream(
    State(state): State<AppState>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.engine.debug_bus().subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Ok(event) => {
                let sse = Event::default()
                    .event("debug")
                    .id(event.seq.to_string())
                    .json_data(&event)
                    .expect("debug events serialize");
                Some((Ok(sse), rx))
            }
            // A consumer that fell behind is cut off rather than slowing
            // executions down.
            Err(RecvError::Lagged(n)) => {
                tracing::warn!(skipped = n, "debug consumer lagged; disconnecting");
                None
            }
            Err(RecvError::Closed) => None,
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

#[derive(Deserialize)]
struct InjectBody {
    entry: InjectEntry,
    request: Value,
}

#[derive(Deserialize)]
struct InjectEntry {
    #[serde(default = "post")]
    method: String,
    path: String,
}

fn post() -> String {
    "POST".into()
}

async fn inject(State(state): State<AppState>, body: Bytes) -> Response {
    let parsed: InjectBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return json_error(StatusCode::BAD_REQUEST, format!("MalformedBody: {e}")),
    };
    let Some(method) = HttpMethod::parse(&parsed.entry.method) else {
        return json_error(
            StatusCode::NOT_FOUND,
            format!("no entry for {} {}", parsed.entry.method, parsed.entry.path),
        );
    };
    let request = match action_request_from_value(parsed.request) {
        Ok(r) => r,
        Err(e) => return json_error(StatusCode::BAD_REQUEST, e),
    };
    match state
        .engine
        .inject(method, &parsed.entry.path, request)
        .await
    {
        Ok(result) => Json(result).into_response(),
        Err(EngineError::NoTerminalResponse(result)) => Json(*result).into_response(),
        Err(e @ EngineError::UnknownEntry { .. }) => json_error(StatusCode::NOT_FOUND, e),
    }
}

/// Every path not claimed above is looked up among the flow's `http_in`
/// entries.
async fn webhook(State(state): State<AppState>, method: Method, uri: Uri, body: Bytes) -> Response {
    let path = uri.path();
    let entry = HttpMethod::parse(method.as_str()).and_then(|m| {
        let flow = state.engine.current()?;
        flow.entry(m, path).map(|_| (m, flow))
    });
    let Some((method, flow)) = entry else {
        return json_bytes(
            StatusCode::NOT_FOUND,
            serialize_error("", &format!("no endpoint {method} {path}")),
        );
    };
    let request = match parse_action_request(&body) {
        Ok(r) => r,
        Err(e) => {
            let action = serde_json::from_slice::<Value>(&body)
                .ok()
                .and_then(|v| {
                    v.get("next_action")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                })
                .unwrap_or_default();
            return json_bytes(
                StatusCode::BAD_REQUEST,
                serialize_error(&action, &e.to_string()),
            );
        }
    };
    let action = request.next_action.clone();
    match state
        .engine
        .execute_on(flow, method, path, request, false)
        .await
    {
        Ok(ExecutionResult {
            terminal: Some(resp),
            ..
        }) => json_bytes(StatusCode::OK, serialize_action_response(&resp)),
        Ok(_) => unreachable!("execute_on returns NoTerminalResponse without a terminal"),
        Err(EngineError::NoTerminalResponse(result)) if result.branch_errors.is_empty() => {
            json_bytes(
                StatusCode::BAD_REQUEST,
                serialize_error(
                    &action,
                    &format!("no flow branch handles action '{action}'"),
                ),
            )
        }
        Err(EngineError::NoTerminalResponse(result)) => {
            let detail: Vec<String> = result
                .branch_errors
                .iter()
                .map(|b| format!("{}: {}", b.node_id, b.error))
                .collect();
            tracing::warn!(%action, errors = ?detail, "execution failed");
            json_bytes(
                StatusCode::INTERNAL_SERVER_ERROR,
                serialize_error(
                    &action,
                    &format!("NoTerminalResponse: {}", detail.join("; ")),
                ),
            )
        }
        Err(e @ EngineError::UnknownEntry { .. }) => json_bytes(
            StatusCode::NOT_FOUND,
            serialize_error(&action, &e.to_string()),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_address_checks_port() {
        let mut c = ServerConfig::default();
        assert_eq!(c.socket_addr().unwrap().port(), 5055);
        c.bind_address = "127.0.0.1:0".into();
        assert!(c.socket_addr().is_err());
        c.bind_address = "127.0.0.1:70000".into();
        assert!(c.socket_addr().is_err());
        c.bind_address = "localhost".into();
        assert!(c.socket_addr().is_err());
    }

    #[test]
    fn log_levels_parse() {
        assert_eq!("WARN".parse::<LogLevel>().unwrap(), LogLevel::Warn);
        assert!("trace".parse::<LogLevel>().is_err());
        assert_eq!(LogLevel::default().as_str(), "info");
    }
}
