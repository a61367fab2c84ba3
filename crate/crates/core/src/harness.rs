//! Desk-scale demo rig: stub servers standing in for the weather and
//! OpenSearch APIs, and a scenario runner that replays scripted action
//! requests against a webhook.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use percent_encoding::percent_decode_str;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::engine::{Engine, EngineOptions};
use crate::flow::{parse_flow, FlowDocument};
use crate::nodes::NodeRegistry;
use crate::server::{self, AppState};
use crate::template::{resolve_path, Path};

pub const STUB_SCHEMA: &str = "flowfill-stub/1";
pub const SCENARIO_SCHEMA: &str = "flowfill-scenario/1";

/// The demo artifacts, compiled in so binaries and tests need no paths.
pub mod fixtures {
    pub const DEMO_FLOW: &str = include_str!("../fixtures/demo.flow.json");
    pub const WEATHER_STUB: &str = include_str!("../fixtures/stubs/weather.stub.json");
    pub const WIKI_STUB: &str = include_str!("../fixtures/stubs/wiki.stub.json");
    pub const DEMO_SCENARIO: &str = include_str!("../fixtures/demo.scenario.json");
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarnessError {
    #[error("MalformedBody: {0}")]
    MalformedBody(String),
    #[error("SchemaViolation: {0}")]
    SchemaViolation(String),
}

fn decode<T: serde::de::DeserializeOwned>(body: &[u8], schema: &str) -> Result<T, HarnessError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| HarnessError::MalformedBody(e.to_string()))?;
    match value.get("schema").and_then(Value::as_str) {
        Some(s) if s == schema => {}
        other => {
            return Err(HarnessError::SchemaViolation(format!(
                "schema must be '{schema}', found {other:?}"
            )))
        }
    }
    serde_path_to_error::deserialize(&value)
        .map_err(|e| HarnessError::SchemaViolation(format!("{}: {}", e.path(), e.inner())))
}

fn ok_status() -> u16 {
    200
}

fn root() -> String {
    "/".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    /// Any method when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default = "root")]
    pub path_prefix: String,
    /// Matched against the raw and the percent-decoded query string.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_contains: Option<String>,
    #[serde(default = "ok_status")]
    pub status: u16,
    #[serde(default)]
    pub body: Value,
    #[serde(default)]
    pub delay_ms: u64,
}

impl StubRule {
    fn matches(&self, method: &str, path: &str, query: &str) -> bool {
        if let Some(m) = &self.method {
            if !m.eq_ignore_ascii_case(method) {
                return false;
            }
        }
        if !path.starts_with(&self.path_prefix) {
            return false;
        }
        match &self.query_contains {
            None => true,
            Some(needle) => {
                query.contains(needle.as_str())
                    || percent_decode_str(query)
                        .decode_utf8_lossy()
                        .contains(needle.as_str())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct StubRules {
    #[serde(default)]
    pub name: String,
    pub rules: Vec<StubRule>,
}

pub fn parse_stub_rules(body: &[u8]) -> Result<StubRules, HarnessError> {
    let rules: StubRules = decode(body, STUB_SCHEMA)?;
    if rules.rules.is_empty() {
        return Err(HarnessError::SchemaViolation(
            "rules: at least one rule is required".into(),
        ));
    }
    Ok(rules)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub query: String,
}

struct StubState {
    rules: Vec<StubRule>,
    log: Mutex<Vec<RecordedRequest>>,
}

/// A running stub; stops when dropped.
pub struct StubHandle {
    pub addr: SocketAddr,
    state: Arc<StubState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl StubHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.log.lock().expect("lock poisoned").clone()
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for StubHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

pub async fn start_stub(rules: Vec<StubRule>, bind: SocketAddr) -> std::io::Result<StubHandle> {
    let listener = TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let state = Arc::new(StubState {
        rules,
        log: Mutex::new(Vec::new()),
    });
    let app = Router::new()
        .fallback(stub_handler)
        .with_state(state.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let shutdown = async {
            let _ = rx.await;
        };
        if let Err(e) = axum::serve(listener, app)
            .with_graceful_shutdown(shutdown)
            .await
        {
            tracing::error!(error = %e, "stub server failed");
        }
    });
    Ok(StubHandle {
        addr,
        state,
        shutdown: Some(tx),
        task: Some(task),
    })
}

async fn stub_handler(State(state): State<Arc<StubState>>, method: Method, uri: Uri) -> Response {
    let path = uri.path().to_string();
    let query = uri.query().unwrap_or_default().to_string();
    let rule = state
        .rules
        .iter()
        .find(|r| r.matches(method.as_str(), &path, &query))
        .cloned();
    state
        .log
        .lock()
        .expect("lock poisoned")
        .push(RecordedRequest {
            method: method.to_string(),
            path,
            query,
        });
    let Some(rule) = rule else {
        return StatusCode::NOT_FOUND.into_response();
    };
    if rule.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(rule.delay_ms)).await;
    }
    let status = StatusCode::from_u16(rule.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let body = serde_json::to_vec(&rule.body).expect("json values serialize");
    (
        status,
        [(header::CONTENT_TYPE, "application/json")],
        Bytes::from(body),
    )
        .into_response()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOp {
    Equals,
    Contains,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matcher {
    pub path: Path,
    pub op: MatchOp,
    #[serde(default)]
    pub value: Value,
}

impl Matcher {
    pub fn check(&self, body: Option<&Value>) -> (bool, Option<Value>) {
        let actual = body.and_then(|b| resolve_path(b, &self.path)).cloned();
        let pass = match (self.op, &actual) {
            (MatchOp::Absent, a) => a.is_none(),
            (MatchOp::Equals, Some(a)) => *a == self.value,
            (MatchOp::Contains, Some(Value::String(s))) => {
                self.value.as_str().is_some_and(|needle| s.contains(needle))
            }
            (MatchOp::Contains, Some(Value::Array(items))) => items.contains(&self.value),
            (MatchOp::Contains, Some(Value::Object(map))) => {
                self.value.as_str().is_some_and(|k| map.contains_key(k))
            }
            _ => false,
        };
        (pass, actual)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub name: String,
    pub request: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_status: Option<u16>,
    #[serde(default)]
    pub expect: Vec<Matcher>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub steps: Vec<Step>,
}

pub fn parse_scenario(body: &[u8]) -> Result<Scenario, HarnessError> {
    decode(body, SCENARIO_SCHEMA)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatcherResult {
    pub path: String,
    pub op: MatchOp,
    pub expected: Value,
    pub actual: Option<Value>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub name: String,
    pub status: Option<u16>,
    pub passed: bool,
    /// Transport failure; the step counts as errored.
    pub error: Option<String>,
    pub duration_ms: u64,
    pub matchers: Vec<MatcherResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    pub duration_ms: u64,
    pub steps: Vec<StepReport>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("reports serialize")
    }

    /// Human-readable summary, one line per step plus failing matchers.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.steps.iter().enumerate() {
            let verdict = match (&s.error, s.passed) {
                (Some(_), _) => "ERROR",
                (None, true) => "PASS",
                (None, false) => "FAIL",
            };
            let status = s.status.map_or_else(|| "-".to_string(), |c| c.to_string());
            out.push_str(&format!(
                "{verdict} step {} '{}' status={status} ({} ms)\n",
                i + 1,
                s.name,
                s.duration_ms
            ));
            if let Some(e) = &s.error {
                out.push_str(&format!("    {e}\n"));
            }
            for m in s.matchers.iter().filter(|m| !m.passed) {
                let actual = m
                    .actual
                    .as_ref()
                    .map_or_else(|| "<absent>".to_string(), Value::to_string);
                out.push_str(&format!(
                    "    {} {:?} {}: got {actual}\n",
                    m.path, m.op, m.expected
                ));
            }
        }
        let passed = self.steps.iter().filter(|s| s.passed).count();
        out.push_str(&format!(
            "{}: {passed}/{} steps passed in {} ms\n",
            if self.passed {
                "scenario passed"
            } else {
                "scenario FAILED"
            },
            self.steps.len(),
            self.duration_ms
        ));
        out
    }
}

/// Posts each step's request to `webhook_url` in order. A failing step
/// fails the scenario but later steps still run.
pub async fn run_scenario(scenario: &Scenario, webhook_url: &str) -> ScenarioReport {
    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .expect("default client builds");
    let began = Instant::now();
    let mut steps = Vec::with_capacity(scenario.steps.len());
    for step in &scenario.steps {
        steps.push(run_step(&client, step, webhook_url).await);
    }
    ScenarioReport {
        name: scenario.name.clone(),
        passed: steps.iter().all(|s| s.passed),
        duration_ms: began.elapsed().as_millis() as u64,
        steps,
    }
}

async fn run_step(client: &reqwest::Client, step: &Step, url: &str) -> StepReport {
    let began = Instant::now();
    let body = serde_json::to_vec(&step.request).expect("json values serialize");
    let sent = client
        .post(url)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body)
        .send()
        .await;
    let (status, parsed, error) = match sent {
        Ok(resp) => {
            let status = resp.status().as_u16();
            match resp.bytes().await {
                Ok(bytes) => (
                    Some(status),
                    serde_json::from_slice::<Value>(&bytes).ok(),
                    None,
                ),
                Err(e) => (Some(status), None, Some(format!("reading body: {e}"))),
            }
        }
        Err(e) => (None, None, Some(format!("transport: {e}"))),
    };
    let matchers: Vec<MatcherResult> = step
        .expect
        .iter()
        .map(|m| {
            let (passed, actual) = m.check(parsed.as_ref());
            MatcherResult {
                path: m.path.to_string(),
                op: m.op,
                expected: m.value.clone(),
                actual,
                passed,
            }
        })
        .collect();
    let status_ok = step.expect_status.is_none_or(|want| status == Some(want));
    StepReport {
        name: step.name.clone(),
        status,
        passed: error.is_none() && status_ok && matchers.iter().all(|m| m.passed),
        error,
        duration_ms: began.elapsed().as_millis() as u64,
        matchers,
    }
}

/// The demo flow with its API base URLs pointed at `weather_base` and
/// `wiki_base`.
pub fn demo_flow(weather_base: &str, wiki_base: &str) -> FlowDocument {
    let mut doc = parse_flow(fixtures::DEMO_FLOW.as_bytes()).expect("demo flow parses");
    doc.set_var("weather_base", Value::String(weather_base.into()));
    doc.set_var("wiki_base", Value::String(wiki_base.into()));
    doc
}

/// Both stubs plus a server running the demo flow, all on loopback
/// ephemeral ports.
pub struct DemoStack {
    pub weather: StubHandle,
    pub wiki: StubHandle,
    pub state: AppState,
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
}

impl DemoStack {
    pub async fn start(options: EngineOptions) -> std::io::Result<DemoStack> {
        let loopback: SocketAddr = ([127, 0, 0, 1], 0).into();
        let weather =
            parse_stub_rules(fixtures::WEATHER_STUB.as_bytes()).expect("weather stub parses");
        let wiki = parse_stub_rules(fixtures::WIKI_STUB.as_bytes()).expect("wiki stub parses");
        let weather = start_stub(weather.rules, loopback).await?;
        let wiki = start_stub(wiki.rules, loopback).await?;
        let engine = Engine::new(NodeRegistry::standard(), options);
        engine
            .deploy(&demo_flow(&weather.base_url(), &wiki.base_url()))
            .expect("demo flow compiles");
        let state = AppState::new(Arc::new(engine), None);
        let listener = TcpListener::bind(loopback).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let serving = state.clone();
        tokio::spawn(async move {
            let shutdown = async {
                let _ = rx.await;
            };
            if let Err(e) = server::serve_with_shutdown(listener, serving, shutdown).await {
                tracing::error!(error = %e, "demo server failed");
            }
        });
        Ok(DemoStack {
            weather,
            wiki,
            state,
            addr,
            shutdown: Some(tx),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn webhook_url(&self) -> String {
        format!("{}/webhook", self.base_url())
    }

    pub fn engine(&self) -> &Engine {
        &self.state.engine
    }
}

impl Drop for DemoStack {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fixtures_parse() {
        assert_eq!(
            parse_stub_rules(fixtures::WEATHER_STUB.as_bytes())
                .unwrap()
                .rules
                .len(),
            3
        );
        assert_eq!(
            parse_scenario(fixtures::DEMO_SCENARIO.as_bytes())
                .unwrap()
                .steps
                .len(),
            3
        );
        assert!(parse_stub_rules(br#"{"schema":"flowfill-stub/1","rules":[]}"#).is_err());
        assert!(matches!(
            parse_scenario(br#"{"schema":"other","steps":[]}"#),
            Err(HarnessError::SchemaViolation(_))
        ));
        assert!(matches!(
            parse_scenario(br#"{"schema":"flowfill-scenario/1","steps":[{"request":{},"expect":[{"path":"a..b","op":"equals"}]}]}"#),
            Err(HarnessError::SchemaViolation(_))
        ));
    }

    #[test]
    fn rules_match_decoded_queries() {
        let r = StubRule {
            method: Some("GET".into()),
            path_prefix: "/current".into(),
            query_contains: Some("query=New York".into()),
            status: 200,
            body: Value::Null,
            delay_ms: 0,
        };
        assert!(r.matches("get", "/current", "access_key=x&query=New%20York"));
        assert!(!r.matches("POST", "/current", "query=New%20York"));
        assert!(!r.matches("GET", "/other", "query=New%20York"));
    }

    #[test]
    fn matcher_ops() {
        let body = json!({"responses":[{"text":"see https://x/Berlin"}],"events":[]});
        let m = |path: &str, op, value| Matcher {
            path: path.parse().unwrap(),
            op,
            value,
        };
        assert!(
            m("responses.0.text", MatchOp::Contains, json!("Berlin"))
                .check(Some(&body))
                .0
        );
        assert!(m("events", MatchOp::Equals, json!([])).check(Some(&body)).0);
        assert!(
            m("responses.1", MatchOp::Absent, Value::Null)
                .check(Some(&body))
                .0
        );
        assert!(
            !m("responses.0", MatchOp::Absent, Value::Null)
                .check(Some(&body))
                .0
        );
        assert!(!m("events", MatchOp::Equals, json!([])).check(None).0);
    }

    #[tokio::test]
    async fn empty_scenario_passes() {
        let report = run_scenario(
            &Scenario {
                name: "e".into(),
                steps: vec![],
            },
            "http://127.0.0.1:9/x",
        )
        .await;
        assert!(report.passed);
        assert!(report.summary().contains("0/0"));
    }

    #[tokio::test]
    async fn unreachable_webhook_errors_the_step() {
        let s = parse_scenario(fixtures::DEMO_SCENARIO.as_bytes()).unwrap();
        // port 9 (discard) is closed on loopback in the test sandbox
        let report = run_scenario(&s, "http://127.0.0.1:9/webhook").await;
        assert!(!report.passed);
        assert_eq!(report.steps.len(), 3);
        assert!(report.steps.iter().all(|s| s.error.is_some()));
    }
}
