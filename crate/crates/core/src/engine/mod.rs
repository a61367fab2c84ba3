//! Compiles flow documents and runs them.
//!
//! One execution walks the graph with a FIFO frontier seeded at the entry
//! `http_in` node. A node's outputs are queued in port order, then wire
//! order. When a port fans out to `k` targets the first gets the message and
//! the others get deep copies with fresh ids. The first message to reach an
//! `http_response` node becomes the terminal response; failures only abort
//! their own branch.
//!
//! Deploys swap an `Arc<CompiledFlow>` atomically. Executions hold the
//! version they started on until they finish; a retired version that is
//! still busy after the drain timeout has its stragglers cancelled.

mod debug;

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;
use tokio::sync::{watch, Notify};

pub use debug::{DebugBus, DebugEvent};

use crate::flow::{list_declared_actions, validate_flow, FlowDocument, ValidationReport};
use crate::nodes::{
    Failure, HttpMethod, Level, MessageObject, MsgIds, NodeContext, NodeError, NodeKind,
    NodeRegistry,
};
use crate::protocol::{ActionRequest, ActionResponse};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("CompileError: flow has {} error(s)", report.errors.len())]
pub struct CompileError {
    pub report: ValidationReport,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("UnknownEntry: no http_in node for {method} {path}")]
    UnknownEntry { method: String, path: String },
    #[error("NoTerminalResponse: no message reached an http_response node")]
    NoTerminalResponse(Box<ExecutionResult>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledNode {
    pub id: String,
    pub label: Option<String>,
    pub kind: NodeKind,
    /// Target node indexes per output port.
    pub wires: Vec<Vec<usize>>,
}

/// A validated, immutable flow ready to execute.
#[derive(Debug)]
pub struct CompiledFlow {
    pub version_id: u64,
    pub entry_points: BTreeMap<(HttpMethod, String), usize>,
    pub topo_order: Vec<usize>,
    pub nodes: Vec<CompiledNode>,
    document: FlowDocument,
    actions: Vec<String>,
    in_flight: AtomicUsize,
    idle: Notify,
    cancel: watch::Sender<bool>,
}

impl CompiledFlow {
    pub fn document(&self) -> &FlowDocument {
        &self.document
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    pub fn entry(&self, method: HttpMethod, path: &str) -> Option<usize> {
        self.entry_points.get(&(method, path.to_string())).copied()
    }
}

/// Validates and compiles `doc`; every config is decoded and every template
/// parsed here, once.
pub fn compile(doc: &FlowDocument, registry: &NodeRegistry) -> Result<CompiledFlow, CompileError> {
    let report = validate_flow(doc, registry);
    if !report.is_deployable() {
        return Err(CompileError { report });
    }
    let vars = doc.vars();
    let index: BTreeMap<&str, usize> = doc
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    let mut entry_points = BTreeMap::new();
    for (i, n) in doc.nodes.iter().enumerate() {
        let kind = registry
            .build(&n.node_type, &n.config, &vars)
            .expect("validated configs build");
        if let NodeKind::HttpIn(cfg) = &kind {
            entry_points.insert((cfg.method, cfg.path.clone()), i);
        }
        nodes.push(CompiledNode {
            id: n.id.clone(),
            label: n.label.clone(),
            kind,
            wires: n
                .wires
                .iter()
                .map(|port| port.iter().map(|t| index[t.as_str()]).collect())
                .collect(),
        });
    }
    let topo_order = topological_order(&nodes);
    Ok(CompiledFlow {
        version_id: 0,
        entry_points,
        topo_order,
        nodes,
        document: doc.clone(),
        actions: list_declared_actions(doc),
        in_flight: AtomicUsize::new(0),
        idle: Notify::new(),
        cancel: watch::channel(false).0,
    })
}

/// Kahn's algorithm, ties broken by file order.
fn topological_order(nodes: &[CompiledNode]) -> Vec<usize> {
    let mut indegree = vec![0usize; nodes.len()];
    for n in nodes {
        for &t in n.wires.iter().flatten() {
            indegree[t] += 1;
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &t in nodes[i].wires.iter().flatten() {
            indegree[t] -= 1;
            if indegree[t] == 0 {
                ready.insert(t);
            }
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchError {
    pub node_id: String,
    pub msg_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionResult {
    pub version_id: u64,
    pub terminal: Option<ActionResponse>,
    pub branch_errors: Vec<BranchError>,
    pub debug_events: Vec<DebugEvent>,
    pub duration_ms: u64,
    /// Node evaluations performed.
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    /// Render every template strictly, whatever the node says.
    pub strict_templates: bool,
    pub drain_timeout: Duration,
    /// Events a debug consumer may fall behind before it is dropped.
    pub debug_capacity: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            strict_templates: false,
            drain_timeout: Duration::from_millis(30_000),
            debug_capacity: 1024,
        }
    }
}

static EXECUTIONS: AtomicU64 = AtomicU64::new(0);

/// Decrements the in-flight count of its flow when dropped.
struct InFlight(Arc<CompiledFlow>);

impl InFlight {
    fn new(flow: Arc<CompiledFlow>) -> Self {
        flow.in_flight.fetch_add(1, Ordering::SeqCst);
        InFlight(flow)
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        if self.0.in_flight.fetch_sub(1, Ordering::SeqCst) == 1 {
            self.0.idle.notify_waiters();
        }
    }
}

pub struct Engine {
    registry: NodeRegistry,
    current: RwLock<Option<Arc<CompiledFlow>>>,
    retired: Mutex<Vec<Weak<CompiledFlow>>>,
    bus: DebugBus,
    http: reqwest::Client,
    options: EngineOptions,
}

impl Engine {
    pub fn new(registry: NodeRegistry, options: EngineOptions) -> Self {
        Engine {
            registry,
            current: RwLock::new(None),
            retired: Mutex::new(Vec::new()),
            bus: DebugBus::new(options.debug_capacity),
            http: reqwest::Client::new(),
            options,
        }
    }

    pub fn registry(&self) -> &NodeRegistry {
        &self.registry
    }

    pub fn debug_bus(&self) -> &DebugBus {
        &self.bus
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    /// The live version, if any flow was deployed.
    pub fn current(&self) -> Option<Arc<CompiledFlow>> {
        self.current.read().expect("lock poisoned").clone()
    }

    pub fn version(&self) -> u64 {
        self.current().map_or(0, |f| f.version_id)
    }

    /// Compiles and atomically activates `doc`, returning the new version.
    ///
    /// On error the previous version keeps serving.
    pub fn deploy(&self, doc: &FlowDocument) -> Result<u64, CompileError> {
        let mut flow = compile(doc, &self.registry)?;
        let retired = {
            let mut current = self.current.write().expect("lock poisoned");
            flow.version_id = current.as_ref().map_or(0, |f| f.version_id) + 1;
            current.replace(Arc::new(flow))
        };
        let version = self.version();
        if let Some(old) = retired {
            tracing::info!(
                version,
                retired = old.version_id,
                in_flight = old.in_flight(),
                "deployed flow"
            );
            self.retire(old);
        } else {
            tracing::info!(version, "deployed flow");
        }
        Ok(version)
    }

    fn retire(&self, old: Arc<CompiledFlow>) {
        let mut retired = self.retired.lock().expect("lock poisoned");
        retired.retain(|w| w.strong_count() > 0);
        retired.push(Arc::downgrade(&old));
        drop(retired);
        let timeout = self.options.drain_timeout;
        if let Ok(handle) = tokio::runtime::Handle::try_current() {
            handle.spawn(drain(old, timeout));
        }
    }

    /// In-flight executions on versions that are no longer live.
    pub fn retired_in_flight(&self) -> usize {
        self.retired
            .lock()
            .expect("lock poisoned")
            .iter()
            .filter_map(Weak::upgrade)
            .map(|f| f.in_flight())
            .sum()
    }

    /// Runs the live flow from the `http_in` node matching `method` and `path`.
    pub async fn execute(
        &self,
        method: HttpMethod,
        path: &str,
        request: ActionRequest,
    ) -> Result<ExecutionResult, EngineError> {
        let flow = self.current().ok_or_else(|| unknown_entry(method, path))?;
        self.execute_on(flow, method, path, request, false).await
    }

    /// Same as [`Engine::execute`], with debug events flagged as manual.
    pub async fn inject(
        &self,
        method: HttpMethod,
        path: &str,
        request: ActionRequest,
    ) -> Result<ExecutionResult, EngineError> {
        let flow = self.current().ok_or_else(|| unknown_entry(method, path))?;
        self.execute_on(flow, method, path, request, true).await
    }

    /// Runs a specific compiled flow, live or not.
    pub async fn execute_on(
        &self,
        flow: Arc<CompiledFlow>,
        method: HttpMethod,
        path: &str,
        request: ActionRequest,
        manual: bool,
    ) -> Result<ExecutionResult, EngineError> {
        let start = flow
            .entry(method, path)
            .ok_or_else(|| unknown_entry(method, path))?;
        let guard = InFlight::new(flow);
        let result = self.run(&guard.0, start, request, manual).await;
        drop(guard);
        if result.terminal.is_none() {
            return Err(EngineError::NoTerminalResponse(Box::new(result)));
        }
        Ok(result)
    }

    async fn run(
        &self,
        flow: &CompiledFlow,
        start: usize,
        request: ActionRequest,
        manual: bool,
    ) -> ExecutionResult {
        let began = Instant::now();
        let exec = EXECUTIONS.fetch_add(1, Ordering::Relaxed) + 1;
        let ids = MsgIds::new(format!("x{exec}"));
        let ctx = NodeContext {
            request: &request,
            strict_templates: self.options.strict_templates,
            ids: &ids,
            http: &self.http,
        };
        let mut cancel = flow.cancel.subscribe();

        let mut first = MessageObject::new(ids.fresh());
        first.payload = request.raw.clone();
        first.request = Some(request.raw.clone());

        let mut queue: VecDeque<(usize, MessageObject)> = VecDeque::from([(start, first)]);
        let mut terminal: Option<ActionResponse> = None;
        let mut branch_errors = Vec::new();
        let mut events = Vec::new();
        let mut evaluations = 0;

        while let Some((idx, msg)) = queue.pop_front() {
            let node = &flow.nodes[idx];
            let msg_id = msg.msg_id.clone();
            evaluations += 1;
            let cancelled = || {
                Failure::from(NodeError::Cancelled(
                    "drain timeout elapsed after redeploy".into(),
                ))
            };
            let outcome = if *cancel.borrow() {
                Err(cancelled())
            } else {
                tokio::select! {
                    out = node.kind.run(msg, &ctx) => out,
                    _ = cancel.wait_for(|c| *c) => Err(cancelled()),
                }
            };
            let out = match outcome {
                Ok(out) => out,
                Err(failure) => {
                    for note in failure.notes {
                        events.push(
                            self.bus
                                .publish(&node.id, &msg_id, note.level, note.body, manual),
                        );
                    }
                    let error = failure.error.to_string();
                    tracing::debug!(node = %node.id, %error, "branch failed");
                    events.push(self.bus.publish(
                        &node.id,
                        &msg_id,
                        Level::Error,
                        json!({"error": error}),
                        manual,
                    ));
                    branch_errors.push(BranchError {
                        node_id: node.id.clone(),
                        msg_id,
                        error,
                    });
                    continue;
                }
            };
            for note in out.notes {
                events.push(
                    self.bus
                        .publish(&node.id, &msg_id, note.level, note.body, manual),
                );
            }
            if let Some(resp) = out.terminal {
                if terminal.is_none() {
                    terminal = Some(resp);
                } else {
                    events.push(self.bus.publish(
                        &node.id,
                        &msg_id,
                        Level::Warning,
                        json!({"warning": "additional terminal response ignored", "response": resp}),
                        manual,
                    ));
                }
            }
            for (port, msg) in out.outputs {
                let Some(targets) = node.wires.get(port) else {
                    continue;
                };
                let Some((&head, rest)) = targets.split_first() else {
                    continue;
                };
                let copies: Vec<_> = rest
                    .iter()
                    .map(|&t| (t, msg.clone_as(ids.fresh())))
                    .collect();
                queue.push_back((head, msg));
                queue.extend(copies);
            }
        }

        ExecutionResult {
            version_id: flow.version_id,
            terminal,
            branch_errors,
            debug_events: events,
            duration_ms: began.elapsed().as_millis() as u64,
            evaluations,
        }
    }
}

fn unknown_entry(method: HttpMethod, path: &str) -> EngineError {
    EngineError::UnknownEntry {
        method: method.to_string(),
        path: path.to_string(),
    }
}

async fn drain(old: Arc<CompiledFlow>, timeout: Duration) {
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        let idle = old.idle.notified();
        if old.in_flight() == 0 {
            tracing::debug!(version = old.version_id, "retired flow drained");
            return;
        }
        tokio::select! {
            _ = idle => {}
            _ = tokio::time::sleep_until(deadline) => {
                tracing::warn!(version = old.version_id, in_flight = old.in_flight(), "drain timeout; cancelling stragglers");
                let _ = old.cancel.send(true);
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{parse_flow, IssueCode};
    use std::collections::BTreeMap as Map;

    fn engine() -> Engine {
        Engine::new(NodeRegistry::standard(), EngineOptions::default())
    }

    fn linear(extra: &str) -> FlowDocument {
        let body = format!(
            r#"{{"name":"t","nodes":[
            {{"id":"in","type":"http_in","config":{{"method":"POST","path":"/webhook"}},"wires":[["init"]]}},
            {{"id":"init","type":"init","wires":[["say"]]}},
            {{"id":"say","type":"sendtext","config":{{"text":"{extra}"}},"wires":[["fin"]]}},
            {{"id":"fin","type":"finish","wires":[["out"]]}},
            {{"id":"out","type":"http_response"}}]}}"#
        );
        parse_flow(body.as_bytes()).unwrap()
    }

    fn request(action: &str) -> ActionRequest {
        ActionRequest::new(action, "t", Map::new())
    }

    #[test]
    fn compile_collects_entries_and_order() {
        let flow = compile(&linear("hi"), &NodeRegistry::standard()).unwrap();
        assert_eq!(flow.entry(HttpMethod::Post, "/webhook"), Some(0));
        assert_eq!(flow.topo_order, vec![0, 1, 2, 3, 4]);
        let empty = compile(&FlowDocument::new("e"), &NodeRegistry::standard()).unwrap();
        assert!(empty.entry_points.is_empty());
    }

    #[test]
    fn compile_rejects_bad_templates() {
        let err = compile(&linear("{{"), &NodeRegistry::standard()).unwrap_err();
        assert_eq!(err.report.errors[0].code, IssueCode::BadConfig);
        assert_eq!(err.report.errors[0].node_id.as_deref(), Some("say"));
    }

    #[tokio::test]
    async fn executes_linear_flow() {
        let e = engine();
        assert_eq!(e.deploy(&linear("hi {{action}}")).unwrap(), 1);
        let r = e
            .execute(HttpMethod::Post, "/webhook", request("a1"))
            .await
            .unwrap();
        assert_eq!(
            r.terminal,
            Some(ActionResponse {
                events: vec![],
                responses: vec![crate::protocol::BotResponse::text("hi a1")]
            })
        );
        assert_eq!(r.evaluations, 5);
        assert!(r.branch_errors.is_empty());
    }

    #[tokio::test]
    async fn unknown_entry_and_no_flow() {
        let e = engine();
        assert!(matches!(
            e.execute(HttpMethod::Post, "/webhook", request("a")).await,
            Err(EngineError::UnknownEntry { .. })
        ));
        e.deploy(&linear("x")).unwrap();
        assert!(matches!(
            e.inject(HttpMethod::Post, "/other", request("a")).await,
            Err(EngineError::UnknownEntry { .. })
        ));
    }

    #[tokio::test]
    async fn failed_deploy_keeps_version() {
        let e = engine();
        e.deploy(&linear("x")).unwrap();
        assert!(e.deploy(&linear("{{")).is_err());
        assert_eq!(e.version(), 1);
        assert_eq!(e.deploy(&linear("y")).unwrap(), 2);
    }

    #[tokio::test]
    async fn fan_out_clones_and_first_terminal_wins() {
        let doc = parse_flow(
            br#"{"name":"fan","nodes":[
            {"id":"in","type":"http_in","config":{"method":"POST","path":"/webhook"},"wires":[["init"]]},
            {"id":"init","type":"init","wires":[["a","b"]]},
            {"id":"a","type":"sendtext","config":{"text":"A"},"wires":[["fa"]]},
            {"id":"b","type":"sendtext","config":{"text":"B"},"wires":[["fb"]]},
            {"id":"fa","type":"finish","wires":[["out"]]},
            {"id":"fb","type":"finish","wires":[["out"]]},
            {"id":"out","type":"http_response"}]}"#,
        )
        .unwrap();
        let e = engine();
        e.deploy(&doc).unwrap();
        let r = e
            .execute(HttpMethod::Post, "/webhook", request("x"))
            .await
            .unwrap();
        // branch A only sees its own emission
        assert_eq!(
            r.terminal.unwrap().responses,
            vec![crate::protocol::BotResponse::text("A")]
        );
        let warnings: Vec<_> = r
            .debug_events
            .iter()
            .filter(|d| d.level == Level::Warning)
            .collect();
        assert_eq!(warnings.len(), 1);
        let seqs: Vec<_> = r.debug_events.iter().map(|d| d.seq).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }

    #[tokio::test]
    async fn branch_error_without_terminal() {
        let doc = parse_flow(
            br#"{"name":"err","nodes":[
            {"id":"in","type":"http_in","config":{"method":"POST","path":"/webhook"},"wires":[["init"]]},
            {"id":"init","type":"init","wires":[["t"]]},
            {"id":"t","type":"template","config":{"template":"{{slots.none}}","strict":true},"wires":[["fin"]]},
            {"id":"fin","type":"finish","wires":[["out"]]},
            {"id":"out","type":"http_response"}]}"#,
        )
        .unwrap();
        let e = engine();
        e.deploy(&doc).unwrap();
        let Err(EngineError::NoTerminalResponse(r)) =
            e.execute(HttpMethod::Post, "/webhook", request("x")).await
        else {
            panic!("expected no terminal");
        };
        assert_eq!(r.branch_errors.len(), 1);
        assert_eq!(r.branch_errors[0].node_id, "t");
        assert!(r.branch_errors[0].error.starts_with("MissingValue"));
    }

    #[tokio::test]
    async fn inject_flags_events_manual() {
        let e = engine();
        let doc = parse_flow(
            br#"{"name":"d","nodes":[
            {"id":"in","type":"http_in","config":{"method":"POST","path":"/webhook"},"wires":[["init"]]},
            {"id":"init","type":"init","wires":[["dbg"]]},
            {"id":"dbg","type":"debug","config":{"select":"path","path":"action"},"wires":[["fin"]]},
            {"id":"fin","type":"finish","wires":[["out"]]},
            {"id":"out","type":"http_response"}]}"#,
        )
        .unwrap();
        e.deploy(&doc).unwrap();
        let live = e
            .execute(HttpMethod::Post, "/webhook", request("x"))
            .await
            .unwrap();
        let manual = e
            .inject(HttpMethod::Post, "/webhook", request("x"))
            .await
            .unwrap();
        assert!(!live.debug_events[0].manual);
        assert!(manual.debug_events[0].manual);
        assert_eq!(live.terminal, manual.terminal);
        assert_eq!(manual.debug_events[0].body, json!("x"));
    }

    #[tokio::test]
    async fn identity_path_yields_empty_response() {
        let doc = parse_flow(
            br#"{"name":"id","nodes":[
            {"id":"in","type":"http_in","config":{"method":"POST","path":"/webhook"},"wires":[["init"]]},
            {"id":"init","type":"init","wires":[["fin"]]},
            {"id":"fin","type":"finish","wires":[["out"]]},
            {"id":"out","type":"http_response"}]}"#,
        )
        .unwrap();
        let e = engine();
        e.deploy(&doc).unwrap();
        let r = e
            .execute(HttpMethod::Post, "/webhook", request("anything"))
            .await
            .unwrap();
        assert_eq!(r.terminal, Some(ActionResponse::default()));
    }
}
