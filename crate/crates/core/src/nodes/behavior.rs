use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::*;
use super::message::MessageObject;
use crate::protocol::{ActionRequest, ActionResponse, BotResponse, Button, Event, ProtocolError};
use crate::template::{resolve_path, stringify, RenderMode, TemplateError, TemplateString};

/// Largest response body `http_request` accepts.
pub const MAX_BODY_BYTES: usize = 8 * 1024 * 1024;

/// A failure that aborts the branch it happened on.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("NoUrl: {0}")]
    NoUrl(String),
    #[error("InvalidUrl: {0}")]
    InvalidUrl(String),
    #[error("Timeout: no response within {0} ms")]
    Timeout(u64),
    #[error("ConnectionFailed: {0}")]
    ConnectionFailed(String),
    #[error("BodyTooLarge: response exceeds {0} bytes")]
    BodyTooLarge(usize),
    #[error("InvalidResponse: {0}")]
    InvalidResponse(#[from] ProtocolError),
    #[error("NotActionResponse: {0}")]
    NotActionResponse(String),
    #[error("BadTarget: {0}")]
    BadTarget(String),
    #[error("Cancelled: {0}")]
    Cancelled(String),
}

/// A branch failure together with the notes raised before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub error: NodeError,
    pub notes: Vec<Note>,
}

impl From<NodeError> for Failure {
    fn from(error: NodeError) -> Self {
        Failure {
            error,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Info,
    Warning,
    Error,
}

/// Diagnostic raised by a node; the engine turns it into a debug event.
#[derive(Debug, Clone, PartialEq)]
pub struct Note {
    pub level: Level,
    pub body: Value,
}

impl Note {
    fn warning(body: Value) -> Self {
        Note {
            level: Level::Warning,
            body,
        }
    }
}

/// What a node produced for one input message.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outcome {
    /// `(output port, message)` pairs in port order.
    pub outputs: Vec<(usize, MessageObject)>,
    pub notes: Vec<Note>,
    /// Set only by `http_response`.
    pub terminal: Option<ActionResponse>,
}

impl Outcome {
    pub fn forward(msg: MessageObject) -> Self {
        Outcome {
            outputs: vec![(0, msg)],
            ..Outcome::default()
        }
    }

    fn with_notes(msg: MessageObject, notes: Vec<Note>) -> Self {
        Outcome {
            outputs: vec![(0, msg)],
            notes,
            terminal: None,
        }
    }
}

/// Hands out message ids unique within one execution.
#[derive(Debug)]
pub struct MsgIds {
    prefix: String,
    next: AtomicU64,
}

impl MsgIds {
    pub fn new(prefix: impl Into<String>) -> Self {
        MsgIds {
            prefix: prefix.into(),
            next: AtomicU64::new(1),
        }
    }

    pub fn fresh(&self) -> String {
        let n = self.next.fetch_add(1, Ordering::Relaxed);
        format!("{}.{n}", self.prefix)
    }
}

/// Per-execution state shared by the nodes of one run.
pub struct NodeContext<'a> {
    pub request: &'a ActionRequest,
    /// Global override: render every template strictly.
    pub strict_templates: bool,
    pub ids: &'a MsgIds,
    pub http: &'a reqwest::Client,
}

fn render_into(
    tpl: &TemplateString,
    tree: &Value,
    mode: RenderMode,
    strict: bool,
    notes: &mut Vec<Note>,
) -> Result<String, NodeError> {
    if strict {
        return Ok(tpl.render(tree, mode, true)?);
    }
    let r = tpl.render_lenient(tree, mode);
    if !r.missing.is_empty() {
        notes.push(Note::warning(json!({
            "warning": "template placeholders resolved to nothing",
            "template": tpl.source(),
            "missing": r.missing.iter().map(ToString::to_string).collect::<Vec<_>>(),
        })));
    }
    Ok(r.text)
}

pub fn init_node(request: &ActionRequest, msg_id: String) -> MessageObject {
    MessageObject {
        payload: request.raw.clone(),
        action: Some(request.next_action.clone()),
        slots: request.tracker.slots.clone(),
        request: Some(request.raw.clone()),
        ..MessageObject::new(msg_id)
    }
}

pub fn finish_node(msg: &MessageObject) -> ActionResponse {
    ActionResponse {
        events: msg.collected_events.clone(),
        responses: msg.collected_responses.clone(),
    }
}

fn rule_matches(rule: &SwitchRule, found: Option<&Value>) -> bool {
    let expected = rule.value.as_deref().unwrap_or_default();
    let as_text = |v: &Value| match v {
        Value::Null | Value::Array(_) | Value::Object(_) => None,
        scalar => Some(stringify(scalar)),
    };
    match rule.operator {
        Operator::IsSet => found.is_some_and(|v| !v.is_null()),
        Operator::Equals => found.and_then(as_text).is_some_and(|t| t == expected),
        Operator::NotEquals => !found.and_then(as_text).is_some_and(|t| t == expected),
        Operator::Contains => match found {
            Some(Value::String(s)) => s.contains(expected),
            Some(Value::Array(items)) => items.iter().filter_map(as_text).any(|t| t == expected),
            Some(Value::Object(m)) => m.contains_key(expected),
            _ => false,
        },
    }
}

/// Routes `msg` to the ports of matching rules.
///
/// Without `check_all` only the first match fires. With it, every matching
/// port gets a copy; copies after the first get fresh ids. The `otherwise`
/// port (the last one) fires only when nothing matched; an unmatched message
/// without `otherwise` is dropped with a warning.
pub fn switch_node(cfg: &SwitchConfig, msg: MessageObject, ids: &MsgIds) -> Outcome {
    let tree = msg.to_tree();
    let found = resolve_path(&tree, &cfg.property);
    let mut ports: Vec<usize> = Vec::new();
    for (i, rule) in cfg.rules.iter().enumerate() {
        if rule_matches(rule, found) {
            ports.push(i);
            if !cfg.check_all {
                break;
            }
        }
    }
    if ports.is_empty() && cfg.otherwise {
        ports.push(cfg.rules.len());
    }
    if ports.is_empty() {
        return Outcome {
            notes: vec![Note::warning(json!({
                "warning": "no switch rule matched; message dropped",
                "property": cfg.property.to_string(),
                "value": found.cloned(),
            }))],
            ..Outcome::default()
        };
    }
    let mut outputs = Vec::with_capacity(ports.len());
    let copies: Vec<_> = ports[1..]
        .iter()
        .map(|p| (*p, msg.clone_as(ids.fresh())))
        .collect();
    outputs.push((ports[0], msg));
    outputs.extend(copies);
    Outcome {
        outputs,
        ..Outcome::default()
    }
}

pub fn template_node(
    cfg: &TemplateConfig,
    mut msg: MessageObject,
    strict_override: bool,
) -> Result<Outcome, Failure> {
    let mut notes = Vec::new();
    let text = render_into(
        &cfg.template,
        &msg.to_tree(),
        cfg.mode,
        cfg.strict || strict_override,
        &mut notes,
    )?;
    match msg.assign(&cfg.target, Value::String(text)) {
        Ok(()) => Ok(Outcome::with_notes(msg, notes)),
        Err(e) => Err(Failure {
            error: NodeError::BadTarget(e),
            notes,
        }),
    }
}

pub fn sendtext_node(
    cfg: &SendTextConfig,
    mut msg: MessageObject,
    strict_override: bool,
) -> Result<Outcome, NodeError> {
    let mut notes = Vec::new();
    let text = render_into(
        &cfg.text,
        &msg.to_tree(),
        RenderMode::Raw,
        cfg.strict || strict_override,
        &mut notes,
    )?;
    msg.collected_responses.push(BotResponse::text(text));
    Ok(Outcome::with_notes(msg, notes))
}

pub fn sendbuttons_node(
    cfg: &SendButtonsConfig,
    mut msg: MessageObject,
    strict_override: bool,
) -> Result<Outcome, Failure> {
    let strict = cfg.strict || strict_override;
    let tree = msg.to_tree();
    let mut notes = Vec::new();
    let text = render_into(&cfg.text, &tree, RenderMode::Raw, strict, &mut notes)?;
    let buttons = cfg
        .buttons
        .iter()
        .map(|b| {
            Ok(Button {
                title: render_into(&b.title, &tree, RenderMode::Raw, strict, &mut notes)?,
                payload: render_into(&b.payload, &tree, RenderMode::Raw, strict, &mut notes)?,
            })
        })
        .collect::<Result<Vec<_>, NodeError>>()?;
    match BotResponse::buttons(text, buttons) {
        Ok(resp) => msg.collected_responses.push(resp),
        Err(e) => {
            return Err(Failure {
                error: e.into(),
                notes,
            })
        }
    }
    Ok(Outcome::with_notes(msg, notes))
}

pub fn sendextra_node(
    cfg: &SendExtraConfig,
    mut msg: MessageObject,
    strict_override: bool,
) -> Result<Outcome, NodeError> {
    let mut notes = Vec::new();
    let media = render_into(
        &cfg.media,
        &msg.to_tree(),
        RenderMode::Raw,
        cfg.strict || strict_override,
        &mut notes,
    )?;
    if media.is_empty() {
        notes.push(Note::warning(
            json!({"warning": "media locator rendered empty"}),
        ));
    }
    msg.collected_responses.push(match cfg.kind {
        ExtraKind::Image => BotResponse::Image { media },
        ExtraKind::Attachment => BotResponse::Attachment { media },
    });
    Ok(Outcome::with_notes(msg, notes))
}

pub fn setslots_node(
    cfg: &SetSlotsConfig,
    mut msg: MessageObject,
    strict_override: bool,
) -> Result<Outcome, NodeError> {
    let strict = cfg.strict || strict_override;
    let tree = msg.to_tree();
    let mut notes = Vec::new();
    let mut events = Vec::with_capacity(cfg.assignments.len());
    for a in &cfg.assignments {
        let value = match &a.value {
            None => Value::Null,
            Some(tpl) => Value::String(render_into(
                tpl,
                &tree,
                RenderMode::Raw,
                strict,
                &mut notes,
            )?),
        };
        events.push(Event::slot_set(a.name.clone(), value));
    }
    msg.collected_events.extend(events);
    Ok(Outcome::with_notes(msg, notes))
}

/// Passes the message through and publishes it (or one path of it).
pub fn debug_node(cfg: &DebugConfig, msg: MessageObject) -> Outcome {
    let tree = msg.to_tree();
    let body = match (&cfg.select, &cfg.path) {
        (DebugSelect::Path, Some(path)) => match resolve_path(&tree, path) {
            Some(v) => v.clone(),
            None => json!({"absent": true, "path": path.to_string()}),
        },
        _ => tree,
    };
    Outcome::with_notes(
        msg,
        vec![Note {
            level: Level::Info,
            body,
        }],
    )
}

fn classify(err: reqwest::Error, timeout_ms: u64) -> NodeError {
    if err.is_timeout() {
        NodeError::Timeout(timeout_ms)
    } else if err.is_builder() {
        NodeError::InvalidUrl(err.to_string())
    } else {
        let mut detail = err.to_string();
        let mut source = std::error::Error::source(&err);
        while let Some(s) = source {
            detail.push_str(": ");
            detail.push_str(&s.to_string());
            source = s.source();
        }
        NodeError::ConnectionFailed(detail)
    }
}

/// Performs the configured call and stores status and body in the message.
///
/// Non-2xx statuses are data: the body still replaces the payload.
pub async fn http_request_node(
    cfg: &HttpRequestConfig,
    mut msg: MessageObject,
    ctx: &NodeContext<'_>,
) -> Result<Outcome, NodeError> {
    let mut notes = Vec::new();
    let tree = msg.to_tree();
    let url = match (&cfg.url_from, &cfg.url) {
        (UrlSource::Config, Some(tpl)) => render_into(
            tpl,
            &tree,
            cfg.url_mode,
            cfg.strict || ctx.strict_templates,
            &mut notes,
        )?,
        (UrlSource::Config, None) => return Err(NodeError::NoUrl("config has no url".into())),
        (UrlSource::Payload, _) => match &msg.payload {
            Value::String(s) => s.clone(),
            other => {
                return Err(NodeError::NoUrl(format!(
                    "payload must be a URL string, found {}",
                    stringify(other)
                )))
            }
        },
    };
    let parsed =
        reqwest::Url::parse(&url).map_err(|e| NodeError::InvalidUrl(format!("{url}: {e}")))?;
    let method = match cfg.method {
        HttpMethod::Post => reqwest::Method::POST,
        HttpMethod::Put => reqwest::Method::PUT,
        HttpMethod::Patch => reqwest::Method::PATCH,
        HttpMethod::Delete => reqwest::Method::DELETE,
        HttpMethod::Get => reqwest::Method::GET,
    };
    let mut req = ctx
        .http
        .request(method, parsed)
        .timeout(Duration::from_millis(cfg.timeout_ms));
    for (k, v) in &cfg.headers {
        req = req.header(k.as_str(), v.as_str());
    }
    if let Some(path) = &cfg.body_from {
        let body = resolve_path(&tree, path).cloned().unwrap_or(Value::Null);
        req = req
            .header("content-type", "application/json")
            .body(serde_json::to_vec(&body).expect("json values always serialize"));
    }
    let mut resp = req.send().await.map_err(|e| classify(e, cfg.timeout_ms))?;
    let status = resp.status().as_u16();
    let mut body = Vec::new();
    while let Some(chunk) = resp
        .chunk()
        .await
        .map_err(|e| classify(e, cfg.timeout_ms))?
    {
        if body.len() + chunk.len() > MAX_BODY_BYTES {
            return Err(NodeError::BodyTooLarge(MAX_BODY_BYTES));
        }
        body.extend_from_slice(&chunk);
    }
    msg.status_code = Some(status);
    msg.payload = serde_json::from_slice(&body)
        .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&body).into_owned()));
    Ok(Outcome::with_notes(msg, notes))
}
