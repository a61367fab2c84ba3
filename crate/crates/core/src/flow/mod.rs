//! Flow documents: the deployable description of a node graph.
//!
//! A flow file is UTF-8 JSON tagged `"version": "flowfill/1"`:
//!
//! ```json
//! {
//!   "version": "flowfill/1",
//!   "name": "demo",
//!   "metadata": { "vars": { "base": "http://127.0.0.1:5101" } },
//!   "nodes": [
//!     { "id": "in", "type": "http_in", "config": { "method": "POST", "path": "/webhook" },
//!       "wires": [["init"]] }
//!   ]
//! }
//! ```
//!
//! Parsing only checks shape; [`validate_flow`] checks semantics.

pub mod schema;
mod validate;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use validate::{validate_flow, IssueCode, ValidationIssue, ValidationReport};

pub const FLOW_VERSION: &str = "flowfill/1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FlowError {
    #[error("MalformedBody: {0}")]
    MalformedBody(String),
    #[error("SchemaViolation at {path}: {detail}")]
    SchemaViolation { path: String, detail: String },
}

fn default_version() -> String {
    FLOW_VERSION.to_string()
}

fn empty_object() -> Value {
    Value::Object(Map::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDocument {
    #[serde(default = "default_version")]
    pub version: String,
    pub name: String,
    #[serde(default)]
    pub nodes: Vec<NodeInstance>,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInstance {
    pub id: String,
    #[serde(rename = "type")]
    pub node_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "empty_object")]
    pub config: Value,
    /// One list of target node ids per output port.
    #[serde(default)]
    pub wires: Vec<Vec<String>>,
}

impl FlowDocument {
    pub fn new(name: impl Into<String>) -> Self {
        FlowDocument {
            version: default_version(),
            name: name.into(),
            nodes: Vec::new(),
            metadata: Map::new(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&NodeInstance> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Flow variables from `metadata.vars`, or null.
    pub fn vars(&self) -> Value {
        self.metadata.get("vars").cloned().unwrap_or(Value::Null)
    }

    /// Sets one entry of `metadata.vars`.
    pub fn set_var(&mut self, key: &str, value: Value) {
        let vars = self
            .metadata
            .entry("vars")
            .or_insert_with(|| Value::Object(Map::new()));
        if !vars.is_object() {
            *vars = Value::Object(Map::new());
        }
        vars.as_object_mut()
            .expect("just made an object")
            .insert(key.to_string(), value);
    }
}

pub fn parse_flow(body: &[u8]) -> Result<FlowDocument, FlowError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| FlowError::MalformedBody(e.to_string()))?;
    let doc: FlowDocument =
        serde_path_to_error::deserialize(&value).map_err(|e| FlowError::SchemaViolation {
            path: e.path().to_string(),
            detail: e.inner().to_string(),
        })?;
    if doc.version != FLOW_VERSION {
        return Err(FlowError::SchemaViolation {
            path: "version".into(),
            detail: format!(
                "unsupported version '{}', expected '{FLOW_VERSION}'",
                doc.version
            ),
        });
    }
    Ok(doc)
}

/// Canonical form: nodes in order, object keys sorted, two-space indent,
/// trailing newline.
pub fn serialize_flow(doc: &FlowDocument) -> Vec<u8> {
    // `Value` maps are ordered by key, so going through `Value` sorts them.
    let value = serde_json::to_value(doc).expect("flow documents always serialize");
    let mut out = serde_json::to_vec_pretty(&value).expect("json values always serialize");
    out.push(b'\n');
    out
}

/// Actions a flow can execute.
///
/// `metadata.actions` wins when present; otherwise the `equals` rule values
/// of every switch testing the `action` property, in first-appearance order.
pub fn list_declared_actions(doc: &FlowDocument) -> Vec<String> {
    if let Some(Value::Array(list)) = doc.metadata.get("actions") {
        return list
            .iter()
            .map(|v| v.as_str().map_or_else(|| v.to_string(), str::to_string))
            .collect();
    }
    let mut actions: Vec<String> = Vec::new();
    for node in doc.nodes.iter().filter(|n| n.node_type == "switch") {
        let property = node.config.get("property").and_then(Value::as_str);
        if property.map(str::trim) != Some("action") {
            continue;
        }
        let rules = node.config.get("rules").and_then(Value::as_array);
        for rule in rules.into_iter().flatten() {
            if rule.get("operator").and_then(Value::as_str) != Some("equals") {
                continue;
            }
            if let Some(v) = rule.get("value").and_then(Value::as_str) {
                if !actions.iter().any(|a| a == v) {
                    actions.push(v.to_string());
                }
            }
        }
    }
    actions
}
