use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::FlowDocument;
use crate::nodes::{BuildError, HttpMethod, NodeRegistry};

/// Paths the server answers itself; flows cannot claim them.
pub const RESERVED_PATHS: &[&str] = &["/health", "/actions"];
pub const ADMIN_PREFIX: &str = "/admin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCode {
    UnknownType,
    DuplicateId,
    DanglingWire,
    Cycle,
    ArityMismatch,
    BadConfig,
    EndpointConflict,
    /// Warning only.
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub code: IssueCode,
    pub node_id: Option<String>,
    pub detail: String,
}

/// Problems found in a flow. No errors means the flow can be deployed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_deployable(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn has_error(&self, code: IssueCode) -> bool {
        self.errors.iter().any(|e| e.code == code)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.errors.is_empty() && self.warnings.is_empty() {
            return writeln!(f, "ok: no problems found");
        }
        for (label, list) in [("error", &self.errors), ("warning", &self.warnings)] {
            for i in list {
                let code = serde_json::to_value(i.code).expect("codes serialize");
                let code = code.as_str().unwrap_or_default();
                match &i.node_id {
                    Some(id) => writeln!(f, "{label}[{code}] node '{id}': {}", i.detail)?,
                    None => writeln!(f, "{label}[{code}]: {}", i.detail)?,
                }
            }
        }
        write!(
            f,
            "{} error(s), {} warning(s)",
            self.errors.len(),
            self.warnings.len()
        )?;
        writeln!(f)
    }
}

struct Collector {
    items: Vec<(usize, ValidationIssue)>,
}

impl Collector {
    fn push(&mut self, index: usize, code: IssueCode, node_id: &str, detail: String) {
        self.items.push((
            index,
            ValidationIssue {
                code,
                node_id: Some(node_id.to_string()),
                detail,
            },
        ));
    }

    /// Node file order first, then code.
    fn finish(mut self) -> Vec<ValidationIssue> {
        self.items.sort_by_key(|(i, issue)| (*i, issue.code));
        self.items.into_iter().map(|(_, i)| i).collect()
    }
}

/// Checks every document and node invariant. Never fails: problems are
/// returned as data, ordered by node file order then code.
pub fn validate_flow(doc: &FlowDocument, registry: &NodeRegistry) -> ValidationReport {
    let mut errors = Collector { items: Vec::new() };
    let mut warnings = Collector { items: Vec::new() };
    let vars = doc.vars();

    let mut first_index: HashMap<&str, usize> = HashMap::new();
    for (i, node) in doc.nodes.iter().enumerate() {
        if first_index.contains_key(node.id.as_str()) {
            errors.push(
                i,
                IssueCode::DuplicateId,
                &node.id,
                format!("id '{}' is already used", node.id),
            );
        } else {
            first_index.insert(&node.id, i);
        }
    }

    let mut endpoints: HashMap<(HttpMethod, String), &str> = HashMap::new();
    for (i, node) in doc.nodes.iter().enumerate() {
        let spec = registry.spec(&node.node_type);
        if spec.is_none() {
            errors.push(
                i,
                IssueCode::UnknownType,
                &node.id,
                format!("unknown node type '{}'", node.node_type),
            );
        }
        if spec.is_some() {
            if let Err(BuildError::BadConfig(msgs)) =
                registry.build(&node.node_type, &node.config, &vars)
            {
                errors.push(i, IssueCode::BadConfig, &node.id, msgs.join("; "));
            }
            if let Some(expected) = registry.output_arity(&node.node_type, &node.config) {
                if node.wires.len() != expected {
                    errors.push(
                        i,
                        IssueCode::ArityMismatch,
                        &node.id,
                        format!(
                            "{} output port(s) wired, type '{}' has {expected}",
                            node.wires.len(),
                            node.node_type
                        ),
                    );
                }
            }
        }
        for target in node.wires.iter().flatten() {
            match first_index.get(target.as_str()) {
                None => errors.push(
                    i,
                    IssueCode::DanglingWire,
                    &node.id,
                    format!("wire to missing node '{target}'"),
                ),
                Some(&t) => {
                    let target_node = &doc.nodes[t];
                    if registry
                        .spec(&target_node.node_type)
                        .is_some_and(|s| s.input_arity == 0)
                    {
                        errors.push(
                            i,
                            IssueCode::ArityMismatch,
                            &node.id,
                            format!("wire into '{target}', which takes no input"),
                        );
                    }
                }
            }
        }
        if node.node_type == "http_in" {
            let method = node
                .config
                .get("method")
                .and_then(|m| m.as_str())
                .and_then(HttpMethod::parse);
            let path = node.config.get("path").and_then(|p| p.as_str());
            if let (Some(method), Some(path)) = (method, path) {
                let reserved = RESERVED_PATHS.contains(&path)
                    || path == ADMIN_PREFIX
                    || path.starts_with("/admin/");
                if reserved {
                    errors.push(
                        i,
                        IssueCode::EndpointConflict,
                        &node.id,
                        format!("{path} is served by the server itself"),
                    );
                } else if let Some(other) = endpoints.insert((method, path.to_string()), &node.id) {
                    errors.push(
                        i,
                        IssueCode::EndpointConflict,
                        &node.id,
                        format!("{method} {path} is already handled by '{other}'"),
                    );
                }
            }
        }
    }

    // Wire graph over first occurrences of each id.
    let edges: Vec<Vec<usize>> = doc
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if first_index.get(n.id.as_str()) != Some(&i) {
                return Vec::new();
            }
            n.wires
                .iter()
                .flatten()
                .filter_map(|t| first_index.get(t.as_str()).copied())
                .collect()
        })
        .collect();

    for component in cycles(&edges) {
        let first = *component.iter().min().expect("components are non-empty");
        let mut members: Vec<_> = component.iter().copied().collect();
        members.sort_unstable();
        let names: Vec<_> = members.iter().map(|&m| doc.nodes[m].id.as_str()).collect();
        errors.push(
            first,
            IssueCode::Cycle,
            &doc.nodes[first].id,
            format!("wires form a cycle through {}", names.join(" -> ")),
        );
    }

    let mut reached = vec![false; doc.nodes.len()];
    let mut queue: VecDeque<usize> = doc
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.node_type == "http_in")
        .map(|(i, _)| i)
        .collect();
    while let Some(i) = queue.pop_front() {
        if std::mem::replace(&mut reached[i], true) {
            continue;
        }
        queue.extend(edges[i].iter().copied().filter(|&t| !reached[t]));
    }
    for (i, node) in doc.nodes.iter().enumerate() {
        if !reached[i] {
            warnings.push(
                i,
                IssueCode::Unreachable,
                &node.id,
                "not reachable from any http_in node".into(),
            );
        }
    }

    ValidationReport {
        errors: errors.finish(),
        warnings: warnings.finish(),
    }
}

/// Strongly connected components that contain a cycle (Tarjan).
fn cycles(edges: &[Vec<usize>]) -> Vec<HashSet<usize>> {
    struct State<'a> {
        edges: &'a [Vec<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        found: Vec<HashSet<usize>>,
    }

    fn visit(s: &mut State<'_>, v: usize) {
        s.index[v] = Some(s.next);
        s.low[v] = s.next;
        s.next += 1;
        s.stack.push(v);
        s.on_stack[v] = true;
        for &w in &s.edges[v] {
            match s.index[w] {
                None => {
                    visit(s, w);
                    s.low[v] = s.low[v].min(s.low[w]);
                }
                Some(wi) if s.on_stack[w] => s.low[v] = s.low[v].min(wi),
                Some(_) => {}
            }
        }
        if Some(s.low[v]) == s.index[v] {
            let mut component = HashSet::new();
            while let Some(w) = s.stack.pop() {
                s.on_stack[w] = false;
                component.insert(w);
                if w == v {
                    break;
                }
            }
            if component.len() > 1 || s.edges[v].contains(&v) {
                s.found.push(component);
            }
        }
    }

    let n = edges.len();
    let mut s = State {
        edges,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        found: Vec::new(),
    };
    for v in 0..n {
        if s.index[v].is_none() {
            visit(&mut s, v);
        }
    }
    s.found
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowDocument, NodeInstance};
    use serde_json::{json, Value};

    fn node(id: &str, ty: &str, config: Value, wires: &[&[&str]]) -> NodeInstance {
        NodeInstance {
            id: id.into(),
            node_type: ty.into(),
            label: None,
            config,
            wires: wires
                .iter()
                .map(|p| p.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }

    fn entry(id: &str, path: &str, next: &str) -> NodeInstance {
        node(
            id,
            "http_in",
            json!({"method":"POST","path":path}),
            &[&[next]],
        )
    }

    fn codes(r: &ValidationReport) -> Vec<(IssueCode, Option<&str>)> {
        r.errors
            .iter()
            .map(|e| (e.code, e.node_id.as_deref()))
            .collect()
    }

    #[test]
    fn minimal_flow_is_valid() {
        let mut doc = FlowDocument::new("ok");
        doc.nodes = vec![
            entry("in", "/webhook", "init"),
            node("init", "init", json!({}), &[&["fin"]]),
            node("fin", "finish", json!({}), &[&["out"]]),
            node("out", "http_response", json!({}), &[]),
        ];
        let r = validate_flow(&doc, &NodeRegistry::standard());
        assert!(r.is_deployable(), "{r}");
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn duplicate_ids() {
        let mut doc = FlowDocument::new("dup");
        doc.nodes = vec![
            node("n1", "debug", json!({}), &[&[]]),
            node("n1", "debug", json!({}), &[&[]]),
        ];
        let r = validate_flow(&doc, &NodeRegistry::standard());
        assert_eq!(codes(&r), vec![(IssueCode::DuplicateId, Some("n1"))]);
    }

    #[test]
    fn cycles_are_reported_on_first_member() {
        let mut doc = FlowDocument::new("cyc");
        doc.nodes = vec![
            node("n1", "debug", json!({}), &[&["n2"]]),
            node("n2", "debug", json!({}), &[&["n1"]]),
            node("self", "debug", json!({}), &[&["self"]]),
        ];
        let r = validate_flow(&doc, &NodeRegistry::standard());
        assert_eq!(
            codes(&r),
            vec![
                (IssueCode::Cycle, Some("n1")),
                (IssueCode::Cycle, Some("self"))
            ]
        );
        assert_eq!(r.warnings.len(), 3);
    }

    #[test]
    fn wiring_errors() {
        let mut doc = FlowDocument::new("w");
        doc.nodes = vec![
            entry("in", "/webhook", "nope"),
            node("d", "debug", json!({}), &[&["in"], &[]]),
            node("mystery", "teleport", json!({}), &[]),
        ];
        let r = validate_flow(&doc, &NodeRegistry::standard());
        assert_eq!(
            codes(&r),
            vec![
                (IssueCode::DanglingWire, Some("in")),
                (IssueCode::ArityMismatch, Some("d")),
                (IssueCode::ArityMismatch, Some("d")),
                (IssueCode::UnknownType, Some("mystery")),
            ]
        );
    }

    #[test]
    fn endpoint_conflicts() {
        let mut doc = FlowDocument::new("e");
        doc.nodes = vec![
            entry("a", "/webhook", "r"),
            entry("b", "/webhook", "r"),
            entry("c", "/health", "r"),
            entry("d", "/admin/flow", "r"),
            node("r", "http_response", json!({}), &[]),
        ];
        let r = validate_flow(&doc, &NodeRegistry::standard());
        assert_eq!(
            codes(&r),
            vec![
                (IssueCode::EndpointConflict, Some("b")),
                (IssueCode::EndpointConflict, Some("c")),
                (IssueCode::EndpointConflict, Some("d")),
            ]
        );
    }

    #[test]
    fn bad_config_mentions_field() {
        let mut doc = FlowDocument::new("b");
        doc.nodes = vec![node("t", "template", json!({"template":"{{"}), &[&[]])];
        let r = validate_flow(&doc, &NodeRegistry::standard());
        assert_eq!(codes(&r), vec![(IssueCode::BadConfig, Some("t"))]);
        assert!(r.errors[0].detail.contains("UnbalancedBraces"));
    }

    #[test]
    fn report_serializes_with_snake_case_codes() {
        let mut doc = FlowDocument::new("b");
        doc.nodes = vec![node("x", "nope", json!({}), &[])];
        let r = validate_flow(&doc, &NodeRegistry::standard());
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["errors"][0]["code"], json!("unknown_type"));
        assert_eq!(v["warnings"][0]["code"], json!("unreachable"));
        let back: ValidationReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
