//! The built-in node palette.
//!
//! Each node type has a [`NodeSpec`] (served to editors) and a compiled form,
//! [`NodeKind`], built from its JSON config by [`NodeRegistry::build`].

mod behavior;
mod config;
mod message;

use serde::Serialize;
use serde_json::Value;

pub use behavior::{
    debug_node, finish_node, http_request_node, init_node, sendbuttons_node, sendextra_node,
    sendtext_node, setslots_node, switch_node, template_node, Failure, Level, MsgIds, NodeContext,
    NodeError, Note, Outcome, MAX_BODY_BYTES,
};
pub use config::{
    ButtonConfig, DebugConfig, DebugSelect, ExtraKind, HttpInConfig, HttpMethod, HttpRequestConfig,
    Operator, SendButtonsConfig, SendExtraConfig, SendTextConfig, SetSlotsConfig, SlotAssignment,
    SwitchConfig, SwitchRule, TemplateConfig, UrlSource,
};
pub use message::MessageObject;

use crate::flow::schema;
use crate::template::TemplateString;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Endpoint,
    Protocol,
    Logic,
    Transform,
    Network,
    Emit,
    Diagnostic,
}

/// Number of output ports of a node type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputArity {
    Fixed(usize),
    /// One port per rule plus one for `otherwise` when enabled.
    PerRule,
}

impl Serialize for OutputArity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            OutputArity::Fixed(n) => s.serialize_u64(*n as u64),
            OutputArity::PerRule => s.serialize_str("per_rule"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSpec {
    pub type_name: &'static str,
    pub input_arity: usize,
    pub output_arity: OutputArity,
    pub config_schema: Value,
    pub category: Category,
    pub description: &'static str,
}

/// Compiled, immutable node behavior.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    HttpIn(HttpInConfig),
    HttpResponse,
    Init,
    Finish,
    Switch(SwitchConfig),
    Template(TemplateConfig),
    HttpRequest(HttpRequestConfig),
    SendText(SendTextConfig),
    SendButtons(SendButtonsConfig),
    SendExtra(SendExtraConfig),
    SetSlots(SetSlotsConfig),
    Debug(DebugConfig),
}

/// Why a config could not be built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildError {
    UnknownType,
    BadConfig(Vec<String>),
}

/// The set of known node types.
#[derive(Debug, Clone)]
pub struct NodeRegistry {
    specs: Vec<NodeSpec>,
}

impl Default for NodeRegistry {
    fn default() -> Self {
        NodeRegistry::standard()
    }
}

impl NodeRegistry {
    pub fn standard() -> Self {
        use Category::*;
        let spec = |type_name, input_arity, output_arity, category, description| NodeSpec {
            type_name,
            input_arity,
            output_arity,
            config_schema: config::schema_for(type_name),
            category,
            description,
        };
        let one = OutputArity::Fixed(1);
        let mut specs = vec![
            spec(
                "http_in",
                0,
                one,
                Endpoint,
                "Entry point for an HTTP method and path",
            ),
            spec(
                "http_response",
                1,
                OutputArity::Fixed(0),
                Endpoint,
                "Sends the assembled action response",
            ),
            spec(
                "init",
                1,
                one,
                Protocol,
                "Unpacks the action name and slots of the request",
            ),
            spec(
                "finish",
                1,
                one,
                Protocol,
                "Assembles collected responses and events",
            ),
            spec(
                "switch",
                1,
                OutputArity::PerRule,
                Logic,
                "Routes by rules on a message property",
            ),
            spec(
                "template",
                1,
                one,
                Transform,
                "Renders a placeholder template into the message",
            ),
            spec(
                "http_request",
                1,
                one,
                Network,
                "Calls an external HTTP API",
            ),
            spec("sendtext", 1, one, Emit, "Adds a text response"),
            spec("sendbuttons", 1, one, Emit, "Adds a response with buttons"),
            spec(
                "sendextra",
                1,
                one,
                Emit,
                "Adds an image or attachment response",
            ),
            spec("setslots", 1, one, Emit, "Adds slot events"),
            spec(
                "debug",
                1,
                one,
                Diagnostic,
                "Publishes the message or a part of it",
            ),
        ];
        specs.sort_by_key(|s| s.type_name);
        NodeRegistry { specs }
    }

    /// All specs, ordered by type name.
    pub fn specs(&self) -> &[NodeSpec] {
        &self.specs
    }

    pub fn spec(&self, type_name: &str) -> Option<&NodeSpec> {
        self.specs.iter().find(|s| s.type_name == type_name)
    }

    /// Output port count a config implies, when it can be told.
    pub fn output_arity(&self, type_name: &str, config: &Value) -> Option<usize> {
        match self.spec(type_name)?.output_arity {
            OutputArity::Fixed(n) => Some(n),
            OutputArity::PerRule => {
                let rules = config.get("rules")?.as_array()?.len();
                let otherwise = config
                    .get("otherwise")
                    .and_then(Value::as_bool)
                    .unwrap_or(false);
                Some(rules + usize::from(otherwise))
            }
        }
    }

    /// Checks `config` against the schema, decodes it and folds `vars.*`
    /// placeholders using `vars`.
    pub fn build(
        &self,
        type_name: &str,
        config: &Value,
        vars: &Value,
    ) -> Result<NodeKind, BuildError> {
        let spec = self.spec(type_name).ok_or(BuildError::UnknownType)?;
        let issues = schema::check(&spec.config_schema, config);
        if !issues.is_empty() {
            return Err(BuildError::BadConfig(
                issues
                    .into_iter()
                    .map(|i| format!("{}: {}", i.at, i.message))
                    .collect(),
            ));
        }
        let mut kind = decode(type_name, config).map_err(|e| BuildError::BadConfig(vec![e]))?;
        kind.bind_vars(vars).map_err(BuildError::BadConfig)?;
        Ok(kind)
    }
}

fn decode(type_name: &str, config: &Value) -> Result<NodeKind, String> {
    fn typed<T: serde::de::DeserializeOwned>(config: &Value) -> Result<T, String> {
        serde_path_to_error::deserialize(config)
            .map_err(|e| format!("config.{}: {}", e.path(), e.inner()))
    }
    let kind = match type_name {
        "http_in" => NodeKind::HttpIn(typed(config)?),
        "http_response" => NodeKind::HttpResponse,
        "init" => NodeKind::Init,
        "finish" => NodeKind::Finish,
        "switch" => {
            let cfg: SwitchConfig = typed(config)?;
            cfg.check()?;
            NodeKind::Switch(cfg)
        }
        "template" => {
            let cfg: TemplateConfig = typed(config)?;
            if !MessageObject::is_assignable(&cfg.target) {
                return Err(format!(
                    "config.target: '{}' must be under payload or slots",
                    cfg.target
                ));
            }
            NodeKind::Template(cfg)
        }
        "http_request" => {
            let cfg: HttpRequestConfig = typed(config)?;
            if cfg.url_from == UrlSource::Config && cfg.url.is_none() {
                return Err("config.url: required when url_from is 'config'".into());
            }
            NodeKind::HttpRequest(cfg)
        }
        "sendtext" => NodeKind::SendText(typed(config)?),
        "sendbuttons" => NodeKind::SendButtons(typed(config)?),
        "sendextra" => NodeKind::SendExtra(typed(config)?),
        "setslots" => NodeKind::SetSlots(typed(config)?),
        "debug" => {
            let cfg: DebugConfig = typed(config)?;
            if cfg.select == DebugSelect::Path && cfg.path.is_none() {
                return Err("config.path: required when select is 'path'".into());
            }
            NodeKind::Debug(cfg)
        }
        other => return Err(format!("no decoder for node type '{other}'")),
    };
    Ok(kind)
}

impl NodeKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            NodeKind::HttpIn(_) => "http_in",
            NodeKind::HttpResponse => "http_response",
            NodeKind::Init => "init",
            NodeKind::Finish => "finish",
            NodeKind::Switch(_) => "switch",
            NodeKind::Template(_) => "template",
            NodeKind::HttpRequest(_) => "http_request",
            NodeKind::SendText(_) => "sendtext",
            NodeKind::SendButtons(_) => "sendbuttons",
            NodeKind::SendExtra(_) => "sendextra",
            NodeKind::SetSlots(_) => "setslots",
            NodeKind::Debug(_) => "debug",
        }
    }

    fn templates_mut(&mut self) -> Vec<&mut TemplateString> {
        match self {
            NodeKind::Template(c) => vec![&mut c.template],
            NodeKind::HttpRequest(c) => c.url.iter_mut().collect(),
            NodeKind::SendText(c) => vec![&mut c.text],
            NodeKind::SendButtons(c) => {
                let mut all = vec![&mut c.text];
                for b in &mut c.buttons {
                    all.push(&mut b.title);
                    all.push(&mut b.payload);
                }
                all
            }
            NodeKind::SendExtra(c) => vec![&mut c.media],
            NodeKind::SetSlots(c) => c
                .assignments
                .iter_mut()
                .filter_map(|a| a.value.as_mut())
                .collect(),
            _ => vec![],
        }
    }

    fn bind_vars(&mut self, vars: &Value) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();
        for tpl in self.templates_mut() {
            match tpl.bind_prefix("vars", vars) {
                Ok(bound) => *tpl = bound,
                Err(missing) => errors.extend(
                    missing
                        .into_iter()
                        .map(|p| format!("undefined flow variable '{p}'")),
                ),
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Runs the behavior on one message.
    ///
    /// `http_in` passes messages through and `http_response` yields the
    /// terminal response; every other kind delegates to its node function.
    pub async fn run(&self, msg: MessageObject, ctx: &NodeContext<'_>) -> Result<Outcome, Failure> {
        let plain = match self {
            NodeKind::Template(c) => return template_node(c, msg, ctx.strict_templates),
            NodeKind::SendButtons(c) => return sendbuttons_node(c, msg, ctx.strict_templates),
            _ => self.run_plain(msg, ctx).await,
        };
        plain.map_err(Failure::from)
    }

    async fn run_plain(
        &self,
        msg: MessageObject,
        ctx: &NodeContext<'_>,
    ) -> Result<Outcome, NodeError> {
        match self {
            NodeKind::HttpIn(_) => Ok(Outcome::forward(msg)),
            NodeKind::HttpResponse => {
                let resp = crate::protocol::action_response_from_value(&msg.payload)
                    .map_err(|e| NodeError::NotActionResponse(e.to_string()))?;
                Ok(Outcome {
                    terminal: Some(resp),
                    ..Outcome::default()
                })
            }
            NodeKind::Init => Ok(Outcome::forward(init_node(ctx.request, ctx.ids.fresh()))),
            NodeKind::Finish => {
                let resp = finish_node(&msg);
                let mut msg = msg;
                msg.payload = resp.to_value();
                Ok(Outcome::forward(msg))
            }
            NodeKind::Switch(c) => Ok(switch_node(c, msg, ctx.ids)),
            NodeKind::HttpRequest(c) => http_request_node(c, msg, ctx).await,
            NodeKind::SendText(c) => sendtext_node(c, msg, ctx.strict_templates),
            NodeKind::SendExtra(c) => sendextra_node(c, msg, ctx.strict_templates),
            NodeKind::SetSlots(c) => setslots_node(c, msg, ctx.strict_templates),
            NodeKind::Debug(c) => Ok(debug_node(c, msg)),
            NodeKind::Template(_) | NodeKind::SendButtons(_) => unreachable!("handled by run"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn standard_palette_has_twelve_sorted_types() {
        let reg = NodeRegistry::standard();
        let names: Vec<_> = reg.specs().iter().map(|s| s.type_name).collect();
        assert_eq!(
            names,
            vec![
                "debug",
                "finish",
                "http_in",
                "http_request",
                "http_response",
                "init",
                "sendbuttons",
                "sendextra",
                "sendtext",
                "setslots",
                "switch",
                "template"
            ]
        );
    }

    #[test]
    fn switch_arity_follows_rules() {
        let reg = NodeRegistry::standard();
        let cfg = json!({"property":"action","rules":[{"operator":"is_set"},{"operator":"is_set"}],"otherwise":true});
        assert_eq!(reg.output_arity("switch", &cfg), Some(3));
        assert_eq!(reg.output_arity("switch", &json!({})), None);
        assert_eq!(reg.output_arity("http_response", &json!({})), Some(0));
        assert_eq!(reg.output_arity("nope", &json!({})), None);
    }

    #[test]
    fn build_reports_bad_configs() {
        let reg = NodeRegistry::standard();
        let none = Value::Null;
        assert_eq!(
            reg.build("nope", &json!({}), &none),
            Err(BuildError::UnknownType)
        );
        let bad = |t: &str, c: Value| match reg.build(t, &c, &none) {
            Err(BuildError::BadConfig(msgs)) => msgs.join("; "),
            other => panic!("expected bad config, got {other:?}"),
        };
        assert!(bad("template", json!({"template":"{{"})).contains("UnbalancedBraces"));
        assert!(bad("http_request", json!({"method":"PUT"})).contains("config.method"));
        assert!(bad("http_request", json!({"url_from":"config"})).contains("config.url"));
        assert!(bad("switch", json!({"property":"action","rules":[]})).contains("otherwise"));
        assert!(bad(
            "switch",
            json!({"property":"action","rules":[{"operator":"equals"}]})
        )
        .contains("needs a value"));
        assert!(bad("setslots", json!({"assignments":[]})).contains("at least 1"));
        assert!(bad("template", json!({"template":"x","target":"action"})).contains("target"));
        assert!(bad("sendtext", json!({"text":"{{vars.greeting}}"})).contains("vars.greeting"));
        assert!(bad("debug", json!({"select":"path"})).contains("config.path"));
    }

    #[test]
    fn build_folds_vars() {
        let reg = NodeRegistry::standard();
        let kind = reg
            .build(
                "template",
                &json!({"template":"{{vars.base}}/current?query={{slots.location}}","mode":"url_component"}),
                &json!({"base":"http://127.0.0.1:5101"}),
            )
            .unwrap();
        let NodeKind::Template(cfg) = kind else {
            panic!()
        };
        assert_eq!(cfg.template.placeholders().count(), 1);
        assert_eq!(cfg.target.to_string(), "payload");
    }

    #[test]
    fn reserved_position_key_is_ignored() {
        let reg = NodeRegistry::standard();
        let cfg = json!({"text":"hi","_pos":{"x":10,"y":20}});
        assert!(reg.build("sendtext", &cfg, &Value::Null).is_ok());
    }
}
