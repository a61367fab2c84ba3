//! Typed node configurations and their declarative schemas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::template::{Path, RenderMode, TemplateString};

fn payload_path() -> Path {
    Path::key("payload")
}

fn default_timeout_ms() -> u64 {
    10_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HttpMethod {
    Get,
    Post,
    Put,
    Patch,
    Delete,
}

impl HttpMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            HttpMethod::Get => "GET",
            HttpMethod::Post => "POST",
            HttpMethod::Put => "PUT",
            HttpMethod::Patch => "PATCH",
            HttpMethod::Delete => "DELETE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_uppercase().as_str() {
            "GET" => HttpMethod::Get,
            "POST" => HttpMethod::Post,
            "PUT" => HttpMethod::Put,
            "PATCH" => HttpMethod::Patch,
            "DELETE" => HttpMethod::Delete,
            _ => return None,
        })
    }
}

impl std::fmt::Display for HttpMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct HttpInConfig {
    pub method: HttpMethod,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Equals,
    NotEquals,
    Contains,
    IsSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRule {
    pub operator: Operator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub property: Path,
    pub rules: Vec<SwitchRule>,
    #[serde(default)]
    pub otherwise: bool,
    #[serde(default)]
    pub check_all: bool,
}

impl SwitchConfig {
    pub fn output_arity(&self) -> usize {
        self.rules.len() + usize::from(self.otherwise)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.rules.is_empty() && !self.otherwise {
            return Err("switch needs at least one rule or 'otherwise'".into());
        }
        for (i, r) in self.rules.iter().enumerate() {
            if r.operator != Operator::IsSet && r.value.is_none() {
                return Err(format!(
                    "rules.{i}: operator {:?} needs a value",
                    r.operator
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TemplateConfig {
    pub template: TemplateString,
    #[serde(default = "payload_path")]
    pub target: Path,
    #[serde(default)]
    pub mode: RenderMode,
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UrlSource {
    #[default]
    Payload,
    Config,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct HttpRequestConfig {
    #[serde(default = "default_get")]
    pub method: HttpMethod,
    #[serde(default)]
    pub url_from: UrlSource,
    #[serde(default)]
    pub url: Option<TemplateString>,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub body_from: Option<Path>,
    /// Percent-encoding applied to placeholders of a config URL.
    #[serde(default = "url_component")]
    pub url_mode: RenderMode,
    #[serde(default)]
    pub strict: bool,
}

fn default_get() -> HttpMethod {
    HttpMethod::Get
}

fn url_component() -> RenderMode {
    RenderMode::UrlComponent
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SendTextConfig {
    pub text: TemplateString,
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ButtonConfig {
    pub title: TemplateString,
    pub payload: TemplateString,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SendButtonsConfig {
    #[serde(default = "empty_template")]
    pub text: TemplateString,
    pub buttons: Vec<ButtonConfig>,
    #[serde(default)]
    pub strict: bool,
}

fn empty_template() -> TemplateString {
    TemplateString::literal("")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraKind {
    Image,
    Attachment,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SendExtraConfig {
    pub kind: ExtraKind,
    pub media: TemplateString,
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SlotAssignment {
    pub name: String,
    /// `None` is the null marker: the slot is cleared.
    pub value: Option<TemplateString>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SetSlotsConfig {
    pub assignments: Vec<SlotAssignment>,
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebugSelect {
    #[default]
    WholeMessage,
    Path,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DebugConfig {
    #[serde(default)]
    pub select: DebugSelect,
    #[serde(default)]
    pub path: Option<Path>,
}

fn strict_field() -> Value {
    json!({"type": "boolean", "default": false})
}

fn template_field(description: &str) -> Value {
    json!({"type": "string", "format": "template", "description": description})
}

pub(crate) fn schema_for(type_name: &str) -> Value {
    match type_name {
        "http_in" => json!({
            "type": "object",
            "required": ["method", "path"],
            "properties": {
                "method": {"type": "string", "enum": ["GET", "POST", "PUT", "PATCH", "DELETE"]},
                "path": {"type": "string", "format": "url-path"}
            }
        }),
        "http_response" | "init" | "finish" => json!({"type": "object", "properties": {}}),
        "switch" => json!({
            "type": "object",
            "required": ["property", "rules"],
            "properties": {
                "property": {"type": "string", "format": "path", "default": "action"},
                "rules": {"type": "array", "items": {
                    "type": "object",
                    "required": ["operator"],
                    "properties": {
                        "operator": {"type": "string", "enum": ["equals", "not_equals", "contains", "is_set"]},
                        "value": {"type": "string"}
                    }
                }},
                "otherwise": {"type": "boolean", "default": false},
                "check_all": {"type": "boolean", "default": false}
            }
        }),
        "template" => json!({
            "type": "object",
            "required": ["template"],
            "properties": {
                "template": template_field("text with {{path}} placeholders"),
                "target": {"type": "string", "format": "path", "default": "payload"},
                "mode": {"type": "string", "enum": ["raw", "url_component"], "default": "raw"},
                "strict": strict_field()
            }
        }),
        "http_request" => json!({
            "type": "object",
            "properties": {
                "method": {"type": "string", "enum": ["GET", "POST"], "default": "GET"},
                "url_from": {"type": "string", "enum": ["payload", "config"], "default": "payload"},
                "url": template_field("URL template, used when url_from is config"),
                "url_mode": {"type": "string", "enum": ["raw", "url_component"], "default": "url_component"},
                "headers": {"type": "object", "additionalProperties": {"type": "string"}},
                "timeout_ms": {"type": "integer", "minimum": 1, "default": 10000},
                "body_from": {"type": "string", "format": "path"},
                "strict": strict_field()
            }
        }),
        "sendtext" => json!({
            "type": "object",
            "required": ["text"],
            "properties": {"text": template_field("text to utter"), "strict": strict_field()}
        }),
        "sendbuttons" => json!({
            "type": "object",
            "required": ["buttons"],
            "properties": {
                "text": template_field("text shown above the buttons"),
                "buttons": {"type": "array", "minItems": 1, "items": {
                    "type": "object",
                    "required": ["title", "payload"],
                    "properties": {
                        "title": template_field("button label"),
                        "payload": template_field("intent payload sent when clicked")
                    }
                }},
                "strict": strict_field()
            }
        }),
        "sendextra" => json!({
            "type": "object",
            "required": ["kind", "media"],
            "properties": {
                "kind": {"type": "string", "enum": ["image", "attachment"]},
                "media": template_field("URL or locator"),
                "strict": strict_field()
            }
        }),
        "setslots" => json!({
            "type": "object",
            "required": ["assignments"],
            "properties": {
                "assignments": {"type": "array", "minItems": 1, "items": {
                    "type": "object",
                    "required": ["name", "value"],
                    "properties": {
                        "name": {"type": "string", "minLength": 1},
                        "value": {"type": ["string", "null"], "format": "template",
                                  "description": "null clears the slot"}
                    }
                }},
                "strict": strict_field()
            }
        }),
        "debug" => json!({
            "type": "object",
            "properties": {
                "select": {"type": "string", "enum": ["whole_message", "path"], "default": "whole_message"},
                "path": {"type": "string", "format": "path"}
            }
        }),
        _ => json!({}),
    }
}
