//! Checker for the small JSON-schema subset used by node config schemas.
//!
//! Supported keywords: `type`, `enum`, `properties`, `required`,
//! `additionalProperties` (as a value schema), `items`, `minItems`,
//! `minLength`, `minimum`, `maximum`, and `format` with the custom formats
//! `template`, `path` and `url-path`. Other keywords (`default`,
//! `description`, `title`) are annotations and ignored.

use serde_json::Value;

use crate::template::{parse_template, Path};

/// One schema violation: dotted location inside the checked value plus a
/// message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaIssue {
    pub at: String,
    pub message: String,
}

pub fn check(schema: &Value, value: &Value) -> Vec<SchemaIssue> {
    let mut issues = Vec::new();
    walk(schema, value, "config", &mut issues);
    issues
}

fn type_matches(ty: &str, v: &Value) -> bool {
    match ty {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "number" => v.is_number(),
        "integer" => v.as_i64().is_some() || v.as_u64().is_some(),
        _ => false,
    }
}

fn walk(schema: &Value, v: &Value, at: &str, out: &mut Vec<SchemaIssue>) {
    let mut push = |message: String| {
        out.push(SchemaIssue {
            at: at.to_string(),
            message,
        })
    };

    if let Some(ty) = schema.get("type") {
        let ok = match ty {
            Value::String(t) => type_matches(t, v),
            Value::Array(ts) => ts
                .iter()
                .filter_map(Value::as_str)
                .any(|t| type_matches(t, v)),
            _ => true,
        };
        if !ok {
            push(format!("expected type {ty}, found {}", kind_of(v)));
            return;
        }
    }
    if let Some(Value::Array(options)) = schema.get("enum") {
        if !options.contains(v) {
            push(format!(
                "{v} is not one of {}",
                Value::Array(options.clone())
            ));
        }
    }
    if let (Some(f), Value::String(s)) = (schema.get("format").and_then(Value::as_str), v) {
        match f {
            "template" => {
                if let Err(e) = parse_template(s) {
                    push(e.to_string());
                }
            }
            "path" => {
                if let Err(e) = s.parse::<Path>() {
                    push(e.to_string());
                }
            }
            "url-path" if !s.starts_with('/') => push(format!("'{s}' must start with '/'")),
            _ => {}
        }
    }
    if let (Some(min), Value::String(s)) = (schema.get("minLength").and_then(Value::as_u64), v) {
        if (s.chars().count() as u64) < min {
            push(format!("must be at least {min} characters"));
        }
    }
    if let Some(n) = v.as_f64() {
        if let Some(min) = schema.get("minimum").and_then(Value::as_f64) {
            if n < min {
                push(format!("{n} is below the minimum {min}"));
            }
        }
        if let Some(max) = schema.get("maximum").and_then(Value::as_f64) {
            if n > max {
                push(format!("{n} is above the maximum {max}"));
            }
        }
    }

    match v {
        Value::Object(map) => {
            if let Some(Value::Array(required)) = schema.get("required") {
                for key in required.iter().filter_map(Value::as_str) {
                    if !map.contains_key(key) {
                        out.push(SchemaIssue {
                            at: at.to_string(),
                            message: format!("missing required field '{key}'"),
                        });
                    }
                }
            }
            let props = schema.get("properties").and_then(Value::as_object);
            let extra = schema.get("additionalProperties").filter(|s| s.is_object());
            for (key, child) in map {
                let child_at = format!("{at}.{key}");
                match (props.and_then(|p| p.get(key)), extra) {
                    (Some(s), _) => walk(s, child, &child_at, out),
                    (None, Some(s)) => walk(s, child, &child_at, out),
                    (None, None) => {}
                }
            }
        }
        Value::Array(items) => {
            if let Some(min) = schema.get("minItems").and_then(Value::as_u64) {
                if (items.len() as u64) < min {
                    out.push(SchemaIssue {
                        at: at.to_string(),
                        message: format!("needs at least {min} item(s)"),
                    });
                }
            }
            if let Some(item_schema) = schema.get("items") {
                for (i, item) in items.iter().enumerate() {
                    walk(item_schema, item, &format!("{at}.{i}"), out);
                }
            }
        }
        _ => {}
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}
