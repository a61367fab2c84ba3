use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::protocol::{ActionResponse, BotResponse, Event};
use crate::template::{assign_path, Path};

/// The value travelling along wires.
///
/// Responses and events accumulate inside the message, so every branch
/// carries its own emissions and `finish` only sees those of its branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageObject {
    pub payload: Value,
    pub action: Option<String>,
    pub slots: BTreeMap<String, Value>,
    pub request: Option<Value>,
    pub collected_responses: Vec<BotResponse>,
    pub collected_events: Vec<Event>,
    pub status_code: Option<u16>,
    pub msg_id: String,
}

impl MessageObject {
    pub fn new(msg_id: impl Into<String>) -> Self {
        MessageObject {
            payload: Value::Null,
            action: None,
            slots: BTreeMap::new(),
            request: None,
            collected_responses: Vec::new(),
            collected_events: Vec::new(),
            status_code: None,
            msg_id: msg_id.into(),
        }
    }

    /// Deep copy with a new id.
    pub fn clone_as(&self, msg_id: String) -> Self {
        MessageObject {
            msg_id,
            ..self.clone()
        }
    }

    /// Tree view that templates, switch properties and debug nodes address.
    pub fn to_tree(&self) -> Value {
        let slots: Map<String, Value> = self
            .slots
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let collected = ActionResponse {
            events: self.collected_events.clone(),
            responses: self.collected_responses.clone(),
        }
        .to_value();
        json!({
            "payload": self.payload,
            "action": self.action,
            "slots": slots,
            "request": self.request,
            "collected_responses": collected["responses"],
            "collected_events": collected["events"],
            "status_code": self.status_code,
            "msg_id": self.msg_id,
        })
    }

    /// Writes a value under `payload…` or `slots.<name>…`.
    pub fn assign(&mut self, target: &Path, value: Value) -> Result<(), String> {
        match (target.first_key(), target.tail()) {
            (Some("payload"), None) => {
                self.payload = value;
                Ok(())
            }
            (Some("payload"), Some(rest)) => assign_path(&mut self.payload, &rest, value),
            (Some("slots"), Some(rest)) => {
                let name = rest.steps()[0].to_string();
                match rest.tail() {
                    None => {
                        self.slots.insert(name, value);
                        Ok(())
                    }
                    Some(deeper) => {
                        let slot = self.slots.entry(name).or_insert(Value::Null);
                        assign_path(slot, &deeper, value)
                    }
                }
            }
            _ => Err(format!(
                "target '{target}' must be 'payload', 'payload.…' or 'slots.<name>'"
            )),
        }
    }

    /// Whether `assign` can ever accept `target`.
    pub fn is_assignable(target: &Path) -> bool {
        match target.first_key() {
            Some("payload") => true,
            Some("slots") => target.tail().is_some(),
            _ => false,
        }
    }
}
