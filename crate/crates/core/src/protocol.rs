//! Wire types of the action-server webhook protocol.
//!
//! Only the subset consumed by flows is modelled: `next_action`, `sender_id`
//! and `tracker.slots` inbound, slot events and bot responses outbound.
//! Everything else in the request body is carried opaquely in
//! [`ActionRequest::raw`].

use std::collections::BTreeMap;

use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};
use serde_json::{Map, Value};

/// Failure to read a protocol body.
///
/// Every variant carries the dotted path of the offending field so callers
/// can report it verbatim.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("MalformedBody: {0}")]
    MalformedBody(String),
    #[error("MissingField: {0}")]
    MissingField(String),
    #[error("TypeMismatch: {path} must be {expected}")]
    TypeMismatch {
        path: String,
        expected: &'static str,
    },
    #[error("InvalidResponse: {0}")]
    InvalidResponse(String),
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

/// Dialog state snapshot shipped with each request.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tracker {
    pub sender_id: String,
    pub slots: BTreeMap<String, Value>,
    pub latest_message: Option<Value>,
}

/// An inbound request to execute a custom action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRequest {
    pub next_action: String,
    pub sender_id: String,
    pub tracker: Tracker,
    pub version: Option<String>,
    /// The full body as received.
    pub raw: Value,
}

impl ActionRequest {
    /// Builds a minimal request, as a dialog manager would send it.
    pub fn new(
        next_action: impl Into<String>,
        sender_id: impl Into<String>,
        slots: BTreeMap<String, Value>,
    ) -> Self {
        let next_action = next_action.into();
        let sender_id = sender_id.into();
        let raw = serde_json::json!({
            "next_action": next_action,
            "sender_id": sender_id,
            "tracker": { "sender_id": sender_id, "slots": slots },
        });
        ActionRequest {
            tracker: Tracker {
                sender_id: sender_id.clone(),
                slots,
                latest_message: None,
            },
            next_action,
            sender_id,
            version: None,
            raw,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.raw).expect("json values always serialize")
    }
}

/// Parses a webhook request body.
pub fn parse_action_request(body: &[u8]) -> Result<ActionRequest> {
    let raw: Value =
        serde_json::from_slice(body).map_err(|e| ProtocolError::MalformedBody(e.to_string()))?;
    action_request_from_value(raw)
}

/// Same as [`parse_action_request`] for an already decoded tree.
pub fn action_request_from_value(raw: Value) -> Result<ActionRequest> {
    let top = raw.as_object().ok_or(ProtocolError::TypeMismatch {
        path: "$".into(),
        expected: "an object",
    })?;

    let next_action = match top.get("next_action") {
        None | Some(Value::Null) => return Err(ProtocolError::MissingField("next_action".into())),
        Some(Value::String(s)) if s.is_empty() => {
            return Err(ProtocolError::MissingField("next_action".into()))
        }
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            return Err(ProtocolError::TypeMismatch {
                path: "next_action".into(),
                expected: "a string",
            })
        }
    };

    let tracker_obj = match top.get("tracker") {
        None | Some(Value::Null) => None,
        Some(Value::Object(m)) => Some(m),
        Some(_) => {
            return Err(ProtocolError::TypeMismatch {
                path: "tracker".into(),
                expected: "an object",
            })
        }
    };

    let slots = match tracker_obj.and_then(|t| t.get("slots")) {
        None | Some(Value::Null) => BTreeMap::new(),
        Some(Value::Object(m)) => m.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        Some(_) => {
            return Err(ProtocolError::TypeMismatch {
                path: "tracker.slots".into(),
                expected: "a map",
            })
        }
    };

    let tracker_sender = optional_string(tracker_obj, "sender_id", "tracker.sender_id")?;
    let sender_id = optional_string(Some(top), "sender_id", "sender_id")?;
    let version = optional_string(Some(top), "version", "version")?;
    let latest_message = tracker_obj
        .and_then(|t| t.get("latest_message"))
        .filter(|v| !v.is_null())
        .cloned();

    let sender_id = sender_id
        .or_else(|| tracker_sender.clone())
        .unwrap_or_default();
    Ok(ActionRequest {
        next_action,
        tracker: Tracker {
            sender_id: tracker_sender.unwrap_or_else(|| sender_id.clone()),
            slots,
            latest_message,
        },
        sender_id,
        version,
        raw,
    })
}

fn optional_string(
    obj: Option<&Map<String, Value>>,
    key: &str,
    path: &str,
) -> Result<Option<String>> {
    match obj.and_then(|o| o.get(key)) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(ProtocolError::TypeMismatch {
            path: path.into(),
            expected: "a string",
        }),
    }
}

/// A tracker event. Only slot events are supported.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    /// Sets `name` to `value`; a null value clears the slot.
    SlotSet { name: String, value: Value },
}

impl Event {
    pub fn slot_set(name: impl Into<String>, value: Value) -> Self {
        Event::SlotSet {
            name: name.into(),
            value,
        }
    }
}

impl Serialize for Event {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Event::SlotSet { name, value } => {
                let mut s = serializer.serialize_struct("Event", 3)?;
                s.serialize_field("event", "slot")?;
                s.serialize_field("name", name)?;
                s.serialize_field("value", value)?;
                s.end()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Button {
    pub title: String,
    pub payload: String,
}

/// Something for the bot to utter.
#[derive(Debug, Clone, PartialEq)]
pub enum BotResponse {
    Text { text: String },
    Buttons { text: String, buttons: Vec<Button> },
    Image { media: String },
    Attachment { media: String },
    Custom { payload: Value },
}

impl BotResponse {
    pub fn text(text: impl Into<String>) -> Self {
        BotResponse::Text { text: text.into() }
    }

    /// Button responses need at least one button, each with a title.
    pub fn buttons(text: impl Into<String>, buttons: Vec<Button>) -> Result<Self> {
        check_buttons(&buttons)?;
        Ok(BotResponse::Buttons {
            text: text.into(),
            buttons,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BotResponse::Text { .. } => "text",
            BotResponse::Buttons { .. } => "buttons",
            BotResponse::Image { .. } => "image",
            BotResponse::Attachment { .. } => "attachment",
            BotResponse::Custom { .. } => "custom",
        }
    }
}

fn check_buttons(buttons: &[Button]) -> Result<()> {
    if buttons.is_empty() {
        return Err(ProtocolError::InvalidResponse(
            "buttons list must not be empty".into(),
        ));
    }
    if let Some(i) = buttons.iter().position(|b| b.title.is_empty()) {
        return Err(ProtocolError::InvalidResponse(format!(
            "buttons.{i}.title must not be empty"
        )));
    }
    Ok(())
}

impl Serialize for BotResponse {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut m = serializer.serialize_map(None)?;
        match self {
            BotResponse::Text { text } => m.serialize_entry("text", text)?,
            BotResponse::Buttons { text, buttons } => {
                m.serialize_entry("text", text)?;
                m.serialize_entry("buttons", buttons)?;
            }
            BotResponse::Image { media } => m.serialize_entry("image", media)?,
            BotResponse::Attachment { media } => m.serialize_entry("attachment", media)?,
            BotResponse::Custom { payload } => m.serialize_entry("custom", payload)?,
        }
        m.end()
    }
}

/// What the action server answers: slot events plus responses to utter.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ActionResponse {
    pub events: Vec<Event>,
    pub responses: Vec<BotResponse>,
}

impl ActionResponse {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("action responses always serialize")
    }
}

/// Serializes a response with a fixed key order.
pub fn serialize_action_response(resp: &ActionResponse) -> Vec<u8> {
    serde_json::to_vec(resp).expect("action responses always serialize")
}

/// Parses a response body produced by [`serialize_action_response`].
pub fn parse_action_response(body: &[u8]) -> Result<ActionResponse> {
    let v: Value =
        serde_json::from_slice(body).map_err(|e| ProtocolError::MalformedBody(e.to_string()))?;
    action_response_from_value(&v)
}

pub fn action_response_from_value(v: &Value) -> Result<ActionResponse> {
    let top = v.as_object().ok_or(ProtocolError::TypeMismatch {
        path: "$".into(),
        expected: "an object",
    })?;
    let events = list_field(top, "events")?
        .iter()
        .enumerate()
        .map(|(i, e)| event_from_value(e, i))
        .collect::<Result<Vec<_>>>()?;
    let responses = list_field(top, "responses")?
        .iter()
        .enumerate()
        .map(|(i, r)| response_from_value(r, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ActionResponse { events, responses })
}

fn list_field<'a>(top: &'a Map<String, Value>, key: &str) -> Result<&'a [Value]> {
    match top.get(key) {
        None | Some(Value::Null) => Ok(&[]),
        Some(Value::Array(a)) => Ok(a),
        Some(_) => Err(ProtocolError::TypeMismatch {
            path: key.into(),
            expected: "a list",
        }),
    }
}

fn string_at(obj: &Map<String, Value>, key: &str, path: String) -> Result<String> {
    match obj.get(key) {
        None => Err(ProtocolError::MissingField(path)),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ProtocolError::TypeMismatch {
            path,
            expected: "a string",
        }),
    }
}

fn event_from_value(v: &Value, i: usize) -> Result<Event> {
    let obj = v.as_object().ok_or_else(|| ProtocolError::TypeMismatch {
        path: format!("events.{i}"),
        expected: "an object",
    })?;
    let kind = string_at(obj, "event", format!("events.{i}.event"))?;
    if kind != "slot" {
        return Err(ProtocolError::TypeMismatch {
            path: format!("events.{i}.event"),
            expected: "\"slot\"",
        });
    }
    let name = string_at(obj, "name", format!("events.{i}.name"))?;
    if name.is_empty() {
        return Err(ProtocolError::MissingField(format!("events.{i}.name")));
    }
    let value = obj.get("value").cloned().unwrap_or(Value::Null);
    Ok(Event::SlotSet { name, value })
}

fn response_from_value(v: &Value, i: usize) -> Result<BotResponse> {
    let obj = v.as_object().ok_or_else(|| ProtocolError::TypeMismatch {
        path: format!("responses.{i}"),
        expected: "an object",
    })?;
    if let Some(buttons) = obj.get("buttons") {
        let text = string_at(obj, "text", format!("responses.{i}.text"))?;
        let list = buttons
            .as_array()
            .ok_or_else(|| ProtocolError::TypeMismatch {
                path: format!("responses.{i}.buttons"),
                expected: "a list",
            })?;
        let buttons = list
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let path = format!("responses.{i}.buttons.{j}");
                let b = b.as_object().ok_or_else(|| ProtocolError::TypeMismatch {
                    path: path.clone(),
                    expected: "an object",
                })?;
                Ok(Button {
                    title: string_at(b, "title", format!("{path}.title"))?,
                    payload: string_at(b, "payload", format!("{path}.payload"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return BotResponse::buttons(text, buttons);
    }
    if obj.contains_key("image") {
        return Ok(BotResponse::Image {
            media: string_at(obj, "image", format!("responses.{i}.image"))?,
        });
    }
    if obj.contains_key("attachment") {
        return Ok(BotResponse::Attachment {
            media: string_at(obj, "attachment", format!("responses.{i}.attachment"))?,
        });
    }
    if let Some(payload) = obj.get("custom") {
        return Ok(BotResponse::Custom {
            payload: payload.clone(),
        });
    }
    if obj.contains_key("text") {
        return Ok(BotResponse::Text {
            text: string_at(obj, "text", format!("responses.{i}.text"))?,
        });
    }
    Err(ProtocolError::MissingField(format!(
        "responses.{i}.(text|buttons|image|attachment|custom)"
    )))
}

/// Rejection body: `{"action_name":…,"error":…}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    pub action_name: String,
    pub error: String,
}

pub fn serialize_error(action_name: &str, message: &str) -> Vec<u8> {
    serde_json::to_vec(&ErrorBody {
        action_name: action_name.to_string(),
        error: message.to_string(),
    })
    .expect("error bodies always serialize")
}

pub fn parse_error(body: &[u8]) -> Result<ErrorBody> {
    serde_json::from_slice(body).map_err(|e| ProtocolError::MalformedBody(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn s(v: Vec<u8>) -> String {
        String::from_utf8(v).unwrap()
    }

    #[test]
    fn parses_weather_request() {
        let body = br#"{"next_action":"action_weather","sender_id":"u1",
            "tracker":{"sender_id":"u1","slots":{"location":"Berlin"},"latest_message":{"intent":{"name":"ask_weather"}}},
            "domain":{"whatever":1},"version":"3.6.0"}"#;
        let req = parse_action_request(body).unwrap();
        assert_eq!(req.next_action, "action_weather");
        assert_eq!(req.sender_id, "u1");
        assert_eq!(req.tracker.slots["location"], json!("Berlin"));
        assert_eq!(req.version.as_deref(), Some("3.6.0"));
        assert!(req.tracker.latest_message.is_some());
        assert_eq!(req.raw["domain"]["whatever"], json!(1));
    }

    #[test]
    fn minimal_request_has_empty_slots() {
        let req =
            parse_action_request(br#"{"next_action":"x","sender_id":"s","tracker":{"slots":{}}}"#)
                .unwrap();
        assert!(req.tracker.slots.is_empty());
        let req =
            parse_action_request(br#"{"next_action":"x","sender_id":"s","tracker":{}}"#).unwrap();
        assert!(req.tracker.slots.is_empty());
    }

    #[test]
    fn request_errors_name_the_field() {
        assert_eq!(
            parse_action_request(br#"{"tracker":{}}"#).unwrap_err(),
            ProtocolError::MissingField("next_action".into())
        );
        assert!(matches!(
            parse_action_request(b"not json").unwrap_err(),
            ProtocolError::MalformedBody(_)
        ));
        let err =
            parse_action_request(br#"{"next_action":"a","tracker":{"slots":[1]}}"#).unwrap_err();
        assert_eq!(
            err,
            ProtocolError::TypeMismatch {
                path: "tracker.slots".into(),
                expected: "a map"
            }
        );
        assert!(err.to_string().contains("tracker.slots"));
    }

    #[test]
    fn raw_reparses_to_canonical_body() {
        let body = br#"{ "tracker": {"slots": {"b": 1.50, "a": null}}, "next_action": "x", "sender_id": "s" }"#;
        let req = parse_action_request(body).unwrap();
        let again = parse_action_request(&req.to_bytes()).unwrap();
        assert_eq!(again.raw, req.raw);
        assert_eq!(req.to_bytes(), again.to_bytes());
        // decimal text survives untouched
        assert_eq!(req.tracker.slots["b"].to_string(), "1.50");
    }

    #[test]
    fn serializes_empty_response() {
        assert_eq!(
            s(serialize_action_response(&ActionResponse::default())),
            r#"{"events":[],"responses":[]}"#
        );
    }

    #[test]
    fn serializes_clearing_slot_event() {
        let resp = ActionResponse {
            events: vec![Event::slot_set("location", Value::Null)],
            responses: vec![],
        };
        assert_eq!(
            s(serialize_action_response(&resp)),
            r#"{"events":[{"event":"slot","name":"location","value":null}],"responses":[]}"#
        );
    }

    #[test]
    fn serializes_each_response_kind_in_fixed_key_order() {
        let resp = ActionResponse {
            events: vec![],
            responses: vec![
                BotResponse::text("hi"),
                BotResponse::buttons(
                    "Which info would you like?",
                    vec![Button {
                        title: "Weather".into(),
                        payload: "/ask_weather".into(),
                    }],
                )
                .unwrap(),
                BotResponse::Image {
                    media: "i.png".into(),
                },
                BotResponse::Attachment {
                    media: "a.pdf".into(),
                },
                BotResponse::Custom {
                    payload: json!({"z":1,"a":[true]}),
                },
            ],
        };
        let out = s(serialize_action_response(&resp));
        assert_eq!(
            out,
            concat!(
                r#"{"events":[],"responses":[{"text":"hi"},"#,
                r#"{"text":"Which info would you like?","buttons":[{"title":"Weather","payload":"/ask_weather"}]},"#,
                r#"{"image":"i.png"},{"attachment":"a.pdf"},{"custom":{"a":[true],"z":1}}]}"#
            )
        );
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["responses"][1]["buttons"][0]["title"], json!("Weather"));
        assert_eq!(parse_action_response(out.as_bytes()).unwrap(), resp);
    }

    #[test]
    fn buttons_invariants() {
        assert!(BotResponse::buttons("t", vec![]).is_err());
        assert!(BotResponse::buttons(
            "t",
            vec![Button {
                title: String::new(),
                payload: "/x".into()
            }]
        )
        .is_err());
    }

    #[test]
    fn error_bodies() {
        assert_eq!(
            s(serialize_error(
                "action_unknown",
                "no flow branch handles this action"
            )),
            r#"{"action_name":"action_unknown","error":"no flow branch handles this action"}"#
        );
        assert_eq!(
            s(serialize_error("", "empty action")),
            r#"{"action_name":"","error":"empty action"}"#
        );
        let b = parse_error(&serialize_error("action_weather", "upstream API timeout")).unwrap();
        assert_eq!(b.action_name, "action_weather");
        assert_eq!(b.error, "upstream API timeout");
    }

    #[test]
    fn rejects_unknown_event_kinds() {
        let err =
            parse_action_response(br#"{"events":[{"event":"followup","name":"x"}]}"#).unwrap_err();
        assert!(matches!(err, ProtocolError::TypeMismatch { .. }));
    }
}
