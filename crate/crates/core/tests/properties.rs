use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::LazyLock;

use flowfill::flow::{parse_flow, serialize_flow};
use flowfill::nodes::{MessageObject, MsgIds, NodeContext, NodeRegistry};
use flowfill::protocol::{ActionRequest, BotResponse, Event};
use proptest::prelude::*;
use serde_json::{json, Value};

fn corpus() -> Vec<PathBuf> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut files = vec![root.join("demo.flow.json")];
    for e in std::fs::read_dir(root.join("defects")).unwrap() {
        let p = e.unwrap().path();
        if p.to_string_lossy().ends_with(".flow.json") {
            files.push(p);
        }
    }
    files
}

#[test]
fn flow_serialization_round_trips_on_corpus() {
    for file in corpus() {
        let first = parse_flow(&std::fs::read(&file).unwrap()).unwrap();
        let bytes = serialize_flow(&first);
        let second = parse_flow(&bytes).unwrap();
        assert_eq!(first, second, "{}", file.display());
        assert_eq!(serialize_flow(&second), bytes, "{}", file.display());
    }
}

fn word() -> impl Strategy<Value = String> {
    "[a-zA-Z ]{0,12}"
}

fn prior_message() -> impl Strategy<Value = MessageObject> {
    (
        prop::collection::vec(word(), 0..4),
        prop::collection::vec((word(), prop::option::of(word())), 0..4),
        prop::collection::btree_map("[a-z]{1,6}", word(), 0..4),
    )
        .prop_map(|(texts, events, slots)| {
            let mut m = MessageObject::new("m");
            m.collected_responses = texts.into_iter().map(BotResponse::text).collect();
            m.collected_events = events
                .into_iter()
                .map(|(n, v)| Event::slot_set(n, v.map_or(Value::Null, Value::from)))
                .collect();
            m.slots = slots
                .into_iter()
                .map(|(k, v)| (k, Value::from(v)))
                .collect();
            m
        })
}

/// `(type, config, responses added, events added)`
fn emitter() -> impl Strategy<Value = (&'static str, Value, usize, usize)> {
    prop_oneof![
        word().prop_map(|t| ("sendtext", json!({"text": t}), 1, 0)),
        (word(), prop::collection::vec(word(), 1..3)).prop_map(|(t, titles)| {
            let buttons: Vec<_> = titles
                .iter()
                .map(|b| json!({"title": format!("b{b}"), "payload": "/p"}))
                .collect();
            ("sendbuttons", json!({"text": t, "buttons": buttons}), 1, 0)
        }),
        prop_oneof![Just("image"), Just("attachment")].prop_map(|k| (
            "sendextra",
            json!({"kind": k, "media": "https://x.test/a.png"}),
            1,
            0
        )),
        prop::collection::vec(("[a-z]{1,6}", prop::option::of(word())), 1..4).prop_map(|a| {
            let n = a.len();
            let assignments: Vec<_> = a
                .into_iter()
                .map(|(name, v)| json!({"name": name, "value": v}))
                .collect();
            ("setslots", json!({"assignments": assignments}), 0, n)
        }),
    ]
}

// Building a client loads TLS roots; share one across cases.
static HTTP: LazyLock<reqwest::Client> = LazyLock::new(reqwest::Client::new);

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn emitters_only_append((ty, config, dr, de) in emitter(), msg in prior_message()) {
        let registry = NodeRegistry::standard();
        let kind = registry.build(ty, &config, &Value::Null).unwrap();
        let request = ActionRequest::new("a", "t", BTreeMap::new());
        let ids = MsgIds::new("p");
        let ctx = NodeContext { request: &request, strict_templates: false, ids: &ids, http: &HTTP };
        let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
        let out = rt.block_on(kind.run(msg.clone(), &ctx)).unwrap();
        prop_assert_eq!(out.outputs.len(), 1);
        let after = &out.outputs[0].1;
        prop_assert_eq!(after.collected_responses.len(), msg.collected_responses.len() + dr);
        prop_assert_eq!(after.collected_events.len(), msg.collected_events.len() + de);
        prop_assert_eq!(&after.collected_responses[..msg.collected_responses.len()], &msg.collected_responses[..]);
        prop_assert_eq!(&after.collected_events[..msg.collected_events.len()], &msg.collected_events[..]);
        prop_assert_eq!(&after.slots, &msg.slots);
        prop_assert_eq!(&after.payload, &msg.payload);
    }
}
