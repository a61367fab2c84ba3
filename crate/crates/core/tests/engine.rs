use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use flowfill::engine::{Engine, EngineError, EngineOptions};
use flowfill::flow::{parse_flow, FlowDocument};
use flowfill::harness::{start_stub, StubHandle, StubRule};
use flowfill::nodes::{HttpMethod, NodeRegistry};
use flowfill::protocol::{ActionRequest, BotResponse};
use serde_json::json;

async fn slow_stub(delay_ms: u64) -> StubHandle {
    let rule = StubRule {
        method: None,
        path_prefix: "/".into(),
        query_contains: None,
        status: 200,
        body: json!({"ok": true}),
        delay_ms,
    };
    start_stub(vec![rule], ([127, 0, 0, 1], 0).into())
        .await
        .unwrap()
}

/// `in -> init -> call(url, timeout) -> say(text) -> finish -> out`
fn calling_flow(url: &str, timeout_ms: u64, text: &str) -> FlowDocument {
    let doc = json!({"name": "calling", "nodes": [
        {"id":"in","type":"http_in","config":{"method":"POST","path":"/webhook"},"wires":[["init"]]},
        {"id":"init","type":"init","wires":[["call"]]},
        {"id":"call","type":"http_request","config":{"url_from":"config","url":url,"timeout_ms":timeout_ms},"wires":[["say"]]},
        {"id":"say","type":"sendtext","config":{"text":text},"wires":[["fin"]]},
        {"id":"fin","type":"finish","wires":[["out"]]},
        {"id":"out","type":"http_response"}
    ]});
    parse_flow(&serde_json::to_vec(&doc).unwrap()).unwrap()
}

fn request() -> ActionRequest {
    ActionRequest::new("a", "t", BTreeMap::new())
}

async fn wait_for(mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while !cond() {
        assert!(Instant::now() < deadline, "condition never held");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

#[tokio::test]
async fn timeout_on_one_branch_keeps_the_other() {
    let stub = slow_stub(1_000).await;
    let doc = json!({"name": "fan", "nodes": [
        {"id":"in","type":"http_in","config":{"method":"POST","path":"/webhook"},"wires":[["init"]]},
        {"id":"init","type":"init","wires":[["call","say"]]},
        {"id":"call","type":"http_request","config":{"url_from":"config","url":format!("{}/slow", stub.base_url()),"timeout_ms":100},"wires":[["fin"]]},
        {"id":"say","type":"sendtext","config":{"text":"quick"},"wires":[["fin"]]},
        {"id":"fin","type":"finish","wires":[["out"]]},
        {"id":"out","type":"http_response"}
    ]});
    let engine = Engine::new(NodeRegistry::standard(), EngineOptions::default());
    engine
        .deploy(&parse_flow(&serde_json::to_vec(&doc).unwrap()).unwrap())
        .unwrap();
    let r = engine
        .execute(HttpMethod::Post, "/webhook", request())
        .await
        .unwrap();
    assert_eq!(
        r.terminal.unwrap().responses,
        vec![BotResponse::text("quick")]
    );
    assert_eq!(r.branch_errors.len(), 1);
    assert_eq!(r.branch_errors[0].node_id, "call");
    assert!(
        r.branch_errors[0].error.starts_with("Timeout"),
        "{}",
        r.branch_errors[0].error
    );
}

#[tokio::test]
async fn in_flight_execution_finishes_on_its_version() {
    let stub = slow_stub(300).await;
    let engine = Arc::new(Engine::new(
        NodeRegistry::standard(),
        EngineOptions::default(),
    ));
    engine
        .deploy(&calling_flow(&stub.base_url(), 5_000, "v1"))
        .unwrap();
    let running = {
        let engine = engine.clone();
        tokio::spawn(async move {
            engine
                .execute(HttpMethod::Post, "/webhook", request())
                .await
        })
    };
    wait_for(|| engine.current().unwrap().in_flight() == 1).await;
    assert_eq!(
        engine
            .deploy(&calling_flow(&stub.base_url(), 5_000, "v2"))
            .unwrap(),
        2
    );
    assert_eq!(engine.retired_in_flight(), 1);

    let fresh = engine
        .execute(HttpMethod::Post, "/webhook", request())
        .await
        .unwrap();
    assert_eq!(
        fresh.terminal.unwrap().responses,
        vec![BotResponse::text("v2")]
    );
    let old = running.await.unwrap().unwrap();
    assert_eq!(old.version_id, 1);
    assert_eq!(
        old.terminal.unwrap().responses,
        vec![BotResponse::text("v1")]
    );
    assert_eq!(engine.retired_in_flight(), 0);
}

#[tokio::test]
async fn stragglers_are_cancelled_after_drain_timeout() {
    let stub = slow_stub(5_000).await;
    let options = EngineOptions {
        drain_timeout: Duration::from_millis(100),
        ..EngineOptions::default()
    };
    let engine = Arc::new(Engine::new(NodeRegistry::standard(), options));
    engine
        .deploy(&calling_flow(&stub.base_url(), 10_000, "v1"))
        .unwrap();
    let began = Instant::now();
    let running = {
        let engine = engine.clone();
        tokio::spawn(async move {
            engine
                .execute(HttpMethod::Post, "/webhook", request())
                .await
        })
    };
    wait_for(|| engine.current().unwrap().in_flight() == 1).await;
    engine
        .deploy(&calling_flow(&stub.base_url(), 10_000, "v2"))
        .unwrap();
    let Err(EngineError::NoTerminalResponse(r)) = running.await.unwrap() else {
        panic!("straggler should have been cancelled");
    };
    assert!(began.elapsed() < Duration::from_secs(3));
    assert_eq!(r.branch_errors.len(), 1);
    assert!(r.branch_errors[0].error.starts_with("Cancelled"));
    wait_for(|| engine.retired_in_flight() == 0).await;
}

#[tokio::test]
async fn evaluations_bounded_by_edges_and_clones() {
    // init fans out to three emitters that all reach one finish.
    let doc = json!({"name": "bound", "nodes": [
        {"id":"in","type":"http_in","config":{"method":"POST","path":"/webhook"},"wires":[["init"]]},
        {"id":"init","type":"init","wires":[["a","b","c"]]},
        {"id":"a","type":"sendtext","config":{"text":"a"},"wires":[["fin"]]},
        {"id":"b","type":"sendtext","config":{"text":"b"},"wires":[["fin"]]},
        {"id":"c","type":"sendtext","config":{"text":"c"},"wires":[["fin"]]},
        {"id":"fin","type":"finish","wires":[["out"]]},
        {"id":"out","type":"http_response"}
    ]});
    let engine = Engine::new(NodeRegistry::standard(), EngineOptions::default());
    engine
        .deploy(&parse_flow(&serde_json::to_vec(&doc).unwrap()).unwrap())
        .unwrap();
    let r = engine
        .execute(HttpMethod::Post, "/webhook", request())
        .await
        .unwrap();
    let edges = 1 + 3 + 3 + 3;
    let clones = 2;
    // every message arrival is one evaluation, plus the entry node
    assert_eq!(r.evaluations, edges + 1);
    assert!(r.evaluations <= edges + 1 + clones);
    // two later terminals become warnings
    assert_eq!(
        r.debug_events
            .iter()
            .filter(|d| d.body.get("warning").is_some())
            .count(),
        2
    );
    assert_eq!(r.terminal.unwrap().responses, vec![BotResponse::text("a")]);
}
