use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

use crate::nodes::Level;

/// Timestamped diagnostic published by debug nodes, warnings and branch
/// errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugEvent {
    /// Strictly increasing within one engine.
    pub seq: u64,
    pub node_id: String,
    pub msg_id: String,
    pub level: Level,
    pub body: Value,
    /// Wall clock, milliseconds since the Unix epoch.
    pub timestamp: u64,
    /// Raised by a manually injected execution.
    #[serde(default)]
    pub manual: bool,
}

/// Multi-consumer broadcast of debug events.
///
/// Consumers that fall more than `capacity` events behind observe
/// `RecvError::Lagged` and are expected to disconnect; publishing never
/// waits on them.
#[derive(Debug)]
pub struct DebugBus {
    seq: AtomicU64,
    tx: broadcast::Sender<DebugEvent>,
}

impl DebugBus {
    pub fn new(capacity: usize) -> Self {
        let (tx, _) = broadcast::channel(capacity.max(1));
        DebugBus {
            seq: AtomicU64::new(0),
            tx,
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<DebugEvent> {
        self.tx.subscribe()
    }

    pub fn publish(
        &self,
        node_id: &str,
        msg_id: &str,
        level: Level,
        body: Value,
        manual: bool,
    ) -> DebugEvent {
        let event = DebugEvent {
            seq: self.seq.fetch_add(1, Ordering::SeqCst) + 1,
            node_id: node_id.to_string(),
            msg_id: msg_id.to_string(),
            level,
            body,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or_default(),
            manual,
        };
        // No subscribers is fine.
        let _ = self.tx.send(event.clone());
        event
    }
}
