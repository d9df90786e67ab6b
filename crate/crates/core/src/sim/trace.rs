use serde::{Deserialize, Serialize};

use super::bus::FaultAction;
use crate::envelope::{Digest, Millis, PayloadType, SignedEnvelope};
use crate::vasp::Timer;

/// One entry of the ordered event trace.
///
/// Sealed messages are recorded by digest only: their payload is readable by
/// the recipient and nobody else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Script {
        at: Millis,
        index: usize,
        kind: String,
    },
    ScriptError {
        at: Millis,
        index: usize,
        error: String,
    },
    Send {
        at: Millis,
        msg_id: String,
        from: String,
        to: String,
        payload_type: PayloadType,
        deliver_at: Millis,
        digest: Digest,
        sealed: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        envelope: Option<SignedEnvelope>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fault: Option<FaultAction>,
    },
    Deliver {
        at: Millis,
        msg_id: String,
        from: String,
        to: String,
        payload_type: PayloadType,
    },
    /// A repeat delivery suppressed by the receiver.
    Duplicate {
        at: Millis,
        msg_id: String,
        to: String,
    },
    /// A delivery whose envelope failed verification.
    Unauthentic {
        at: Millis,
        msg_id: String,
        from: String,
        to: String,
    },
    Timer {
        at: Millis,
        node: String,
        timer: Timer,
    },
    State {
        at: Millis,
        node: String,
        transfer_id: String,
        state: String,
    },
}

impl TraceEvent {
    pub fn at(&self) -> Millis {
        match self {
            TraceEvent::Script { at, .. }
            | TraceEvent::ScriptError { at, .. }
            | TraceEvent::Send { at, .. }
            | TraceEvent::Deliver { at, .. }
            | TraceEvent::Duplicate { at, .. }
            | TraceEvent::Unauthentic { at, .. }
            | TraceEvent::Timer { at, .. }
            | TraceEvent::State { at, .. } => *at,
        }
    }
}

pub fn to_ndjson(trace: &[TraceEvent]) -> Vec<u8> {
    let mut out = Vec::new();
    for ev in trace {
        out.extend_from_slice(crate::canonicalize(ev).expect("trace events are canonicalizable").as_bytes());
        out.push(b'\n');
    }
    out
}
