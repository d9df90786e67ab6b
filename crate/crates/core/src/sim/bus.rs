//! Virtual-time message bus with seeded latency and fault injection.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use crate::envelope::{Millis, PayloadType, SignedEnvelope};
use crate::vasp::Timer;

/// Selects messages; unset fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessagePattern {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_type: Option<PayloadType>,
}

impl MessagePattern {
    pub fn payload(payload_type: PayloadType) -> Self {
        Self {
            payload_type: Some(payload_type),
            ..Self::default()
        }
    }

    pub fn matches(&self, from: &str, to: &str, payload_type: PayloadType) -> bool {
        self.from.as_deref().map_or(true, |f| f == from)
            && self.to.as_deref().map_or(true, |t| t == to)
            && self.payload_type.map_or(true, |p| p == payload_type)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ms", rename_all = "snake_case")]
pub enum FaultAction {
    Drop,
    Delay(Millis),
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    pub pattern: MessagePattern,
    pub action: FaultAction,
    /// Applies to at most this many messages; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<u32>,
}

impl FaultRule {
    pub fn new(pattern: MessagePattern, action: FaultAction) -> Self {
        Self {
            pattern,
            action,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusMessage {
    pub msg_id: String,
    pub from: String,
    pub to: String,
    pub envelope: SignedEnvelope,
    pub enqueued_at: Millis,
    pub deliver_at: Millis,
    pub sealed: bool,
}

#[derive(Debug, Clone)]
pub enum Event {
    Deliver(BusMessage),
    Timer { node: String, timer: Timer },
    ProviderTimeout { cp: String, vasp: String, request_id: String },
    Script(usize),
}

#[derive(Debug)]
pub struct Bus {
    rng: ChaCha8Rng,
    network: NetworkConfig,
    rules: Vec<(FaultRule, u32)>,
    queue: BTreeMap<(Millis, u64), Event>,
    seq: u64,
    next_msg: u64,
}

impl Bus {
    pub fn new(seed: u64, network: NetworkConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            network,
            rules: Vec::new(),
            queue: BTreeMap::new(),
            seq: 0,
            next_msg: 0,
        }
    }

    /// Installs a rule; earlier rules take precedence.
    pub fn inject_fault(&mut self, rule: FaultRule) {
        self.rules.push((rule, 0));
    }

    pub fn schedule(&mut self, at: Millis, event: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), event);
    }

    pub fn pop(&mut self) -> Option<(Millis, Event)> {
        self.queue.pop_first().map(|((at, _), ev)| (at, ev))
    }

    /// Enqueues a message, applying the first matching fault. Returns the
    /// message and the fault applied, if any.
    pub fn send(&mut self, from: &str, to: &str, envelope: SignedEnvelope, now: Millis) -> (BusMessage, Option<FaultAction>) {
        self.next_msg += 1;
        let latency = self
            .rng
            .gen_range(self.network.min_latency_ms..=self.network.max_latency_ms);
        let mut msg = BusMessage {
            msg_id: format!("m{}", self.next_msg),
            from: from.to_string(),
            to: to.to_string(),
            envelope,
            enqueued_at: now,
            deliver_at: now + latency,
            sealed: self.network.confidential_transport,
        };
        let fault = self
            .rules
            .iter_mut()
            .find(|(r, used)| {
                r.limit.map_or(true, |l| *used < l) && r.pattern.matches(from, to, msg.envelope.payload_type)
            })
            .map(|(r, used)| {
                *used += 1;
                r.action
            });
        match fault {
            Some(FaultAction::Drop) => {}
            Some(FaultAction::Delay(d)) => {
                msg.deliver_at += d;
                self.schedule(msg.deliver_at, Event::Deliver(msg.clone()));
            }
            Some(FaultAction::Duplicate) => {
                self.schedule(msg.deliver_at, Event::Deliver(msg.clone()));
                self.schedule(msg.deliver_at + 1, Event::Deliver(msg.clone()));
            }
            None => self.schedule(msg.deliver_at, Event::Deliver(msg.clone())),
        }
        (msg, fault)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{sign_value, KeyPair};

    fn env() -> SignedEnvelope {
        sign_value(&KeyPair::derive("A", 1), PayloadType::Receipt, &serde_json::json!({}), 0).unwrap()
    }

    #[test]
    fn latency_is_seeded() {
        let run = |seed| {
            let mut bus = Bus::new(seed, NetworkConfig::default());
            (0..20).map(|_| bus.send("A", "B", env(), 0).0.deliver_at).collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn faults_apply_in_order_with_limits() {
        let mut bus = Bus::new(1, NetworkConfig::default());
        bus.inject_fault(FaultRule {
            pattern: MessagePattern::payload(PayloadType::Receipt),
            action: FaultAction::Drop,
            limit: Some(1),
        });
        bus.inject_fault(FaultRule::new(MessagePattern::default(), FaultAction::Duplicate));
        assert_eq!(bus.send("A", "B", env(), 0).1, Some(FaultAction::Drop));
        assert_eq!(bus.send("A", "B", env(), 0).1, Some(FaultAction::Duplicate));
        let mut delivered = 0;
        while let Some((_, ev)) = bus.pop() {
            assert!(matches!(ev, Event::Deliver(m) if m.msg_id == "m2"));
            delivered += 1;
        }
        assert_eq!(delivered, 2);
    }

    #[test]
    fn pattern_matching() {
        let p = MessagePattern {
            from: Some("A".into()),
            to: None,
            payload_type: Some(PayloadType::Delivery),
        };
        assert!(p.matches("A", "X", PayloadType::Delivery));
        assert!(!p.matches("B", "X", PayloadType::Delivery));
        assert!(!p.matches("A", "X", PayloadType::Receipt));
    }
}
