use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::bus::{Bus, BusMessage, Event, FaultRule};
use super::config::{Action, KeyDecl, ScenarioConfig};
use super::output::{Execution, RunOutput};
use super::trace::TraceEvent;
use super::SimError;
use crate::claims::{AuthRequest, AuthService, ClaimsErrorReply, ClaimsError, ClaimsProvider, ClaimsRequest, TokenOutcome, TokenReply, TokenRequest};
use crate::did::{DidResolver, EndpointRecord, ResolveRequest, ResolveResponse};
use crate::envelope::{self, KeyDirectory, KeyPair, Millis, PayloadType, SignedEnvelope};
use crate::key_registry::{prove_possession, Authority, KeyRegistry, OwnershipEvidence, TrustedRoots};
use crate::opal::{grant_consent, AlgoReply, AlgoRequest, AlgorithmRegistry, Builtin, DataProvider, Dataset};
use crate::vasp::node::Timeouts;
use crate::vasp::{Customer, Effect, KeyEvidence, TransferRequest, VaspConfig, VaspNode};

/// Attestation and authority lifetime used for simulated registries.
const AUTHORITY_LIFETIME_MS: Millis = 10 * 365 * 24 * 3600 * 1000;

struct CpNode {
    cp: ClaimsProvider,
    provider_timeout: Millis,
}

enum Node {
    Vasp(Box<VaspNode>),
    Cp(Box<CpNode>),
    Dp(Box<DataProvider>),
    Resolver(Box<DidResolver>),
}

/// A scenario in progress. Use [`run_scenario`] unless stepping manually.
pub struct Simulation {
    config: ScenarioConfig,
    bus: Bus,
    nodes: BTreeMap<String, Node>,
    node_keys: BTreeMap<String, KeyPair>,
    keys: KeyDirectory,
    subject_keys: BTreeMap<String, KeyPair>,
    registries: BTreeMap<String, KeyRegistry>,
    trace: Vec<TraceEvent>,
    messages: Vec<BusMessage>,
    seen: BTreeSet<(String, String)>,
    transition_cursor: BTreeMap<String, usize>,
    executions: Vec<Execution>,
    opening_total: i64,
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(config.clone())?;
    sim.run();
    Ok(sim.finish())
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let seed = config.seed;
        let derive = |id: &str| KeyPair::derive(id, seed);

        let mut algos = AlgorithmRegistry::new();
        for a in &config.algorithms {
            let b = Builtin::for_algo_id(&a.algo_id).expect("validated");
            algos
                .register(b.descriptor(a.vetted))
                .map_err(|e| SimError::ConfigInvalid(format!("algorithm {}: {e}", a.algo_id)))?;
        }

        let mut keys = KeyDirectory::new();
        let mut node_keys = BTreeMap::new();
        let mut subject_keys = BTreeMap::new();
        for s in &config.subjects {
            let kp = derive(&s.id);
            keys.add(&kp);
            subject_keys.insert(s.id.clone(), kp);
            if let Some(did) = &s.did {
                keys.add(&derive(did));
            }
        }

        let mut roots = BTreeMap::new();
        for r in &config.roots {
            let a = Authority::root(derive(r));
            keys.insert(r.clone(), a.public_key());
            roots.insert(r.clone(), a);
        }
        let mut registries = BTreeMap::new();
        for r in &config.registries {
            let auth = Authority::subordinate(derive(&r.id), &roots[&r.root], 0, AUTHORITY_LIFETIME_MS);
            keys.insert(r.id.clone(), auth.public_key());
            registries.insert(r.id.clone(), KeyRegistry::new(auth));
        }

        let mut nodes = BTreeMap::new();
        for d in &config.data_providers {
            let mut dp = DataProvider::new(&d.id, algos.clone());
            if let Some(k) = d.k_min {
                dp = dp.with_k_min(k);
            }
            for ds in &d.datasets {
                let set = Dataset::new(&ds.dataset_id, &d.id, ds.schema.clone(), ds.records.clone())
                    .map_err(|e| SimError::ConfigInvalid(format!("dataset {}: {e}", ds.dataset_id)))?;
                dp.add_dataset(set);
            }
            for kp in subject_keys.values() {
                dp.subject_keys_mut().add(kp);
            }
            let kp = derive(&d.id);
            keys.add(&kp);
            node_keys.insert(d.id.clone(), kp);
            nodes.insert(d.id.clone(), Node::Dp(Box::new(dp)));
        }

        let vasp_keys: BTreeMap<&String, KeyPair> = config.vasps.iter().map(|v| (&v.id, derive(&v.id))).collect();
        for c in &config.claims_providers {
            let as_key = derive(&format!("{}-AS", c.id));
            keys.add(&as_key);
            let mut auth = AuthService::new(as_key);
            for e in &c.entitlements {
                auth.enroll(&e.vasp, vasp_keys[&e.vasp].public_key(), e.algorithms.clone());
            }
            let kp = derive(&c.id);
            keys.add(&kp);
            let mut cp = ClaimsProvider::new(kp.clone(), auth, algos.clone());
            for r in &c.routes {
                cp.add_route(r.algorithm.clone(), &r.provider);
            }
            node_keys.insert(c.id.clone(), kp);
            nodes.insert(
                c.id.clone(),
                Node::Cp(Box::new(CpNode {
                    cp,
                    provider_timeout: c.provider_timeout_ms,
                })),
            );
        }

        if let Some(id) = &config.resolver {
            let mut resolver = DidResolver::new();
            for s in &config.subjects {
                if let Some(did) = &s.did {
                    resolver
                        .bind_key(did, derive(did).public_key())
                        .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
                }
            }
            let kp = derive(id);
            keys.add(&kp);
            node_keys.insert(id.clone(), kp);
            nodes.insert(id.clone(), Node::Resolver(Box::new(resolver)));
        }

        let directory: BTreeMap<String, String> = config
            .vasps
            .iter()
            .map(|v| (v.id.clone(), v.jurisdiction.clone()))
            .collect();
        for v in &config.vasps {
            keys.add(&vasp_keys[&v.id]);
        }
        for v in &config.vasps {
            let mut trusted = TrustedRoots::new();
            for r in &v.trusted_roots {
                trusted.insert(r.clone(), roots[r].public_key());
            }
            let cfg = VaspConfig {
                vasp_id: v.id.clone(),
                jurisdiction: v.jurisdiction.clone(),
                default_claims_provider: v.claims_provider.clone(),
                resolver_id: config.resolver.clone(),
                claim_algorithms: v.algorithms.clone(),
                trusted_roots: trusted,
                policy: v.policy.clone(),
                directory: directory.clone(),
                timeouts: v.timeouts.clone().unwrap_or_else(Timeouts::default),
            };
            let kp = vasp_keys[&v.id].clone();
            let mut node = VaspNode::new(cfg, kp.clone());
            for (id, k) in keys.iter() {
                node.keys_mut().insert(id.clone(), *k);
            }
            node_keys.insert(v.id.clone(), kp);
            nodes.insert(v.id.clone(), Node::Vasp(Box::new(node)));
        }
        for node in nodes.values_mut() {
            if let Node::Cp(c) = node {
                for (id, k) in keys.iter() {
                    c.cp.keys_mut().insert(id.clone(), *k);
                }
            }
        }

        let mut bus = Bus::new(seed, config.network.clone());
        for (i, ev) in config.script.iter().enumerate() {
            bus.schedule(ev.at, Event::Script(i));
        }
        Ok(Self {
            config,
            bus,
            nodes,
            node_keys,
            keys,
            subject_keys,
            registries,
            trace: Vec::new(),
            messages: Vec::new(),
            seen: BTreeSet::new(),
            transition_cursor: BTreeMap::new(),
            executions: Vec::new(),
            opening_total: 0,
        })
    }

    /// Adds a fault rule before or during a run.
    pub fn inject_fault(&mut self, rule: FaultRule) {
        self.bus.inject_fault(rule);
    }

    /// Processes events until the queue drains or the horizon is reached.
    pub fn run(&mut self) {
        while let Some((at, event)) = self.bus.pop() {
            if at > self.config.network.horizon_ms {
                break;
            }
            self.step(at, event);
        }
    }

    fn step(&mut self, now: Millis, event: Event) {
        match event {
            Event::Script(i) => self.run_script(i, now),
            Event::Deliver(msg) => self.deliver(msg, now),
            Event::Timer { node, timer } => {
                self.trace.push(TraceEvent::Timer {
                    at: now,
                    node: node.clone(),
                    timer: timer.clone(),
                });
                if let Some(Node::Vasp(v)) = self.nodes.get_mut(&node) {
                    let fx = v.on_timer(&timer, now);
                    self.apply_effects(&node, fx, now);
                }
            }
            Event::ProviderTimeout { cp, vasp, request_id } => {
                let done = match self.nodes.get_mut(&cp) {
                    Some(Node::Cp(c)) => c.cp.on_timeout(&vasp, &request_id, now),
                    _ => None,
                };
                if let Some(done) = done {
                    self.cp_complete(&cp, done, now);
                }
            }
        }
    }

    fn send_signed<T: Serialize>(&mut self, from: &str, to: &str, pt: PayloadType, body: &T, now: Millis) {
        let env = envelope::sign_value(&self.node_keys[from], pt, body, now).expect("wire messages are canonicalizable");
        self.send(from, to, env, now);
    }

    fn send(&mut self, from: &str, to: &str, env: SignedEnvelope, now: Millis) {
        let (msg, fault) = self.bus.send(from, to, env, now);
        self.trace.push(TraceEvent::Send {
            at: now,
            msg_id: msg.msg_id.clone(),
            from: msg.from.clone(),
            to: msg.to.clone(),
            payload_type: msg.envelope.payload_type,
            deliver_at: msg.deliver_at,
            digest: msg.envelope.digest(),
            sealed: msg.sealed,
            envelope: (!msg.sealed).then(|| msg.envelope.clone()),
            fault,
        });
        self.messages.push(msg);
    }

    fn apply_effects(&mut self, node: &str, effects: Vec<Effect>, now: Millis) {
        self.flush_transitions(node);
        for fx in effects {
            match fx {
                Effect::Send { to, envelope } => self.send(node, &to, envelope, now),
                Effect::Timer { at, timer } => self.bus.schedule(
                    at,
                    Event::Timer {
                        node: node.to_string(),
                        timer,
                    },
                ),
            }
        }
    }

    fn flush_transitions(&mut self, node: &str) {
        let Some(Node::Vasp(v)) = self.nodes.get(node) else {
            return;
        };
        let cursor = self.transition_cursor.entry(node.to_string()).or_default();
        for t in &v.transitions()[*cursor..] {
            self.trace.push(TraceEvent::State {
                at: t.at,
                node: node.to_string(),
                transfer_id: t.transfer_id.clone(),
                state: t.state.clone(),
            });
        }
        *cursor = v.transitions().len();
    }

    fn script_error(&mut self, index: usize, now: Millis, error: impl ToString) {
        self.trace.push(TraceEvent::ScriptError {
            at: now,
            index,
            error: error.to_string(),
        });
    }

    fn run_script(&mut self, index: usize, now: Millis) {
        let action = self.config.script[index].action.clone();
        let kind = serde_json::to_value(&action).expect("actions serialize")["kind"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        self.trace.push(TraceEvent::Script { at: now, index, kind });
        match action {
            Action::Onboard { subject } => {
                let decl = self.config.subject(&subject).expect("validated").clone();
                let kp = self.subject_keys[&subject].clone();
                let evidence = match &decl.key {
                    KeyDecl::Ownership(r) => {
                        let reg = self.registries.get_mut(r).expect("validated");
                        let ch = reg.issue_challenge(kp.public_key(), now);
                        let possession = prove_possession(&kp, ch, now);
                        let enrollment = Some(reg.enroll(&subject, kp.public_key(), now));
                        match reg.issue_ownership(&subject, kp.public_key(), &OwnershipEvidence { possession, enrollment }, now) {
                            Ok(att) => KeyEvidence::Ownership(att),
                            Err(e) => return self.script_error(index, now, e),
                        }
                    }
                    KeyDecl::Custody(r) => {
                        KeyEvidence::Custody(self.registries[r].issue_custody(&decl.vasp, &subject, kp.public_key(), now))
                    }
                    KeyDecl::PossessionOnly(r) => {
                        let ch = self.registries.get_mut(r).expect("validated").issue_challenge(kp.public_key(), now);
                        KeyEvidence::PossessionOnly(prove_possession(&kp, ch, now))
                    }
                    KeyDecl::None => KeyEvidence::None,
                };
                let customer = Customer {
                    subject_id: subject.clone(),
                    name: decl.name.clone(),
                    account: decl.account.clone(),
                    locator: decl.locator.clone(),
                    did: decl.did.clone(),
                    claims_provider_id: decl.claims_provider.clone(),
                    evidence,
                };
                if let Some(Node::Vasp(v)) = self.nodes.get_mut(&decl.vasp) {
                    let before = v.ledger().balance(&decl.account);
                    v.onboard(customer, decl.balance);
                    self.opening_total += decl.balance - before;
                }
            }
            Action::GrantConsent {
                subject,
                algo_id,
                claims_provider,
                ttl_ms,
            } => {
                let consent = grant_consent(&self.subject_keys[&subject], &algo_id, &claims_provider, now, ttl_ms);
                if let Some(Node::Cp(c)) = self.nodes.get_mut(&claims_provider) {
                    c.cp.add_consent(consent);
                }
            }
            Action::RegisterEndpoint {
                subject,
                claims_provider,
            } => {
                let did = self
                    .config
                    .subject(&subject)
                    .and_then(|s| s.did.clone())
                    .expect("validated");
                let record = EndpointRecord::new(
                    &KeyPair::derive(&did, self.config.seed),
                    &did,
                    &claims_provider,
                    &format!("bus://{claims_provider}"),
                    now,
                );
                let resolver = self.config.resolver.clone().expect("validated");
                if let Some(Node::Resolver(r)) = self.nodes.get_mut(&resolver) {
                    if let Err(e) = r.register(record) {
                        self.script_error(index, now, e);
                    }
                }
            }
            Action::InitiateTransfer {
                originator,
                beneficiary,
                amount,
            } => {
                let o = self.config.subject(&originator).expect("validated").clone();
                let b = self.config.subject(&beneficiary).expect("validated").clone();
                let req = TransferRequest {
                    originator,
                    beneficiary,
                    beneficiary_name: b.name,
                    beneficiary_account: b.account,
                    beneficiary_vasp: b.vasp,
                    amount,
                };
                let Some(Node::Vasp(v)) = self.nodes.get_mut(&o.vasp) else {
                    return;
                };
                match v.initiate_transfer(&req, now) {
                    Ok(id) => {
                        let fx = v.start_transfer(&id, now);
                        self.apply_effects(&o.vasp, fx, now);
                    }
                    Err(e) => {
                        self.flush_transitions(&o.vasp);
                        self.script_error(index, now, e);
                    }
                }
            }
            Action::InjectFault { rule } => self.bus.inject_fault(rule),
        }
    }

    fn deliver(&mut self, msg: BusMessage, now: Millis) {
        if !self.seen.insert((msg.to.clone(), msg.msg_id.clone())) {
            self.trace.push(TraceEvent::Duplicate {
                at: now,
                msg_id: msg.msg_id,
                to: msg.to,
            });
            return;
        }
        let authentic = msg.envelope.signer_id == msg.from && self.keys.verify(&msg.envelope);
        if !authentic {
            self.trace.push(TraceEvent::Unauthentic {
                at: now,
                msg_id: msg.msg_id,
                from: msg.from,
                to: msg.to,
            });
            return;
        }
        self.trace.push(TraceEvent::Deliver {
            at: now,
            msg_id: msg.msg_id.clone(),
            from: msg.from.clone(),
            to: msg.to.clone(),
            payload_type: msg.envelope.payload_type,
        });
        let (from, to, env) = (msg.from, msg.to, msg.envelope);
        match self.nodes.get_mut(&to) {
            Some(Node::Vasp(v)) => {
                let fx = v.handle_message(&from, &env, now);
                self.apply_effects(&to, fx, now);
            }
            Some(Node::Cp(_)) => self.cp_handle(&to, &from, &env, now),
            Some(Node::Dp(dp)) => {
                if env.payload_type != PayloadType::AlgoRequest {
                    return;
                }
                let Ok(req) = env.open::<AlgoRequest>() else {
                    return;
                };
                let reply = dp.handle(&req, now);
                self.executions.push(Execution {
                    at: now,
                    provider: to.clone(),
                    requester: from.clone(),
                    request: req,
                    reply: reply.clone(),
                });
                self.send_signed(&to, &from, PayloadType::AlgoResponse, &reply, now);
            }
            Some(Node::Resolver(r)) => {
                if env.payload_type != PayloadType::ResolveRequest {
                    return;
                }
                let Ok(req) = env.open::<ResolveRequest>() else {
                    return;
                };
                let resp = ResolveResponse {
                    record: r.resolve(&req.did).ok().map(|rec| rec.envelope.clone()),
                    correlation_id: req.correlation_id,
                    did: req.did,
                };
                self.send_signed(&to, &from, PayloadType::ResolveResponse, &resp, now);
            }
            None => {}
        }
    }

    fn cp_handle(&mut self, cp_id: &str, from: &str, env: &SignedEnvelope, now: Millis) {
        let Some(Node::Cp(c)) = self.nodes.get_mut(cp_id) else {
            return;
        };
        match env.payload_type {
            PayloadType::AuthRequest => {
                let Ok(req) = env.open::<TokenRequest>() else {
                    return;
                };
                let requested = req
                    .credential
                    .open::<AuthRequest>()
                    .map(|a| a.requested)
                    .unwrap_or_default();
                let outcome = match c.cp.authenticate_vasp(from, &req.credential, &requested, now) {
                    Ok(token) => TokenOutcome::Issued(token.envelope),
                    Err(e) => TokenOutcome::Refused(e),
                };
                let reply = TokenReply {
                    correlation_id: req.correlation_id,
                    outcome,
                };
                self.send_signed(cp_id, from, PayloadType::AccessToken, &reply, now);
            }
            PayloadType::ClaimsRequest => {
                let Ok(req) = env.open::<ClaimsRequest>() else {
                    return;
                };
                let request_id = req.request_id.clone();
                if req.vasp_id != from {
                    let reply = ClaimsErrorReply {
                        request_id,
                        error: ClaimsError::InvalidRequest("requester mismatch".into()),
                    };
                    return self.send_signed(cp_id, from, PayloadType::ClaimsError, &reply, now);
                }
                let timeout = c.provider_timeout;
                match c.cp.begin_request(req, now) {
                    Ok(dispatches) => {
                        for d in dispatches {
                            self.send_signed(cp_id, &d.provider_id, PayloadType::AlgoRequest, &d.request, now);
                        }
                        self.bus.schedule(
                            now + timeout,
                            Event::ProviderTimeout {
                                cp: cp_id.to_string(),
                                vasp: from.to_string(),
                                request_id,
                            },
                        );
                    }
                    Err(error) => {
                        let reply = ClaimsErrorReply { request_id, error };
                        self.send_signed(cp_id, from, PayloadType::ClaimsError, &reply, now);
                    }
                }
            }
            PayloadType::AlgoResponse => {
                let Ok(reply) = env.open::<AlgoReply>() else {
                    return;
                };
                if let Some(done) = c.cp.on_reply(reply, from, now) {
                    self.cp_complete(cp_id, done, now);
                }
            }
            _ => {}
        }
    }

    fn cp_complete(&mut self, cp_id: &str, (request, result): crate::claims::provider::Completed, now: Millis) {
        match result {
            Ok(set) => self.send(cp_id, &request.vasp_id, set.envelope, now),
            Err(error) => {
                let reply = ClaimsErrorReply {
                    request_id: request.request_id,
                    error,
                };
                self.send_signed(cp_id, &request.vasp_id, PayloadType::ClaimsError, &reply, now);
            }
        }
    }

    pub fn finish(self) -> RunOutput {
        let mut reports = Vec::new();
        let mut logs = BTreeMap::new();
        let mut ledgers = BTreeMap::new();
        let mut transitions = BTreeMap::new();
        let mut pds = BTreeMap::new();
        let mut issued = BTreeMap::new();
        let mut did_dump = None;
        for (id, node) in self.nodes {
            match node {
                Node::Vasp(v) => {
                    reports.extend(v.reports());
                    logs.insert(id.clone(), v.log().clone());
                    ledgers.insert(id.clone(), v.ledger().clone());
                    transitions.insert(id, v.transitions().to_vec());
                }
                Node::Cp(c) => {
                    logs.insert(id.clone(), c.cp.log().clone());
                    pds.insert(id.clone(), c.cp.pds_all().cloned().collect());
                    issued.insert(id, c.cp.issued().to_vec());
                }
                Node::Resolver(r) => did_dump = Some(r.dump_ndjson()),
                Node::Dp(_) => {}
            }
        }
        RunOutput {
            config: self.config,
            trace: self.trace,
            messages: self.messages,
            reports,
            logs,
            keys: self.keys,
            pds,
            issued,
            ledgers,
            opening_total: self.opening_total,
            executions: self.executions,
            did_dump,
            transitions,
        }
    }
}
