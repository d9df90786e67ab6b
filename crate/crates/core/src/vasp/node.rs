use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::receipt::{self, SenderStatement};
use super::{
    clearing_account, Customer, DeliveryMessage, KeyEvidence, Ledger, NonRepudiationReceipt, PacketBody,
    PolicyAction, Role, SettlementNotice, TransferAbort, TransferProposal, TransferReady, TransferRequest,
    TransferState, TravelRulePacket, VaspError,
};
use crate::audit_log::AuditLog;
use crate::claims::{
    sign_auth_request, AccessToken, ClaimSet, ClaimSetBody, ClaimsErrorReply, ClaimsRequest, TokenOutcome,
    TokenReply, TokenRequest,
};
use crate::did::{EndpointRecord, ResolveRequest, ResolveResponse};
use crate::envelope::{self, Digest, KeyDirectory, KeyPair, Millis, PayloadType, PublicKey, SignedEnvelope};
use crate::key_registry::{check_custody, check_ownership, AttestationLink, ChainError, TrustedRoots};
use crate::opal::AlgorithmRef;

pub const DEFAULT_TIMEOUT_MS: Millis = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeouts {
    /// Whole claims round trip: resolve, token, claims.
    pub claims_ms: Millis,
    /// Countersignature for a delivered packet.
    pub receipt_ms: Millis,
    /// Counterparty's next step in the handshake.
    pub counterparty_ms: Millis,
    /// Settlement notice after the exchange completes (beneficiary side).
    pub settlement_ms: Millis,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self {
            claims_ms: DEFAULT_TIMEOUT_MS,
            receipt_ms: DEFAULT_TIMEOUT_MS,
            counterparty_ms: 3 * DEFAULT_TIMEOUT_MS,
            settlement_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaspConfig {
    pub vasp_id: String,
    pub jurisdiction: String,
    /// Used for customers that name neither a DID nor a claims provider.
    pub default_claims_provider: Option<String>,
    pub resolver_id: Option<String>,
    pub claim_algorithms: Vec<AlgorithmRef>,
    pub trusted_roots: TrustedRoots,
    pub policy: super::JurisdictionPolicy,
    /// Known VASPs and their jurisdictions.
    pub directory: BTreeMap<String, String>,
    pub timeouts: Timeouts,
}

impl VaspConfig {
    pub fn new(vasp_id: impl Into<String>, jurisdiction: impl Into<String>) -> Self {
        Self {
            vasp_id: vasp_id.into(),
            jurisdiction: jurisdiction.into(),
            default_claims_provider: None,
            resolver_id: None,
            claim_algorithms: Vec::new(),
            trusted_roots: TrustedRoots::new(),
            policy: Default::default(),
            directory: BTreeMap::new(),
            timeouts: Timeouts::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "transfer_id", rename_all = "snake_case")]
pub enum Timer {
    Claims(String),
    Counterparty(String),
    Receipt(String),
    Settlement(String),
}

/// Output of a node step, carried out by whoever drives the node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send { to: String, envelope: SignedEnvelope },
    Timer { at: Millis, timer: Timer },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Gather {
    Idle,
    Resolving,
    Authenticating(String),
    Requesting(String),
    Done,
}

/// One state change, in the order it happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub at: Millis,
    pub transfer_id: String,
    pub state: String,
}

#[derive(Debug, Clone)]
pub struct TransferRecord {
    pub transfer_id: String,
    pub role: Role,
    pub originator: String,
    pub beneficiary: String,
    pub originator_vasp: String,
    pub beneficiary_vasp: String,
    pub beneficiary_name: String,
    pub beneficiary_account: String,
    pub amount: u64,
    pub state: TransferState,
    pub claimsets: Vec<ClaimSet>,
    pub attestations: Vec<SignedEnvelope>,
    pub sent_packet: Option<SignedEnvelope>,
    pub sender_signature: Option<SignedEnvelope>,
    pub delivery: Option<SignedEnvelope>,
    pub receipt_for_sent: Option<NonRepudiationReceipt>,
    pub received_packet: Option<SignedEnvelope>,
    pub received: Option<PacketBody>,
    pub receipt_for_received: Option<NonRepudiationReceipt>,
    gather: Gather,
    engaged: bool,
    /// Settlement notice that overtook the last receipt.
    early_settlement: bool,
}

impl TransferRecord {
    pub fn counterparty(&self) -> &str {
        match self.role {
            Role::Originator => &self.beneficiary_vasp,
            Role::Beneficiary => &self.originator_vasp,
        }
    }

    /// The subject this VASP serves in the transfer.
    pub fn own_subject(&self) -> &str {
        match self.role {
            Role::Originator => &self.originator,
            Role::Beneficiary => &self.beneficiary,
        }
    }

    pub fn counterparty_subject(&self) -> &str {
        match self.role {
            Role::Originator => &self.beneficiary,
            Role::Beneficiary => &self.originator,
        }
    }

    fn invalid_state(&self) -> VaspError {
        VaspError::InvalidState {
            transfer_id: self.transfer_id.clone(),
            state: self.state.name().to_string(),
        }
    }
}

/// Per-transfer compliance summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub transfer_id: String,
    pub vasp_id: String,
    pub role: Role,
    pub state: String,
    pub reason: Option<VaspError>,
    pub amount: u64,
    pub originator: String,
    pub beneficiary: String,
    pub counterparty_vasp: String,
    pub sent_field_groups: Vec<String>,
    pub received_field_groups: Vec<String>,
    pub claimset_ids: Vec<String>,
    pub received_claimset_ids: Vec<String>,
    pub receipt_hashes: Vec<Digest>,
}

#[derive(Debug, Clone)]
pub struct VaspNode {
    config: VaspConfig,
    keypair: KeyPair,
    keys: KeyDirectory,
    customers: BTreeMap<String, Customer>,
    ledger: Ledger,
    log: AuditLog,
    transfers: BTreeMap<String, TransferRecord>,
    transitions: Vec<Transition>,
    counter: u64,
}

fn chain_error(e: ChainError) -> VaspError {
    match e {
        ChainError::UntrustedRoot => VaspError::UntrustedRoot,
        ChainError::Expired => VaspError::AttestationExpired,
        other => VaspError::OwnershipUnattested(other.to_string()),
    }
}

/// Key of whoever signed the first envelope, taken from the (already
/// verified) chain above it.
fn issuer_key(chain: &[SignedEnvelope], signer: &str, roots: &TrustedRoots) -> Option<PublicKey> {
    match chain.first() {
        Some(link) => link.open::<AttestationLink>().ok().map(|l| l.public_key),
        None => roots.get(signer).copied(),
    }
}

impl VaspNode {
    pub fn new(config: VaspConfig, keypair: KeyPair) -> Self {
        let mut keys = KeyDirectory::new();
        keys.add(&keypair);
        let log = AuditLog::new(config.vasp_id.clone());
        Self {
            config,
            keypair,
            keys,
            customers: BTreeMap::new(),
            ledger: Ledger::default(),
            log,
            transfers: BTreeMap::new(),
            transitions: Vec::new(),
            counter: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.config.vasp_id
    }

    pub fn config(&self) -> &VaspConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut VaspConfig {
        &mut self.config
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key()
    }

    pub fn keys(&self) -> &KeyDirectory {
        &self.keys
    }

    /// Public keys of other network participants.
    pub fn keys_mut(&mut self) -> &mut KeyDirectory {
        &mut self.keys
    }

    pub fn log(&self) -> &AuditLog {
        &self.log
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn customer(&self, subject_id: &str) -> Option<&Customer> {
        self.customers.get(subject_id)
    }

    pub fn transfer(&self, transfer_id: &str) -> Option<&TransferRecord> {
        self.transfers.get(transfer_id)
    }

    /// Direct access for fault-injection tests.
    pub fn transfer_mut(&mut self, transfer_id: &str) -> Option<&mut TransferRecord> {
        self.transfers.get_mut(transfer_id)
    }

    pub fn transfers(&self) -> impl Iterator<Item = &TransferRecord> {
        self.transfers.values()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn onboard(&mut self, customer: Customer, opening_balance: i64) {
        self.ledger.open(&customer.account, opening_balance);
        self.customers.insert(customer.subject_id.clone(), customer);
    }

    fn jurisdiction_of(&self, vasp_id: &str) -> Result<String, VaspError> {
        self.config
            .directory
            .get(vasp_id)
            .cloned()
            .ok_or_else(|| VaspError::UnknownVasp(vasp_id.to_string()))
    }

    fn record(&self, id: &str) -> Result<&TransferRecord, VaspError> {
        self.transfers
            .get(id)
            .ok_or_else(|| VaspError::UnknownTransfer(id.to_string()))
    }

    fn record_mut(&mut self, id: &str) -> Result<&mut TransferRecord, VaspError> {
        self.transfers
            .get_mut(id)
            .ok_or_else(|| VaspError::UnknownTransfer(id.to_string()))
    }

    fn set_state(&mut self, id: &str, to: TransferState, now: Millis) -> Result<(), VaspError> {
        let rec = self.record_mut(id)?;
        let legal = match (rec.state.rank(), to.rank()) {
            (Some(_), None) => !rec.state.is_terminal(),
            (Some(from), Some(next)) => next == from + 1,
            _ => false,
        };
        if !legal {
            return Err(rec.invalid_state());
        }
        rec.state = to;
        let state = rec.state.name().to_string();
        self.transitions.push(Transition {
            at: now,
            transfer_id: id.to_string(),
            state,
        });
        Ok(())
    }

    fn log_envelope(&mut self, env: &SignedEnvelope, now: Millis) -> Result<(), VaspError> {
        if self.log.contains_digest(&env.digest()) {
            return Ok(());
        }
        self.log
            .append(env.clone(), &self.keys, now)
            .map(|_| ())
            .map_err(|e| VaspError::SignatureInvalid(e.to_string()))
    }

    fn insert_record(&mut self, rec: TransferRecord, now: Millis) {
        self.transitions.push(Transition {
            at: now,
            transfer_id: rec.transfer_id.clone(),
            state: rec.state.name().to_string(),
        });
        self.transfers.insert(rec.transfer_id.clone(), rec);
    }

    // ---- direct operations -------------------------------------------------

    pub fn initiate_transfer(&mut self, req: &TransferRequest, now: Millis) -> Result<String, VaspError> {
        if !self.customers.contains_key(&req.originator) {
            return Err(VaspError::UnknownCustomer(req.originator.clone()));
        }
        if req.amount == 0 {
            return Err(VaspError::InvalidAmount);
        }
        self.jurisdiction_of(&req.beneficiary_vasp)?;
        self.counter += 1;
        let id = format!("{}-tx{}", self.id(), self.counter);
        let rec = TransferRecord {
            transfer_id: id.clone(),
            role: Role::Originator,
            originator: req.originator.clone(),
            beneficiary: req.beneficiary.clone(),
            originator_vasp: self.id().to_string(),
            beneficiary_vasp: req.beneficiary_vasp.clone(),
            beneficiary_name: req.beneficiary_name.clone(),
            beneficiary_account: req.beneficiary_account.clone(),
            amount: req.amount,
            state: TransferState::Initiated,
            claimsets: Vec::new(),
            attestations: Vec::new(),
            sent_packet: None,
            sender_signature: None,
            delivery: None,
            receipt_for_sent: None,
            received_packet: None,
            received: None,
            receipt_for_received: None,
            gather: Gather::Idle,
            engaged: false,
            early_settlement: false,
        };
        self.insert_record(rec, now);
        Ok(id)
    }

    /// Proposal the originator sends once its own side is verified.
    pub fn proposal(&self, transfer_id: &str) -> Result<TransferProposal, VaspError> {
        let rec = self.record(transfer_id)?;
        Ok(TransferProposal {
            transfer_id: rec.transfer_id.clone(),
            originator_vasp: rec.originator_vasp.clone(),
            originator: rec.originator.clone(),
            beneficiary_vasp: rec.beneficiary_vasp.clone(),
            beneficiary: rec.beneficiary.clone(),
            beneficiary_account: rec.beneficiary_account.clone(),
            amount: rec.amount,
        })
    }

    /// Opens the beneficiary-side record for an inbound transfer.
    pub fn accept_proposal(&mut self, from: &str, p: &TransferProposal, now: Millis) -> Result<(), VaspError> {
        if self.transfers.contains_key(&p.transfer_id) {
            return Err(VaspError::InvalidState {
                transfer_id: p.transfer_id.clone(),
                state: "duplicate".into(),
            });
        }
        if p.beneficiary_vasp != self.id() || p.originator_vasp != from {
            return Err(VaspError::UnknownVasp(from.to_string()));
        }
        let name = self
            .customers
            .get(&p.beneficiary)
            .filter(|c| c.account == p.beneficiary_account)
            .map(|c| c.name.clone());
        let rec = TransferRecord {
            transfer_id: p.transfer_id.clone(),
            role: Role::Beneficiary,
            originator: p.originator.clone(),
            beneficiary: p.beneficiary.clone(),
            originator_vasp: from.to_string(),
            beneficiary_vasp: self.id().to_string(),
            beneficiary_name: name.clone().unwrap_or_default(),
            beneficiary_account: p.beneficiary_account.clone(),
            amount: p.amount,
            state: TransferState::Initiated,
            claimsets: Vec::new(),
            attestations: Vec::new(),
            sent_packet: None,
            sender_signature: None,
            delivery: None,
            receipt_for_sent: None,
            received_packet: None,
            received: None,
            receipt_for_received: None,
            gather: Gather::Idle,
            engaged: true,
            early_settlement: false,
        };
        self.insert_record(rec, now);
        let check = || -> Result<(), VaspError> {
            if p.amount == 0 {
                return Err(VaspError::InvalidAmount);
            }
            let j = self.jurisdiction_of(from)?;
            if *self.config.policy.action_for(&j) == PolicyAction::Blocked {
                return Err(VaspError::PolicyBlocked(j));
            }
            if name.is_none() {
                return Err(VaspError::UnknownCustomer(p.beneficiary.clone()));
            }
            Ok(())
        };
        if let Err(e) = check() {
            self.set_state(&p.transfer_id, TransferState::Rejected(e.clone()), now)?;
            return Err(e);
        }
        Ok(())
    }

    /// Claims request for the transfer's own subject.
    pub fn claims_request(&self, transfer_id: &str, token: AccessToken) -> Result<ClaimsRequest, VaspError> {
        let rec = self.record(transfer_id)?;
        Ok(ClaimsRequest {
            request_id: rec.transfer_id.clone(),
            vasp_id: self.id().to_string(),
            subject_id: rec.own_subject().to_string(),
            algorithms: self.config.claim_algorithms.clone(),
            token,
        })
    }

    /// Attaches a claim set about the transfer's own subject. On error the
    /// record is left unchanged.
    pub fn gather_claims(&mut self, transfer_id: &str, claimset: &SignedEnvelope, now: Millis) -> Result<(), VaspError> {
        let rec = self.record(transfer_id)?;
        if rec.state != TransferState::Initiated {
            return Err(rec.invalid_state());
        }
        let set = ClaimSet::from_envelope(claimset.clone())
            .map_err(|e| VaspError::SignatureInvalid(format!("undecodable claim set: {e}")))?;
        let key = self
            .keys
            .get(set.issuer_id())
            .ok_or_else(|| VaspError::SignatureInvalid(format!("unknown issuer {}", set.issuer_id())))?;
        if !set.verify(key) {
            return Err(VaspError::SignatureInvalid(format!("claim set from {}", set.issuer_id())));
        }
        if set.subject_id() != rec.own_subject() || set.body.vasp_id != self.config.vasp_id {
            return Err(VaspError::ClaimsUnavailable("claim set is for another request".into()));
        }
        if set.claims().is_empty() {
            return Err(VaspError::ClaimsUnavailable("claim set carries no claims".into()));
        }
        if !set.is_fresh(now) {
            return Err(VaspError::ClaimsUnavailable("claim set expired".into()));
        }
        self.log_envelope(claimset, now)?;
        let rec = self.record_mut(transfer_id)?;
        rec.claimsets.push(set);
        rec.gather = Gather::Done;
        self.set_state(transfer_id, TransferState::ClaimsGathered, now)
    }

    /// Checks the key provenance of the transfer's own customer against this
    /// VASP's trusted roots.
    pub fn verify_counterparty(&mut self, transfer_id: &str, now: Millis) -> Result<(), VaspError> {
        let rec = self.record(transfer_id)?;
        if rec.state != TransferState::ClaimsGathered {
            return Err(rec.invalid_state());
        }
        let customer = self
            .customers
            .get(rec.own_subject())
            .ok_or_else(|| VaspError::UnknownCustomer(rec.own_subject().to_string()))?;
        let roots = &self.config.trusted_roots;
        let (evidence, signer_key) = match &customer.evidence {
            KeyEvidence::Ownership(att) => {
                if att.subject_id != customer.subject_id {
                    return Err(VaspError::OwnershipUnattested("attestation names another subject".into()));
                }
                check_ownership(att, roots, now).map_err(chain_error)?;
                let leaf = att.chain[0].clone();
                let key = issuer_key(&att.chain[1..], &leaf.signer_id, roots);
                (leaf, key)
            }
            KeyEvidence::Custody(att) => {
                if att.subject_id != customer.subject_id || att.vasp_id != self.config.vasp_id {
                    return Err(VaspError::OwnershipUnattested("custody attestation names another party".into()));
                }
                check_custody(att, roots, now).map_err(chain_error)?;
                let key = issuer_key(&att.issuer_chain, &att.envelope.signer_id, roots);
                (att.envelope.clone(), key)
            }
            KeyEvidence::PossessionOnly(_) => {
                return Err(VaspError::OwnershipUnattested("possession proof without enrollment".into()))
            }
            KeyEvidence::None => return Err(VaspError::OwnershipUnattested("no attestation on file".into())),
        };
        if !self.keys.contains(&evidence.signer_id) {
            if let Some(k) = signer_key {
                self.keys.insert(evidence.signer_id.clone(), k);
            }
        }
        self.log_envelope(&evidence, now)?;
        self.record_mut(transfer_id)?.attestations.push(evidence);
        self.set_state(transfer_id, TransferState::CounterpartyVerified, now)
    }

    fn build_packet(&self, rec: &TransferRecord) -> Result<TravelRulePacket, VaspError> {
        let own = self
            .customers
            .get(rec.own_subject())
            .ok_or_else(|| VaspError::UnknownCustomer(rec.own_subject().to_string()))?;
        Ok(match rec.role {
            Role::Originator => TravelRulePacket {
                originator_name: own.name.clone(),
                originator_account: own.account.clone(),
                originator_locator: own.locator.clone(),
                beneficiary_name: rec.beneficiary_name.clone(),
                beneficiary_account: rec.beneficiary_account.clone(),
            },
            Role::Beneficiary => {
                let received = rec.received.as_ref().ok_or_else(|| rec.invalid_state())?;
                TravelRulePacket {
                    beneficiary_name: own.name.clone(),
                    beneficiary_account: own.account.clone(),
                    ..received.travel_rule.clone()
                }
            }
        })
    }

    /// Signs an arbitrary packet body. Exposed so tests can build malformed
    /// packets that a well-behaved sender would never produce.
    pub fn sign_packet_value(&self, body: &Value, now: Millis) -> SignedEnvelope {
        envelope::sign_value(&self.keypair, PayloadType::TravelRulePacket, body, now)
            .expect("packet bodies are integer-only JSON")
    }

    /// Wraps a signed packet with the sender's delivery statement.
    pub fn wrap_delivery(&self, transfer_id: &str, packet: &SignedEnvelope, receiver: &str, now: Millis) -> SignedEnvelope {
        let sender_signature = receipt::sign_delivery(&self.keypair, transfer_id, packet, receiver, now);
        let msg = DeliveryMessage {
            transfer_id: transfer_id.to_string(),
            packet: packet.clone(),
            sender_signature,
        };
        envelope::sign_value(&self.keypair, PayloadType::Delivery, &msg, now).expect("delivery is canonicalizable")
    }

    /// Builds, signs, and logs this side's packet. Repeated calls return the
    /// same delivery.
    pub fn prepare_delivery(&mut self, transfer_id: &str, now: Millis) -> Result<SignedEnvelope, VaspError> {
        let rec = self.record(transfer_id)?;
        if let Some(d) = &rec.delivery {
            return Ok(d.clone());
        }
        if rec.state != TransferState::CounterpartyVerified {
            return Err(rec.invalid_state());
        }
        let counterparty = rec.counterparty().to_string();
        let j = self.jurisdiction_of(&counterparty)?;
        if *self.config.policy.action_for(&j) == PolicyAction::Blocked {
            return Err(VaspError::PolicyBlocked(j));
        }
        let packet = self.build_packet(rec)?;
        packet.validate()?;
        let body = PacketBody {
            transfer_id: transfer_id.to_string(),
            sender_vasp: self.id().to_string(),
            receiver_vasp: counterparty.clone(),
            amount: rec.amount,
            travel_rule: packet,
            claimsets: rec.claimsets.iter().map(|c| c.envelope.clone()).collect(),
        };
        let value = serde_json::to_value(&body).expect("packet body serializes");
        let packet_env = self.sign_packet_value(&value, now);
        let delivery = self.wrap_delivery(transfer_id, &packet_env, &counterparty, now);
        let sender_signature = delivery
            .open::<DeliveryMessage>()
            .expect("freshly built")
            .sender_signature;
        self.log_envelope(&packet_env, now)?;
        self.log_envelope(&sender_signature, now)?;
        let rec = self.record_mut(transfer_id)?;
        rec.sent_packet = Some(packet_env);
        rec.sender_signature = Some(sender_signature);
        rec.delivery = Some(delivery.clone());
        rec.engaged = true;
        Ok(delivery)
    }

    /// Validates a counterparty delivery and countersigns it. Returns the
    /// receipt to send back, or `None` for a repeat of an accepted delivery.
    pub fn accept_delivery(
        &mut self,
        from: &str,
        delivery: &SignedEnvelope,
        now: Millis,
    ) -> Result<Option<SignedEnvelope>, VaspError> {
        let msg: DeliveryMessage = delivery
            .open()
            .map_err(|_| VaspError::IncompletePacket("undecodable delivery".into()))?;
        let id = msg.transfer_id.clone();
        let rec = self.record(&id)?;
        if rec.counterparty() != from {
            return Err(VaspError::SignatureInvalid(format!("{from} is not party to {id}")));
        }
        if rec.received_packet.as_ref() == Some(&msg.packet) {
            return Ok(None);
        }
        if rec.state != TransferState::CounterpartyVerified || rec.received_packet.is_some() {
            return Err(rec.invalid_state());
        }
        let from_key = *self
            .keys
            .get(from)
            .ok_or_else(|| VaspError::SignatureInvalid(format!("no key for {from}")))?;
        if msg.packet.payload_type != PayloadType::TravelRulePacket
            || msg.packet.signer_id != from
            || !envelope::verifies(&msg.packet, &from_key)
        {
            return Err(VaspError::SignatureInvalid("packet".into()));
        }
        let stmt_ok = msg.sender_signature.signer_id == from
            && envelope::verifies(&msg.sender_signature, &from_key)
            && msg.sender_signature.open::<SenderStatement>().ok().is_some_and(|s| {
                s.kind == "sent"
                    && s.transfer_id == id
                    && s.delivered_hash == msg.packet.digest()
                    && s.receiver_id == self.config.vasp_id
            });
        if !stmt_ok {
            return Err(VaspError::SignatureInvalid("sender signature".into()));
        }

        let body = PacketBody::from_envelope(&msg.packet)?;
        if body.transfer_id != id || body.sender_vasp != from || body.receiver_vasp != self.config.vasp_id || body.amount != rec.amount {
            return Err(VaspError::IncompletePacket("transfer details do not match".into()));
        }
        let own = self
            .customers
            .get(rec.own_subject())
            .ok_or_else(|| VaspError::UnknownCustomer(rec.own_subject().to_string()))?;
        let own_account = match rec.role {
            Role::Originator => &body.travel_rule.originator_account,
            Role::Beneficiary => &body.travel_rule.beneficiary_account,
        };
        if *own_account != own.account {
            return Err(VaspError::UnknownCustomer(own_account.clone()));
        }

        if body.claimsets.is_empty() {
            return Err(VaspError::ClaimsUnavailable("no claim sets shared".into()));
        }
        let mut sets = Vec::new();
        for env in &body.claimsets {
            let set = ClaimSet::from_envelope(env.clone())
                .map_err(|_| VaspError::SignatureInvalid("shared claim set".into()))?;
            let key = self
                .keys
                .get(set.issuer_id())
                .ok_or_else(|| VaspError::SignatureInvalid(format!("unknown issuer {}", set.issuer_id())))?;
            if !set.verify(key) {
                return Err(VaspError::SignatureInvalid(format!("shared claim set {}", set.body.claimset_id)));
            }
            if set.subject_id() != rec.counterparty_subject() {
                return Err(VaspError::ClaimsUnavailable("shared claim set is about another subject".into()));
            }
            sets.push(set);
        }
        let j = self.jurisdiction_of(from)?;
        if let PolicyAction::RequireExtraClaim(algo_id) = self.config.policy.action_for(&j) {
            let present = sets
                .iter()
                .flat_map(|s| s.claims())
                .any(|c| c.provenance.iter().any(|p| &p.algo_id == algo_id));
            if !present {
                return Err(VaspError::PolicyBlocked(j));
            }
        }

        let receipt = receipt::countersign(&self.keypair, &msg.sender_signature, now)
            .ok_or_else(|| VaspError::SignatureInvalid("sender signature".into()))?;
        self.log_envelope(&msg.packet, now)?;
        for set in &sets {
            self.log_envelope(&set.envelope, now)?;
        }
        self.log_envelope(&msg.sender_signature, now)?;
        self.log_envelope(&receipt.receiver_countersignature, now)?;
        let out = receipt.receiver_countersignature.clone();
        let rec = self.record_mut(&id)?;
        rec.received_packet = Some(msg.packet);
        rec.received = Some(body);
        rec.receipt_for_received = Some(receipt);
        self.maybe_exchanged(&id, now)?;
        Ok(Some(out))
    }

    /// Records the counterparty's countersignature over our delivery.
    pub fn accept_receipt(&mut self, from: &str, countersignature: &SignedEnvelope, now: Millis) -> Result<(), VaspError> {
        let receipt = NonRepudiationReceipt::from_countersignature(countersignature.clone())
            .ok_or_else(|| VaspError::ReceiptInvalid("undecodable".into()))?;
        let id = receipt.transfer_id.clone();
        let rec = self.record(&id)?;
        if rec.receipt_for_sent.as_ref() == Some(&receipt) {
            return Ok(());
        }
        if rec.counterparty() != from {
            return Err(VaspError::ReceiptInvalid(format!("{from} is not party to {id}")));
        }
        let (Some(sent), Some(sig)) = (&rec.sent_packet, &rec.sender_signature) else {
            return Err(VaspError::ReceiptInvalid("nothing was delivered".into()));
        };
        let from_key = self
            .keys
            .get(from)
            .ok_or_else(|| VaspError::ReceiptInvalid(format!("no key for {from}")))?;
        if !receipt.verify(&self.keypair.public_key(), from_key)
            || receipt.delivered_hash != sent.digest()
            || &receipt.sender_signature != sig
        {
            return Err(VaspError::ReceiptInvalid("does not match the delivered packet".into()));
        }
        if rec.state != TransferState::CounterpartyVerified {
            return Err(rec.invalid_state());
        }
        self.log_envelope(countersignature, now)?;
        self.record_mut(&id)?.receipt_for_sent = Some(receipt);
        self.maybe_exchanged(&id, now)?;
        Ok(())
    }

    fn maybe_exchanged(&mut self, id: &str, now: Millis) -> Result<bool, VaspError> {
        let rec = self.record(id)?;
        if rec.state == TransferState::CounterpartyVerified
            && rec.receipt_for_sent.is_some()
            && rec.receipt_for_received.is_some()
        {
            self.set_state(id, TransferState::InfoExchanged, now)?;
            return Ok(true);
        }
        Ok(false)
    }

    fn check_receipts(&self, rec: &TransferRecord) -> Result<(), VaspError> {
        let me = self.keypair.public_key();
        let them = self
            .keys
            .get(rec.counterparty())
            .ok_or_else(|| VaspError::ReceiptInvalid(format!("no key for {}", rec.counterparty())))?;
        let sent_ok = match (&rec.receipt_for_sent, &rec.sent_packet) {
            (Some(r), Some(p)) => r.verify(&me, them) && r.delivered_hash == p.digest(),
            _ => false,
        };
        let received_ok = match (&rec.receipt_for_received, &rec.received_packet) {
            (Some(r), Some(p)) => r.verify(them, &me) && r.delivered_hash == p.digest(),
            _ => false,
        };
        if !sent_ok {
            return Err(VaspError::ReceiptInvalid("receipt for our delivery".into()));
        }
        if !received_ok {
            return Err(VaspError::ReceiptInvalid("receipt for their delivery".into()));
        }
        Ok(())
    }

    /// Settles the transfer on the local ledger exactly once.
    pub fn finalize(&mut self, transfer_id: &str, now: Millis) -> Result<(), VaspError> {
        let rec = self.record(transfer_id)?;
        if rec.state == TransferState::Finalized {
            return Ok(());
        }
        if rec.state != TransferState::InfoExchanged {
            return Err(rec.invalid_state());
        }
        self.check_receipts(rec)?;
        let clearing = clearing_account(rec.counterparty());
        let account = self
            .customers
            .get(rec.own_subject())
            .map(|c| c.account.clone())
            .ok_or_else(|| VaspError::UnknownCustomer(rec.own_subject().to_string()))?;
        let amount = rec.amount;
        match rec.role {
            Role::Originator => self.ledger.post(&account, &clearing, amount),
            Role::Beneficiary => self.ledger.post(&clearing, &account, amount),
        }
        self.set_state(transfer_id, TransferState::Finalized, now)
    }

    /// Moves a live transfer to `Rejected`, notifying an engaged counterparty.
    pub fn reject(&mut self, transfer_id: &str, reason: VaspError, now: Millis) -> Vec<Effect> {
        let Ok(rec) = self.record(transfer_id) else {
            return Vec::new();
        };
        if rec.state.is_terminal() {
            return Vec::new();
        }
        let notify = rec.engaged.then(|| rec.counterparty().to_string());
        if self
            .set_state(transfer_id, TransferState::Rejected(reason.clone()), now)
            .is_err()
        {
            return Vec::new();
        }
        match notify {
            Some(to) => vec![self.send(
                &to,
                PayloadType::TransferAbort,
                &TransferAbort {
                    transfer_id: transfer_id.to_string(),
                    reason,
                },
                now,
            )],
            None => Vec::new(),
        }
    }

    pub fn reports(&self) -> Vec<TransferReport> {
        self.transfers
            .values()
            .map(|rec| {
                let groups = |p: &Option<SignedEnvelope>| {
                    p.as_ref()
                        .and_then(|e| PacketBody::from_envelope(e).ok())
                        .map(|b| b.travel_rule.present_groups())
                        .unwrap_or_default()
                };
                TransferReport {
                    transfer_id: rec.transfer_id.clone(),
                    vasp_id: self.id().to_string(),
                    role: rec.role,
                    state: rec.state.name().to_string(),
                    reason: rec.state.reason().cloned(),
                    amount: rec.amount,
                    originator: rec.originator.clone(),
                    beneficiary: rec.beneficiary.clone(),
                    counterparty_vasp: rec.counterparty().to_string(),
                    sent_field_groups: groups(&rec.sent_packet),
                    received_field_groups: groups(&rec.received_packet),
                    claimset_ids: rec.claimsets.iter().map(|c| c.body.claimset_id.clone()).collect(),
                    received_claimset_ids: rec
                        .received
                        .iter()
                        .flat_map(|b| &b.claimsets)
                        .filter_map(|e| e.open::<ClaimSetBody>().ok())
                        .map(|b| b.claimset_id)
                        .collect(),
                    receipt_hashes: rec
                        .receipt_for_sent
                        .iter()
                        .chain(rec.receipt_for_received.iter())
                        .map(NonRepudiationReceipt::receipt_hash)
                        .collect(),
                }
            })
            .collect()
    }

    // ---- actor interface -----------------------------------------------------

    fn send<T: Serialize>(&self, to: &str, payload_type: PayloadType, body: &T, now: Millis) -> Effect {
        Effect::Send {
            to: to.to_string(),
            envelope: envelope::sign_value(&self.keypair, payload_type, body, now)
                .expect("wire messages are canonicalizable"),
        }
    }

    fn timer(at: Millis, timer: Timer) -> Effect {
        Effect::Timer { at, timer }
    }

    /// Kicks off claims gathering for a freshly initiated transfer.
    pub fn start_transfer(&mut self, transfer_id: &str, now: Millis) -> Vec<Effect> {
        self.begin_gather(transfer_id, now)
    }

    fn begin_gather(&mut self, id: &str, now: Millis) -> Vec<Effect> {
        let Ok(rec) = self.record(id) else {
            return Vec::new();
        };
        if rec.state != TransferState::Initiated || rec.gather != Gather::Idle {
            return Vec::new();
        }
        let subject = rec.own_subject().to_string();
        let Some(customer) = self.customers.get(&subject) else {
            return self.reject(id, VaspError::UnknownCustomer(subject), now);
        };
        let mut fx = vec![Self::timer(
            now + self.config.timeouts.claims_ms,
            Timer::Claims(id.to_string()),
        )];
        match (&customer.did, &self.config.resolver_id) {
            (Some(did), Some(resolver)) => {
                let req = ResolveRequest {
                    correlation_id: id.to_string(),
                    did: did.clone(),
                };
                fx.push(self.send(resolver, PayloadType::ResolveRequest, &req, now));
                self.transfers.get_mut(id).expect("checked").gather = Gather::Resolving;
            }
            _ => {
                let cp = customer
                    .claims_provider_id
                    .clone()
                    .or_else(|| self.config.default_claims_provider.clone());
                match cp {
                    Some(cp) => fx.push(self.request_token(id, &cp, now)),
                    None => {
                        let e = VaspError::ClaimsUnavailable(format!("no claims provider known for {subject}"));
                        return self.reject(id, e, now);
                    }
                }
            }
        }
        fx
    }

    fn request_token(&mut self, id: &str, cp: &str, now: Millis) -> Effect {
        let credential = sign_auth_request(&self.keypair, &self.config.claim_algorithms, now);
        let req = TokenRequest {
            correlation_id: id.to_string(),
            credential,
        };
        if let Some(rec) = self.transfers.get_mut(id) {
            rec.gather = Gather::Authenticating(cp.to_string());
        }
        self.send(cp, PayloadType::AuthRequest, &req, now)
    }

    /// Reacts to an authenticated bus message.
    pub fn handle_message(&mut self, from: &str, env: &SignedEnvelope, now: Millis) -> Vec<Effect> {
        fn decode<T: serde::de::DeserializeOwned>(env: &SignedEnvelope) -> Option<T> {
            env.open().ok()
        }
        match env.payload_type {
            PayloadType::ResolveResponse => decode(env).map(|m| self.on_resolved(m, now)),
            PayloadType::AccessToken => decode(env).map(|m| self.on_token(from, m, now)),
            PayloadType::ClaimSet => Some(self.on_claimset(from, env, now)),
            PayloadType::ClaimsError => decode(env).map(|m| self.on_claims_error(from, m, now)),
            PayloadType::TransferProposal => decode(env).map(|m| self.on_proposal(from, m, now)),
            PayloadType::TransferReady => decode(env).map(|m| self.on_ready(from, m, now)),
            PayloadType::Delivery => Some(self.on_delivery(from, env, now)),
            PayloadType::Receipt => Some(self.on_receipt(from, env, now)),
            PayloadType::TransferAbort => decode(env).map(|m| self.on_abort(from, m, now)),
            PayloadType::SettlementNotice => decode(env).map(|m| self.on_settlement(from, m, now)),
            _ => None,
        }
        .unwrap_or_default()
    }

    fn on_resolved(&mut self, resp: ResolveResponse, now: Millis) -> Vec<Effect> {
        let id = resp.correlation_id.clone();
        let Ok(rec) = self.record(&id) else {
            return Vec::new();
        };
        if rec.gather != Gather::Resolving || rec.state != TransferState::Initiated {
            return Vec::new();
        }
        let expected_did = self.customers.get(rec.own_subject()).and_then(|c| c.did.clone());
        let record = resp
            .record
            .and_then(|env| EndpointRecord::from_envelope(env).ok())
            .filter(|r| Some(&r.did) == expected_did.as_ref() && r.did == resp.did)
            .filter(|r| match self.keys.get(&r.envelope.signer_id) {
                Some(k) => r.verify(k),
                None => true,
            });
        match record {
            Some(r) => vec![self.request_token(&id, &r.claims_provider_id, now)],
            None => self.reject(&id, VaspError::ClaimsUnavailable(format!("{} did not resolve", resp.did)), now),
        }
    }

    fn on_token(&mut self, from: &str, reply: TokenReply, now: Millis) -> Vec<Effect> {
        let id = reply.correlation_id.clone();
        let Ok(rec) = self.record(&id) else {
            return Vec::new();
        };
        if rec.gather != Gather::Authenticating(from.to_string()) || rec.state != TransferState::Initiated {
            return Vec::new();
        }
        let token = match reply.outcome {
            TokenOutcome::Issued(env) => AccessToken::from_envelope(env),
            TokenOutcome::Refused(e) => Err(e),
        };
        match token.map_err(|e| VaspError::ClaimsUnavailable(e.to_string())) {
            Ok(token) => {
                let req = self.claims_request(&id, token).expect("record exists");
                self.transfers.get_mut(&id).expect("checked").gather = Gather::Requesting(from.to_string());
                vec![self.send(from, PayloadType::ClaimsRequest, &req, now)]
            }
            Err(e) => self.reject(&id, e, now),
        }
    }

    fn on_claimset(&mut self, from: &str, env: &SignedEnvelope, now: Millis) -> Vec<Effect> {
        let Ok(body) = env.open::<ClaimSetBody>() else {
            return Vec::new();
        };
        let id = body.request_id;
        match self.record(&id) {
            Ok(rec) if rec.gather == Gather::Requesting(from.to_string()) => {}
            _ => return Vec::new(),
        }
        match self.gather_claims(&id, env, now) {
            Ok(()) => self.after_gathered(&id, now),
            // A forged or corrupted set is ignored; the claims timer decides.
            Err(VaspError::SignatureInvalid(_)) => Vec::new(),
            Err(e) => self.reject(&id, e, now),
        }
    }

    fn on_claims_error(&mut self, from: &str, reply: ClaimsErrorReply, now: Millis) -> Vec<Effect> {
        match self.record(&reply.request_id) {
            Ok(rec) if rec.gather == Gather::Requesting(from.to_string()) && rec.state == TransferState::Initiated => {
                self.reject(&reply.request_id, VaspError::ClaimsUnavailable(reply.error.to_string()), now)
            }
            _ => Vec::new(),
        }
    }

    fn after_gathered(&mut self, id: &str, now: Millis) -> Vec<Effect> {
        if let Err(e) = self.verify_counterparty(id, now) {
            return self.reject(id, e, now);
        }
        let rec = self.record(id).expect("exists");
        let to = rec.counterparty().to_string();
        let wait = Self::timer(
            now + self.config.timeouts.counterparty_ms,
            Timer::Counterparty(id.to_string()),
        );
        match rec.role {
            Role::Originator => {
                let blocked = self
                    .jurisdiction_of(&to)
                    .and_then(|j| match self.config.policy.action_for(&j) {
                        PolicyAction::Blocked => Err(VaspError::PolicyBlocked(j)),
                        _ => Ok(()),
                    });
                if let Err(e) = blocked {
                    return self.reject(id, e, now);
                }
                let proposal = self.proposal(id).expect("exists");
                self.transfers.get_mut(id).expect("exists").engaged = true;
                vec![self.send(&to, PayloadType::TransferProposal, &proposal, now), wait]
            }
            Role::Beneficiary => {
                let ready = TransferReady {
                    transfer_id: id.to_string(),
                };
                vec![self.send(&to, PayloadType::TransferReady, &ready, now), wait]
            }
        }
    }

    fn on_proposal(&mut self, from: &str, p: TransferProposal, now: Millis) -> Vec<Effect> {
        if self.transfers.contains_key(&p.transfer_id) {
            return Vec::new();
        }
        match self.accept_proposal(from, &p, now) {
            Ok(()) => self.begin_gather(&p.transfer_id, now),
            Err(e) if self.transfers.contains_key(&p.transfer_id) => vec![self.send(
                from,
                PayloadType::TransferAbort,
                &TransferAbort {
                    transfer_id: p.transfer_id.clone(),
                    reason: e,
                },
                now,
            )],
            Err(_) => Vec::new(),
        }
    }

    fn on_ready(&mut self, from: &str, ready: TransferReady, now: Millis) -> Vec<Effect> {
        let id = ready.transfer_id;
        match self.record(&id) {
            Ok(rec)
                if rec.role == Role::Originator
                    && rec.counterparty() == from
                    && rec.state == TransferState::CounterpartyVerified
                    && rec.delivery.is_none() => {}
            _ => return Vec::new(),
        }
        match self.prepare_delivery(&id, now) {
            Ok(d) => vec![
                Effect::Send {
                    to: from.to_string(),
                    envelope: d,
                },
                Self::timer(now + self.config.timeouts.receipt_ms, Timer::Receipt(id)),
            ],
            Err(e) => self.reject(&id, e, now),
        }
    }

    fn on_delivery(&mut self, from: &str, env: &SignedEnvelope, now: Millis) -> Vec<Effect> {
        let Ok(msg) = env.open::<DeliveryMessage>() else {
            return Vec::new();
        };
        let id = msg.transfer_id;
        match self.record(&id) {
            Ok(rec) if rec.counterparty() == from && !rec.state.is_terminal() => {}
            _ => return Vec::new(),
        }
        let receipt = match self.accept_delivery(from, env, now) {
            Ok(Some(r)) => r,
            Ok(None) | Err(VaspError::InvalidState { .. }) => return Vec::new(),
            Err(e) => return self.reject(&id, e, now),
        };
        let mut fx = vec![Effect::Send {
            to: from.to_string(),
            envelope: receipt,
        }];
        let rec = self.record(&id).expect("exists");
        if rec.role == Role::Beneficiary && rec.delivery.is_none() {
            match self.prepare_delivery(&id, now) {
                Ok(d) => {
                    fx.push(Effect::Send {
                        to: from.to_string(),
                        envelope: d,
                    });
                    fx.push(Self::timer(now + self.config.timeouts.receipt_ms, Timer::Receipt(id.clone())));
                }
                Err(e) => {
                    fx.extend(self.reject(&id, e, now));
                    return fx;
                }
            }
        }
        fx.extend(self.after_exchange(&id, now));
        fx
    }

    fn on_receipt(&mut self, from: &str, env: &SignedEnvelope, now: Millis) -> Vec<Effect> {
        match self.accept_receipt(from, env, now) {
            Ok(()) => match NonRepudiationReceipt::from_countersignature(env.clone()) {
                Some(r) => self.after_exchange(&r.transfer_id, now),
                None => Vec::new(),
            },
            Err(_) => Vec::new(),
        }
    }

    fn after_exchange(&mut self, id: &str, now: Millis) -> Vec<Effect> {
        let Ok(rec) = self.record(id) else {
            return Vec::new();
        };
        if rec.state != TransferState::InfoExchanged {
            return Vec::new();
        }
        let to = rec.counterparty().to_string();
        match rec.role {
            Role::Originator => match self.finalize(id, now) {
                Ok(()) => vec![self.send(
                    &to,
                    PayloadType::SettlementNotice,
                    &SettlementNotice {
                        transfer_id: id.to_string(),
                        settled_at: now,
                    },
                    now,
                )],
                Err(e) => self.reject(id, e, now),
            },
            Role::Beneficiary if rec.early_settlement => match self.finalize(id, now) {
                Ok(()) => Vec::new(),
                Err(e) => self.reject(id, e, now),
            },
            Role::Beneficiary => vec![Self::timer(
                now + self.config.timeouts.settlement_ms,
                Timer::Settlement(id.to_string()),
            )],
        }
    }

    fn on_abort(&mut self, from: &str, abort: TransferAbort, now: Millis) -> Vec<Effect> {
        if let Ok(rec) = self.record(&abort.transfer_id) {
            if rec.counterparty() == from && !rec.state.is_terminal() {
                let _ = self.set_state(&abort.transfer_id, TransferState::Rejected(abort.reason), now);
            }
        }
        Vec::new()
    }

    fn on_settlement(&mut self, from: &str, notice: SettlementNotice, now: Millis) -> Vec<Effect> {
        if let Some(rec) = self.transfers.get_mut(&notice.transfer_id) {
            if rec.role == Role::Beneficiary && rec.counterparty() == from && rec.state == TransferState::CounterpartyVerified {
                rec.early_settlement = true;
                return Vec::new();
            }
        }
        match self.record(&notice.transfer_id) {
            Ok(rec)
                if rec.role == Role::Beneficiary
                    && rec.counterparty() == from
                    && rec.state == TransferState::InfoExchanged => {}
            _ => return Vec::new(),
        }
        match self.finalize(&notice.transfer_id, now) {
            Ok(()) => Vec::new(),
            Err(e) => self.reject(&notice.transfer_id, e, now),
        }
    }

    pub fn on_timer(&mut self, timer: &Timer, now: Millis) -> Vec<Effect> {
        let (id, reason) = match timer {
            Timer::Claims(id) => (id, VaspError::ClaimsUnavailable("claims provider timed out".into())),
            Timer::Counterparty(id) => (id, VaspError::CounterpartyTimeout),
            Timer::Receipt(id) => (id, VaspError::ReceiptMissing),
            Timer::Settlement(id) => (id, VaspError::SettlementTimeout),
        };
        let Ok(rec) = self.record(id) else {
            return Vec::new();
        };
        let expired = match timer {
            Timer::Claims(_) => rec.state == TransferState::Initiated,
            Timer::Counterparty(_) => {
                rec.state == TransferState::CounterpartyVerified
                    && match rec.role {
                        Role::Originator => rec.delivery.is_none(),
                        Role::Beneficiary => rec.received_packet.is_none(),
                    }
            }
            Timer::Receipt(_) => {
                !rec.state.is_terminal() && rec.delivery.is_some() && rec.receipt_for_sent.is_none()
            }
            Timer::Settlement(_) => rec.state == TransferState::InfoExchanged,
        };
        if expired {
            let id = id.clone();
            self.reject(&id, reason, now)
        } else {
            Vec::new()
        }
    }
}

/// Runs both deliveries and receipts between two nodes directly. On failure
/// both records are rejected with the error.
pub fn exchange_travel_rule(
    originator: &mut VaspNode,
    beneficiary: &mut VaspNode,
    transfer_id: &str,
    now: Millis,
) -> Result<(), VaspError> {
    fn run(o: &mut VaspNode, b: &mut VaspNode, id: &str, now: Millis) -> Result<(), VaspError> {
        let d1 = o.prepare_delivery(id, now)?;
        let r1 = b.accept_delivery(o.id(), &d1, now)?.ok_or(VaspError::ReceiptMissing)?;
        o.accept_receipt(b.id(), &r1, now)?;
        let d2 = b.prepare_delivery(id, now)?;
        let r2 = o.accept_delivery(b.id(), &d2, now)?.ok_or(VaspError::ReceiptMissing)?;
        b.accept_receipt(o.id(), &r2, now)?;
        Ok(())
    }
    let result = run(originator, beneficiary, transfer_id, now);
    if let Err(e) = &result {
        originator.reject(transfer_id, e.clone(), now);
        beneficiary.reject(transfer_id, e.clone(), now);
    }
    result
}
