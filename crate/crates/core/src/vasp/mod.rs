//! VASP node: onboarding, claims gathering, key verification, Travel Rule
//! exchange with countersigned receipts, and settlement on a local ledger.
//!
//! [`VaspNode`] is a sans-IO actor: inputs are bus messages and timer
//! firings, outputs are [`Effect`]s for the driver to carry out. The same
//! steps are also exposed as direct operations for synchronous use.

pub mod ledger;
pub mod node;
pub mod packet;
pub mod receipt;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ledger::{clearing_account, Ledger};
pub use node::{exchange_travel_rule, Effect, Timer, TransferRecord, TransferReport, Transition, VaspConfig, VaspNode};
pub use packet::{OriginatorLocator, PacketBody, TravelRulePacket, FIELD_GROUPS};
pub use receipt::NonRepudiationReceipt;

use crate::envelope::{Millis, SignedEnvelope};
use crate::key_registry::{CustodyAttestation, KeyOwnershipAttestation, PossessionProof};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum VaspError {
    #[error("unknown customer {0}")]
    UnknownCustomer(String),
    #[error("unknown vasp {0}")]
    UnknownVasp(String),
    #[error("transfer amount must be positive")]
    InvalidAmount,
    #[error("unknown transfer {0}")]
    UnknownTransfer(String),
    #[error("transfer {transfer_id} is {state}")]
    InvalidState { transfer_id: String, state: String },
    #[error("claims unavailable: {0}")]
    ClaimsUnavailable(String),
    #[error("signature invalid: {0}")]
    SignatureInvalid(String),
    #[error("key ownership not attested: {0}")]
    OwnershipUnattested(String),
    #[error("attestation chain ends at an untrusted root")]
    UntrustedRoot,
    #[error("attestation expired")]
    AttestationExpired,
    #[error("incomplete packet: {0}")]
    IncompletePacket(String),
    #[error("receipt missing")]
    ReceiptMissing,
    #[error("receipt invalid: {0}")]
    ReceiptInvalid(String),
    #[error("blocked by policy for jurisdiction {0}")]
    PolicyBlocked(String),
    #[error("counterparty did not respond")]
    CounterpartyTimeout,
    #[error("settlement notice not received")]
    SettlementTimeout,
}

impl VaspError {
    pub fn code(&self) -> &'static str {
        match self {
            VaspError::UnknownCustomer(_) => "UnknownCustomer",
            VaspError::UnknownVasp(_) => "UnknownVasp",
            VaspError::InvalidAmount => "InvalidAmount",
            VaspError::UnknownTransfer(_) => "UnknownTransfer",
            VaspError::InvalidState { .. } => "InvalidState",
            VaspError::ClaimsUnavailable(_) => "ClaimsUnavailable",
            VaspError::SignatureInvalid(_) => "SignatureInvalid",
            VaspError::OwnershipUnattested(_) => "OwnershipUnattested",
            VaspError::UntrustedRoot => "UntrustedRoot",
            VaspError::AttestationExpired => "AttestationExpired",
            VaspError::IncompletePacket(_) => "IncompletePacket",
            VaspError::ReceiptMissing => "ReceiptMissing",
            VaspError::ReceiptInvalid(_) => "ReceiptInvalid",
            VaspError::PolicyBlocked(_) => "PolicyBlocked",
            VaspError::CounterpartyTimeout => "CounterpartyTimeout",
            VaspError::SettlementTimeout => "SettlementTimeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason")]
pub enum TransferState {
    Initiated,
    ClaimsGathered,
    CounterpartyVerified,
    InfoExchanged,
    Finalized,
    Rejected(VaspError),
}

impl TransferState {
    pub fn name(&self) -> &'static str {
        match self {
            TransferState::Initiated => "Initiated",
            TransferState::ClaimsGathered => "ClaimsGathered",
            TransferState::CounterpartyVerified => "CounterpartyVerified",
            TransferState::InfoExchanged => "InfoExchanged",
            TransferState::Finalized => "Finalized",
            TransferState::Rejected(_) => "Rejected",
        }
    }

    /// Position in the forward order; `None` for `Rejected`.
    pub fn rank(&self) -> Option<u8> {
        match self {
            TransferState::Initiated => Some(0),
            TransferState::ClaimsGathered => Some(1),
            TransferState::CounterpartyVerified => Some(2),
            TransferState::InfoExchanged => Some(3),
            TransferState::Finalized => Some(4),
            TransferState::Rejected(_) => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, TransferState::Finalized | TransferState::Rejected(_))
    }

    pub fn reason(&self) -> Option<&VaspError> {
        match self {
            TransferState::Rejected(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Originator,
    Beneficiary,
}

/// What a VASP does with counterparties in a given jurisdiction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "algo_id", rename_all = "snake_case")]
pub enum PolicyAction {
    Allowed,
    Blocked,
    /// The counterparty must share a claim derived from this algorithm.
    RequireExtraClaim(String),
}

/// Per-counterpart-jurisdiction policy; unlisted jurisdictions are allowed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JurisdictionPolicy(pub BTreeMap<String, PolicyAction>);

impl JurisdictionPolicy {
    pub fn action_for(&self, jurisdiction: &str) -> &PolicyAction {
        self.0.get(jurisdiction).unwrap_or(&PolicyAction::Allowed)
    }

    pub fn set(&mut self, jurisdiction: impl Into<String>, action: PolicyAction) {
        self.0.insert(jurisdiction.into(), action);
    }
}

/// Key provenance a VASP holds for one of its customers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "evidence", rename_all = "snake_case")]
pub enum KeyEvidence {
    Ownership(KeyOwnershipAttestation),
    Custody(CustodyAttestation),
    /// Proof the customer controls the key, which says nothing about who owns it.
    PossessionOnly(PossessionProof),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Customer {
    pub subject_id: String,
    pub name: String,
    pub account: String,
    pub locator: OriginatorLocator,
    /// Discovery through the DID resolver takes precedence when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub did: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims_provider_id: Option<String>,
    pub evidence: KeyEvidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub originator: String,
    pub beneficiary: String,
    pub beneficiary_name: String,
    pub beneficiary_account: String,
    pub beneficiary_vasp: String,
    pub amount: u64,
}

// Peer-to-peer wire messages.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferProposal {
    pub transfer_id: String,
    pub originator_vasp: String,
    pub originator: String,
    pub beneficiary_vasp: String,
    pub beneficiary: String,
    pub beneficiary_account: String,
    pub amount: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReady {
    pub transfer_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryMessage {
    pub transfer_id: String,
    pub packet: SignedEnvelope,
    pub sender_signature: SignedEnvelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferAbort {
    pub transfer_id: String,
    pub reason: VaspError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementNotice {
    pub transfer_id: String,
    pub settled_at: Millis,
}

#[cfg(test)]
mod tests;
