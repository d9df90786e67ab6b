//! Claims Provider: token-gated requests, fan-out to data providers, and
//! signed claim sets delivered to the requesting VASP and mirrored into the
//! subject's personal data store.

pub mod auth;
pub mod pds;
pub mod provider;

use serde::{Deserialize, Serialize};

pub use auth::{
    sign_auth_request, AccessToken, AuthRequest, AuthService, TokenClaims, TokenOutcome, TokenReply, TokenRequest,
};
pub use pds::PersonalDataStore;
pub use provider::{ClaimsProvider, Collation};

use crate::envelope::{self, Millis, PayloadType, PublicKey, SignedEnvelope};
use crate::opal::{AlgorithmRef, FieldMap, OpalError, Provenance};

pub const DEFAULT_CLAIM_TTL_MS: Millis = 30 * 24 * 60 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum ClaimsError {
    #[error("vasp {0} is not enrolled")]
    UnknownVasp(String),
    #[error("bad credential for {0}")]
    BadCredential(String),
    #[error("no entitled algorithms for {0}")]
    NoEntitledAlgorithms(String),
    #[error("access token does not verify")]
    TokenInvalid,
    #[error("access token expired")]
    TokenExpired,
    #[error("algorithms outside token scope: {0:?}")]
    ScopeExceeded(Vec<String>),
    #[error("algorithm {0} is not in the published list")]
    UnlistedAlgorithm(String),
    #[error("every algorithm failed")]
    AllAlgorithmsFailed(Vec<AlgoFailure>),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown request {0}")]
    UnknownRequest(String),
}

/// Why one algorithm in a request produced no claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "error", rename_all = "snake_case")]
pub enum FailureCause {
    Provider(OpalError),
    NoRoute,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgoFailure {
    pub algorithm: AlgorithmRef,
    pub cause: FailureCause,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimsRequest {
    pub request_id: String,
    pub vasp_id: String,
    pub subject_id: String,
    pub algorithms: Vec<AlgorithmRef>,
    pub token: AccessToken,
}

/// Failure reply to a [`ClaimsRequest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimsErrorReply {
    pub request_id: String,
    pub error: ClaimsError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimStatement {
    pub attributes: FieldMap,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub claim_id: String,
    pub subject_id: String,
    pub statement: ClaimStatement,
    pub provenance: Vec<Provenance>,
    pub issued_at: Millis,
    pub expires_at: Millis,
}

impl Claim {
    pub fn is_well_formed(&self) -> bool {
        !self.provenance.is_empty()
            && self.provenance.iter().all(Provenance::is_complete)
            && self.expires_at > self.issued_at
    }

    pub fn derives_from(&self, algo: &AlgorithmRef) -> bool {
        self.provenance
            .iter()
            .any(|p| p.algo_id == algo.algo_id && p.version == algo.version)
    }
}

/// Signed content of a claim set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimSetBody {
    pub claimset_id: String,
    pub request_id: String,
    pub issuer_id: String,
    pub vasp_id: String,
    pub subject_id: String,
    pub claims: Vec<Claim>,
    pub failures: Vec<AlgoFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimSet {
    pub body: ClaimSetBody,
    pub envelope: SignedEnvelope,
}

impl ClaimSet {
    pub fn from_envelope(envelope: SignedEnvelope) -> Result<Self, crate::CanonicalError> {
        Ok(Self {
            body: envelope.open()?,
            envelope,
        })
    }

    pub fn issuer_id(&self) -> &str {
        &self.body.issuer_id
    }

    pub fn subject_id(&self) -> &str {
        &self.body.subject_id
    }

    pub fn claims(&self) -> &[Claim] {
        &self.body.claims
    }

    /// Signature by the named issuer over exactly this body.
    pub fn verify(&self, issuer_key: &PublicKey) -> bool {
        self.envelope.payload_type == PayloadType::ClaimSet
            && self.envelope.signer_id == self.body.issuer_id
            && envelope::verifies(&self.envelope, issuer_key)
            && self.envelope.open::<ClaimSetBody>().ok().as_ref() == Some(&self.body)
    }

    /// Whether every claim is unexpired at `now`.
    pub fn is_fresh(&self, now: Millis) -> bool {
        self.body.claims.iter().all(|c| now < c.expires_at)
    }
}

#[cfg(test)]
mod tests;
