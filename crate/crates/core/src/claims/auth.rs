//! Authentication Service: enrols VASPs and issues scoped access tokens.
//!
//! A VASP authenticates by signing an [`AuthRequest`] with its enrolled key;
//! the signed request is the credential.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ClaimsError;
use crate::envelope::{self, KeyPair, Millis, PayloadType, PublicKey, SignedEnvelope};
use crate::opal::AlgorithmRef;

pub const DEFAULT_TOKEN_TTL_MS: Millis = 5 * 60 * 1000;
pub const DEFAULT_CREDENTIAL_MAX_AGE_MS: Millis = 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthRequest {
    pub vasp_id: String,
    pub requested: Vec<AlgorithmRef>,
}

/// Fields covered by the token signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub token_id: String,
    pub vasp_id: String,
    pub allowed_algos: Vec<AlgorithmRef>,
    pub issued_at: Millis,
    pub expires_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub token_id: String,
    pub vasp_id: String,
    pub allowed_algos: Vec<AlgorithmRef>,
    pub issued_at: Millis,
    pub expires_at: Millis,
    pub envelope: SignedEnvelope,
}

impl AccessToken {
    fn claims(&self) -> TokenClaims {
        TokenClaims {
            token_id: self.token_id.clone(),
            vasp_id: self.vasp_id.clone(),
            allowed_algos: self.allowed_algos.clone(),
            issued_at: self.issued_at,
            expires_at: self.expires_at,
        }
    }

    pub fn from_envelope(envelope: SignedEnvelope) -> Result<Self, ClaimsError> {
        let c: TokenClaims = envelope.open().map_err(|_| ClaimsError::TokenInvalid)?;
        Ok(Self {
            token_id: c.token_id,
            vasp_id: c.vasp_id,
            allowed_algos: c.allowed_algos,
            issued_at: c.issued_at,
            expires_at: c.expires_at,
            envelope,
        })
    }

    /// Signature, issuer, holder, and expiry checks.
    pub fn validate(
        &self,
        issuer_id: &str,
        issuer_key: &PublicKey,
        vasp_id: &str,
        now: Millis,
    ) -> Result<(), ClaimsError> {
        let authentic = self.envelope.payload_type == PayloadType::AccessToken
            && self.envelope.signer_id == issuer_id
            && envelope::verifies(&self.envelope, issuer_key)
            && self.envelope.open::<TokenClaims>().ok() == Some(self.claims())
            && self.vasp_id == vasp_id;
        if !authentic {
            return Err(ClaimsError::TokenInvalid);
        }
        if now >= self.expires_at {
            return Err(ClaimsError::TokenExpired);
        }
        Ok(())
    }

    pub fn allows(&self, algo: &AlgorithmRef) -> bool {
        self.allowed_algos.contains(algo)
    }
}

#[derive(Debug, Clone)]
struct Enrollment {
    public_key: PublicKey,
    entitlement: Vec<AlgorithmRef>,
}

#[derive(Debug, Clone)]
pub struct AuthService {
    keypair: KeyPair,
    enrollments: BTreeMap<String, Enrollment>,
    token_ttl: Millis,
    credential_max_age: Millis,
    issued: u64,
}

impl AuthService {
    pub fn new(keypair: KeyPair) -> Self {
        Self {
            keypair,
            enrollments: BTreeMap::new(),
            token_ttl: DEFAULT_TOKEN_TTL_MS,
            credential_max_age: DEFAULT_CREDENTIAL_MAX_AGE_MS,
            issued: 0,
        }
    }

    pub fn with_token_ttl(mut self, ttl: Millis) -> Self {
        self.token_ttl = ttl;
        self
    }

    pub fn service_id(&self) -> &str {
        self.keypair.key_id()
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key()
    }

    pub fn enroll(&mut self, vasp_id: impl Into<String>, key: PublicKey, entitlement: Vec<AlgorithmRef>) {
        self.enrollments.insert(
            vasp_id.into(),
            Enrollment {
                public_key: key,
                entitlement,
            },
        );
    }

    pub fn is_enrolled(&self, vasp_id: &str) -> bool {
        self.enrollments.contains_key(vasp_id)
    }

    /// Issues a token scoped to `requested ∩ entitlement`.
    pub fn authenticate_vasp(
        &mut self,
        vasp_id: &str,
        credential: &SignedEnvelope,
        requested: &[AlgorithmRef],
        now: Millis,
    ) -> Result<AccessToken, ClaimsError> {
        let enrollment = self
            .enrollments
            .get(vasp_id)
            .ok_or_else(|| ClaimsError::UnknownVasp(vasp_id.to_string()))?;
        let expected = AuthRequest {
            vasp_id: vasp_id.to_string(),
            requested: requested.to_vec(),
        };
        let credential_ok = credential.payload_type == PayloadType::AuthRequest
            && credential.signer_id == vasp_id
            && envelope::verifies(credential, &enrollment.public_key)
            && credential.open::<AuthRequest>().ok() == Some(expected)
            && credential.signed_at <= now
            && now - credential.signed_at <= self.credential_max_age;
        if !credential_ok {
            return Err(ClaimsError::BadCredential(vasp_id.to_string()));
        }
        let mut allowed: Vec<AlgorithmRef> = requested
            .iter()
            .filter(|a| enrollment.entitlement.contains(a))
            .cloned()
            .collect();
        allowed.sort();
        allowed.dedup();
        if allowed.is_empty() {
            return Err(ClaimsError::NoEntitledAlgorithms(vasp_id.to_string()));
        }
        self.issued += 1;
        let claims = TokenClaims {
            token_id: format!("{}-t{}", self.service_id(), self.issued),
            vasp_id: vasp_id.to_string(),
            allowed_algos: allowed,
            issued_at: now,
            expires_at: now.saturating_add(self.token_ttl),
        };
        let envelope = envelope::sign_value(&self.keypair, PayloadType::AccessToken, &claims, now)
            .expect("token claims are canonicalizable");
        Ok(AccessToken {
            token_id: claims.token_id,
            vasp_id: claims.vasp_id,
            allowed_algos: claims.allowed_algos,
            issued_at: claims.issued_at,
            expires_at: claims.expires_at,
            envelope,
        })
    }
}

/// Builds the signed credential a VASP presents to the Authentication Service.
pub fn sign_auth_request(vasp: &KeyPair, requested: &[AlgorithmRef], now: Millis) -> SignedEnvelope {
    envelope::sign_value(
        vasp,
        PayloadType::AuthRequest,
        &AuthRequest {
            vasp_id: vasp.key_id().to_string(),
            requested: requested.to_vec(),
        },
        now,
    )
    .expect("auth request is canonicalizable")
}

/// Token request as carried over the bus; `credential` is the output of
/// [`sign_auth_request`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRequest {
    pub correlation_id: String,
    pub credential: SignedEnvelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum TokenOutcome {
    Issued(SignedEnvelope),
    Refused(ClaimsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenReply {
    pub correlation_id: String,
    pub outcome: TokenOutcome,
}
