//! Key material and detached-signature envelopes.
//!
//! Ed25519 is the signature scheme. The signing input is the canonical
//! encoding of `{payload, payload_type, signed_at, signer_id}`, so every piece
//! of envelope metadata is covered by the signature, not just the payload.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::canonical::{self, b64, CanonicalBytes, CanonicalError};

/// Simulated time in milliseconds, UTC.
pub type Millis = u64;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// A 256-bit SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Digest(#[serde(with = "b64::array32")] pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// An Ed25519 public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PublicKey(#[serde(with = "b64::array32")] pub [u8; 32]);

impl PublicKey {
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(PublicKey)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", b64::encode(&self.0))
    }
}

/// A named signing key pair. The private half is never serialized.
#[derive(Clone)]
pub struct KeyPair {
    key_id: String,
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(key_id: impl Into<String>, seed: [u8; 32]) -> Self {
        Self {
            key_id: key_id.into(),
            signing: SigningKey::from_bytes(&seed),
        }
    }

    /// Deterministically derives a key pair from a scenario seed and key id.
    pub fn derive(key_id: impl Into<String>, master_seed: u64) -> Self {
        let key_id = key_id.into();
        let mut h = Sha256::new();
        h.update(b"claimsnet/key/v1");
        h.update(master_seed.to_be_bytes());
        h.update(key_id.as_bytes());
        Self::from_seed(key_id, h.finalize().into())
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    /// Raw private key bytes. Only used by leak-scanning tests.
    pub fn private_key_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    fn sign_raw(&self, message: &[u8]) -> [u8; 64] {
        self.signing.sign(message).to_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("key_id", &self.key_id)
            .field("public_key", &self.public_key())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadType {
    ClaimSet,
    TravelRulePacket,
    Receipt,
    EndpointRecord,
    Consent,
    Attestation,
    LogCheckpoint,
    // Bus message bodies exchanged between nodes.
    AuthRequest,
    AccessToken,
    ClaimsRequest,
    ClaimsError,
    AlgoRequest,
    AlgoResponse,
    ResolveRequest,
    ResolveResponse,
    TransferProposal,
    TransferReady,
    TransferAbort,
    SettlementNotice,
    PossessionProof,
    Enrollment,
    Delivery,
}

impl PayloadType {
    pub fn as_str(&self) -> &'static str {
        match self {
            PayloadType::ClaimSet => "claim_set",
            PayloadType::TravelRulePacket => "travel_rule_packet",
            PayloadType::Receipt => "receipt",
            PayloadType::EndpointRecord => "endpoint_record",
            PayloadType::Consent => "consent",
            PayloadType::Attestation => "attestation",
            PayloadType::LogCheckpoint => "log_checkpoint",
            PayloadType::AuthRequest => "auth_request",
            PayloadType::AccessToken => "access_token",
            PayloadType::ClaimsRequest => "claims_request",
            PayloadType::ClaimsError => "claims_error",
            PayloadType::AlgoRequest => "algo_request",
            PayloadType::AlgoResponse => "algo_response",
            PayloadType::ResolveRequest => "resolve_request",
            PayloadType::ResolveResponse => "resolve_response",
            PayloadType::TransferProposal => "transfer_proposal",
            PayloadType::TransferReady => "transfer_ready",
            PayloadType::TransferAbort => "transfer_abort",
            PayloadType::SettlementNotice => "settlement_notice",
            PayloadType::PossessionProof => "possession_proof",
            PayloadType::Enrollment => "enrollment",
            PayloadType::Delivery => "delivery",
        }
    }
}

impl fmt::Display for PayloadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Canonical payload plus signer metadata and a detached signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedEnvelope {
    pub payload_type: PayloadType,
    pub payload: CanonicalBytes,
    pub signer_id: String,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
    pub signed_at: Millis,
}

#[derive(Serialize)]
struct SigningInput<'a> {
    payload: &'a CanonicalBytes,
    payload_type: PayloadType,
    signed_at: Millis,
    signer_id: &'a str,
}

fn signing_input(
    payload_type: PayloadType,
    payload: &CanonicalBytes,
    signer_id: &str,
    signed_at: Millis,
) -> CanonicalBytes {
    canonical::canonicalize(&SigningInput {
        payload,
        payload_type,
        signed_at,
        signer_id,
    })
    .expect("signing input contains only strings and integers")
}

pub fn sign(
    keypair: &KeyPair,
    payload_type: PayloadType,
    payload: CanonicalBytes,
    now: Millis,
) -> SignedEnvelope {
    let input = signing_input(payload_type, &payload, keypair.key_id(), now);
    SignedEnvelope {
        payload_type,
        signature: keypair.sign_raw(input.as_bytes()).to_vec(),
        payload,
        signer_id: keypair.key_id().to_string(),
        signed_at: now,
    }
}

/// Canonicalizes `value` and signs it.
pub fn sign_value<T: Serialize>(
    keypair: &KeyPair,
    payload_type: PayloadType,
    value: &T,
    now: Millis,
) -> Result<SignedEnvelope, CanonicalError> {
    Ok(sign(keypair, payload_type, canonical::canonicalize(value)?, now))
}

/// Checks the envelope signature under `public_key`.
///
/// Returns `Err(MalformedEnvelope)` when the envelope itself is structurally
/// unusable (empty signer, wrong signature length, non-canonical payload);
/// otherwise `Ok(true)` iff the signature is valid.
pub fn verify(envelope: &SignedEnvelope, public_key: &[u8]) -> Result<bool, EnvelopeError> {
    if envelope.signer_id.is_empty() {
        return Err(EnvelopeError::MalformedEnvelope("empty signer_id".into()));
    }
    let sig: [u8; 64] = envelope.signature.as_slice().try_into().map_err(|_| {
        EnvelopeError::MalformedEnvelope(format!(
            "signature length {} != 64",
            envelope.signature.len()
        ))
    })?;
    if !envelope.payload.is_canonical() {
        return Err(EnvelopeError::MalformedEnvelope(
            "payload is not canonical".into(),
        ));
    }
    let Some(key_bytes) = <[u8; 32]>::try_from(public_key).ok() else {
        return Ok(false);
    };
    let Ok(key) = VerifyingKey::from_bytes(&key_bytes) else {
        return Ok(false);
    };
    let input = signing_input(
        envelope.payload_type,
        &envelope.payload,
        &envelope.signer_id,
        envelope.signed_at,
    );
    let signature = ed25519_dalek::Signature::from_bytes(&sig);
    Ok(key.verify(input.as_bytes(), &signature).is_ok())
}

/// `verify` collapsed to a boolean; malformed envelopes do not verify.
pub fn verifies(envelope: &SignedEnvelope, public_key: &PublicKey) -> bool {
    verify(envelope, public_key.as_bytes()).unwrap_or(false)
}

impl SignedEnvelope {
    pub fn open<T: DeserializeOwned>(&self) -> Result<T, CanonicalError> {
        self.payload.decode()
    }

    /// Hash of the envelope's canonical encoding.
    pub fn digest(&self) -> Digest {
        Digest::of(
            canonical::canonicalize(self)
                .expect("envelopes are always canonicalizable")
                .as_bytes(),
        )
    }

    pub fn to_canonical(&self) -> CanonicalBytes {
        canonical::canonicalize(self).expect("envelopes are always canonicalizable")
    }
}

/// Known public keys by key id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyDirectory {
    keys: BTreeMap<String, PublicKey>,
}

impl KeyDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key_id: impl Into<String>, key: PublicKey) {
        self.keys.insert(key_id.into(), key);
    }

    pub fn add(&mut self, keypair: &KeyPair) {
        self.insert(keypair.key_id(), keypair.public_key());
    }

    pub fn get(&self, key_id: &str) -> Option<&PublicKey> {
        self.keys.get(key_id)
    }

    pub fn contains(&self, key_id: &str) -> bool {
        self.keys.contains_key(key_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PublicKey)> {
        self.keys.iter()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Verifies an envelope under the key registered for its signer.
    pub fn verify(&self, envelope: &SignedEnvelope) -> bool {
        self.get(&envelope.signer_id)
            .is_some_and(|k| verifies(envelope, k))
    }
}
