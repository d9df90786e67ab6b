//! Key-ownership and key-custody attestations.
//!
//! Proving possession of a private key (a signed challenge) is necessary but
//! not sufficient for an ownership attestation: the registry also needs an
//! enrollment record that links the subject to the key.
//!
//! Attestation chains are ordered [`SignedEnvelope`]s carrying an
//! [`AttestationLink`] each. `chain[0]` binds the subject to its key and is
//! signed by the registry; every `chain[i]` is signed by the key certified in
//! `chain[i + 1]`; the last link is signed by a trusted root.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::envelope::{self, KeyPair, Millis, PayloadType, PublicKey, SignedEnvelope};

pub const DEFAULT_ATTESTATION_TTL_MS: Millis = 365 * 24 * 60 * 60 * 1000;
pub const DEFAULT_CHALLENGE_TTL_MS: Millis = 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("possession proof failed for {0}")]
    PossessionFailed(String),
    #[error("no enrollment record links {0} to the key")]
    EnrollmentMissing(String),
    #[error("nonce replayed")]
    NonceReplayed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainError {
    #[error("attestation chain shorter than 2")]
    TooShort,
    #[error("chain link {0} does not verify")]
    BrokenLink(usize),
    #[error("leaf does not match the attested subject or key")]
    SubjectMismatch,
    #[error("chain ends at an untrusted root")]
    UntrustedRoot,
    #[error("attestation outside its validity window")]
    Expired,
}

/// Payload of one chain link: `issuer_id` certifies that `subject_id` holds
/// `public_key` during `[valid_from, valid_to)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationLink {
    pub subject_id: String,
    pub public_key: PublicKey,
    pub issuer_id: String,
    pub valid_from: Millis,
    pub valid_to: Millis,
}

/// Root-of-trust keys by authority id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrustedRoots(BTreeMap<String, PublicKey>);

impl TrustedRoots {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, root_id: impl Into<String>, key: PublicKey) {
        self.0.insert(root_id.into(), key);
    }

    pub fn get(&self, root_id: &str) -> Option<&PublicKey> {
        self.0.get(root_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }
}

/// A certificate authority: a key plus the chain certifying it (empty for a root).
#[derive(Debug, Clone)]
pub struct Authority {
    keypair: KeyPair,
    chain: Vec<SignedEnvelope>,
}

impl Authority {
    pub fn root(keypair: KeyPair) -> Self {
        Self {
            keypair,
            chain: Vec::new(),
        }
    }

    /// Creates an authority certified by `parent`.
    pub fn subordinate(keypair: KeyPair, parent: &Authority, valid_from: Millis, valid_to: Millis) -> Self {
        let link = parent.certify(keypair.key_id(), keypair.public_key(), valid_from, valid_to);
        let mut chain = vec![link];
        chain.extend(parent.chain.iter().cloned());
        Self { keypair, chain }
    }

    pub fn id(&self) -> &str {
        self.keypair.key_id()
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key()
    }

    pub fn chain(&self) -> &[SignedEnvelope] {
        &self.chain
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn certify(&self, subject_id: &str, key: PublicKey, valid_from: Millis, valid_to: Millis) -> SignedEnvelope {
        let link = AttestationLink {
            subject_id: subject_id.to_string(),
            public_key: key,
            issuer_id: self.id().to_string(),
            valid_from,
            valid_to,
        };
        envelope::sign_value(&self.keypair, PayloadType::Attestation, &link, valid_from)
            .expect("links are canonicalizable")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyOwnershipAttestation {
    pub subject_id: String,
    pub public_key: PublicKey,
    pub chain: Vec<SignedEnvelope>,
    pub valid_from: Millis,
    pub valid_to: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustodyTerms {
    pub vasp_id: String,
    pub subject_id: String,
    pub public_key: PublicKey,
    pub valid_from: Millis,
    pub valid_to: Millis,
}

/// Evidence that a VASP holds and operates a customer's key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustodyAttestation {
    pub vasp_id: String,
    pub subject_id: String,
    pub public_key: PublicKey,
    pub envelope: SignedEnvelope,
    /// Chain certifying the registry that signed `envelope`.
    pub issuer_chain: Vec<SignedEnvelope>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PossessionChallenge {
    #[serde(with = "crate::canonical::b64")]
    pub nonce: Vec<u8>,
    pub issued_at: Millis,
    pub target_public_key: PublicKey,
}

/// A challenge signed by the key holder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PossessionProof {
    pub challenge: PossessionChallenge,
    pub response: SignedEnvelope,
}

/// Anything able to answer a possession challenge.
pub trait PossessionResponder {
    fn respond(&self, challenge: &PossessionChallenge, now: Millis) -> SignedEnvelope;
}

impl PossessionResponder for KeyPair {
    fn respond(&self, challenge: &PossessionChallenge, now: Millis) -> SignedEnvelope {
        envelope::sign_value(self, PayloadType::PossessionProof, challenge, now)
            .expect("challenges are canonicalizable")
    }
}

pub fn prove_possession(key: &KeyPair, challenge: PossessionChallenge, now: Millis) -> PossessionProof {
    PossessionProof {
        response: key.respond(&challenge, now),
        challenge,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentTerms {
    pub subject_id: String,
    pub public_key: PublicKey,
    pub enrolled_at: Millis,
}

/// Registry-signed record linking a legal subject to a key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentRecord {
    pub subject_id: String,
    pub public_key: PublicKey,
    pub envelope: SignedEnvelope,
}

#[derive(Debug, Clone)]
pub struct OwnershipEvidence {
    pub possession: PossessionProof,
    pub enrollment: Option<EnrollmentRecord>,
}

#[derive(Debug, Clone)]
pub struct KeyRegistry {
    authority: Authority,
    outstanding: BTreeMap<Vec<u8>, PossessionChallenge>,
    used: BTreeSet<Vec<u8>>,
    accepted_nonces: Vec<Vec<u8>>,
    nonce_counter: u64,
    attestation_ttl: Millis,
    challenge_ttl: Millis,
}

impl KeyRegistry {
    /// `authority` must be certified up to a root (or be a root itself).
    pub fn new(authority: Authority) -> Self {
        Self {
            authority,
            outstanding: BTreeMap::new(),
            used: BTreeSet::new(),
            accepted_nonces: Vec::new(),
            nonce_counter: 0,
            attestation_ttl: DEFAULT_ATTESTATION_TTL_MS,
            challenge_ttl: DEFAULT_CHALLENGE_TTL_MS,
        }
    }

    pub fn with_attestation_ttl(mut self, ttl: Millis) -> Self {
        self.attestation_ttl = ttl;
        self
    }

    pub fn registry_id(&self) -> &str {
        self.authority.id()
    }

    pub fn public_key(&self) -> PublicKey {
        self.authority.public_key()
    }

    pub fn authority(&self) -> &Authority {
        &self.authority
    }

    /// Nonces of proofs that verified, in acceptance order.
    pub fn accepted_nonces(&self) -> &[Vec<u8>] {
        &self.accepted_nonces
    }

    pub fn issue_challenge(&mut self, target: PublicKey, now: Millis) -> PossessionChallenge {
        self.nonce_counter += 1;
        let mut h = Sha256::new();
        h.update(b"claimsnet/nonce/v1");
        h.update(self.registry_id().as_bytes());
        h.update(self.nonce_counter.to_be_bytes());
        h.update(target.as_bytes());
        let challenge = PossessionChallenge {
            nonce: h.finalize().to_vec(),
            issued_at: now,
            target_public_key: target,
        };
        self.outstanding.insert(challenge.nonce.clone(), challenge.clone());
        challenge
    }

    /// Consumes the proof's nonce and checks the signature.
    pub fn verify_possession(&mut self, proof: &PossessionProof, now: Millis) -> Result<bool, RegistryError> {
        let nonce = &proof.challenge.nonce;
        if self.used.contains(nonce) {
            return Err(RegistryError::NonceReplayed);
        }
        let Some(issued) = self.outstanding.remove(nonce) else {
            return Ok(false);
        };
        self.used.insert(nonce.clone());
        let ok = issued == proof.challenge
            && now.saturating_sub(issued.issued_at) <= self.challenge_ttl
            && proof.response.payload_type == PayloadType::PossessionProof
            && envelope::verifies(&proof.response, &issued.target_public_key)
            && proof.response.open::<PossessionChallenge>().ok().as_ref() == Some(&issued);
        if ok {
            self.accepted_nonces.push(nonce.clone());
        }
        Ok(ok)
    }

    /// Runs a full challenge/response round against `responder`.
    pub fn challenge_possession(
        &mut self,
        public_key: PublicKey,
        responder: &dyn PossessionResponder,
        now: Millis,
    ) -> Result<bool, RegistryError> {
        let challenge = self.issue_challenge(public_key, now);
        let response = responder.respond(&challenge, now);
        self.verify_possession(&PossessionProof { challenge, response }, now)
    }

    /// Records that `subject_id` is the legal owner of `public_key`.
    pub fn enroll(&self, subject_id: &str, public_key: PublicKey, now: Millis) -> EnrollmentRecord {
        let terms = EnrollmentTerms {
            subject_id: subject_id.to_string(),
            public_key,
            enrolled_at: now,
        };
        EnrollmentRecord {
            subject_id: terms.subject_id.clone(),
            public_key,
            envelope: envelope::sign_value(self.authority.keypair(), PayloadType::Enrollment, &terms, now)
                .expect("enrollment terms are canonicalizable"),
        }
    }

    fn enrollment_valid(&self, record: &EnrollmentRecord, subject_id: &str, key: &PublicKey) -> bool {
        record.subject_id == subject_id
            && record.public_key == *key
            && record.envelope.payload_type == PayloadType::Enrollment
            && envelope::verifies(&record.envelope, &self.public_key())
            && record
                .envelope
                .open::<EnrollmentTerms>()
                .is_ok_and(|t| t.subject_id == subject_id && t.public_key == *key)
    }

    pub fn issue_ownership(
        &mut self,
        subject_id: &str,
        public_key: PublicKey,
        evidence: &OwnershipEvidence,
        now: Millis,
    ) -> Result<KeyOwnershipAttestation, RegistryError> {
        if evidence.possession.challenge.target_public_key != public_key
            || !self.verify_possession(&evidence.possession, now)?
        {
            return Err(RegistryError::PossessionFailed(subject_id.to_string()));
        }
        match &evidence.enrollment {
            Some(r) if self.enrollment_valid(r, subject_id, &public_key) => {}
            _ => return Err(RegistryError::EnrollmentMissing(subject_id.to_string())),
        }
        let valid_to = now.saturating_add(self.attestation_ttl);
        let leaf = self.authority.certify(subject_id, public_key, now, valid_to);
        let mut chain = vec![leaf];
        chain.extend(self.authority.chain().iter().cloned());
        let chain_valid_to = chain
            .iter()
            .filter_map(|e| e.open::<AttestationLink>().ok())
            .map(|l| l.valid_to)
            .min()
            .unwrap_or(valid_to);
        Ok(KeyOwnershipAttestation {
            subject_id: subject_id.to_string(),
            public_key,
            chain,
            valid_from: now,
            valid_to: chain_valid_to,
        })
    }

    pub fn issue_custody(&self, vasp_id: &str, subject_id: &str, public_key: PublicKey, now: Millis) -> CustodyAttestation {
        let terms = CustodyTerms {
            vasp_id: vasp_id.to_string(),
            subject_id: subject_id.to_string(),
            public_key,
            valid_from: now,
            valid_to: now.saturating_add(self.attestation_ttl),
        };
        CustodyAttestation {
            vasp_id: terms.vasp_id.clone(),
            subject_id: terms.subject_id.clone(),
            public_key,
            envelope: envelope::sign_value(self.authority.keypair(), PayloadType::Attestation, &terms, now)
                .expect("custody terms are canonicalizable"),
            issuer_chain: self.authority.chain().to_vec(),
        }
    }
}

/// Checks that `signed` was signed by a key certified through `chain` up to a
/// trusted root, with every link valid at `now`. `offset` is the chain index
/// reported in errors for `chain[0]`.
fn walk_to_root(
    signed: &SignedEnvelope,
    chain: &[SignedEnvelope],
    roots: &TrustedRoots,
    now: Millis,
    offset: usize,
) -> Result<(), ChainError> {
    let mut current = signed;
    let mut expired = false;
    for (i, link_env) in chain.iter().enumerate() {
        let link: AttestationLink = match link_env.open() {
            Ok(l) if link_env.payload_type == PayloadType::Attestation => l,
            _ => return Err(ChainError::BrokenLink(offset + i)),
        };
        if link.subject_id != current.signer_id
            || link.issuer_id != link_env.signer_id
            || !envelope::verifies(current, &link.public_key)
        {
            return Err(ChainError::BrokenLink(offset + i - 1));
        }
        expired |= !(link.valid_from <= now && now < link.valid_to);
        current = link_env;
    }
    let Some(root_key) = roots.get(&current.signer_id) else {
        return Err(ChainError::UntrustedRoot);
    };
    if !envelope::verifies(current, root_key) {
        return Err(ChainError::BrokenLink(offset + chain.len() - 1));
    }
    if expired {
        return Err(ChainError::Expired);
    }
    Ok(())
}

/// Full check of an ownership attestation, reporting the first defect.
pub fn check_ownership(att: &KeyOwnershipAttestation, roots: &TrustedRoots, now: Millis) -> Result<(), ChainError> {
    if att.chain.len() < 2 {
        return Err(ChainError::TooShort);
    }
    let leaf_env = &att.chain[0];
    let leaf: AttestationLink = match leaf_env.open() {
        Ok(l) if leaf_env.payload_type == PayloadType::Attestation => l,
        _ => return Err(ChainError::BrokenLink(0)),
    };
    if leaf.subject_id != att.subject_id || leaf.public_key != att.public_key || leaf.issuer_id != leaf_env.signer_id {
        return Err(ChainError::SubjectMismatch);
    }
    walk_to_root(leaf_env, &att.chain[1..], roots, now, 1)?;
    let leaf_live = leaf.valid_from <= now && now < leaf.valid_to;
    let att_live = att.valid_from <= now && now < att.valid_to;
    if !leaf_live || !att_live {
        return Err(ChainError::Expired);
    }
    Ok(())
}

pub fn verify_ownership(att: &KeyOwnershipAttestation, roots: &TrustedRoots, now: Millis) -> bool {
    check_ownership(att, roots, now).is_ok()
}

pub fn check_custody(att: &CustodyAttestation, roots: &TrustedRoots, now: Millis) -> Result<(), ChainError> {
    let terms: CustodyTerms = match att.envelope.open() {
        Ok(t) if att.envelope.payload_type == PayloadType::Attestation => t,
        _ => return Err(ChainError::BrokenLink(0)),
    };
    if terms.vasp_id != att.vasp_id || terms.subject_id != att.subject_id || terms.public_key != att.public_key {
        return Err(ChainError::SubjectMismatch);
    }
    if att.issuer_chain.is_empty() {
        // Signed directly by a root.
        match roots.get(&att.envelope.signer_id) {
            None => return Err(ChainError::UntrustedRoot),
            Some(k) if !envelope::verifies(&att.envelope, k) => return Err(ChainError::BrokenLink(0)),
            Some(_) => {}
        }
    } else {
        walk_to_root(&att.envelope, &att.issuer_chain, roots, now, 1)?;
    }
    if !(terms.valid_from <= now && now < terms.valid_to) {
        return Err(ChainError::Expired);
    }
    Ok(())
}

pub fn verify_custody(att: &CustodyAttestation, roots: &TrustedRoots, now: Millis) -> bool {
    check_custody(att, roots, now).is_ok()
}
