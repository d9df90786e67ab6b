//! DID endpoint-record registry with newest-record-wins resolution.
//!
//! A subject self-declares which claims provider serves it by signing an
//! [`EndpointRecord`]. Replacing the record means registering a newer one;
//! timestamps must strictly increase per DID. The complete accepted history is
//! kept so head transitions can be replayed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::envelope::{self, KeyPair, Millis, PayloadType, PublicKey, SignedEnvelope};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum DidError {
    #[error("record for {0} does not verify under the DID key")]
    BadSignature(String),
    #[error("record for {did} at {recorded_at} is not newer than head {head}")]
    StaleRecord { did: String, recorded_at: Millis, head: Millis },
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0} is already bound to a different key")]
    KeyConflict(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointTerms {
    pub did: String,
    pub claims_provider_id: String,
    pub endpoint_address: String,
    pub recorded_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointRecord {
    pub did: String,
    pub claims_provider_id: String,
    pub endpoint_address: String,
    pub recorded_at: Millis,
    pub envelope: SignedEnvelope,
}

impl EndpointRecord {
    /// Signs a record with the subject's DID key.
    pub fn new(
        subject: &KeyPair,
        did: &str,
        claims_provider_id: &str,
        endpoint_address: &str,
        recorded_at: Millis,
    ) -> Self {
        let terms = EndpointTerms {
            did: did.to_string(),
            claims_provider_id: claims_provider_id.to_string(),
            endpoint_address: endpoint_address.to_string(),
            recorded_at,
        };
        let envelope = envelope::sign_value(subject, PayloadType::EndpointRecord, &terms, recorded_at)
            .expect("endpoint terms are canonicalizable");
        Self {
            did: terms.did,
            claims_provider_id: terms.claims_provider_id,
            endpoint_address: terms.endpoint_address,
            recorded_at,
            envelope,
        }
    }

    pub fn from_envelope(envelope: SignedEnvelope) -> Result<Self, crate::CanonicalError> {
        let t: EndpointTerms = envelope.open()?;
        Ok(Self {
            did: t.did,
            claims_provider_id: t.claims_provider_id,
            endpoint_address: t.endpoint_address,
            recorded_at: t.recorded_at,
            envelope,
        })
    }

    fn terms(&self) -> EndpointTerms {
        EndpointTerms {
            did: self.did.clone(),
            claims_provider_id: self.claims_provider_id.clone(),
            endpoint_address: self.endpoint_address.clone(),
            recorded_at: self.recorded_at,
        }
    }

    pub fn verify(&self, did_key: &PublicKey) -> bool {
        self.envelope.payload_type == PayloadType::EndpointRecord
            && envelope::verifies(&self.envelope, did_key)
            && self.envelope.open::<EndpointTerms>().ok() == Some(self.terms())
    }
}

#[derive(Debug, Clone, Default)]
pub struct DidResolver {
    keys: BTreeMap<String, PublicKey>,
    heads: BTreeMap<String, usize>,
    history: Vec<EndpointRecord>,
}

impl DidResolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds a DID to the key that signs its records.
    pub fn bind_key(&mut self, did: &str, key: PublicKey) -> Result<(), DidError> {
        match self.keys.get(did) {
            Some(existing) if *existing != key => Err(DidError::KeyConflict(did.to_string())),
            _ => {
                self.keys.insert(did.to_string(), key);
                Ok(())
            }
        }
    }

    pub fn did_key(&self, did: &str) -> Option<&PublicKey> {
        self.keys.get(did)
    }

    pub fn register(&mut self, record: EndpointRecord) -> Result<(), DidError> {
        let key = self
            .keys
            .get(&record.did)
            .ok_or_else(|| DidError::BadSignature(record.did.clone()))?;
        if !record.verify(key) {
            return Err(DidError::BadSignature(record.did.clone()));
        }
        if let Some(head) = self.heads.get(&record.did).map(|i| &self.history[*i]) {
            if record.recorded_at <= head.recorded_at {
                return Err(DidError::StaleRecord {
                    did: record.did.clone(),
                    recorded_at: record.recorded_at,
                    head: head.recorded_at,
                });
            }
        }
        self.heads.insert(record.did.clone(), self.history.len());
        self.history.push(record);
        Ok(())
    }

    pub fn resolve(&self, did: &str) -> Result<&EndpointRecord, DidError> {
        self.heads
            .get(did)
            .map(|i| &self.history[*i])
            .ok_or_else(|| DidError::NotFound(did.to_string()))
    }

    /// Every accepted record, in acceptance order.
    pub fn history(&self) -> &[EndpointRecord] {
        &self.history
    }

    /// Newline-delimited canonical dump of the accepted history.
    pub fn dump_ndjson(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.history {
            out.extend_from_slice(
                canonical::canonicalize(r)
                    .expect("records are canonicalizable")
                    .as_bytes(),
            );
            out.push(b'\n');
        }
        out
    }
}

/// Resolver lookup over the bus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolveRequest {
    pub correlation_id: String,
    pub did: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolveResponse {
    pub correlation_id: String,
    pub did: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<SignedEnvelope>,
}
