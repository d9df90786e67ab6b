use serde::{Deserialize, Serialize};

use super::OpalError;
use crate::envelope::{self, KeyPair, Millis, PayloadType, PublicKey, SignedEnvelope};

/// What a subject signs when consenting to one algorithm for one audience.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentTerms {
    pub subject_id: String,
    pub algo_id: String,
    pub audience: String,
    pub granted_at: Millis,
    pub expires_at: Millis,
}

/// Permission to execute an algorithm over the subject's data, signed by the
/// subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    pub subject_id: String,
    pub algo_id: String,
    pub audience: String,
    pub granted_at: Millis,
    pub expires_at: Millis,
    pub envelope: SignedEnvelope,
}

/// Signs a consent record with the subject's key. The subject id is the key id.
pub fn grant_consent(
    subject: &KeyPair,
    algo_id: &str,
    audience: &str,
    now: Millis,
    ttl: Millis,
) -> ConsentRecord {
    let terms = ConsentTerms {
        subject_id: subject.key_id().to_string(),
        algo_id: algo_id.to_string(),
        audience: audience.to_string(),
        granted_at: now,
        expires_at: now.saturating_add(ttl),
    };
    let envelope = envelope::sign_value(subject, PayloadType::Consent, &terms, now)
        .expect("consent terms are canonicalizable");
    ConsentRecord {
        subject_id: terms.subject_id,
        algo_id: terms.algo_id,
        audience: terms.audience,
        granted_at: terms.granted_at,
        expires_at: terms.expires_at,
        envelope,
    }
}

impl ConsentRecord {
    pub fn terms(&self) -> ConsentTerms {
        ConsentTerms {
            subject_id: self.subject_id.clone(),
            algo_id: self.algo_id.clone(),
            audience: self.audience.clone(),
            granted_at: self.granted_at,
            expires_at: self.expires_at,
        }
    }

    pub fn covers(&self, subject_id: &str, algo_id: &str, audience: &str) -> bool {
        self.subject_id == subject_id && self.algo_id == algo_id && self.audience == audience
    }

    /// Checks signature, that the signed terms match the record, and expiry.
    pub fn validate(&self, subject_key: Option<&PublicKey>, now: Millis) -> Result<(), OpalError> {
        let signed_ok = self.envelope.payload_type == PayloadType::Consent
            && self.envelope.signer_id == self.subject_id
            && subject_key.is_some_and(|k| envelope::verifies(&self.envelope, k))
            && self.envelope.open::<ConsentTerms>().ok().as_ref() == Some(&self.terms());
        if !signed_ok {
            return Err(OpalError::ConsentInvalid(self.subject_id.clone()));
        }
        if now >= self.expires_at {
            return Err(OpalError::ConsentExpired(self.subject_id.clone()));
        }
        Ok(())
    }

    pub fn is_valid(&self, subject_key: Option<&PublicKey>, now: Millis) -> bool {
        self.validate(subject_key, now).is_ok()
    }
}
