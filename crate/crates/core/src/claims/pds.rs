use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ClaimSet;
use crate::canonical;
use crate::envelope::SignedEnvelope;

/// Per-subject store of every claim set issued about the subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonalDataStore {
    subject_id: String,
    stored: Vec<ClaimSet>,
    claim_ids: BTreeSet<String>,
}

/// One line of a PDS export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdsExportLine {
    pub subject_id: String,
    pub claimset: SignedEnvelope,
}

impl PersonalDataStore {
    pub fn new(subject_id: impl Into<String>) -> Self {
        Self {
            subject_id: subject_id.into(),
            stored: Vec::new(),
            claim_ids: BTreeSet::new(),
        }
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    /// Stores a copy unless one of its claims is already held. Returns whether
    /// the store changed.
    pub fn mirror(&mut self, claimset: &ClaimSet) -> bool {
        if claimset
            .claims()
            .iter()
            .any(|c| self.claim_ids.contains(&c.claim_id))
        {
            return false;
        }
        self.claim_ids
            .extend(claimset.claims().iter().map(|c| c.claim_id.clone()));
        self.stored.push(claimset.clone());
        true
    }

    pub fn claimsets(&self) -> &[ClaimSet] {
        &self.stored
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for cs in &self.stored {
            let line = PdsExportLine {
                subject_id: self.subject_id.clone(),
                claimset: cs.envelope.clone(),
            };
            out.extend_from_slice(
                canonical::canonicalize(&line)
                    .expect("pds lines are canonicalizable")
                    .as_bytes(),
            );
            out.push(b'\n');
        }
        out
    }
}
