//! Hash-chained, append-only audit log.
//!
//! Each entry hashes `{envelope, prev_hash, recorded_at, seq}` in canonical form
//! with SHA-256. The genesis entry links to the all-zero digest. On disk a log
//! is newline-delimited canonical records, one entry per line, in a file named
//! `<node_id>.log`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical::{self, CanonicalBytes};
use crate::envelope::{Digest, KeyDirectory, Millis, SignedEnvelope};

#[derive(Debug, thiserror::Error)]
pub enum AuditLogError {
    #[error("envelope from {0} does not verify")]
    InvalidEnvelope(String),
    #[error("log line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub prev_hash: Digest,
    pub entry_hash: Digest,
    pub recorded_at: Millis,
    pub envelope: SignedEnvelope,
}

#[derive(Serialize)]
struct HashedFields<'a> {
    envelope: &'a SignedEnvelope,
    prev_hash: &'a Digest,
    recorded_at: Millis,
    seq: u64,
}

/// Hash of an entry's content fields.
pub fn entry_hash(seq: u64, prev_hash: &Digest, recorded_at: Millis, envelope: &SignedEnvelope) -> Digest {
    let bytes = canonical::canonicalize(&HashedFields {
        envelope,
        prev_hash,
        recorded_at,
        seq,
    })
    .expect("log fields are canonicalizable");
    Digest::of(bytes.as_bytes())
}

impl LogEntry {
    pub fn recompute_hash(&self) -> Digest {
        entry_hash(self.seq, &self.prev_hash, self.recorded_at, &self.envelope)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditLog {
    node_id: String,
    entries: Vec<LogEntry>,
}

impl AuditLog {
    pub fn new(node_id: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head_hash(&self) -> Digest {
        self.entries.last().map_or(Digest::ZERO, |e| e.entry_hash)
    }

    /// Appends a verified envelope, chaining it to the current head.
    pub fn append(
        &mut self,
        envelope: SignedEnvelope,
        keys: &KeyDirectory,
        now: Millis,
    ) -> Result<&LogEntry, AuditLogError> {
        if !keys.verify(&envelope) {
            return Err(AuditLogError::InvalidEnvelope(envelope.signer_id));
        }
        let seq = self.entries.len() as u64;
        let prev_hash = self.head_hash();
        let entry_hash = entry_hash(seq, &prev_hash, now, &envelope);
        self.entries.push(LogEntry {
            seq,
            prev_hash,
            entry_hash,
            recorded_at: now,
            envelope,
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Whether an envelope with this digest has been logged.
    pub fn contains_digest(&self, digest: &Digest) -> bool {
        self.entries.iter().any(|e| e.envelope.digest() == *digest)
    }

    pub fn verify_chain(&self, keys: &KeyDirectory) -> bool {
        verify_chain(&self.entries, keys)
    }

    /// Sequence numbers of entries older than the retention window.
    ///
    /// Entries are never removed; this only reports what a retention policy
    /// would allow an operator to archive.
    pub fn past_retention(&self, now: Millis, retention_ms: Millis) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| now.saturating_sub(e.recorded_at) > retention_ms)
            .map(|e| e.seq)
            .collect()
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        to_ndjson(&self.entries)
    }

    pub fn from_ndjson(node_id: impl Into<String>, bytes: &[u8]) -> Result<Self, AuditLogError> {
        Ok(Self {
            node_id: node_id.into(),
            entries: parse_ndjson(bytes)?,
        })
    }

    pub fn file_name(&self) -> String {
        format!("{}.log", self.node_id)
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<(), AuditLogError> {
        std::fs::write(dir.join(self.file_name()), self.to_ndjson())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, AuditLogError> {
        let node_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_ndjson(node_id, &std::fs::read(path)?)
    }
}

/// True iff seq numbers are contiguous from 0, every hash recomputes and links
/// to its predecessor, and every envelope verifies under `keys`.
pub fn verify_chain(entries: &[LogEntry], keys: &KeyDirectory) -> bool {
    let mut prev = Digest::ZERO;
    for (i, entry) in entries.iter().enumerate() {
        if entry.seq != i as u64
            || entry.prev_hash != prev
            || entry.recompute_hash() != entry.entry_hash
            || !keys.verify(&entry.envelope)
        {
            return false;
        }
        prev = entry.entry_hash;
    }
    true
}

pub fn to_ndjson(entries: &[LogEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    for entry in entries {
        out.extend_from_slice(
            canonical::canonicalize(entry)
                .expect("log entries are canonicalizable")
                .as_bytes(),
        );
        out.push(b'\n');
    }
    out
}

/// Parses a log file. Lines must be canonical records.
pub fn parse_ndjson(bytes: &[u8]) -> Result<Vec<LogEntry>, AuditLogError> {
    let mut entries = Vec::new();
    for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let canonical = CanonicalBytes::from_canonical(line.to_vec()).map_err(|e| {
            AuditLogError::Parse {
                line: i + 1,
                reason: e.to_string(),
            }
        })?;
        let entry = canonical.decode().map_err(|e| AuditLogError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Checks a serialized log: parse errors count as a broken chain.
pub fn verify_ndjson(bytes: &[u8], keys: &KeyDirectory) -> bool {
    parse_ndjson(bytes).is_ok_and(|entries| verify_chain(&entries, keys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{sign_value, KeyPair, PayloadType};
    use serde_json::json;

    fn setup(n: usize) -> (AuditLog, KeyDirectory) {
        let kp = KeyPair::derive("signer", 3);
        let mut keys = KeyDirectory::new();
        keys.add(&kp);
        let mut log = AuditLog::new("node");
        for i in 0..n {
            let env = sign_value(&kp, PayloadType::ClaimSet, &json!({ "i": i }), i as u64).unwrap();
            log.append(env, &keys, 100 + i as u64).unwrap();
        }
        (log, keys)
    }

    #[test]
    fn genesis_links_to_zero() {
        let (log, _) = setup(1);
        assert_eq!(log.entries()[0].seq, 0);
        assert_eq!(log.entries()[0].prev_hash, Digest::ZERO);
    }

    #[test]
    fn second_entry_links_to_first() {
        let (log, keys) = setup(2);
        assert_eq!(log.entries()[1].prev_hash, log.entries()[0].entry_hash);
        assert!(log.verify_chain(&keys));
    }

    #[test]
    fn rejects_unverifiable_envelope() {
        let (mut log, keys) = setup(1);
        let stranger = KeyPair::derive("stranger", 3);
        let env = sign_value(&stranger, PayloadType::ClaimSet, &json!({}), 0).unwrap();
        assert!(matches!(
            log.append(env, &keys, 5),
            Err(AuditLogError::InvalidEnvelope(_))
        ));
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn mutated_payload_breaks_chain() {
        let (log, keys) = setup(10);
        let mut entries = log.entries().to_vec();
        let mut bytes = entries[4].envelope.payload.as_bytes().to_vec();
        let pos = bytes.iter().position(|b| *b == b'4').unwrap();
        bytes[pos] = b'9';
        entries[4].envelope.payload = CanonicalBytes::from_raw_unchecked(bytes);
        assert!(!verify_chain(&entries, &keys));
    }

    #[test]
    fn ndjson_round_trip() {
        let (log, keys) = setup(5);
        let bytes = log.to_ndjson();
        assert_eq!(bytes.iter().filter(|b| **b == b'\n').count(), 5);
        let back = AuditLog::from_ndjson("node", &bytes).unwrap();
        assert_eq!(back, log);
        assert!(verify_ndjson(&bytes, &keys));
    }

    #[test]
    fn non_canonical_line_is_rejected() {
        let (log, _) = setup(1);
        let mut bytes = log.to_ndjson();
        bytes.insert(1, b' ');
        assert!(AuditLog::from_ndjson("node", &bytes).is_err());
    }

    #[test]
    fn retention_reports_old_entries() {
        let (log, _) = setup(5);
        assert_eq!(log.past_retention(110, 8), vec![0, 1]);
    }
}
