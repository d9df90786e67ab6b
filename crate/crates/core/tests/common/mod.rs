//! Checks over simulation output, shared by the scenario tests and the
//! acceptance harness. Everything here works from the recorded artifacts
//! (messages, logs, executions, PDS contents) rather than node internals.

#![allow(dead_code)]

use std::collections::BTreeMap;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use claimsnet::audit_log::parse_ndjson;
use claimsnet::claims::ClaimSet;
use claimsnet::opal::{AlgoOutcome, Builtin, OpalError, OutputKind};
use claimsnet::sim::{RunOutput, TraceEvent};
use claimsnet::vasp::NonRepudiationReceipt;
use claimsnet::{canonicalize, KeyPair, PayloadType, SignedEnvelope};

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Canonical bytes of every dataset row declared in the scenario.
pub fn raw_rows(out: &RunOutput) -> Vec<Vec<u8>> {
    out.config
        .data_providers
        .iter()
        .flat_map(|dp| &dp.datasets)
        .flat_map(|ds| &ds.records)
        .map(|r| canonicalize(r).unwrap().as_bytes().to_vec())
        .collect()
}

/// (messages scanned, leaks): a leak is a dataset row found verbatim in a
/// message sent by a data provider, either in the decoded payload or in the
/// envelope as it crossed the wire.
pub fn provider_row_leaks(out: &RunOutput) -> (usize, usize) {
    let providers: Vec<&str> = out.config.data_providers.iter().map(|d| d.id.as_str()).collect();
    let rows = raw_rows(out);
    let (mut scanned, mut leaks) = (0, 0);
    for m in out.messages.iter().filter(|m| providers.contains(&m.from.as_str())) {
        scanned += 1;
        let wire = serde_json::to_vec(&m.envelope).unwrap();
        let payload = m.envelope.payload.as_bytes();
        leaks += rows.iter().filter(|r| contains(payload, r) || contains(&wire, r)).count();
    }
    (scanned, leaks)
}

fn output_kind(algo_id: &str) -> Option<OutputKind> {
    Builtin::for_algo_id(algo_id).map(Builtin::output_kind)
}

/// Aggregate answers that were released with fewer than `k_min` records.
pub fn small_aggregates(out: &RunOutput, k_min: u64) -> (usize, usize) {
    let mut total = 0;
    let mut bad = 0;
    for e in &out.executions {
        if output_kind(&e.request.algorithm.algo_id) != Some(OutputKind::Aggregate) {
            continue;
        }
        if let AlgoOutcome::Ok(r) = &e.reply.outcome {
            total += 1;
            if r.records_used < k_min {
                bad += 1;
            }
        }
    }
    (total, bad)
}

/// Subject-level executions lacking a valid consent, and how many of them
/// failed with anything other than `ConsentMissing`.
pub fn unconsented_subject_runs(out: &RunOutput) -> (usize, usize) {
    let mut total = 0;
    let mut wrong = 0;
    for e in &out.executions {
        if output_kind(&e.request.algorithm.algo_id) != Some(OutputKind::SubjectLevel) {
            continue;
        }
        let subject = match e.request.params.get("subject_id") {
            Some(claimsnet::opal::FieldValue::Text(s)) => s.clone(),
            _ => continue,
        };
        let valid = e.request.consent.as_ref().is_some_and(|c| {
            c.covers(&subject, &e.request.algorithm.algo_id, &e.request.audience)
                && c.is_valid(out.keys.get(&subject), e.at)
        });
        if valid {
            continue;
        }
        total += 1;
        if e.reply.outcome != AlgoOutcome::Err(OpalError::ConsentMissing(subject)) {
            wrong += 1;
        }
    }
    (total, wrong)
}

/// Per (provider, subject): claim sets the provider delivered to VASPs, and
/// the subject's PDS, each as a sorted list of canonical encodings.
pub fn pds_mirror_mismatches(out: &RunOutput) -> (usize, Vec<String>) {
    let delivered_ids: std::collections::BTreeSet<&str> = out
        .trace
        .iter()
        .filter_map(|t| match t {
            TraceEvent::Deliver { msg_id, .. } => Some(msg_id.as_str()),
            _ => None,
        })
        .collect();
    let providers: Vec<&str> = out.config.claims_providers.iter().map(|c| c.id.as_str()).collect();
    let mut delivered: BTreeMap<(String, String), Vec<Vec<u8>>> = BTreeMap::new();
    for m in &out.messages {
        if !providers.contains(&m.from.as_str())
            || m.envelope.payload_type != PayloadType::ClaimSet
            || !delivered_ids.contains(m.msg_id.as_str())
        {
            continue;
        }
        let set = ClaimSet::from_envelope(m.envelope.clone()).unwrap();
        delivered
            .entry((m.from.clone(), set.body.subject_id.clone()))
            .or_default()
            .push(canonicalize(&set.envelope).unwrap().as_bytes().to_vec());
    }
    let mut stored: BTreeMap<(String, String), Vec<Vec<u8>>> = BTreeMap::new();
    for (cp, stores) in &out.pds {
        for store in stores {
            let sets = store
                .claimsets()
                .iter()
                .map(|s| canonicalize(&s.envelope).unwrap().as_bytes().to_vec())
                .collect();
            stored.insert((cp.clone(), store.subject_id().to_string()), sets);
        }
    }
    for v in delivered.values_mut().chain(stored.values_mut()) {
        v.sort();
    }
    stored.retain(|_, v| !v.is_empty());
    let mut keys: Vec<&(String, String)> = delivered.keys().chain(stored.keys()).collect();
    keys.sort();
    keys.dedup();
    let mismatches = keys
        .iter()
        .filter(|k| delivered.get(*k) != stored.get(*k))
        .map(|(cp, s)| format!("{cp}/{s}"))
        .collect();
    (keys.len(), mismatches)
}

/// For every Finalized transfer report, rebuilds each recorded receipt from
/// the two parties' audit logs alone and checks it. Returns (checked, failures).
pub fn receipts_from_logs(out: &RunOutput) -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut failures = Vec::new();
    for r in out.reports.iter().filter(|r| r.state == "Finalized") {
        checked += 1;
        // Re-read both logs from their serialized form only.
        let logs: Vec<SignedEnvelope> = [&r.vasp_id, &r.counterparty_vasp]
            .iter()
            .filter_map(|id| out.logs.get(*id))
            .flat_map(|l| parse_ndjson(&l.to_ndjson()).unwrap())
            .map(|e| e.envelope)
            .collect();
        if r.receipt_hashes.len() != 2 {
            failures.push(format!("{}@{}: {} receipts", r.transfer_id, r.vasp_id, r.receipt_hashes.len()));
            continue;
        }
        for h in &r.receipt_hashes {
            let Some(counter) = logs.iter().find(|e| e.payload_type == PayloadType::Receipt && e.digest() == *h) else {
                failures.push(format!("{}@{}: receipt not logged", r.transfer_id, r.vasp_id));
                continue;
            };
            let Some(receipt) = NonRepudiationReceipt::from_countersignature(counter.clone()) else {
                failures.push(format!("{}@{}: undecodable", r.transfer_id, r.vasp_id));
                continue;
            };
            let sender = &receipt.sender_signature.signer_id;
            let ok = receipt.transfer_id == r.transfer_id
                && out.keys.get(sender).zip(out.keys.get(&counter.signer_id)).is_some_and(|(s, c)| receipt.verify(s, c))
                && logs.iter().any(|e| e.digest() == receipt.delivered_hash)
                && logs.iter().any(|e| *e == receipt.sender_signature);
            if !ok {
                failures.push(format!("{}@{}: receipt does not check out", r.transfer_id, r.vasp_id));
            }
        }
    }
    (checked, failures)
}

/// Private keys of every directory entry derived from the scenario seed, in
/// raw, hex and base64url form.
pub fn private_key_encodings(out: &RunOutput) -> Vec<Vec<u8>> {
    let mut v = Vec::new();
    for (id, public) in out.keys.iter() {
        let kp = KeyPair::derive(id.as_str(), out.config.seed);
        if kp.public_key() != *public {
            continue;
        }
        let sk = kp.private_key_bytes();
        v.push(sk.to_vec());
        v.push(sk.iter().map(|b| format!("{b:02x}")).collect::<String>().into_bytes());
        v.push(URL_SAFE_NO_PAD.encode(sk).into_bytes());
    }
    v
}

pub fn all_logs_verify(out: &RunOutput) -> bool {
    out.logs.values().all(|l| l.verify_chain(&out.keys))
}

/// All output files concatenated in path order.
pub fn output_bytes(out: &RunOutput) -> Vec<u8> {
    let mut files = out.files();
    files.sort();
    let mut bytes = Vec::new();
    for (path, body) in files {
        bytes.extend_from_slice(path.to_string_lossy().as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&body);
    }
    bytes
}
