//! Run artefacts and their on-disk layout.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bus::BusMessage;
use super::config::ScenarioConfig;
use super::trace::{self, TraceEvent};
use crate::audit_log::AuditLog;
use crate::claims::{ClaimSet, PersonalDataStore};
use crate::envelope::{KeyDirectory, Millis};
use crate::opal::{AlgoReply, AlgoRequest};
use crate::vasp::ledger::Ledger;
use crate::vasp::{TransferReport, Transition};

/// One algorithm execution as seen by the data provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    pub at: Millis,
    pub provider: String,
    pub requester: String,
    pub request: AlgoRequest,
    pub reply: AlgoReply,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub messages: usize,
    pub messages_by_type: BTreeMap<String, usize>,
    pub final_states: BTreeMap<String, usize>,
    pub transfers: Vec<TransferReport>,
    pub ledgers: BTreeMap<String, BTreeMap<String, i64>>,
    pub opening_total: i64,
    pub closing_total: i64,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub trace: Vec<TraceEvent>,
    /// Every message put on the bus, including dropped ones, in send order.
    pub messages: Vec<BusMessage>,
    pub reports: Vec<TransferReport>,
    pub logs: BTreeMap<String, AuditLog>,
    pub keys: KeyDirectory,
    pub pds: BTreeMap<String, Vec<PersonalDataStore>>,
    pub issued: BTreeMap<String, Vec<ClaimSet>>,
    pub ledgers: BTreeMap<String, Ledger>,
    pub opening_total: i64,
    pub executions: Vec<Execution>,
    pub did_dump: Option<Vec<u8>>,
    pub transitions: BTreeMap<String, Vec<Transition>>,
}

impl RunOutput {
    /// Messages whose payload `node` can read: its own traffic plus anything
    /// that travelled unsealed.
    pub fn observable_by<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a BusMessage> + 'a {
        self.messages
            .iter()
            .filter(move |m| !m.sealed || m.from == node || m.to == node)
    }

    pub fn closing_total(&self) -> i64 {
        self.ledgers.values().map(Ledger::total).sum()
    }

    pub fn report(&self) -> RunReport {
        let mut messages_by_type = BTreeMap::new();
        for m in &self.messages {
            *messages_by_type
                .entry(m.envelope.payload_type.as_str().to_string())
                .or_default() += 1;
        }
        let mut final_states = BTreeMap::new();
        for r in &self.reports {
            *final_states.entry(r.state.clone()).or_default() += 1;
        }
        RunReport {
            scenario: self.config.name.clone(),
            seed: self.config.seed,
            messages: self.messages.len(),
            messages_by_type,
            final_states,
            transfers: self.reports.clone(),
            ledgers: self
                .ledgers
                .iter()
                .map(|(id, l)| (id.clone(), l.balances().clone()))
                .collect(),
            opening_total: self.opening_total,
            closing_total: self.closing_total(),
        }
    }

    /// Output files as (relative path, bytes).
    pub fn files(&self) -> Vec<(PathBuf, Vec<u8>)> {
        let mut files = vec![
            (PathBuf::from("scenario.json"), self.config.to_canonical()),
            (PathBuf::from("trace.ndjson"), trace::to_ndjson(&self.trace)),
            (PathBuf::from("report.json"), pretty(&self.report())),
            (PathBuf::from("keys.json"), pretty(&self.keys)),
        ];
        for log in self.logs.values() {
            files.push((Path::new("logs").join(log.file_name()), log.to_ndjson()));
        }
        for (cp, stores) in &self.pds {
            for store in stores {
                let path = Path::new("pds").join(cp).join(format!("{}.ndjson", store.subject_id()));
                files.push((path, store.to_ndjson()));
            }
        }
        for sets in self.issued.values() {
            for set in sets {
                let path = Path::new("claimsets").join(format!("{}.json", set.body.claimset_id));
                files.push((path, pretty(&set.envelope)));
            }
        }
        if let Some(dump) = &self.did_dump {
            files.push((PathBuf::from("did.ndjson"), dump.clone()));
        }
        files
    }

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        for (rel, bytes) in self.files() {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, bytes)?;
        }
        Ok(())
    }
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("output documents serialize");
    out.push(b'\n');
    out
}
