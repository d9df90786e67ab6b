//! Scenario documents.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::bus::FaultRule;
use super::SimError;
use crate::envelope::Millis;
use crate::opal::{AlgorithmRef, Builtin, DataRecord};
use crate::vasp::node::Timeouts;
use crate::vasp::{JurisdictionPolicy, OriginatorLocator};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkConfig,
    pub algorithms: Vec<AlgorithmDecl>,
    pub data_providers: Vec<DataProviderDecl>,
    pub claims_providers: Vec<ClaimsProviderDecl>,
    #[serde(default)]
    pub roots: Vec<String>,
    #[serde(default)]
    pub registries: Vec<RegistryDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolver: Option<String>,
    pub vasps: Vec<VaspDecl>,
    pub subjects: Vec<SubjectDecl>,
    pub script: Vec<ScriptEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub min_latency_ms: Millis,
    pub max_latency_ms: Millis,
    /// Marks every message sealed to its recipient.
    pub confidential_transport: bool,
    /// Events scheduled later than this are not processed.
    pub horizon_ms: Millis,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            min_latency_ms: 5,
            max_latency_ms: 50,
            confidential_transport: false,
            horizon_ms: 24 * 3600 * 1000,
        }
    }
}

/// A built-in algorithm made available to the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmDecl {
    pub algo_id: String,
    pub vetted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDecl {
    pub dataset_id: String,
    pub schema: Vec<String>,
    pub records: Vec<DataRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataProviderDecl {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_min: Option<u64>,
    pub datasets: Vec<DatasetDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteDecl {
    pub algorithm: AlgorithmRef,
    pub provider: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitlementDecl {
    pub vasp: String,
    pub algorithms: Vec<AlgorithmRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimsProviderDecl {
    pub id: String,
    pub routes: Vec<RouteDecl>,
    pub entitlements: Vec<EntitlementDecl>,
    /// How long to wait for data providers before issuing what has arrived.
    #[serde(default = "default_provider_timeout")]
    pub provider_timeout_ms: Millis,
}

fn default_provider_timeout() -> Millis {
    5_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryDecl {
    pub id: String,
    pub root: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaspDecl {
    pub id: String,
    pub jurisdiction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims_provider: Option<String>,
    pub algorithms: Vec<AlgorithmRef>,
    pub trusted_roots: Vec<String>,
    #[serde(default)]
    pub policy: JurisdictionPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeouts: Option<Timeouts>,
}

/// How a subject's key provenance is established at onboarding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "registry", rename_all = "snake_case")]
pub enum KeyDecl {
    Ownership(String),
    Custody(String),
    PossessionOnly(String),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectDecl {
    pub id: String,
    pub name: String,
    pub vasp: String,
    pub account: String,
    pub balance: i64,
    pub locator: OriginatorLocator,
    pub key: KeyDecl,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub did: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims_provider: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub at: Millis,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Onboard {
        subject: String,
    },
    GrantConsent {
        subject: String,
        algo_id: String,
        claims_provider: String,
        ttl_ms: Millis,
    },
    RegisterEndpoint {
        subject: String,
        claims_provider: String,
    },
    InitiateTransfer {
        originator: String,
        beneficiary: String,
        amount: u64,
    },
    InjectFault {
        rule: FaultRule,
    },
}

impl ScenarioConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, SimError> {
        serde_json::from_slice(bytes).map_err(|e| SimError::ConfigInvalid(format!("unreadable scenario: {e}")))
    }

    /// Canonical document bytes.
    pub fn to_canonical(&self) -> Vec<u8> {
        crate::canonicalize(self).expect("scenario is canonicalizable").into_bytes()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectDecl> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Checks every cross-reference, reporting the first one that dangles.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |what: String| Err(SimError::ConfigInvalid(what));

        let mut ids = BTreeSet::new();
        let node_ids = self
            .data_providers
            .iter()
            .map(|d| &d.id)
            .chain(self.claims_providers.iter().map(|c| &c.id))
            .chain(self.vasps.iter().map(|v| &v.id))
            .chain(self.roots.iter())
            .chain(self.registries.iter().map(|r| &r.id))
            .chain(self.resolver.iter());
        for id in node_ids {
            if !ids.insert(id.clone()) {
                return bad(format!("duplicate node id {id}"));
            }
        }
        if self.network.min_latency_ms > self.network.max_latency_ms {
            return bad("network.min_latency_ms exceeds max_latency_ms".into());
        }

        let algos: BTreeSet<AlgorithmRef> = self
            .algorithms
            .iter()
            .map(|a| AlgorithmRef::new(&a.algo_id, "v1"))
            .collect();
        for a in &self.algorithms {
            if Builtin::for_algo_id(&a.algo_id).is_none() {
                return bad(format!("algorithm {} has no implementation", a.algo_id));
            }
        }
        let dps: BTreeSet<&String> = self.data_providers.iter().map(|d| &d.id).collect();
        let cps: BTreeSet<&String> = self.claims_providers.iter().map(|c| &c.id).collect();
        let vasps: BTreeSet<&String> = self.vasps.iter().map(|v| &v.id).collect();
        let roots: BTreeSet<&String> = self.roots.iter().collect();
        let registries: BTreeSet<&String> = self.registries.iter().map(|r| &r.id).collect();

        for cp in &self.claims_providers {
            for r in &cp.routes {
                if !algos.contains(&r.algorithm) {
                    return bad(format!("{}: route for undeclared algorithm {}", cp.id, r.algorithm));
                }
                if !dps.contains(&r.provider) {
                    return bad(format!("{}: route to undeclared data provider {}", cp.id, r.provider));
                }
            }
            for e in &cp.entitlements {
                if !vasps.contains(&e.vasp) {
                    return bad(format!("{}: entitlement for undeclared vasp {}", cp.id, e.vasp));
                }
            }
        }
        for r in &self.registries {
            if !roots.contains(&r.root) {
                return bad(format!("registry {} under undeclared root {}", r.id, r.root));
            }
        }
        for v in &self.vasps {
            if let Some(cp) = &v.claims_provider {
                if !cps.contains(cp) {
                    return bad(format!("vasp {} names undeclared claims provider {cp}", v.id));
                }
            }
            for r in &v.trusted_roots {
                if !roots.contains(r) {
                    return bad(format!("vasp {} trusts undeclared root {r}", v.id));
                }
            }
        }
        let mut subject_ids = BTreeSet::new();
        for s in &self.subjects {
            if !subject_ids.insert(&s.id) || ids.contains(&s.id) {
                return bad(format!("duplicate subject id {}", s.id));
            }
            if !vasps.contains(&s.vasp) {
                return bad(format!("subject {} at undeclared vasp {}", s.id, s.vasp));
            }
            match &s.key {
                KeyDecl::Ownership(r) | KeyDecl::Custody(r) | KeyDecl::PossessionOnly(r) if !registries.contains(r) => {
                    return bad(format!("subject {} uses undeclared registry {r}", s.id));
                }
                _ => {}
            }
            if let Some(cp) = &s.claims_provider {
                if !cps.contains(cp) {
                    return bad(format!("subject {} names undeclared claims provider {cp}", s.id));
                }
            }
            if s.did.is_some() && self.resolver.is_none() {
                return bad(format!("subject {} has a DID but no resolver is declared", s.id));
            }
        }
        for (i, ev) in self.script.iter().enumerate() {
            let subject = |id: &String| {
                if subject_ids.contains(id) {
                    Ok(())
                } else {
                    bad(format!("script[{i}]: undeclared subject {id}"))
                }
            };
            match &ev.action {
                Action::Onboard { subject: s } => subject(s)?,
                Action::GrantConsent {
                    subject: s,
                    algo_id,
                    claims_provider,
                    ..
                } => {
                    subject(s)?;
                    if !cps.contains(claims_provider) {
                        return bad(format!("script[{i}]: undeclared claims provider {claims_provider}"));
                    }
                    if Builtin::for_algo_id(algo_id).is_none() {
                        return bad(format!("script[{i}]: unknown algorithm {algo_id}"));
                    }
                }
                Action::RegisterEndpoint {
                    subject: s,
                    claims_provider,
                } => {
                    subject(s)?;
                    if self.subject(s).and_then(|d| d.did.as_ref()).is_none() {
                        return bad(format!("script[{i}]: subject {s} has no DID"));
                    }
                    if !cps.contains(claims_provider) {
                        return bad(format!("script[{i}]: undeclared claims provider {claims_provider}"));
                    }
                }
                Action::InitiateTransfer {
                    originator,
                    beneficiary,
                    ..
                } => {
                    subject(originator)?;
                    subject(beneficiary)?;
                }
                Action::InjectFault { .. } => {}
            }
        }
        Ok(())
    }
}
