//! Built-in scenarios and synthetic data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bus::{FaultAction, FaultRule, MessagePattern};
use super::config::*;
use crate::envelope::{Millis, PayloadType};
use crate::opal::algorithms::{COUNT_ACTIVE_ACCOUNTS, MEAN_BALANCE, RESIDENCY, TX_RANGE};
use crate::opal::{AlgorithmRef, DataRecord, FieldValue};
use crate::vasp::{JurisdictionPolicy, OriginatorLocator};

const DAY: Millis = 24 * 3600 * 1000;
const CITIES: &[(&str, &str)] = &[
    ("Zurich", "CH"),
    ("Berlin", "DE"),
    ("Austin", "US"),
    ("Lisbon", "PT"),
    ("Osaka", "JP"),
    ("Nairobi", "KE"),
];

/// Synthetic per-subject data: a few transactions, a residence and an
/// account summary. Deterministic in `seed`.
pub fn synthetic_datasets(subjects: &[String], seed: u64) -> Vec<DatasetDecl> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut tx = Vec::new();
    let mut kyc = Vec::new();
    let mut accounts = Vec::new();
    for s in subjects {
        for _ in 0..rng.gen_range(1..=6) {
            tx.push(record(s, [("amount", FieldValue::Int(rng.gen_range(1..=50_000)))]));
        }
        let (city, country) = CITIES[rng.gen_range(0..CITIES.len())];
        kyc.push(record(
            s,
            [
                ("city", FieldValue::Text(city.into())),
                ("country", FieldValue::Text(country.into())),
            ],
        ));
        accounts.push(record(
            s,
            [
                ("active", FieldValue::Bool(rng.gen_bool(0.8))),
                ("balance", FieldValue::Int(rng.gen_range(0..=1_000_000))),
            ],
        ));
    }
    vec![
        DatasetDecl {
            dataset_id: "tx".into(),
            schema: vec!["amount".into()],
            records: tx,
        },
        DatasetDecl {
            dataset_id: "kyc".into(),
            schema: vec!["city".into(), "country".into()],
            records: kyc,
        },
        DatasetDecl {
            dataset_id: "accounts".into(),
            schema: vec!["active".into(), "balance".into()],
            records: accounts,
        },
    ]
}

fn record<const N: usize>(subject: &str, fields: [(&str, FieldValue); N]) -> DataRecord {
    DataRecord {
        subject_id: subject.to_string(),
        fields: fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    }
}

fn v1(algo_id: &str) -> AlgorithmRef {
    AlgorithmRef::new(algo_id, "v1")
}

fn all_algorithms() -> Vec<AlgorithmDecl> {
    [TX_RANGE, RESIDENCY, COUNT_ACTIVE_ACCOUNTS, MEAN_BALANCE]
        .into_iter()
        .map(|a| AlgorithmDecl {
            algo_id: a.into(),
            vetted: true,
        })
        .collect()
}

fn vasp(id: &str, jurisdiction: &str, algorithms: &[&str]) -> VaspDecl {
    VaspDecl {
        id: id.into(),
        jurisdiction: jurisdiction.into(),
        claims_provider: Some("CP1".into()),
        algorithms: algorithms.iter().map(|a| v1(a)).collect(),
        trusted_roots: vec!["ROOT".into()],
        policy: JurisdictionPolicy::default(),
        timeouts: None,
    }
}

fn subject(id: &str, name: &str, vasp: &str, balance: i64, key: KeyDecl) -> SubjectDecl {
    SubjectDecl {
        id: id.into(),
        name: name.into(),
        vasp: vasp.into(),
        account: format!("{vasp}/{id}"),
        balance,
        locator: OriginatorLocator::GeographicAddress(format!("{id} street 1")),
        key,
        did: None,
        claims_provider: None,
    }
}

fn at(at: Millis, action: Action) -> ScriptEvent {
    ScriptEvent { at, action }
}

fn consent(subject: &str, algo_id: &str, ttl_ms: Millis) -> Action {
    Action::GrantConsent {
        subject: subject.into(),
        algo_id: algo_id.into(),
        claims_provider: "CP1".into(),
        ttl_ms,
    }
}

/// Network skeleton shared by the built-in scenarios: one data provider,
/// one claims provider routing every algorithm to it, one root with a
/// subordinate registry, and a DID resolver.
fn skeleton(name: &str, seed: u64, vasps: Vec<VaspDecl>, subjects: Vec<SubjectDecl>) -> ScenarioConfig {
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let algorithms = all_algorithms();
    ScenarioConfig {
        name: name.into(),
        seed,
        network: NetworkConfig::default(),
        claims_providers: vec![ClaimsProviderDecl {
            id: "CP1".into(),
            routes: algorithms
                .iter()
                .map(|a| RouteDecl {
                    algorithm: v1(&a.algo_id),
                    provider: "DP1".into(),
                })
                .collect(),
            entitlements: vasps
                .iter()
                .map(|v| EntitlementDecl {
                    vasp: v.id.clone(),
                    algorithms: v.algorithms.clone(),
                })
                .collect(),
            provider_timeout_ms: 5_000,
        }],
        data_providers: vec![DataProviderDecl {
            id: "DP1".into(),
            k_min: Some(5),
            datasets: synthetic_datasets(&ids, seed),
        }],
        algorithms,
        roots: vec!["ROOT".into()],
        registries: vec![RegistryDecl {
            id: "REG".into(),
            root: "ROOT".into(),
        }],
        resolver: Some("RESOLVER".into()),
        vasps,
        subjects,
        script: Vec::new(),
    }
}

/// One transfer between two well-provisioned customers.
pub fn baseline(seed: u64) -> ScenarioConfig {
    let algos = [TX_RANGE, RESIDENCY];
    let mut alice = subject("alice", "Alice Example", "VASP-A", 10_000, KeyDecl::Ownership("REG".into()));
    alice.did = Some("did:example:alice".into());
    let mut subjects = vec![
        alice,
        subject("bob", "Bob Example", "VASP-B", 5_000, KeyDecl::Ownership("REG".into())),
    ];
    // Bystanders so the aggregate algorithms have enough rows.
    for i in 0..5 {
        subjects.push(subject(&format!("c{i}"), &format!("Customer {i}"), "VASP-B", 100, KeyDecl::None));
    }
    let mut cfg = skeleton(
        "baseline",
        seed,
        vec![vasp("VASP-A", "US", &algos), vasp("VASP-B", "EU", &algos)],
        subjects,
    );
    let mut script = Vec::new();
    for s in ["alice", "bob"] {
        script.push(at(0, Action::Onboard { subject: s.into() }));
        for a in algos {
            script.push(at(0, consent(s, a, 30 * DAY)));
        }
    }
    script.push(at(
        0,
        Action::RegisterEndpoint {
            subject: "alice".into(),
            claims_provider: "CP1".into(),
        },
    ));
    script.push(at(
        1_000,
        Action::InitiateTransfer {
            originator: "alice".into(),
            beneficiary: "bob".into(),
            amount: 1_250,
        },
    ));
    cfg.script = script;
    cfg
}

/// Baseline plus one fault rule installed before the transfer starts.
pub fn with_fault(name: &str, seed: u64, rule: FaultRule) -> ScenarioConfig {
    let mut cfg = baseline(seed);
    cfg.name = name.into();
    cfg.script.insert(0, at(0, Action::InjectFault { rule }));
    cfg
}

/// Fault-injection suite: countersignatures dropped, claim sets delayed
/// beyond the claims timeout, packet deliveries duplicated, and one lost
/// provider answer.
pub fn fault_suite(seed: u64) -> Vec<ScenarioConfig> {
    vec![
        with_fault(
            "drop-receipts",
            seed,
            FaultRule::new(MessagePattern::payload(PayloadType::Receipt), FaultAction::Drop),
        ),
        with_fault(
            "delay-claims",
            seed,
            FaultRule::new(MessagePattern::payload(PayloadType::ClaimSet), FaultAction::Delay(60_000)),
        ),
        with_fault(
            "duplicate-delivery",
            seed,
            FaultRule::new(MessagePattern::payload(PayloadType::Delivery), FaultAction::Duplicate),
        ),
        with_fault(
            "drop-one-algo-response",
            seed,
            FaultRule {
                pattern: MessagePattern::payload(PayloadType::AlgoResponse),
                action: FaultAction::Drop,
                limit: Some(1),
            },
        ),
    ]
}

/// Randomised traffic among three VASPs: mixed key provenance, missing and
/// short-lived consents, aggregate queries and a sprinkling of faults.
pub fn fuzz(seed: u64, transfers: usize) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let algos = [TX_RANGE, RESIDENCY, COUNT_ACTIVE_ACCOUNTS, MEAN_BALANCE];
    let vasps = vec![
        vasp("VASP-A", "US", &algos),
        vasp("VASP-B", "EU", &algos),
        vasp("VASP-C", "SG", &algos),
    ];
    let mut subjects = Vec::new();
    for i in 0..12 {
        let v = &vasps[i % vasps.len()].id;
        let key = match rng.gen_range(0..10) {
            0 => KeyDecl::PossessionOnly("REG".into()),
            1 => KeyDecl::Custody("REG".into()),
            _ => KeyDecl::Ownership("REG".into()),
        };
        let mut s = subject(&format!("s{i:02}"), &format!("Subject {i}"), v, rng.gen_range(1_000..100_000), key);
        if rng.gen_bool(0.25) {
            s.did = Some(format!("did:example:s{i:02}"));
        }
        subjects.push(s);
    }
    let mut script = Vec::new();
    for s in &subjects {
        script.push(at(0, Action::Onboard { subject: s.id.clone() }));
        for a in [TX_RANGE, RESIDENCY] {
            match rng.gen_range(0..6) {
                0 => {}
                1 => script.push(at(0, consent(&s.id, a, 2_000))),
                _ => script.push(at(0, consent(&s.id, a, 30 * DAY))),
            }
        }
        if s.did.is_some() {
            script.push(at(
                0,
                Action::RegisterEndpoint {
                    subject: s.id.clone(),
                    claims_provider: "CP1".into(),
                },
            ));
        }
    }
    if rng.gen_bool(0.5) {
        script.push(at(
            0,
            Action::InjectFault {
                rule: FaultRule {
                    pattern: MessagePattern::payload(PayloadType::Receipt),
                    action: FaultAction::Drop,
                    limit: Some(1),
                },
            },
        ));
    }
    let ids: Vec<&SubjectDecl> = subjects.iter().collect();
    for n in 0..transfers {
        let o = ids.choose(&mut rng).expect("subjects exist");
        let b = loop {
            let b = ids.choose(&mut rng).expect("subjects exist");
            if b.vasp != o.vasp {
                break b;
            }
        };
        script.push(at(
            1_000 + n as Millis * rng.gen_range(200..3_000),
            Action::InitiateTransfer {
                originator: o.id.clone(),
                beneficiary: b.id.clone(),
                amount: rng.gen_range(1..=500),
            },
        ));
    }
    let mut cfg = skeleton(&format!("fuzz-{seed}"), seed, vasps, subjects);
    cfg.script = script;
    cfg
}

/// The full suite used for determinism and conservation checks.
pub fn suite(seed: u64) -> Vec<ScenarioConfig> {
    let mut all = vec![baseline(seed)];
    all.extend(fault_suite(seed));
    all.push(fuzz(seed, 12));
    all.push(fuzz(seed + 1, 12));
    all
}
