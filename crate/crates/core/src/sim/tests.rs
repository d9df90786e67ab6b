use super::scenarios::{baseline, fault_suite, fuzz, with_fault};
use super::*;
use crate::envelope::PayloadType;

fn outcome(out: &RunOutput) -> Vec<(String, String, String, Option<&'static str>)> {
    let mut v: Vec<_> = out
        .reports
        .iter()
        .map(|r| {
            (
                r.transfer_id.clone(),
                r.vasp_id.clone(),
                r.state.clone(),
                r.reason.as_ref().map(|e| e.code()),
            )
        })
        .collect();
    v.sort();
    v
}

fn named(name: &str) -> ScenarioConfig {
    fault_suite(42).into_iter().find(|c| c.name == name).unwrap()
}

#[test]
fn baseline_finalizes_on_both_sides() {
    let out = run_scenario(&baseline(42)).unwrap();
    let s = outcome(&out);
    assert_eq!(s.len(), 2);
    assert!(s.iter().all(|(_, _, st, _)| st == "Finalized"), "{s:?}");
    assert_eq!(out.opening_total, out.closing_total());
    for (id, log) in &out.logs {
        assert!(log.verify_chain(&out.keys), "{id}");
    }
    let b = &out.ledgers["VASP-B"];
    assert_eq!(b.balance("VASP-B/bob"), 5_000 + 1_250);
}

#[test]
fn identical_seed_gives_identical_bytes() {
    let a = run_scenario(&baseline(42)).unwrap().files();
    let b = run_scenario(&baseline(42)).unwrap().files();
    assert_eq!(a, b);
}

#[test]
fn seed_changes_timing_not_outcome() {
    let a = run_scenario(&baseline(42)).unwrap();
    let b = run_scenario(&baseline(43)).unwrap();
    assert_eq!(outcome(&a), outcome(&b));
    assert_ne!(
        a.messages.iter().map(|m| m.deliver_at).collect::<Vec<_>>(),
        b.messages.iter().map(|m| m.deliver_at).collect::<Vec<_>>()
    );
}

#[test]
fn undeclared_vasp_is_rejected() {
    let mut cfg = baseline(1);
    cfg.subjects[0].vasp = "VASP-Z".into();
    match run_scenario(&cfg) {
        Err(SimError::ConfigInvalid(m)) => assert!(m.contains("VASP-Z"), "{m}"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn dropped_receipts_reject_both_sides() {
    let out = run_scenario(&named("drop-receipts")).unwrap();
    let s = outcome(&out);
    assert_eq!(s.len(), 2);
    assert!(s.iter().all(|(_, _, st, r)| st == "Rejected" && *r == Some("ReceiptMissing")), "{s:?}");
    assert_eq!(out.opening_total, out.closing_total());
}

#[test]
fn delayed_claims_time_out() {
    let out = run_scenario(&named("delay-claims")).unwrap();
    let s = outcome(&out);
    assert!(s.iter().any(|(_, _, _, r)| *r == Some("ClaimsUnavailable")), "{s:?}");
    assert!(s.iter().all(|(_, _, st, _)| st == "Rejected"));
}

#[test]
fn duplicate_delivery_yields_one_receipt() {
    let out = run_scenario(&named("duplicate-delivery")).unwrap();
    assert!(outcome(&out).iter().all(|(_, _, st, _)| st == "Finalized"));
    let receipts_from_b = out
        .messages
        .iter()
        .filter(|m| m.from == "VASP-B" && m.envelope.payload_type == PayloadType::Receipt)
        .count();
    assert_eq!(receipts_from_b, 1);
    assert!(out.trace.iter().any(|e| matches!(e, TraceEvent::Duplicate { .. })));
    let clean = run_scenario(&baseline(42)).unwrap();
    assert_eq!(out.report().ledgers, clean.report().ledgers);
}

#[test]
fn lost_provider_answer_still_issues_partial_claims() {
    let out = run_scenario(&named("drop-one-algo-response")).unwrap();
    let issued: Vec<_> = out.issued["CP1"].iter().collect();
    assert!(issued.iter().any(|c| !c.body.failures.is_empty()));
}

#[test]
fn sealed_transport_hides_payloads_from_the_trace() {
    let mut cfg = baseline(5);
    cfg.network.confidential_transport = true;
    let out = run_scenario(&cfg).unwrap();
    assert!(outcome(&out).iter().all(|(_, _, st, _)| st == "Finalized"));
    for e in &out.trace {
        if let TraceEvent::Send { sealed, envelope, .. } = e {
            assert!(*sealed && envelope.is_none());
        }
    }
    assert!(out.observable_by("DP1").all(|m| m.from == "DP1" || m.to == "DP1"));
}

#[test]
fn fuzz_is_large_and_conserves() {
    let out = run_scenario(&fuzz(7, 12)).unwrap();
    assert!(out.messages.len() >= 200, "{}", out.messages.len());
    assert_eq!(out.opening_total, out.closing_total());
    for log in out.logs.values() {
        assert!(log.verify_chain(&out.keys));
    }
}

#[test]
fn fault_rules_installed_up_front_match_scripted_ones() {
    let rule = FaultRule::new(MessagePattern::payload(PayloadType::Receipt), FaultAction::Drop);
    let scripted = run_scenario(&with_fault("x", 9, rule.clone())).unwrap();
    let mut sim = Simulation::new(baseline(9)).unwrap();
    sim.inject_fault(rule);
    sim.run();
    let direct = sim.finish();
    assert_eq!(outcome(&scripted), outcome(&direct));
}
