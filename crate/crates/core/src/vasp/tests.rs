use serde_json::Value;

use super::*;
use crate::claims::{sign_auth_request, AuthService, ClaimsProvider};
use crate::envelope::{KeyPair, Millis};
use crate::key_registry::{prove_possession, Authority, KeyRegistry, OwnershipEvidence};
use crate::opal::{grant_consent, AlgorithmRef, AlgorithmRegistry, Builtin, DataProvider, DataRecord, Dataset, FieldValue};

const YEAR: Millis = 365 * 24 * 3600 * 1000;
const T0: Millis = 1_000;

struct World {
    cp: ClaimsProvider,
    dp: DataProvider,
    a: VaspNode,
    b: VaspNode,
    registry: KeyRegistry,
    alice: KeyPair,
    bob: KeyPair,
}

fn tx_range() -> AlgorithmRef {
    AlgorithmRef::new("tx-range", "v1")
}

fn residency() -> AlgorithmRef {
    AlgorithmRef::new("residency", "v1")
}

fn ownership(reg: &mut KeyRegistry, who: &KeyPair) -> KeyEvidence {
    let ch = reg.issue_challenge(who.public_key(), 0);
    let possession = prove_possession(who, ch, 0);
    let enrollment = Some(reg.enroll(who.key_id(), who.public_key(), 0));
    let att = reg
        .issue_ownership(who.key_id(), who.public_key(), &OwnershipEvidence { possession, enrollment }, 0)
        .unwrap();
    KeyEvidence::Ownership(att)
}

fn world() -> World {
    let mut algos = AlgorithmRegistry::new();
    for b in Builtin::all() {
        algos.register(b.descriptor(true)).unwrap();
    }
    let alice = KeyPair::derive("alice", 1);
    let bob = KeyPair::derive("bob", 1);

    let mut dp = DataProvider::new("DP1", algos.clone());
    let rows = [("alice", 120), ("alice", 80), ("alice", 900), ("bob", 40), ("bob", 75)]
        .iter()
        .map(|(s, a)| DataRecord {
            subject_id: s.to_string(),
            fields: [("amount".to_string(), FieldValue::Int(*a))].into(),
        })
        .collect();
    dp.add_dataset(Dataset::new("bank-tx", "DP1", vec!["amount".into()], rows).unwrap());
    dp.subject_keys_mut().add(&alice);
    dp.subject_keys_mut().add(&bob);

    let a_key = KeyPair::derive("VASP-A", 1);
    let b_key = KeyPair::derive("VASP-B", 1);
    let mut auth = AuthService::new(KeyPair::derive("CP1-AS", 1));
    auth.enroll("VASP-A", a_key.public_key(), vec![tx_range(), residency()]);
    auth.enroll("VASP-B", b_key.public_key(), vec![tx_range(), residency()]);
    let mut cp = ClaimsProvider::new(KeyPair::derive("CP1", 1), auth, algos);
    cp.add_route(tx_range(), "DP1");
    cp.add_route(residency(), "DP1");
    cp.add_consent(grant_consent(&alice, "tx-range", "CP1", 0, YEAR));
    cp.add_consent(grant_consent(&bob, "tx-range", "CP1", 0, YEAR));

    let root = Authority::root(KeyPair::derive("ROOT", 1));
    let reg_auth = Authority::subordinate(KeyPair::derive("REG", 1), &root, 0, 10 * YEAR);
    let mut registry = KeyRegistry::new(reg_auth);

    let mut nodes = Vec::new();
    for (kp, j) in [(a_key, "US"), (b_key, "EU")] {
        let mut cfg = VaspConfig::new(kp.key_id(), j);
        cfg.default_claims_provider = Some("CP1".into());
        cfg.claim_algorithms = vec![tx_range()];
        cfg.trusted_roots.insert("ROOT", root.public_key());
        cfg.directory.insert("VASP-A".into(), "US".into());
        cfg.directory.insert("VASP-B".into(), "EU".into());
        let mut node = VaspNode::new(cfg, kp);
        node.keys_mut().insert("CP1", cp.public_key());
        node.keys_mut().insert("REG", registry.public_key());
        nodes.push(node);
    }
    let mut b = nodes.pop().unwrap();
    let mut a = nodes.pop().unwrap();
    let (ak, bk) = (a.public_key(), b.public_key());
    a.keys_mut().insert("VASP-B", bk);
    b.keys_mut().insert("VASP-A", ak);

    a.onboard(
        Customer {
            subject_id: "alice".into(),
            name: "Alice Smith".into(),
            account: "A-001".into(),
            locator: OriginatorLocator::NationalIdentityNumber("123-45-6789".into()),
            did: None,
            claims_provider_id: None,
            evidence: ownership(&mut registry, &alice),
        },
        10_000,
    );
    b.onboard(
        Customer {
            subject_id: "bob".into(),
            name: "Bob Jones".into(),
            account: "B-042".into(),
            locator: OriginatorLocator::GeographicAddress("1 Rue de Rivoli, Paris".into()),
            did: None,
            claims_provider_id: None,
            evidence: ownership(&mut registry, &bob),
        },
        500,
    );
    World { cp, dp, a, b, registry, alice, bob }
}

fn request(amount: u64) -> TransferRequest {
    TransferRequest {
        originator: "alice".into(),
        beneficiary: "bob".into(),
        beneficiary_name: "Bob Jones".into(),
        beneficiary_account: "B-042".into(),
        beneficiary_vasp: "VASP-B".into(),
        amount,
    }
}

fn claimset_for(cp: &mut ClaimsProvider, dp: &DataProvider, node: &VaspNode, vasp_key: &KeyPair, id: &str, now: Millis) -> crate::SignedEnvelope {
    let algos = node.config().claim_algorithms.clone();
    let cred = sign_auth_request(vasp_key, &algos, now);
    let token = cp.authenticate_vasp(node.id(), &cred, &algos, now).unwrap();
    let req = node.claims_request(id, token).unwrap();
    cp.handle_request(req, &[dp], now).unwrap().envelope
}

fn gather(w: &mut World, on_a: bool, id: &str, now: Millis) {
    let (node, key) = if on_a {
        (&mut w.a, KeyPair::derive("VASP-A", 1))
    } else {
        (&mut w.b, KeyPair::derive("VASP-B", 1))
    };
    let set = claimset_for(&mut w.cp, &w.dp, node, &key, id, now);
    node.gather_claims(id, &set, now).unwrap();
}

/// Both sides verified and ready to exchange.
fn verified_pair(w: &mut World) -> String {
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    gather(w, true, &id, T0);
    w.a.verify_counterparty(&id, T0).unwrap();
    let p = w.a.proposal(&id).unwrap();
    w.b.accept_proposal("VASP-A", &p, T0).unwrap();
    gather(w, false, &id, T0);
    w.b.verify_counterparty(&id, T0).unwrap();
    id
}

fn state(n: &VaspNode, id: &str) -> TransferState {
    n.transfer(id).unwrap().state.clone()
}

#[test]
fn initiate_checks_customer_and_amount() {
    let mut w = world();
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    assert_eq!(state(&w.a, &id), TransferState::Initiated);
    let mut unknown = request(1000);
    unknown.originator = "carol".into();
    assert_eq!(w.a.initiate_transfer(&unknown, T0), Err(VaspError::UnknownCustomer("carol".into())));
    assert_eq!(w.a.initiate_transfer(&request(0), T0), Err(VaspError::InvalidAmount));
}

#[test]
fn gather_attaches_and_logs_claimset() {
    let mut w = world();
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    gather(&mut w, true, &id, T0);
    let rec = w.a.transfer(&id).unwrap();
    assert_eq!(rec.state, TransferState::ClaimsGathered);
    assert_eq!(rec.claimsets.len(), 1);
    assert!(w.a.log().contains_digest(&rec.claimsets[0].envelope.digest()));
    let attrs = &rec.claimsets[0].claims()[0].statement.attributes;
    assert_eq!(attrs["tx_min"], FieldValue::Int(80));
    assert_eq!(attrs["tx_max"], FieldValue::Int(900));
}

#[test]
fn broken_claimset_signature_leaves_state() {
    let mut w = world();
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    let key = KeyPair::derive("VASP-A", 1);
    let mut set = claimset_for(&mut w.cp, &w.dp, &w.a, &key, &id, T0);
    set.signature[3] ^= 0x40;
    assert!(matches!(w.a.gather_claims(&id, &set, T0), Err(VaspError::SignatureInvalid(_))));
    assert_eq!(state(&w.a, &id), TransferState::Initiated);
    assert!(w.a.log().is_empty());
}

#[test]
fn claims_timeout_rejects() {
    let mut w = world();
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    let fx = w.a.start_transfer(&id, T0);
    assert!(fx.iter().any(|e| matches!(e, Effect::Send { to, .. } if to == "CP1")));
    w.a.on_timer(&Timer::Claims(id.clone()), T0 + 10_000);
    assert!(matches!(state(&w.a, &id), TransferState::Rejected(VaspError::ClaimsUnavailable(_))));
}

#[test]
fn verify_requires_order() {
    let mut w = world();
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    assert!(matches!(w.a.verify_counterparty(&id, T0), Err(VaspError::InvalidState { .. })));
    assert!(matches!(w.a.finalize(&id, T0), Err(VaspError::InvalidState { .. })));
}

#[test]
fn possession_only_is_unattested() {
    let mut w = world();
    let ch = w.registry.issue_challenge(w.alice.public_key(), 0);
    let proof = prove_possession(&w.alice, ch, 0);
    let mut c = w.a.customer("alice").unwrap().clone();
    c.evidence = KeyEvidence::PossessionOnly(proof);
    w.a.onboard(c, 10_000);
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    gather(&mut w, true, &id, T0);
    assert!(matches!(w.a.verify_counterparty(&id, T0), Err(VaspError::OwnershipUnattested(_))));
    assert_eq!(state(&w.a, &id), TransferState::ClaimsGathered);
}

#[test]
fn foreign_root_is_untrusted() {
    let mut w = world();
    let other_root = Authority::root(KeyPair::derive("OTHER", 1));
    let other_reg = Authority::subordinate(KeyPair::derive("REG2", 1), &other_root, 0, 10 * YEAR);
    let mut reg2 = KeyRegistry::new(other_reg);
    let mut c = w.a.customer("alice").unwrap().clone();
    c.evidence = ownership(&mut reg2, &w.alice);
    w.a.onboard(c, 10_000);
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    gather(&mut w, true, &id, T0);
    assert_eq!(w.a.verify_counterparty(&id, T0), Err(VaspError::UntrustedRoot));
}

#[test]
fn custody_attestation_verifies() {
    let mut w = world();
    let mut c = w.a.customer("alice").unwrap().clone();
    c.evidence = KeyEvidence::Custody(w.registry.issue_custody("VASP-A", "alice", w.alice.public_key(), 0));
    w.a.onboard(c.clone(), 10_000);
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    gather(&mut w, true, &id, T0);
    w.a.verify_counterparty(&id, T0).unwrap();

    // Custody held by some other VASP does not count.
    c.evidence = KeyEvidence::Custody(w.registry.issue_custody("VASP-B", "alice", w.alice.public_key(), 0));
    w.a.onboard(c, 10_000);
    let id = w.a.initiate_transfer(&request(1000), T0).unwrap();
    gather(&mut w, true, &id, T0);
    assert!(matches!(w.a.verify_counterparty(&id, T0), Err(VaspError::OwnershipUnattested(_))));
}

#[test]
fn full_exchange_and_finalize() {
    let mut w = world();
    let id = verified_pair(&mut w);
    exchange_travel_rule(&mut w.a, &mut w.b, &id, T0 + 5).unwrap();
    assert_eq!(state(&w.a, &id), TransferState::InfoExchanged);
    assert_eq!(state(&w.b, &id), TransferState::InfoExchanged);

    // Both packets and both receipts sit in both logs.
    let ra = w.a.transfer(&id).unwrap().clone();
    let rb = w.b.transfer(&id).unwrap().clone();
    let four = [
        ra.sent_packet.clone().unwrap(),
        rb.sent_packet.clone().unwrap(),
        ra.receipt_for_sent.clone().unwrap().receiver_countersignature,
        rb.receipt_for_sent.clone().unwrap().receiver_countersignature,
    ];
    for env in &four {
        assert!(w.a.log().contains_digest(&env.digest()));
        assert!(w.b.log().contains_digest(&env.digest()));
    }
    assert_eq!(rb.received_packet, ra.sent_packet);

    let (ta, tb) = (w.a.ledger().total(), w.b.ledger().total());
    w.a.finalize(&id, T0 + 6).unwrap();
    w.b.finalize(&id, T0 + 6).unwrap();
    w.a.finalize(&id, T0 + 7).unwrap();
    w.b.finalize(&id, T0 + 7).unwrap();
    assert_eq!(w.a.ledger().balance("A-001"), 9_000);
    assert_eq!(w.b.ledger().balance("B-042"), 1_500);
    assert_eq!((w.a.ledger().total(), w.b.ledger().total()), (ta, tb));
    assert_eq!(state(&w.a, &id), TransferState::Finalized);

    let report = &w.a.reports()[0];
    assert_eq!(report.sent_field_groups.len(), 5);
    assert_eq!(report.received_field_groups.len(), 5);
    assert_eq!(report.receipt_hashes.len(), 2);
}

#[test]
fn tampered_receipt_blocks_finalize() {
    let mut w = world();
    let id = verified_pair(&mut w);
    exchange_travel_rule(&mut w.a, &mut w.b, &id, T0).unwrap();
    let rec = w.a.transfer_mut(&id).unwrap();
    rec.receipt_for_sent.as_mut().unwrap().receiver_countersignature.signature[0] ^= 1;
    assert!(matches!(w.a.finalize(&id, T0), Err(VaspError::ReceiptInvalid(_))));
    assert_eq!(w.a.ledger().balance("A-001"), 10_000);
    assert_eq!(state(&w.a, &id), TransferState::InfoExchanged);
}

#[test]
fn each_missing_field_group_is_incomplete() {
    for group in FIELD_GROUPS {
        let mut w = world();
        let id = verified_pair(&mut w);
        let good = w.a.prepare_delivery(&id, T0).unwrap();
        let msg: DeliveryMessage = good.open().unwrap();
        let mut body: Value = msg.packet.payload.to_value().unwrap();
        body["travel_rule"].as_object_mut().unwrap().remove(group);
        let packet = w.a.sign_packet_value(&body, T0);
        let bad = w.a.wrap_delivery(&id, &packet, "VASP-B", T0);
        assert_eq!(
            w.b.accept_delivery("VASP-A", &bad, T0),
            Err(VaspError::IncompletePacket(group.to_string())),
            "{group}"
        );
    }
}

#[test]
fn missing_countersignature_rejects_both() {
    let mut w = world();
    let id = verified_pair(&mut w);
    let d = w.a.prepare_delivery(&id, T0).unwrap();
    let _dropped = w.b.accept_delivery("VASP-A", &d, T0).unwrap();
    let fx = w.a.on_timer(&Timer::Receipt(id.clone()), T0 + 10_000);
    assert_eq!(state(&w.a, &id), TransferState::Rejected(VaspError::ReceiptMissing));
    // The abort carries the reason to the counterparty.
    for e in fx {
        if let Effect::Send { to, envelope } = e {
            assert_eq!(to, "VASP-B");
            w.b.handle_message("VASP-A", &envelope, T0 + 10_001);
        }
    }
    assert_eq!(state(&w.b, &id), TransferState::Rejected(VaspError::ReceiptMissing));
    assert!(w.a.log().contains_digest(&w.a.transfer(&id).unwrap().sent_packet.as_ref().unwrap().digest()));
}

#[test]
fn duplicate_delivery_yields_one_receipt() {
    let mut w = world();
    let id = verified_pair(&mut w);
    let d = w.a.prepare_delivery(&id, T0).unwrap();
    assert!(w.b.accept_delivery("VASP-A", &d, T0).unwrap().is_some());
    let len = w.b.log().len();
    assert_eq!(w.b.accept_delivery("VASP-A", &d, T0), Ok(None));
    assert_eq!(w.b.log().len(), len);
}

#[test]
fn blocked_jurisdiction() {
    let mut w = world();
    w.a.config_mut().policy.set("EU", PolicyAction::Blocked);
    let id = verified_pair(&mut w);
    assert_eq!(w.a.prepare_delivery(&id, T0), Err(VaspError::PolicyBlocked("EU".into())));
}

#[test]
fn extra_claim_requirement() {
    let mut w = world();
    w.b.config_mut().policy.set("US", PolicyAction::RequireExtraClaim("residency".into()));
    let id = verified_pair(&mut w);
    assert_eq!(
        exchange_travel_rule(&mut w.a, &mut w.b, &id, T0),
        Err(VaspError::PolicyBlocked("US".into()))
    );
    assert!(matches!(state(&w.b, &id), TransferState::Rejected(VaspError::PolicyBlocked(_))));

    let mut w = world();
    w.b.config_mut().policy.set("US", PolicyAction::RequireExtraClaim("tx-range".into()));
    let id = verified_pair(&mut w);
    exchange_travel_rule(&mut w.a, &mut w.b, &id, T0).unwrap();
}

#[test]
fn beneficiary_must_know_the_account() {
    let mut w = world();
    let mut req = request(10);
    req.beneficiary_account = "B-999".into();
    let id = w.a.initiate_transfer(&req, T0).unwrap();
    let p = w.a.proposal(&id).unwrap();
    assert_eq!(w.b.accept_proposal("VASP-A", &p, T0), Err(VaspError::UnknownCustomer("bob".into())));
    let _ = &w.bob;
}

#[test]
fn state_rank_is_linear() {
    let order = [
        TransferState::Initiated,
        TransferState::ClaimsGathered,
        TransferState::CounterpartyVerified,
        TransferState::InfoExchanged,
        TransferState::Finalized,
    ];
    for (i, s) in order.iter().enumerate() {
        assert_eq!(s.rank(), Some(i as u8));
    }
    assert!(TransferState::Rejected(VaspError::ReceiptMissing).is_terminal());
}
