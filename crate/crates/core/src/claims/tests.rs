use super::*;
use crate::envelope::{KeyDirectory, KeyPair};
use crate::opal::{
    grant_consent, AlgorithmRegistry, Builtin, DataProvider, DataRecord, Dataset, FieldValue,
    OpalError,
};

const TX_AMOUNTS: [i64; 6] = [120, 450, 80, 900, 300, 150];

struct Fixture {
    cp: ClaimsProvider,
    dp: DataProvider,
    vasp: KeyPair,
    subject: KeyPair,
}

fn tx_range() -> AlgorithmRef {
    AlgorithmRef::new("tx-range", "v1")
}

fn residency() -> AlgorithmRef {
    AlgorithmRef::new("residency", "v1")
}

fn fixture() -> Fixture {
    let mut registry = AlgorithmRegistry::new();
    for b in Builtin::all() {
        registry.register(b.descriptor(true)).unwrap();
    }
    let subject = KeyPair::derive("S", 1);
    let vasp = KeyPair::derive("VASP-A", 1);

    let records = TX_AMOUNTS
        .iter()
        .map(|a| DataRecord {
            subject_id: "S".into(),
            fields: [("amount".to_string(), FieldValue::Int(*a))].into(),
        })
        .collect();
    let mut dp = DataProvider::new("DP1", registry.clone());
    dp.add_dataset(Dataset::new("bank-tx", "DP1", vec!["amount".into()], records).unwrap());
    let kyc = DataRecord {
        subject_id: "S".into(),
        fields: [
            ("city".to_string(), FieldValue::from("Boston")),
            ("country".to_string(), FieldValue::from("US")),
        ]
        .into(),
    };
    dp.add_dataset(
        Dataset::new("kyc", "DP1", vec!["city".into(), "country".into()], vec![kyc]).unwrap(),
    );
    dp.subject_keys_mut().add(&subject);

    let mut auth = AuthService::new(KeyPair::derive("CP1-AS", 1));
    auth.enroll("VASP-A", vasp.public_key(), vec![tx_range(), residency()]);
    let mut cp = ClaimsProvider::new(KeyPair::derive("CP1", 1), auth, registry);
    cp.add_route(tx_range(), "DP1");
    cp.add_route(residency(), "DP1");
    cp.add_consent(grant_consent(&subject, "tx-range", "CP1", 0, 10_000_000));
    Fixture { cp, dp, vasp, subject }
}

fn token(f: &mut Fixture, algos: &[AlgorithmRef], now: u64) -> AccessToken {
    let cred = sign_auth_request(&f.vasp, algos, now);
    f.cp.authenticate_vasp("VASP-A", &cred, algos, now).unwrap()
}

fn request(id: &str, algos: Vec<AlgorithmRef>, token: AccessToken) -> ClaimsRequest {
    ClaimsRequest {
        request_id: id.into(),
        vasp_id: "VASP-A".into(),
        subject_id: "S".into(),
        algorithms: algos,
        token,
    }
}

#[test]
fn token_scope_is_intersection() {
    let mut f = fixture();
    let wanted = [tx_range(), AlgorithmRef::new("mean-balance", "v1")];
    let t = token(&mut f, &wanted, 100);
    assert_eq!(t.allowed_algos, vec![tx_range()]);
    assert_eq!(t.vasp_id, "VASP-A");
    assert!(t
        .validate("CP1-AS", &f.cp.auth().public_key(), "VASP-A", 100)
        .is_ok());
}

#[test]
fn auth_errors() {
    let mut f = fixture();
    let stranger = KeyPair::derive("VASP-X", 1);
    let cred = sign_auth_request(&stranger, &[tx_range()], 0);
    assert_eq!(
        f.cp.authenticate_vasp("VASP-X", &cred, &[tx_range()], 0),
        Err(ClaimsError::UnknownVasp("VASP-X".into()))
    );

    let impostor = KeyPair::derive("VASP-A", 2);
    let cred = sign_auth_request(&impostor, &[tx_range()], 0);
    assert_eq!(
        f.cp.authenticate_vasp("VASP-A", &cred, &[tx_range()], 0),
        Err(ClaimsError::BadCredential("VASP-A".into()))
    );

    let cred = sign_auth_request(&f.vasp, &[tx_range()], 0);
    assert_eq!(
        f.cp.authenticate_vasp("VASP-A", &cred, &[tx_range()], 120_000),
        Err(ClaimsError::BadCredential("VASP-A".into())),
        "stale credential"
    );

    let only = [AlgorithmRef::new("mean-balance", "v1")];
    let cred = sign_auth_request(&f.vasp, &only, 0);
    assert_eq!(
        f.cp.authenticate_vasp("VASP-A", &cred, &only, 0),
        Err(ClaimsError::NoEntitledAlgorithms("VASP-A".into()))
    );
}

#[test]
fn tx_range_claim_wraps_provider_output() {
    let mut f = fixture();
    let t = token(&mut f, &[tx_range()], 1_000);
    let dp = f.dp.clone();
    let cs = f
        .cp
        .handle_request(request("r1", vec![tx_range()], t), &[&dp], 1_000)
        .unwrap();

    // Oracle path: the provider's own answer for the same consented query.
    let consent = grant_consent(&f.subject, "tx-range", "CP1", 0, 10_000_000);
    let params = [("subject_id".to_string(), FieldValue::from("S"))].into();
    let direct = dp
        .execute(&tx_range(), &params, Some(&consent), "CP1", 1_000)
        .unwrap();

    assert_eq!(cs.claims().len(), 1);
    let claim = &cs.claims()[0];
    assert_eq!(claim.statement.attributes["tx_min"], direct.result["min"]);
    assert_eq!(claim.statement.attributes["tx_max"], direct.result["max"]);
    assert_eq!(claim.statement.attributes["tx_min"], FieldValue::Int(80));
    assert_eq!(claim.statement.attributes["tx_max"], FieldValue::Int(900));
    assert_eq!(claim.provenance, vec![direct.provenance]);
    assert_eq!(claim.provenance[0].dataset_id, "bank-tx");
    assert_eq!(claim.provenance[0].version, "v1");
    assert!(claim.is_well_formed());
    assert_eq!(claim.expires_at - claim.issued_at, DEFAULT_CLAIM_TTL_MS);
    assert!(cs.verify(&f.cp.public_key()));
    assert!(cs.body.failures.is_empty());

    let mut keys = KeyDirectory::new();
    keys.insert("CP1", f.cp.public_key());
    assert_eq!(f.cp.log().len(), 1);
    assert!(f.cp.log().verify_chain(&keys));
}

#[test]
fn scope_exceeded() {
    let mut f = fixture();
    let t = token(&mut f, &[tx_range()], 0);
    let dp = f.dp.clone();
    assert_eq!(
        f.cp.handle_request(request("r1", vec![residency()], t), &[&dp], 0),
        Err(ClaimsError::ScopeExceeded(vec!["residency v1".into()]))
    );
}

#[test]
fn expired_and_tampered_tokens() {
    let mut f = fixture();
    let t = token(&mut f, &[tx_range()], 0);
    let dp = f.dp.clone();
    let late = t.expires_at;
    assert_eq!(
        f.cp.handle_request(request("r1", vec![tx_range()], t.clone()), &[&dp], late),
        Err(ClaimsError::TokenExpired)
    );
    let mut widened = t;
    widened.allowed_algos.push(residency());
    assert_eq!(
        f.cp.handle_request(request("r2", vec![residency()], widened), &[&dp], 1),
        Err(ClaimsError::TokenInvalid)
    );
}

#[test]
fn sole_failure_propagates_cause() {
    let mut f = fixture();
    let t = token(&mut f, &[residency()], 0);
    let dp = f.dp.clone();
    let err = f
        .cp
        .handle_request(request("r1", vec![residency()], t), &[&dp], 0)
        .unwrap_err();
    assert_eq!(
        err,
        ClaimsError::AllAlgorithmsFailed(vec![AlgoFailure {
            algorithm: residency(),
            cause: FailureCause::Provider(OpalError::ConsentMissing("S".into())),
        }])
    );
    assert!(f.cp.issued().is_empty());
    assert!(f.cp.pds("S").is_none());
}

#[test]
fn partial_failure_is_reported_in_claimset() {
    let mut f = fixture();
    let t = token(&mut f, &[tx_range(), residency()], 0);
    let dp = f.dp.clone();
    let cs = f
        .cp
        .handle_request(request("r1", vec![tx_range(), residency()], t), &[&dp], 0)
        .unwrap();
    assert_eq!(cs.claims().len(), 1);
    assert_eq!(cs.body.failures.len(), 1);
    assert_eq!(cs.body.failures[0].algorithm, residency());
}

#[test]
fn unlisted_algorithm_is_rejected() {
    let mut registry = AlgorithmRegistry::new();
    registry.register(Builtin::TxRange.descriptor(false)).unwrap();
    let vasp = KeyPair::derive("VASP-A", 1);
    let mut auth = AuthService::new(KeyPair::derive("AS", 1));
    auth.enroll("VASP-A", vasp.public_key(), vec![tx_range()]);
    let mut cp = ClaimsProvider::new(KeyPair::derive("CP1", 1), auth, registry);
    let cred = sign_auth_request(&vasp, &[tx_range()], 0);
    let t = cp.authenticate_vasp("VASP-A", &cred, &[tx_range()], 0).unwrap();
    assert_eq!(
        cp.begin_request(request("r1", vec![tx_range()], t), 0),
        Err(ClaimsError::UnlistedAlgorithm("tx-range v1".into()))
    );
}

#[test]
fn timeout_marks_outstanding_algorithms() {
    let mut f = fixture();
    let t = token(&mut f, &[tx_range()], 0);
    let dispatches = f.cp.begin_request(request("r1", vec![tx_range()], t), 0).unwrap();
    assert_eq!(dispatches.len(), 1);
    assert_eq!(dispatches[0].provider_id, "DP1");
    assert!(dispatches[0].request.consent.is_some());
    let (_, result) = f.cp.on_timeout("VASP-A", "r1", 10_000).unwrap();
    assert_eq!(
        result,
        Err(ClaimsError::AllAlgorithmsFailed(vec![AlgoFailure {
            algorithm: tx_range(),
            cause: FailureCause::Timeout,
        }]))
    );
    let late = f.dp.handle(&dispatches[0].request, 10_001);
    assert!(f.cp.on_reply(late, "DP1", 10_001).is_none());
}

#[test]
fn reply_from_wrong_provider_is_ignored() {
    let mut f = fixture();
    let t = token(&mut f, &[tx_range()], 0);
    let d = f.cp.begin_request(request("r1", vec![tx_range()], t), 0).unwrap();
    let reply = f.dp.handle(&d[0].request, 1);
    assert!(f.cp.on_reply(reply.clone(), "DP9", 1).is_none());
    assert!(f.cp.on_reply(reply, "DP1", 1).is_some());
}

#[test]
fn pds_mirroring() {
    let mut f = fixture();
    let dp = f.dp.clone();
    let mut issued = Vec::new();
    for i in 0..3 {
        let t = token(&mut f, &[tx_range()], i * 10);
        let cs = f
            .cp
            .handle_request(request(&format!("r{i}"), vec![tx_range()], t), &[&dp], i * 10)
            .unwrap();
        issued.push(cs);
        if i == 0 {
            assert_eq!(f.cp.pds("S").unwrap().len(), 1);
            assert!(!f.cp.mirror_to_pds(&issued[0]));
            assert_eq!(f.cp.pds("S").unwrap().len(), 1);
        }
    }
    let pds = f.cp.pds("S").unwrap();
    assert_eq!(pds.len(), 3);
    let stored: Vec<_> = pds.claimsets().iter().map(|c| c.body.claimset_id.clone()).collect();
    let trace: Vec<_> = issued.iter().map(|c| c.body.claimset_id.clone()).collect();
    assert_eq!(stored, trace);
    let export = pds.to_ndjson();
    assert_eq!(export.iter().filter(|b| **b == b'\n').count(), 3);
}

#[test]
fn foreign_claimsets_are_not_mirrored() {
    let mut f = fixture();
    let mut other = fixture();
    let dp = other.dp.clone();
    let t = token(&mut other, &[tx_range()], 0);
    let cs = other
        .cp
        .handle_request(request("r1", vec![tx_range()], t), &[&dp], 0)
        .unwrap();
    // Same id, different key.
    f.cp = ClaimsProvider::new(
        KeyPair::derive("CP1", 99),
        AuthService::new(KeyPair::derive("AS", 1)),
        AlgorithmRegistry::new(),
    );
    assert!(!f.cp.mirror_to_pds(&cs));
    let _ = f.subject;
}
