//! Attestation chains compared against a step-by-step manual walk.

use claimsnet::envelope::{sign_value, KeyPair, Millis, PayloadType, PublicKey, SignedEnvelope};
use claimsnet::key_registry::*;
use ed25519_dalek::{Signature, Verifier, VerifyingKey};
use proptest::prelude::*;

const YEAR: Millis = 365 * 24 * 3600 * 1000;

/// Hand walk: each link names the signer of the envelope below it and the key
/// that must verify that envelope; the last link must verify under a root.
fn manual_walk(chain: &[SignedEnvelope], subject: &str, key: &PublicKey, roots: &[(&str, PublicKey)], now: Millis) -> bool {
    fn raw_verify(env: &SignedEnvelope, key: &PublicKey) -> bool {
        let input = serde_json::to_vec(&serde_json::json!({
            "payload": serde_json::to_value(&env.payload).unwrap(),
            "payload_type": env.payload_type,
            "signed_at": env.signed_at,
            "signer_id": env.signer_id,
        }))
        .unwrap();
        let Ok(sig) = <[u8; 64]>::try_from(env.signature.as_slice()) else {
            return false;
        };
        VerifyingKey::from_bytes(key.as_bytes())
            .map(|k| k.verify(&input, &Signature::from_bytes(&sig)).is_ok())
            .unwrap_or(false)
    }
    let links: Vec<AttestationLink> = match chain.iter().map(|e| e.open()).collect::<Result<_, _>>() {
        Ok(l) => l,
        Err(_) => return false,
    };
    if links.len() < 2 || links[0].subject_id != subject || links[0].public_key != *key {
        return false;
    }
    for (i, link) in links.iter().enumerate() {
        if chain[i].payload_type != PayloadType::Attestation
            || link.issuer_id != chain[i].signer_id
            || !(link.valid_from <= now && now < link.valid_to)
        {
            return false;
        }
        if i > 0 && (link.subject_id != chain[i - 1].signer_id || !raw_verify(&chain[i - 1], &link.public_key)) {
            return false;
        }
    }
    let top = chain.last().unwrap();
    roots
        .iter()
        .find(|(id, _)| *id == top.signer_id)
        .is_some_and(|(_, k)| raw_verify(top, k))
}

struct Fixture {
    root: Authority,
    registry: KeyRegistry,
    subject: KeyPair,
}

/// ROOT → I1 → I2 → I3 → REG → leaf: a chain of five links.
fn five_link() -> Fixture {
    let root = Authority::root(KeyPair::derive("ROOT", 1));
    let i1 = Authority::subordinate(KeyPair::derive("I1", 1), &root, 0, 10 * YEAR);
    let i2 = Authority::subordinate(KeyPair::derive("I2", 1), &i1, 0, 10 * YEAR);
    let i3 = Authority::subordinate(KeyPair::derive("I3", 1), &i2, 0, 10 * YEAR);
    let reg = Authority::subordinate(KeyPair::derive("REG", 1), &i3, 0, 10 * YEAR);
    Fixture {
        root,
        registry: KeyRegistry::new(reg),
        subject: KeyPair::derive("alice", 1),
    }
}

fn attest(f: &mut Fixture, now: Millis) -> KeyOwnershipAttestation {
    let key = f.subject.public_key();
    let ch = f.registry.issue_challenge(key, now);
    let evidence = OwnershipEvidence {
        possession: prove_possession(&f.subject, ch, now),
        enrollment: Some(f.registry.enroll("alice", key, now)),
    };
    f.registry.issue_ownership("alice", key, &evidence, now).unwrap()
}

fn roots_of(f: &Fixture) -> TrustedRoots {
    let mut r = TrustedRoots::new();
    r.insert("ROOT", f.root.public_key());
    r
}

#[test]
fn five_link_chain_verifies_like_the_manual_walk() {
    let mut f = five_link();
    let att = attest(&mut f, 100);
    assert_eq!(att.chain.len(), 5);
    let roots = [("ROOT", f.root.public_key())];
    assert!(manual_walk(&att.chain, "alice", &att.public_key, &roots, 200));
    assert!(verify_ownership(&att, &roots_of(&f), 200));
}

#[derive(Debug, Clone)]
enum Damage {
    ResignByStranger(usize),
    ShiftValidity(usize, Millis),
    DropLink(usize),
    SwapLinks(usize, usize),
    Truncate(usize),
}

fn apply(chain: &mut Vec<SignedEnvelope>, d: &Damage) {
    let n = chain.len();
    match *d {
        Damage::ResignByStranger(i) => {
            let i = i % n;
            let link: AttestationLink = chain[i].open().unwrap();
            let stranger = KeyPair::derive(link.issuer_id.clone(), 999);
            chain[i] = sign_value(&stranger, PayloadType::Attestation, &link, chain[i].signed_at).unwrap();
        }
        Damage::ShiftValidity(i, by) => {
            let i = i % n;
            let mut link: AttestationLink = chain[i].open().unwrap();
            link.valid_to = link.valid_from + by;
            let signer = KeyPair::derive(link.issuer_id.clone(), 1);
            chain[i] = sign_value(&signer, PayloadType::Attestation, &link, chain[i].signed_at).unwrap();
        }
        Damage::DropLink(i) => {
            chain.remove(i % n);
        }
        Damage::SwapLinks(i, j) => chain.swap(i % n, j % n),
        Damage::Truncate(k) => chain.truncate(k % n),
    }
}

fn arb_damage() -> impl Strategy<Value = Damage> {
    prop_oneof![
        (0usize..5).prop_map(Damage::ResignByStranger),
        (0usize..5, 1u64..2_000).prop_map(|(i, b)| Damage::ShiftValidity(i, b)),
        (0usize..5).prop_map(Damage::DropLink),
        (0usize..5, 0usize..5).prop_map(|(i, j)| Damage::SwapLinks(i, j)),
        (0usize..5).prop_map(Damage::Truncate),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn verifier_agrees_with_manual_walk(damage in prop::collection::vec(arb_damage(), 0..3), now in 0u64..3_000) {
        let mut f = five_link();
        let mut att = attest(&mut f, 0);
        for d in &damage {
            if !att.chain.is_empty() {
                apply(&mut att.chain, d);
            }
        }
        let roots = [("ROOT", f.root.public_key())];
        let expected = manual_walk(&att.chain, "alice", &att.public_key, &roots, now);
        prop_assert_eq!(verify_ownership(&att, &roots_of(&f), now), expected);
    }

    #[test]
    fn possession_without_enrollment_never_yields_ownership(seed in any::<u64>(), now in 0u64..YEAR) {
        let mut f = five_link();
        let kp = KeyPair::derive("mallory", seed);
        let ch = f.registry.issue_challenge(kp.public_key(), now);
        let possession = prove_possession(&kp, ch, now);
        let evidence = OwnershipEvidence { possession, enrollment: None };
        prop_assert_eq!(
            f.registry.issue_ownership("mallory", kp.public_key(), &evidence, now),
            Err(RegistryError::EnrollmentMissing("mallory".into()))
        );
    }
}

#[test]
fn truncation_below_two_fails() {
    let mut f = five_link();
    let mut att = attest(&mut f, 0);
    att.chain.truncate(1);
    assert_eq!(check_ownership(&att, &roots_of(&f), 1), Err(ChainError::TooShort));
}

#[test]
fn stale_attestation_is_rejected() {
    let mut f = five_link();
    let att = attest(&mut f, 0);
    assert!(verify_ownership(&att, &roots_of(&f), att.valid_to - 1));
    assert_eq!(check_ownership(&att, &roots_of(&f), att.valid_to), Err(ChainError::Expired));
}

#[test]
fn foreign_root_is_untrusted() {
    let mut f = five_link();
    let att = attest(&mut f, 0);
    let mut other = TrustedRoots::new();
    other.insert("ROOT", KeyPair::derive("ROOT", 2).public_key());
    assert!(!verify_ownership(&att, &other, 1));
    assert_eq!(check_ownership(&att, &TrustedRoots::new(), 1), Err(ChainError::UntrustedRoot));
}

#[test]
fn challenge_rules() {
    let mut f = five_link();
    let holder = KeyPair::derive("h", 1);
    let impostor = KeyPair::derive("i", 1);
    assert_eq!(f.registry.challenge_possession(holder.public_key(), &holder, 5), Ok(true));
    assert_eq!(f.registry.challenge_possession(holder.public_key(), &impostor, 5), Ok(false));
    let ch = f.registry.issue_challenge(holder.public_key(), 5);
    let proof = prove_possession(&holder, ch, 5);
    assert_eq!(f.registry.verify_possession(&proof, 6), Ok(true));
    assert_eq!(f.registry.verify_possession(&proof, 7), Err(RegistryError::NonceReplayed));
    let accepted = f.registry.accepted_nonces();
    let mut unique = accepted.to_vec();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), accepted.len());
}

#[test]
fn custody_through_intermediates() {
    let f = five_link();
    let subject = KeyPair::derive("bob", 1);
    let att = f.registry.issue_custody("VASP-A", "bob", subject.public_key(), 10);
    assert!(verify_custody(&att, &roots_of(&f), 11));
    let mut forged = att.clone();
    forged.vasp_id = "VASP-B".into();
    assert_eq!(check_custody(&forged, &roots_of(&f), 11), Err(ChainError::SubjectMismatch));
}
