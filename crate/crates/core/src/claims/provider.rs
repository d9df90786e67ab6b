use std::collections::BTreeMap;

use super::{
    AccessToken, AlgoFailure, AuthService, Claim, ClaimSet, ClaimSetBody, ClaimStatement,
    ClaimsError, ClaimsRequest, FailureCause, PersonalDataStore, DEFAULT_CLAIM_TTL_MS,
};
use crate::audit_log::AuditLog;
use crate::envelope::{self, KeyDirectory, KeyPair, Millis, PayloadType, PublicKey, SignedEnvelope};
use crate::opal::{
    algorithms, AlgoOutcome, AlgoReply, AlgoRequest, AlgoResponse, AlgorithmRef,
    AlgorithmRegistry, ConsentRecord, DataProvider, FieldMap, FieldValue,
};

/// An algorithm request addressed to one data provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dispatch {
    pub provider_id: String,
    pub request: AlgoRequest,
}

/// Per-request collation state.
#[derive(Debug, Clone)]
pub struct Collation {
    pub request: ClaimsRequest,
    pub started_at: Millis,
    /// correlation id -> (position in request, algorithm, provider)
    outstanding: BTreeMap<String, (usize, AlgorithmRef, String)>,
    outcomes: BTreeMap<usize, Result<AlgoResponse, AlgoFailure>>,
}

impl Collation {
    pub fn is_complete(&self) -> bool {
        self.outstanding.is_empty()
    }
}

/// The outcome of a finished request, ready to send back to the VASP.
pub type Completed = (ClaimsRequest, Result<ClaimSet, ClaimsError>);

#[derive(Debug, Clone)]
pub struct ClaimsProvider {
    keypair: KeyPair,
    auth: AuthService,
    registry: AlgorithmRegistry,
    routes: BTreeMap<AlgorithmRef, String>,
    consents: Vec<ConsentRecord>,
    pds: BTreeMap<String, PersonalDataStore>,
    issued: Vec<ClaimSet>,
    log: AuditLog,
    keys: KeyDirectory,
    claim_ttl: Millis,
    pending: BTreeMap<String, Collation>,
    correlations: BTreeMap<String, String>,
    counter: u64,
}

fn pending_key(vasp_id: &str, request_id: &str) -> String {
    format!("{vasp_id}/{request_id}")
}

impl ClaimsProvider {
    pub fn new(keypair: KeyPair, auth: AuthService, registry: AlgorithmRegistry) -> Self {
        let mut keys = KeyDirectory::new();
        keys.add(&keypair);
        let log = AuditLog::new(keypair.key_id());
        Self {
            keypair,
            auth,
            registry,
            routes: BTreeMap::new(),
            consents: Vec::new(),
            pds: BTreeMap::new(),
            issued: Vec::new(),
            log,
            keys,
            claim_ttl: DEFAULT_CLAIM_TTL_MS,
            pending: BTreeMap::new(),
            correlations: BTreeMap::new(),
            counter: 0,
        }
    }

    pub fn with_claim_ttl(mut self, ttl: Millis) -> Self {
        self.claim_ttl = ttl;
        self
    }

    pub fn cp_id(&self) -> &str {
        self.keypair.key_id()
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key()
    }

    pub fn auth(&self) -> &AuthService {
        &self.auth
    }

    pub fn auth_mut(&mut self) -> &mut AuthService {
        &mut self.auth
    }

    pub fn registry(&self) -> &AlgorithmRegistry {
        &self.registry
    }

    pub fn log(&self) -> &AuditLog {
        &self.log
    }

    pub fn keys_mut(&mut self) -> &mut KeyDirectory {
        &mut self.keys
    }

    /// Routes an algorithm to the data provider that runs it.
    pub fn add_route(&mut self, algo: AlgorithmRef, provider_id: impl Into<String>) {
        self.routes.insert(algo, provider_id.into());
    }

    /// Seeds a pre-granted consent record.
    pub fn add_consent(&mut self, consent: ConsentRecord) {
        self.consents.push(consent);
    }

    pub fn pds(&self, subject_id: &str) -> Option<&PersonalDataStore> {
        self.pds.get(subject_id)
    }

    pub fn pds_all(&self) -> impl Iterator<Item = &PersonalDataStore> {
        self.pds.values()
    }

    /// Every claim set issued, in issuance order.
    pub fn issued(&self) -> &[ClaimSet] {
        &self.issued
    }

    pub fn pending(&self) -> impl Iterator<Item = &Collation> {
        self.pending.values()
    }

    pub fn authenticate_vasp(
        &mut self,
        vasp_id: &str,
        credential: &SignedEnvelope,
        requested: &[AlgorithmRef],
        now: Millis,
    ) -> Result<AccessToken, ClaimsError> {
        self.auth.authenticate_vasp(vasp_id, credential, requested, now)
    }

    /// Newest live consent covering the algorithm. Expired consents are not
    /// forwarded, so providers see them as absent.
    fn consent_for(&self, subject_id: &str, algo_id: &str, now: Millis) -> Option<&ConsentRecord> {
        self.consents
            .iter()
            .filter(|c| c.covers(subject_id, algo_id, self.cp_id()) && now < c.expires_at)
            .max_by_key(|c| (c.granted_at, c.expires_at))
    }

    /// Validates the request and produces the algorithm requests to send.
    ///
    /// When nothing can be dispatched the request fails immediately.
    pub fn begin_request(
        &mut self,
        request: ClaimsRequest,
        now: Millis,
    ) -> Result<Vec<Dispatch>, ClaimsError> {
        request.token.validate(
            self.auth.service_id(),
            &self.auth.public_key(),
            &request.vasp_id,
            now,
        )?;
        if request.algorithms.is_empty() {
            return Err(ClaimsError::InvalidRequest("no algorithms requested".into()));
        }
        let out_of_scope: Vec<String> = request
            .algorithms
            .iter()
            .filter(|a| !request.token.allows(a))
            .map(ToString::to_string)
            .collect();
        if !out_of_scope.is_empty() {
            return Err(ClaimsError::ScopeExceeded(out_of_scope));
        }
        if let Some(unlisted) = request
            .algorithms
            .iter()
            .find(|a| !self.registry.is_published(a))
        {
            return Err(ClaimsError::UnlistedAlgorithm(unlisted.to_string()));
        }
        let key = pending_key(&request.vasp_id, &request.request_id);
        if self.pending.contains_key(&key) {
            return Err(ClaimsError::InvalidRequest(format!(
                "duplicate request id {}",
                request.request_id
            )));
        }

        let mut collation = Collation {
            request: request.clone(),
            started_at: now,
            outstanding: BTreeMap::new(),
            outcomes: BTreeMap::new(),
        };
        let mut dispatches = Vec::new();
        for (pos, algo) in request.algorithms.iter().enumerate() {
            let Some(provider_id) = self.routes.get(algo) else {
                collation.outcomes.insert(
                    pos,
                    Err(AlgoFailure {
                        algorithm: algo.clone(),
                        cause: FailureCause::NoRoute,
                    }),
                );
                continue;
            };
            self.counter += 1;
            let correlation_id = format!("{}-c{}", self.cp_id(), self.counter);
            let params: FieldMap =
                [("subject_id".to_string(), FieldValue::Text(request.subject_id.clone()))].into();
            dispatches.push(Dispatch {
                provider_id: provider_id.clone(),
                request: AlgoRequest {
                    correlation_id: correlation_id.clone(),
                    algorithm: algo.clone(),
                    params,
                    consent: self.consent_for(&request.subject_id, &algo.algo_id, now).cloned(),
                    audience: self.cp_id().to_string(),
                },
            });
            collation
                .outstanding
                .insert(correlation_id.clone(), (pos, algo.clone(), provider_id.clone()));
            self.correlations.insert(correlation_id, key.clone());
        }
        if dispatches.is_empty() {
            let failures = collation.outcomes.into_values().filter_map(Result::err).collect();
            return Err(ClaimsError::AllAlgorithmsFailed(failures));
        }
        self.pending.insert(key, collation);
        Ok(dispatches)
    }

    /// Records a provider reply. Returns the finished request once every
    /// dispatched algorithm has answered.
    pub fn on_reply(&mut self, reply: AlgoReply, from_provider: &str, now: Millis) -> Option<Completed> {
        let key = self.correlations.get(&reply.correlation_id)?.clone();
        let collation = self.pending.get_mut(&key)?;
        match collation.outstanding.get(&reply.correlation_id) {
            Some((_, algo, provider)) if provider == from_provider && *algo == reply.algorithm => {}
            _ => return None,
        }
        let (pos, algo, _) = collation
            .outstanding
            .remove(&reply.correlation_id)
            .expect("checked above");
        self.correlations.remove(&reply.correlation_id);
        let outcome = match reply.outcome {
            AlgoOutcome::Ok(resp) if resp.algo_id == algo.algo_id && resp.version == algo.version => Ok(resp),
            AlgoOutcome::Ok(_) => Err(AlgoFailure {
                algorithm: algo,
                cause: FailureCause::Provider(crate::opal::OpalError::UnknownAlgorithm(
                    "mismatched response".into(),
                )),
            }),
            AlgoOutcome::Err(e) => Err(AlgoFailure {
                algorithm: algo,
                cause: FailureCause::Provider(e),
            }),
        };
        collation.outcomes.insert(pos, outcome);
        if collation.is_complete() {
            Some(self.finish(&key, now))
        } else {
            None
        }
    }

    /// Gives up on outstanding providers and finishes with what has arrived.
    pub fn on_timeout(&mut self, vasp_id: &str, request_id: &str, now: Millis) -> Option<Completed> {
        let key = pending_key(vasp_id, request_id);
        let collation = self.pending.get_mut(&key)?;
        for (corr, (pos, algo, _)) in std::mem::take(&mut collation.outstanding) {
            self.correlations.remove(&corr);
            collation.outcomes.insert(
                pos,
                Err(AlgoFailure {
                    algorithm: algo,
                    cause: FailureCause::Timeout,
                }),
            );
        }
        Some(self.finish(&key, now))
    }

    fn finish(&mut self, key: &str, now: Millis) -> Completed {
        let collation = self.pending.remove(key).expect("pending collation");
        let request = collation.request;
        let mut successes = Vec::new();
        let mut failures = Vec::new();
        for outcome in collation.outcomes.into_values() {
            match outcome {
                Ok(r) => successes.push(r),
                Err(f) => failures.push(f),
            }
        }
        if successes.is_empty() {
            return (request, Err(ClaimsError::AllAlgorithmsFailed(failures)));
        }
        let claimset = self.issue(&request, successes, failures, now);
        (request, Ok(claimset))
    }

    fn issue(
        &mut self,
        request: &ClaimsRequest,
        responses: Vec<AlgoResponse>,
        failures: Vec<AlgoFailure>,
        now: Millis,
    ) -> ClaimSet {
        self.counter += 1;
        let claimset_id = format!("{}-cs{}", self.cp_id(), self.counter);
        let claims = responses
            .into_iter()
            .enumerate()
            .map(|(i, resp)| Claim {
                claim_id: format!("{claimset_id}-{i}"),
                subject_id: request.subject_id.clone(),
                statement: statement_for(&request.subject_id, &resp),
                provenance: vec![resp.provenance],
                issued_at: now,
                expires_at: now.saturating_add(self.claim_ttl),
            })
            .collect();
        let body = ClaimSetBody {
            claimset_id,
            request_id: request.request_id.clone(),
            issuer_id: self.cp_id().to_string(),
            vasp_id: request.vasp_id.clone(),
            subject_id: request.subject_id.clone(),
            claims,
            failures,
        };
        let envelope = envelope::sign_value(&self.keypair, PayloadType::ClaimSet, &body, now)
            .expect("claim sets are canonicalizable");
        let claimset = ClaimSet { body, envelope };
        self.log
            .append(claimset.envelope.clone(), &self.keys, now)
            .expect("own signature verifies");
        self.mirror_to_pds(&claimset);
        self.issued.push(claimset.clone());
        claimset
    }

    /// Places a copy of an issued claim set in the subject's store.
    /// Idempotent per claim id; claim sets from other issuers are ignored.
    pub fn mirror_to_pds(&mut self, claimset: &ClaimSet) -> bool {
        if claimset.issuer_id() != self.cp_id() || !claimset.verify(&self.public_key()) {
            return false;
        }
        self.pds
            .entry(claimset.subject_id().to_string())
            .or_insert_with(|| PersonalDataStore::new(claimset.subject_id()))
            .mirror(claimset)
    }

    /// Runs a request to completion by calling providers directly.
    pub fn handle_request(
        &mut self,
        request: ClaimsRequest,
        providers: &[&DataProvider],
        now: Millis,
    ) -> Result<ClaimSet, ClaimsError> {
        let vasp_id = request.vasp_id.clone();
        let request_id = request.request_id.clone();
        let dispatches = self.begin_request(request, now)?;
        let mut done = None;
        for d in dispatches {
            let reply = match providers.iter().find(|p| p.provider_id() == d.provider_id) {
                Some(p) => p.handle(&d.request, now),
                None => continue,
            };
            if let Some(c) = self.on_reply(reply, &d.provider_id, now) {
                done = Some(c);
            }
        }
        let (_, result) = match done {
            Some(c) => c,
            None => self
                .on_timeout(&vasp_id, &request_id, now)
                .expect("request is pending"),
        };
        result
    }
}

/// Maps an algorithm result onto claim attributes and a readable sentence.
pub fn statement_for(subject_id: &str, resp: &AlgoResponse) -> ClaimStatement {
    let get = |k: &str| resp.result.get(k).cloned();
    let mut attributes = FieldMap::new();
    let sentence = match resp.algo_id.as_str() {
        algorithms::TX_RANGE => {
            let (min, max) = (get("min"), get("max"));
            if let Some(v) = min.clone() {
                attributes.insert("tx_min".into(), v);
            }
            if let Some(v) = max.clone() {
                attributes.insert("tx_max".into(), v);
            }
            format!(
                "Transactions of {subject_id} ranged from {} to {} over {} records",
                show(min.as_ref()),
                show(max.as_ref()),
                resp.records_used
            )
        }
        algorithms::RESIDENCY => {
            let (city, country) = (get("city"), get("country"));
            if let Some(v) = city.clone() {
                attributes.insert("residence_city".into(), v);
            }
            if let Some(v) = country.clone() {
                attributes.insert("residence_country".into(), v);
            }
            format!(
                "{subject_id} legally lives in {}, {}",
                show(city.as_ref()),
                show(country.as_ref())
            )
        }
        _ => {
            attributes = resp.result.clone();
            let parts: Vec<String> = resp
                .result
                .iter()
                .map(|(k, v)| format!("{k} = {}", show(Some(v))))
                .collect();
            format!(
                "{} {} over {} subjects: {}",
                resp.algo_id,
                resp.version,
                resp.records_used,
                parts.join(", ")
            )
        }
    };
    ClaimStatement {
        attributes,
        sentence,
    }
}

fn show(v: Option<&FieldValue>) -> String {
    match v {
        Some(FieldValue::Int(i)) => i.to_string(),
        Some(FieldValue::Bool(b)) => b.to_string(),
        Some(FieldValue::Text(s)) => s.clone(),
        None => "?".into(),
    }
}
