//! Data provider runtime.
//!
//! A provider keeps its datasets private and only answers requests that name a
//! vetted algorithm from the shared registry. Requests carry `(algorithm,
//! params)`; the implementation is pre-installed from the catalogue in
//! [`algorithms`]. Before a response leaves the provider:
//!
//! * subject-level algorithms need a valid, unexpired consent record signed by
//!   the subject that names the algorithm and the requesting audience;
//! * aggregate algorithms must cover at least `k_min` distinct subjects;
//! * the response carries provenance and never any raw record.

pub mod algorithms;
pub mod consent;
pub mod dataset;
pub mod registry;

use serde::{Deserialize, Serialize};

pub use algorithms::Builtin;
pub use consent::{grant_consent, ConsentRecord, ConsentTerms};
pub use dataset::{DataRecord, Dataset, DatasetHeader, FieldMap, FieldValue};
pub use registry::{AlgorithmDescriptor, AlgorithmRef, AlgorithmRegistry, OutputKind, PublishedAlgorithms};

use crate::envelope::{KeyDirectory, Millis};

pub const DEFAULT_K_MIN: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum OpalError {
    #[error("algorithm {0} already registered")]
    DuplicateAlgorithm(String),
    #[error("descriptor {0} has empty fields")]
    InvalidDescriptor(String),
    #[error("unknown algorithm {0}")]
    UnknownAlgorithm(String),
    #[error("algorithm {0} is not vetted")]
    VettingRequired(String),
    #[error("no dataset satisfies schema: {0}")]
    SchemaMismatch(String),
    #[error("dataset violates its schema: {0}")]
    SchemaViolation(String),
    #[error("no consent for subject {0}")]
    ConsentMissing(String),
    #[error("consent for subject {0} has expired")]
    ConsentExpired(String),
    #[error("consent for subject {0} does not verify")]
    ConsentInvalid(String),
    #[error("aggregate covers {used} subjects, below k_min {k_min}")]
    AggregateTooSmall { used: u64, k_min: u64 },
    #[error("no records for subject {0}")]
    NoSubjectRecords(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_id: String,
    pub provider_id: String,
    pub algo_id: String,
    pub version: String,
    pub executed_at: Millis,
}

impl Provenance {
    pub fn is_complete(&self) -> bool {
        !(self.dataset_id.is_empty()
            || self.provider_id.is_empty()
            || self.algo_id.is_empty()
            || self.version.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgoResponse {
    pub algo_id: String,
    pub version: String,
    pub output_kind: OutputKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    pub result: FieldMap,
    pub records_used: u64,
    pub provenance: Provenance,
}

/// Claims provider to data provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgoRequest {
    pub correlation_id: String,
    pub algorithm: AlgorithmRef,
    pub params: FieldMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consent: Option<ConsentRecord>,
    pub audience: String,
}

/// Data provider to claims provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgoReply {
    pub correlation_id: String,
    pub algorithm: AlgorithmRef,
    pub outcome: AlgoOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgoOutcome {
    Ok(AlgoResponse),
    Err(OpalError),
}

#[derive(Debug, Clone)]
pub struct DataProvider {
    provider_id: String,
    registry: AlgorithmRegistry,
    datasets: Vec<Dataset>,
    k_min: u64,
    subject_keys: KeyDirectory,
}

impl DataProvider {
    pub fn new(provider_id: impl Into<String>, registry: AlgorithmRegistry) -> Self {
        Self {
            provider_id: provider_id.into(),
            registry,
            datasets: Vec::new(),
            k_min: DEFAULT_K_MIN,
            subject_keys: KeyDirectory::new(),
        }
    }

    pub fn with_k_min(mut self, k_min: u64) -> Self {
        self.k_min = k_min;
        self
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn k_min(&self) -> u64 {
        self.k_min
    }

    pub fn registry(&self) -> &AlgorithmRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut AlgorithmRegistry {
        &mut self.registry
    }

    pub fn add_dataset(&mut self, dataset: Dataset) {
        self.datasets.push(dataset);
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    /// Public keys used to check subjects' consent signatures.
    pub fn subject_keys_mut(&mut self) -> &mut KeyDirectory {
        &mut self.subject_keys
    }

    pub fn handle(&self, request: &AlgoRequest, now: Millis) -> AlgoReply {
        let outcome = match self.execute(
            &request.algorithm,
            &request.params,
            request.consent.as_ref(),
            &request.audience,
            now,
        ) {
            Ok(r) => AlgoOutcome::Ok(r),
            Err(e) => AlgoOutcome::Err(e),
        };
        AlgoReply {
            correlation_id: request.correlation_id.clone(),
            algorithm: request.algorithm.clone(),
            outcome,
        }
    }

    pub fn execute(
        &self,
        algorithm: &AlgorithmRef,
        params: &FieldMap,
        consent: Option<&ConsentRecord>,
        audience: &str,
        now: Millis,
    ) -> Result<AlgoResponse, OpalError> {
        let descriptor = self
            .registry
            .get(algorithm)
            .ok_or_else(|| OpalError::UnknownAlgorithm(algorithm.to_string()))?;
        let builtin = Builtin::for_algo_id(&descriptor.algo_id)
            .filter(|b| b.output_kind() == descriptor.output_kind)
            .ok_or_else(|| OpalError::UnknownAlgorithm(algorithm.to_string()))?;
        if !descriptor.vetted {
            return Err(OpalError::VettingRequired(algorithm.to_string()));
        }
        let needed: Vec<String> = descriptor
            .required_schema
            .iter()
            .cloned()
            .chain(builtin.required_schema().iter().map(|s| s.to_string()))
            .collect();
        let candidates: Vec<&Dataset> = self
            .datasets
            .iter()
            .filter(|d| d.satisfies(&needed))
            .collect();
        if candidates.is_empty() {
            return Err(OpalError::SchemaMismatch(algorithm.to_string()));
        }

        let (dataset, subject_id) = match descriptor.output_kind {
            OutputKind::SubjectLevel => {
                let subject = params
                    .get("subject_id")
                    .and_then(FieldValue::as_text)
                    .ok_or_else(|| OpalError::MissingParam("subject_id".into()))?;
                let consent = consent
                    .filter(|c| c.covers(subject, &descriptor.algo_id, audience))
                    .ok_or_else(|| OpalError::ConsentMissing(subject.to_string()))?;
                consent.validate(self.subject_keys.get(subject), now)?;
                let dataset = candidates
                    .iter()
                    .find(|d| d.rows_for(subject).next().is_some())
                    .unwrap_or(&candidates[0]);
                (*dataset, Some(subject.to_string()))
            }
            OutputKind::Aggregate => (candidates[0], None),
        };

        let (result, records_used) = builtin.run(dataset, subject_id.as_deref())?;
        if descriptor.output_kind == OutputKind::Aggregate && records_used < self.k_min {
            return Err(OpalError::AggregateTooSmall {
                used: records_used,
                k_min: self.k_min,
            });
        }
        Ok(AlgoResponse {
            algo_id: descriptor.algo_id.clone(),
            version: descriptor.version.clone(),
            output_kind: descriptor.output_kind,
            subject_id,
            result,
            records_used,
            provenance: Provenance {
                dataset_id: dataset.dataset_id().to_string(),
                provider_id: self.provider_id.clone(),
                algo_id: descriptor.algo_id.clone(),
                version: descriptor.version.clone(),
                executed_at: now,
            },
        })
    }
}
