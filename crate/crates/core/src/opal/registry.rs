use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::OpalError;
use crate::canonical::{self, CanonicalBytes};

/// An algorithm identity: id plus version, written `"tx-range v1"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AlgorithmRef {
    pub algo_id: String,
    pub version: String,
}

impl AlgorithmRef {
    pub fn new(algo_id: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            algo_id: algo_id.into(),
            version: version.into(),
        }
    }
}

impl fmt::Display for AlgorithmRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.algo_id, self.version)
    }
}

impl FromStr for AlgorithmRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().split_once(' ') {
            Some((id, v)) if !id.is_empty() && !v.trim().is_empty() => {
                Ok(Self::new(id, v.trim()))
            }
            _ => Err(format!("expected \"<algo_id> <version>\", got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Aggregate,
    SubjectLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmDescriptor {
    pub algo_id: String,
    pub version: String,
    pub lay_description: String,
    pub output_kind: OutputKind,
    pub required_schema: Vec<String>,
    pub vetted: bool,
}

impl AlgorithmDescriptor {
    pub fn algo_ref(&self) -> AlgorithmRef {
        AlgorithmRef::new(&self.algo_id, &self.version)
    }
}

/// Registry of algorithm descriptors shared by providers and claims providers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlgorithmRegistry {
    descriptors: BTreeMap<AlgorithmRef, AlgorithmDescriptor>,
}

/// The document claims providers publish: vetted descriptors only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedAlgorithms {
    pub algorithms: Vec<AlgorithmDescriptor>,
}

impl AlgorithmRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, descriptor: AlgorithmDescriptor) -> Result<(), OpalError> {
        if descriptor.algo_id.trim().is_empty()
            || descriptor.version.trim().is_empty()
            || descriptor.lay_description.trim().is_empty()
            || descriptor.required_schema.is_empty()
            || descriptor.required_schema.iter().any(|f| f.is_empty())
        {
            return Err(OpalError::InvalidDescriptor(descriptor.algo_ref().to_string()));
        }
        let key = descriptor.algo_ref();
        if self.descriptors.contains_key(&key) {
            return Err(OpalError::DuplicateAlgorithm(key.to_string()));
        }
        self.descriptors.insert(key, descriptor);
        Ok(())
    }

    pub fn get(&self, algo: &AlgorithmRef) -> Option<&AlgorithmDescriptor> {
        self.descriptors.get(algo)
    }

    pub fn is_published(&self, algo: &AlgorithmRef) -> bool {
        self.get(algo).is_some_and(|d| d.vetted)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AlgorithmDescriptor> {
        self.descriptors.values()
    }

    pub fn published(&self) -> PublishedAlgorithms {
        PublishedAlgorithms {
            algorithms: self.iter().filter(|d| d.vetted).cloned().collect(),
        }
    }

    pub fn published_document(&self) -> CanonicalBytes {
        canonical::canonicalize(&self.published()).expect("descriptors are canonicalizable")
    }
}
