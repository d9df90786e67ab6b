use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::OpalError;
use crate::canonical::{self, CanonicalBytes};

/// A scalar cell value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Bool(bool),
    Int(i64),
    Text(String),
}

impl FieldValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            FieldValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            FieldValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            FieldValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl From<i64> for FieldValue {
    fn from(v: i64) -> Self {
        FieldValue::Int(v)
    }
}

impl From<bool> for FieldValue {
    fn from(v: bool) -> Self {
        FieldValue::Bool(v)
    }
}

impl From<&str> for FieldValue {
    fn from(v: &str) -> Self {
        FieldValue::Text(v.to_string())
    }
}

pub type FieldMap = BTreeMap<String, FieldValue>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRecord {
    pub subject_id: String,
    pub fields: FieldMap,
}

impl DataRecord {
    pub fn canonical(&self) -> CanonicalBytes {
        canonical::canonicalize(self).expect("records hold scalars only")
    }
}

/// Header line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub dataset_id: String,
    pub provider_id: String,
    pub schema: Vec<String>,
}

/// Raw subject data held by one provider. Deliberately not `Serialize`: it has
/// no wire form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    dataset_id: String,
    provider_id: String,
    schema: Vec<String>,
    records: Vec<DataRecord>,
}

impl Dataset {
    pub fn new(
        dataset_id: impl Into<String>,
        provider_id: impl Into<String>,
        schema: Vec<String>,
        records: Vec<DataRecord>,
    ) -> Result<Self, OpalError> {
        let dataset_id = dataset_id.into();
        let schema_set: BTreeSet<&str> = schema.iter().map(String::as_str).collect();
        if schema_set.len() != schema.len() {
            return Err(OpalError::SchemaViolation(format!(
                "{dataset_id}: duplicate schema field"
            )));
        }
        for (i, record) in records.iter().enumerate() {
            let fields: BTreeSet<&str> = record.fields.keys().map(String::as_str).collect();
            if fields != schema_set || record.subject_id.is_empty() {
                return Err(OpalError::SchemaViolation(format!(
                    "{dataset_id}: record {i} does not match schema"
                )));
            }
        }
        Ok(Self {
            dataset_id,
            provider_id: provider_id.into(),
            schema,
            records,
        })
    }

    /// Loads a record-per-line file: a [`DatasetHeader`] line followed by one
    /// [`DataRecord`] per line.
    pub fn from_ndjson(bytes: &[u8]) -> Result<Self, OpalError> {
        let mut lines = bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.iter().all(u8::is_ascii_whitespace));
        let header: DatasetHeader = serde_json::from_slice(
            lines
                .next()
                .ok_or_else(|| OpalError::SchemaViolation("empty dataset file".into()))?,
        )
        .map_err(|e| OpalError::SchemaViolation(format!("header: {e}")))?;
        let records = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_slice(l)
                    .map_err(|e| OpalError::SchemaViolation(format!("record {i}: {e}")))
            })
            .collect::<Result<Vec<DataRecord>, _>>()?;
        Self::new(header.dataset_id, header.provider_id, header.schema, records)
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut out = canonical::canonicalize(&DatasetHeader {
            dataset_id: self.dataset_id.clone(),
            provider_id: self.provider_id.clone(),
            schema: self.schema.clone(),
        })
        .expect("header is canonicalizable")
        .into_bytes();
        out.push(b'\n');
        for r in &self.records {
            out.extend_from_slice(r.canonical().as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn records(&self) -> &[DataRecord] {
        &self.records
    }

    pub fn satisfies(&self, required: &[String]) -> bool {
        required.iter().all(|f| self.schema.contains(f))
    }

    pub fn rows_for<'a>(&'a self, subject_id: &'a str) -> impl Iterator<Item = &'a DataRecord> {
        self.records.iter().filter(move |r| r.subject_id == subject_id)
    }

    pub fn distinct_subjects(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.subject_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}
