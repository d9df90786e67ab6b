//! The fixed catalogue of installed algorithm implementations.

use std::collections::{BTreeMap, BTreeSet};

use super::dataset::{Dataset, FieldValue};
use super::registry::{AlgorithmDescriptor, OutputKind};
use super::OpalError;

pub const TX_RANGE: &str = "tx-range";
pub const RESIDENCY: &str = "residency";
pub const COUNT_ACTIVE_ACCOUNTS: &str = "count-active-accounts";
pub const MEAN_BALANCE: &str = "mean-balance";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    /// Min and max of a subject's `amount` rows.
    TxRange,
    /// The subject's `city` and `country` from their most recent row.
    Residency,
    /// Number of distinct subjects with an `active = true` row.
    CountActiveAccounts,
    /// Integer mean (floored) of all `balance` cells.
    MeanBalance,
}

impl Builtin {
    pub fn for_algo_id(algo_id: &str) -> Option<Self> {
        match algo_id {
            TX_RANGE => Some(Builtin::TxRange),
            RESIDENCY => Some(Builtin::Residency),
            COUNT_ACTIVE_ACCOUNTS => Some(Builtin::CountActiveAccounts),
            MEAN_BALANCE => Some(Builtin::MeanBalance),
            _ => None,
        }
    }

    pub fn output_kind(self) -> OutputKind {
        match self {
            Builtin::TxRange | Builtin::Residency => OutputKind::SubjectLevel,
            Builtin::CountActiveAccounts | Builtin::MeanBalance => OutputKind::Aggregate,
        }
    }

    pub fn required_schema(self) -> &'static [&'static str] {
        match self {
            Builtin::TxRange => &["amount"],
            Builtin::Residency => &["city", "country"],
            Builtin::CountActiveAccounts => &["active"],
            Builtin::MeanBalance => &["balance"],
        }
    }

    /// Default descriptor for version `v1` of this algorithm.
    pub fn descriptor(self, vetted: bool) -> AlgorithmDescriptor {
        let (id, text) = match self {
            Builtin::TxRange => (
                TX_RANGE,
                "Smallest and largest transaction amount recorded for the subject",
            ),
            Builtin::Residency => (RESIDENCY, "City and country where the subject resides"),
            Builtin::CountActiveAccounts => (
                COUNT_ACTIVE_ACCOUNTS,
                "Number of customers with an active account",
            ),
            Builtin::MeanBalance => (MEAN_BALANCE, "Average account balance across customers"),
        };
        AlgorithmDescriptor {
            algo_id: id.to_string(),
            version: "v1".to_string(),
            lay_description: text.to_string(),
            output_kind: self.output_kind(),
            required_schema: self.required_schema().iter().map(|s| s.to_string()).collect(),
            vetted,
        }
    }

    pub fn all() -> [Builtin; 4] {
        [
            Builtin::TxRange,
            Builtin::Residency,
            Builtin::CountActiveAccounts,
            Builtin::MeanBalance,
        ]
    }

    /// Runs the algorithm. Returns the result map and the number of records
    /// used (rows for subject-level, distinct subjects for aggregates).
    pub(crate) fn run(
        self,
        dataset: &Dataset,
        subject_id: Option<&str>,
    ) -> Result<(BTreeMap<String, FieldValue>, u64), OpalError> {
        let mut result = BTreeMap::new();
        match self {
            Builtin::TxRange => {
                let subject = subject_id.ok_or_else(|| OpalError::MissingParam("subject_id".into()))?;
                let amounts: Vec<i64> = dataset
                    .rows_for(subject)
                    .map(|r| int_field(r.fields.get("amount"), "amount"))
                    .collect::<Result<_, _>>()?;
                let (Some(min), Some(max)) = (amounts.iter().min(), amounts.iter().max()) else {
                    return Err(OpalError::NoSubjectRecords(subject.to_string()));
                };
                result.insert("min".into(), FieldValue::Int(*min));
                result.insert("max".into(), FieldValue::Int(*max));
                Ok((result, amounts.len() as u64))
            }
            Builtin::Residency => {
                let subject = subject_id.ok_or_else(|| OpalError::MissingParam("subject_id".into()))?;
                let rows: Vec<_> = dataset.rows_for(subject).collect();
                let latest = rows
                    .last()
                    .ok_or_else(|| OpalError::NoSubjectRecords(subject.to_string()))?;
                for field in ["city", "country"] {
                    let v = latest.fields.get(field).cloned().ok_or_else(|| {
                        OpalError::SchemaMismatch(format!("missing {field}"))
                    })?;
                    result.insert(field.to_string(), v);
                }
                Ok((result, rows.len() as u64))
            }
            Builtin::CountActiveAccounts => {
                let mut population = BTreeSet::new();
                let mut active = BTreeSet::new();
                for r in dataset.records() {
                    population.insert(r.subject_id.as_str());
                    if r.fields.get("active").and_then(FieldValue::as_bool) == Some(true) {
                        active.insert(r.subject_id.as_str());
                    }
                }
                result.insert("active_accounts".into(), FieldValue::Int(active.len() as i64));
                Ok((result, population.len() as u64))
            }
            Builtin::MeanBalance => {
                let balances: Vec<i64> = dataset
                    .records()
                    .iter()
                    .map(|r| int_field(r.fields.get("balance"), "balance"))
                    .collect::<Result<_, _>>()?;
                let mean = if balances.is_empty() {
                    0
                } else {
                    let sum: i128 = balances.iter().map(|b| *b as i128).sum();
                    sum.div_euclid(balances.len() as i128) as i64
                };
                result.insert("mean_balance".into(), FieldValue::Int(mean));
                Ok((result, dataset.distinct_subjects() as u64))
            }
        }
    }
}

fn int_field(v: Option<&FieldValue>, name: &str) -> Result<i64, OpalError> {
    v.and_then(FieldValue::as_int)
        .ok_or_else(|| OpalError::SchemaMismatch(format!("{name} is not an integer")))
}
