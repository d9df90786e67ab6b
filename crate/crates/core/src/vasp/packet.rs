//! Travel Rule information packet.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::VaspError;
use crate::envelope::SignedEnvelope;

/// The field groups a packet must carry, in their regulatory order.
pub const FIELD_GROUPS: [&str; 5] = [
    "originator_name",
    "originator_account",
    "originator_locator",
    "beneficiary_name",
    "beneficiary_account",
];

/// Exactly one locator identifying the originator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginatorLocator {
    GeographicAddress(String),
    NationalIdentityNumber(String),
    CustomerIdentificationNumber(String),
    DateAndPlaceOfBirth { date: String, place: String },
}

impl OriginatorLocator {
    fn is_filled(&self) -> bool {
        match self {
            OriginatorLocator::GeographicAddress(s)
            | OriginatorLocator::NationalIdentityNumber(s)
            | OriginatorLocator::CustomerIdentificationNumber(s) => !s.trim().is_empty(),
            OriginatorLocator::DateAndPlaceOfBirth { date, place } => {
                !date.trim().is_empty() && !place.trim().is_empty()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TravelRulePacket {
    pub originator_name: String,
    pub originator_account: String,
    pub originator_locator: OriginatorLocator,
    pub beneficiary_name: String,
    pub beneficiary_account: String,
}

impl TravelRulePacket {
    /// Names of missing or empty field groups.
    pub fn missing_groups(&self) -> Vec<&'static str> {
        let mut missing = Vec::new();
        let checks = [
            !self.originator_name.trim().is_empty(),
            !self.originator_account.trim().is_empty(),
            self.originator_locator.is_filled(),
            !self.beneficiary_name.trim().is_empty(),
            !self.beneficiary_account.trim().is_empty(),
        ];
        for (ok, name) in checks.iter().zip(FIELD_GROUPS) {
            if !ok {
                missing.push(name);
            }
        }
        missing
    }

    pub fn validate(&self) -> Result<(), VaspError> {
        match self.missing_groups().first() {
            Some(f) => Err(VaspError::IncompletePacket(f.to_string())),
            None => Ok(()),
        }
    }

    /// Parses and validates a packet from its wire form. Missing keys,
    /// empty values, and locators with zero or several variants are all
    /// reported as [`VaspError::IncompletePacket`].
    pub fn from_value(value: &Value) -> Result<Self, VaspError> {
        let map = value
            .as_object()
            .ok_or_else(|| VaspError::IncompletePacket("packet".into()))?;
        for group in FIELD_GROUPS {
            match map.get(group) {
                None | Some(Value::Null) => return Err(VaspError::IncompletePacket(group.into())),
                Some(Value::String(s)) if s.trim().is_empty() => {
                    return Err(VaspError::IncompletePacket(group.into()))
                }
                Some(Value::Object(o)) if group == "originator_locator" && o.len() != 1 => {
                    return Err(VaspError::IncompletePacket(group.into()))
                }
                _ => {}
            }
        }
        let packet: TravelRulePacket = serde_json::from_value(value.clone())
            .map_err(|e| VaspError::IncompletePacket(format!("malformed: {e}")))?;
        packet.validate()?;
        Ok(packet)
    }

    /// Field groups present and non-empty, for compliance reporting.
    pub fn present_groups(&self) -> Vec<String> {
        let missing = self.missing_groups();
        FIELD_GROUPS
            .iter()
            .filter(|g| !missing.contains(g))
            .map(|g| g.to_string())
            .collect()
    }
}

/// Signed content of a delivered packet: the Travel Rule fields plus the
/// claim sets the sender shares about its customer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketBody {
    pub transfer_id: String,
    pub sender_vasp: String,
    pub receiver_vasp: String,
    pub amount: u64,
    pub travel_rule: TravelRulePacket,
    pub claimsets: Vec<SignedEnvelope>,
}

impl PacketBody {
    /// Decodes a packet envelope, checking the Travel Rule fields first.
    pub fn from_envelope(env: &SignedEnvelope) -> Result<Self, VaspError> {
        let value = env
            .payload
            .to_value()
            .map_err(|_| VaspError::IncompletePacket("packet".into()))?;
        let fields = value
            .get("travel_rule")
            .ok_or_else(|| VaspError::IncompletePacket("travel_rule".into()))?;
        TravelRulePacket::from_value(fields)?;
        serde_json::from_value(value).map_err(|e| VaspError::IncompletePacket(format!("malformed: {e}")))
    }
}
