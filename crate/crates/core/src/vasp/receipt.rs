//! Non-repudiation receipts.
//!
//! The sender signs `(transfer_id, delivered_hash)` when it hands over a
//! packet; the receiver countersigns the hash of that signature. Each party
//! ends up holding the other's signature over the exact delivered envelope.

use serde::{Deserialize, Serialize};

use crate::envelope::{self, Digest, KeyPair, Millis, PayloadType, PublicKey, SignedEnvelope};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenderStatement {
    pub kind: String,
    pub transfer_id: String,
    pub delivered_hash: Digest,
    pub receiver_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Countersignature {
    pub kind: String,
    pub transfer_id: String,
    pub delivered_hash: Digest,
    pub sender_signature_hash: Digest,
    pub sender_signature: SignedEnvelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonRepudiationReceipt {
    pub transfer_id: String,
    pub delivered_hash: Digest,
    pub sender_signature: SignedEnvelope,
    pub receiver_countersignature: SignedEnvelope,
}

/// Sender's signed statement that it delivered `delivered` to `receiver_id`.
pub fn sign_delivery(
    sender: &KeyPair,
    transfer_id: &str,
    delivered: &SignedEnvelope,
    receiver_id: &str,
    now: Millis,
) -> SignedEnvelope {
    let stmt = SenderStatement {
        kind: "sent".into(),
        transfer_id: transfer_id.to_string(),
        delivered_hash: delivered.digest(),
        receiver_id: receiver_id.to_string(),
    };
    envelope::sign_value(sender, PayloadType::Receipt, &stmt, now).expect("statement is canonicalizable")
}

/// Receiver's countersignature over the sender's statement.
pub fn countersign(receiver: &KeyPair, sender_signature: &SignedEnvelope, now: Millis) -> Option<NonRepudiationReceipt> {
    let stmt: SenderStatement = sender_signature.open().ok()?;
    let body = Countersignature {
        kind: "received".into(),
        transfer_id: stmt.transfer_id.clone(),
        delivered_hash: stmt.delivered_hash,
        sender_signature_hash: sender_signature.digest(),
        sender_signature: sender_signature.clone(),
    };
    let env = envelope::sign_value(receiver, PayloadType::Receipt, &body, now).ok()?;
    Some(NonRepudiationReceipt {
        transfer_id: stmt.transfer_id,
        delivered_hash: stmt.delivered_hash,
        sender_signature: sender_signature.clone(),
        receiver_countersignature: env,
    })
}

impl NonRepudiationReceipt {
    /// Rebuilds a receipt from the receiver's countersignature envelope.
    pub fn from_countersignature(env: SignedEnvelope) -> Option<Self> {
        let body: Countersignature = env.open().ok()?;
        Some(Self {
            transfer_id: body.transfer_id,
            delivered_hash: body.delivered_hash,
            sender_signature: body.sender_signature,
            receiver_countersignature: env,
        })
    }

    /// Both signatures verify and agree on transfer id and delivered hash.
    pub fn verify(&self, sender_key: &PublicKey, receiver_key: &PublicKey) -> bool {
        let Ok(stmt) = self.sender_signature.open::<SenderStatement>() else {
            return false;
        };
        let Ok(counter) = self.receiver_countersignature.open::<Countersignature>() else {
            return false;
        };
        self.sender_signature.payload_type == PayloadType::Receipt
            && self.receiver_countersignature.payload_type == PayloadType::Receipt
            && stmt.kind == "sent"
            && counter.kind == "received"
            && envelope::verifies(&self.sender_signature, sender_key)
            && envelope::verifies(&self.receiver_countersignature, receiver_key)
            && stmt.receiver_id == self.receiver_countersignature.signer_id
            && stmt.transfer_id == self.transfer_id
            && counter.transfer_id == self.transfer_id
            && stmt.delivered_hash == self.delivered_hash
            && counter.delivered_hash == self.delivered_hash
            && counter.sender_signature == self.sender_signature
            && counter.sender_signature_hash == self.sender_signature.digest()
    }

    /// Digest of the countersignature envelope, used in reports.
    pub fn receipt_hash(&self) -> Digest {
        self.receiver_countersignature.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_and_tamper() {
        let a = KeyPair::derive("A", 1);
        let b = KeyPair::derive("B", 1);
        let delivered = envelope::sign_value(&a, PayloadType::TravelRulePacket, &json!({"x": 1}), 5).unwrap();
        let sig = sign_delivery(&a, "t1", &delivered, "B", 5);
        let receipt = countersign(&b, &sig, 6).unwrap();
        assert_eq!(receipt.delivered_hash, delivered.digest());
        assert!(receipt.verify(&a.public_key(), &b.public_key()));
        assert!(!receipt.verify(&b.public_key(), &a.public_key()));

        let rebuilt = NonRepudiationReceipt::from_countersignature(receipt.receiver_countersignature.clone()).unwrap();
        assert_eq!(rebuilt, receipt);

        let mut bad = receipt.clone();
        bad.delivered_hash = Digest::of(b"other");
        assert!(!bad.verify(&a.public_key(), &b.public_key()));

        let mut bad = receipt;
        bad.receiver_countersignature.signature[0] ^= 1;
        assert!(!bad.verify(&a.public_key(), &b.public_key()));
    }

    #[test]
    fn receipt_names_intended_receiver() {
        let a = KeyPair::derive("A", 1);
        let c = KeyPair::derive("C", 1);
        let delivered = envelope::sign_value(&a, PayloadType::TravelRulePacket, &json!({}), 5).unwrap();
        let sig = sign_delivery(&a, "t1", &delivered, "B", 5);
        let receipt = countersign(&c, &sig, 6).unwrap();
        assert!(!receipt.verify(&a.public_key(), &c.public_key()));
    }
}
