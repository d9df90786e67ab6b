//! A claims exchange network for virtual asset service providers.
//!
//! Data providers answer vetted algorithm queries without exporting raw data,
//! a claims provider turns the answers into signed claims, and VASP nodes run
//! a Travel Rule transfer workflow that exchanges those claims with
//! countersigned receipts. Everything runs inside a deterministic discrete
//! event simulation ([`sim`]).

pub mod audit_log;
pub mod canonical;
pub mod claims;
pub mod did;
pub mod envelope;
pub mod key_registry;
pub mod opal;
pub mod sim;
pub mod vasp;

pub use canonical::{canonicalize, CanonicalBytes, CanonicalError};
pub use envelope::{sign, verify, Digest, KeyDirectory, KeyPair, Millis, PayloadType, PublicKey, SignedEnvelope};
