//! Canonical wire form.
//!
//! Every value that crosses a node boundary, is signed, or is written to disk
//! is encoded in one text form: maps with keys sorted by their UTF-8 bytes, no
//! insignificant whitespace, integers in plain decimal, binary fields as
//! unpadded base64url strings, and `true` / `false` / `null` literals.
//! Floating-point numbers are outside the data model.
//!
//! Two encoders that follow these rules produce identical bytes, which is what
//! makes signatures and log hashes reproducible.

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CanonicalError {
    #[error("unsupported type in canonical value: {0}")]
    UnsupportedType(String),
    #[error("bytes are not in canonical form")]
    NotCanonical,
    #[error("canonical decode failed: {0}")]
    Decode(String),
}

/// UTF-8 bytes in canonical wire form.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CanonicalBytes(Vec<u8>);

impl CanonicalBytes {
    /// Wraps bytes after checking they are already canonical.
    pub fn from_canonical(bytes: Vec<u8>) -> Result<Self, CanonicalError> {
        let value: Value =
            serde_json::from_slice(&bytes).map_err(|_| CanonicalError::NotCanonical)?;
        let reencoded = encode_value(&value).map_err(|_| CanonicalError::NotCanonical)?;
        if reencoded != bytes {
            return Err(CanonicalError::NotCanonical);
        }
        Ok(Self(bytes))
    }

    /// Wraps bytes without checking. Receivers re-check with [`is_canonical`].
    pub fn from_raw_unchecked(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        is_canonical(&self.0)
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).unwrap_or("<non-utf8>")
    }

    /// Decodes into a typed value.
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, CanonicalError> {
        serde_json::from_slice(&self.0).map_err(|e| CanonicalError::Decode(e.to_string()))
    }

    pub fn to_value(&self) -> Result<Value, CanonicalError> {
        self.decode()
    }
}

impl fmt::Debug for CanonicalBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CanonicalBytes({})", String::from_utf8_lossy(&self.0))
    }
}

impl fmt::Display for CanonicalBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&self.0))
    }
}

impl Serialize for CanonicalBytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        b64::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for CanonicalBytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        b64::deserialize(d).map(CanonicalBytes)
    }
}

/// Canonically encodes any serializable record.
pub fn canonicalize<T: Serialize + ?Sized>(value: &T) -> Result<CanonicalBytes, CanonicalError> {
    let value =
        serde_json::to_value(value).map_err(|e| CanonicalError::UnsupportedType(e.to_string()))?;
    canonicalize_value(&value)
}

pub fn canonicalize_value(value: &Value) -> Result<CanonicalBytes, CanonicalError> {
    encode_value(value).map(CanonicalBytes)
}

/// True iff `bytes` parse and re-encode to themselves.
pub fn is_canonical(bytes: &[u8]) -> bool {
    CanonicalBytes::from_canonical(bytes.to_vec()).is_ok()
}

fn encode_value(value: &Value) -> Result<Vec<u8>, CanonicalError> {
    let mut out = Vec::with_capacity(64);
    write_value(value, &mut out)?;
    Ok(out)
}

fn write_value(value: &Value, out: &mut Vec<u8>) -> Result<(), CanonicalError> {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                out.extend_from_slice(u.to_string().as_bytes());
            } else if let Some(i) = n.as_i64() {
                out.extend_from_slice(i.to_string().as_bytes());
            } else {
                return Err(CanonicalError::UnsupportedType(format!("float {n}")));
            }
        }
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out)?;
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(key, out);
                out.push(b':');
                write_value(&map[key], out)?;
            }
            out.push(b'}');
        }
    }
    Ok(())
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    out.push(b'"');
    for ch in s.chars() {
        match ch {
            '"' => out.extend_from_slice(b"\\\""),
            '\\' => out.extend_from_slice(b"\\\\"),
            '\n' => out.extend_from_slice(b"\\n"),
            '\r' => out.extend_from_slice(b"\\r"),
            '\t' => out.extend_from_slice(b"\\t"),
            '\u{08}' => out.extend_from_slice(b"\\b"),
            '\u{0c}' => out.extend_from_slice(b"\\f"),
            c if (c as u32) < 0x20 => {
                out.extend_from_slice(format!("\\u{:04x}", c as u32).as_bytes());
            }
            c => {
                let mut buf = [0u8; 4];
                out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
    }
    out.push(b'"');
}

/// Base64url (unpadded) encoding helpers.
pub mod b64 {
    use base64::engine::general_purpose::URL_SAFE_NO_PAD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(bytes: &[u8]) -> String {
        URL_SAFE_NO_PAD.encode(bytes)
    }

    pub fn decode(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
        URL_SAFE_NO_PAD.decode(s)
    }

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(serde::de::Error::custom)
    }

    /// Serde adapter for fixed 32-byte arrays.
    pub mod array32 {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
            super::serialize(bytes, s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
            let s = String::deserialize(d)?;
            let raw = super::decode(&s).map_err(serde::de::Error::custom)?;
            raw.try_into()
                .map_err(|v: Vec<u8>| serde::de::Error::invalid_length(v.len(), &"32 bytes"))
        }
    }
}
