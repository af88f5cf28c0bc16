//! Message envelopes, signatures, nonces, and transports.
//!
//! Every protocol message travels as a [`MessageEnvelope`]: a typed, signed,
//! nonce-bearing wrapper around a JSON body. On TCP an envelope is one line of
//! JSON; the in-memory transport carries the same bytes so the two are
//! indistinguishable to callers.

mod clock;
mod codec;
mod signing;
mod transport;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use clock::{Clock, ManualClock, NonceSource, SystemClock};
pub use codec::{decode_envelope, encode_envelope};
pub use signing::{canonical_bytes, sign_envelope, verify_envelope, KeyMaterial, Signer};
#[cfg(feature = "net")]
pub use transport::TcpTransport;
pub use transport::{
    max_message_bytes, memory_pair, memory_pair_with_limit, MemoryTransport, RecordingTransport,
    Transport, DEFAULT_MAX_MESSAGE_BYTES, MAX_MESSAGE_BYTES_ENV,
};

/// Allowed clock skew between sender timestamp and receiver clock.
pub const TIMESTAMP_SKEW_MS: u64 = 300_000;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed envelope field `{field}`: {reason}")]
    Parse { field: String, reason: String },
    #[error("signing failed: {0}")]
    Signing(String),
}

impl WireError {
    pub(crate) fn parse(field: &str, reason: impl Into<String>) -> Self {
        WireError::Parse {
            field: field.to_owned(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection closed")]
    ConnectionClosed,
    #[error("message of {size} bytes exceeds the {max} byte limit")]
    TooLarge { size: usize, max: usize },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageType {
    Hello,
    CapabilityManifest,
    SessionPropose,
    SessionAccept,
    TaskSubmit,
    TaskUpdate,
    TaskResult,
    FallbackNotice,
    SessionClose,
    Error,
}

impl MessageType {
    pub const ALL: [MessageType; 10] = [
        MessageType::Hello,
        MessageType::CapabilityManifest,
        MessageType::SessionPropose,
        MessageType::SessionAccept,
        MessageType::TaskSubmit,
        MessageType::TaskUpdate,
        MessageType::TaskResult,
        MessageType::FallbackNotice,
        MessageType::SessionClose,
        MessageType::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::Hello => "HELLO",
            MessageType::CapabilityManifest => "CAPABILITY_MANIFEST",
            MessageType::SessionPropose => "SESSION_PROPOSE",
            MessageType::SessionAccept => "SESSION_ACCEPT",
            MessageType::TaskSubmit => "TASK_SUBMIT",
            MessageType::TaskUpdate => "TASK_UPDATE",
            MessageType::TaskResult => "TASK_RESULT",
            MessageType::FallbackNotice => "FALLBACK_NOTICE",
            MessageType::SessionClose => "SESSION_CLOSE",
            MessageType::Error => "ERROR",
        }
    }

    /// Session lifecycle messages, as opposed to protocol plumbing.
    pub fn is_lifecycle(self) -> bool {
        !matches!(
            self,
            MessageType::FallbackNotice | MessageType::SessionClose | MessageType::Error
        )
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown message type {s:?}"))
    }
}

/// 128-bit message nonce, hex encoded on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce(pub [u8; 16]);

impl Nonce {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, String> {
        if s.len() != 32 {
            return Err(format!("expected 32 hex chars, got {}", s.len()));
        }
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out).map_err(|e| e.to_string())?;
        Ok(Nonce(out))
    }
}

impl fmt::Display for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessageEnvelope {
    pub message_type: MessageType,
    pub sender_id: String,
    pub session_id: Option<String>,
    pub nonce: Nonce,
    pub timestamp_ms: u64,
    /// Always a JSON object.
    pub body: Value,
    /// Detached Ed25519 signature over [`canonical_bytes`].
    pub signature: Option<Vec<u8>>,
}

impl MessageEnvelope {
    /// Unsigned envelope. A non-object body is wrapped as `{"value": body}`.
    pub fn new(
        message_type: MessageType,
        sender_id: impl Into<String>,
        session_id: Option<String>,
        nonce: Nonce,
        timestamp_ms: u64,
        body: Value,
    ) -> Self {
        let body = match body {
            Value::Object(_) => body,
            Value::Null => Value::Object(Default::default()),
            other => serde_json::json!({ "value": other }),
        };
        Self {
            message_type,
            sender_id: sender_id.into(),
            session_id,
            nonce,
            timestamp_ms,
            body,
            signature: None,
        }
    }

    pub fn is_signed(&self) -> bool {
        self.signature.is_some()
    }

    /// Deserialize the body into `T`.
    pub fn body_as<T: serde::de::DeserializeOwned>(&self) -> Result<T, WireError> {
        serde_json::from_value(self.body.clone())
            .map_err(|e| WireError::parse("body", e.to_string()))
    }
}
