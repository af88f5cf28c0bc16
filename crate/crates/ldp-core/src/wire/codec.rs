use base64::Engine;
use serde::Serialize;
use serde_json::Value;

use super::{MessageEnvelope, MessageType, Nonce, WireError};

#[derive(Serialize)]
struct WireForm<'a> {
    #[serde(rename = "type")]
    message_type: &'a str,
    sender_id: &'a str,
    session_id: Option<&'a str>,
    nonce: String,
    timestamp_ms: u64,
    body: &'a Value,
    signature: Option<String>,
}

/// One JSON object, no trailing newline. Field order is fixed and body keys
/// are sorted, so equal envelopes always encode to equal bytes.
pub fn encode_envelope(env: &MessageEnvelope) -> Vec<u8> {
    serde_json::to_vec(&wire_form(env)).expect("envelope serializes")
}

fn wire_form(env: &MessageEnvelope) -> WireForm<'_> {
    WireForm {
        message_type: env.message_type.as_str(),
        sender_id: &env.sender_id,
        session_id: env.session_id.as_deref(),
        nonce: env.nonce.to_hex(),
        timestamp_ms: env.timestamp_ms,
        body: &env.body,
        signature: env
            .signature
            .as_ref()
            .map(|s| base64::engine::general_purpose::STANDARD.encode(s)),
    }
}

/// Serde goes through the wire form, so an envelope embedded in a larger
/// JSON document looks exactly like it does on the socket.
impl serde::Serialize for MessageEnvelope {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        wire_form(self).serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for MessageEnvelope {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        let bytes = serde_json::to_vec(&value).map_err(serde::de::Error::custom)?;
        decode_envelope(&bytes).map_err(serde::de::Error::custom)
    }
}

pub fn decode_envelope(bytes: &[u8]) -> Result<MessageEnvelope, WireError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| WireError::parse("envelope", e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(WireError::parse("envelope", "not a JSON object"));
    };
    let mut take = |field: &str| {
        obj.remove(field)
            .ok_or_else(|| WireError::parse(field, "missing"))
    };

    let message_type = match take("type")? {
        Value::String(s) => s
            .parse::<MessageType>()
            .map_err(|e| WireError::parse("type", e))?,
        _ => return Err(WireError::parse("type", "expected string")),
    };
    let sender_id = match take("sender_id")? {
        Value::String(s) => s,
        _ => return Err(WireError::parse("sender_id", "expected string")),
    };
    let session_id = match take("session_id")? {
        Value::Null => None,
        Value::String(s) => Some(s),
        _ => return Err(WireError::parse("session_id", "expected string or null")),
    };
    let nonce = match take("nonce")? {
        Value::String(s) => Nonce::from_hex(&s).map_err(|e| WireError::parse("nonce", e))?,
        _ => return Err(WireError::parse("nonce", "expected hex string")),
    };
    let timestamp_ms = take("timestamp_ms")?
        .as_u64()
        .ok_or_else(|| WireError::parse("timestamp_ms", "expected non-negative integer"))?;
    let body = match take("body")? {
        b @ Value::Object(_) => b,
        _ => return Err(WireError::parse("body", "expected object")),
    };
    let signature = match take("signature")? {
        Value::Null => None,
        Value::String(s) => Some(
            base64::engine::general_purpose::STANDARD
                .decode(s)
                .map_err(|e| WireError::parse("signature", e.to_string()))?,
        ),
        _ => {
            return Err(WireError::parse(
                "signature",
                "expected base64 string or null",
            ))
        }
    };
    if let Some(extra) = obj.keys().next() {
        return Err(WireError::parse(extra, "unknown field"));
    }
    Ok(MessageEnvelope {
        message_type,
        sender_id,
        session_id,
        nonce,
        timestamp_ms,
        body,
        signature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{sign_envelope, KeyMaterial};
    use proptest::prelude::*;
    use serde_json::json;

    fn hello() -> MessageEnvelope {
        let env = MessageEnvelope::new(
            MessageType::Hello,
            "qwen3-8b-reasoning",
            None,
            Nonce([7; 16]),
            1_700_000_000_123,
            json!({"card": {"delegate_id": "qwen3-8b-reasoning"}}),
        );
        sign_envelope(env, &KeyMaterial::from_seed([1; 32])).unwrap()
    }

    #[test]
    fn serde_matches_wire_form() {
        let env = hello();
        let via_serde = serde_json::to_vec(&env).unwrap();
        assert_eq!(via_serde, encode_envelope(&env));
        let back: MessageEnvelope = serde_json::from_slice(&via_serde).unwrap();
        assert_eq!(back, env);
    }

    #[test]
    fn hello_round_trip() {
        let env = hello();
        assert_eq!(decode_envelope(&encode_envelope(&env)).unwrap(), env);
    }

    #[test]
    fn every_variant_round_trips() {
        for t in MessageType::ALL {
            let mut env = hello();
            env.message_type = t;
            env.session_id = Some(format!("s-{t}"));
            let bytes = encode_envelope(&env);
            assert_eq!(decode_envelope(&bytes).unwrap(), env, "{t}");
        }
    }

    #[test]
    fn wire_field_names_and_order() {
        let text = String::from_utf8(encode_envelope(&hello())).unwrap();
        let keys = [
            "\"type\"",
            "\"sender_id\"",
            "\"session_id\"",
            "\"nonce\"",
            "\"timestamp_ms\"",
            "\"body\"",
            "\"signature\"",
        ];
        let positions: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{text}");
        assert!(text.contains("\"session_id\":null"));
        assert!(!text.contains('\n'));
    }

    #[test]
    fn truncated_bytes_fail() {
        let bytes = encode_envelope(&hello());
        let err = decode_envelope(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, WireError::Parse { .. }));
    }

    #[test]
    fn errors_name_the_field() {
        let mut v: Value = serde_json::from_slice(&encode_envelope(&hello())).unwrap();
        v["nonce"] = json!("xyz");
        let err = decode_envelope(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(
            matches!(err, WireError::Parse { ref field, .. } if field == "nonce"),
            "{err}"
        );

        let mut v: Value = serde_json::from_slice(&encode_envelope(&hello())).unwrap();
        v.as_object_mut().unwrap().remove("timestamp_ms");
        let err = decode_envelope(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(matches!(err, WireError::Parse { ref field, .. } if field == "timestamp_ms"));

        let mut v: Value = serde_json::from_slice(&encode_envelope(&hello())).unwrap();
        v["body"] = json!("text");
        let err = decode_envelope(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(matches!(err, WireError::Parse { ref field, .. } if field == "body"));
    }

    fn arb_body() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<i64>().prop_map(Value::from),
            ".{0,12}".prop_map(Value::from),
            any::<bool>().prop_map(Value::from),
        ];
        prop::collection::btree_map("[a-z_]{1,8}", leaf, 0..6)
            .prop_map(|m| Value::Object(m.into_iter().collect()))
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            ty in 0usize..10,
            sender in "[a-z0-9:.-]{1,20}",
            session in proptest::option::of("[a-z0-9-]{1,16}"),
            nonce in any::<[u8; 16]>(),
            ts in any::<u64>(),
            body in arb_body(),
            sig in proptest::option::of(prop::collection::vec(any::<u8>(), 64)),
        ) {
            let mut env = MessageEnvelope::new(MessageType::ALL[ty], sender, session, Nonce(nonce), ts, body);
            env.signature = sig;
            let bytes = encode_envelope(&env);
            prop_assert_eq!(decode_envelope(&bytes).unwrap(), env.clone());
            prop_assert_eq!(encode_envelope(&env), bytes);
        }
    }
}
