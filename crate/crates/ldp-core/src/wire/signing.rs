use std::sync::{Arc, Mutex};

use base64::Engine;
use ed25519_dalek::{Signature, Signer as _, SigningKey, VerifyingKey};
use serde_json::Value;

use super::{Clock, MessageEnvelope, MessageType, NonceSource, SystemClock, WireError};

/// Ed25519 key pair. `private_key` is only present on the holder's side.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub public_key: Vec<u8>,
    pub private_key: Option<Vec<u8>>,
}

impl std::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("public_key", &self.public_key_b64())
            .field(
                "private_key",
                &self.private_key.as_ref().map(|_| "<redacted>"),
            )
            .finish()
    }
}

impl KeyMaterial {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let sk = SigningKey::from_bytes(&seed);
        Self {
            public_key: sk.verifying_key().to_bytes().to_vec(),
            private_key: Some(seed.to_vec()),
        }
    }

    pub fn generate(source: &mut NonceSource) -> Self {
        Self::from_seed(source.next_seed())
    }

    /// Verification-only copy.
    pub fn public_only(&self) -> Self {
        Self {
            public_key: self.public_key.clone(),
            private_key: None,
        }
    }

    pub fn public_key_b64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.public_key)
    }

    fn signing_key(&self) -> Result<SigningKey, WireError> {
        let private = self
            .private_key
            .as_deref()
            .ok_or_else(|| WireError::Signing("no private key material".into()))?;
        let seed: [u8; 32] = private.try_into().map_err(|_| {
            WireError::Signing(format!(
                "private key must be 32 bytes, got {}",
                private.len()
            ))
        })?;
        let sk = SigningKey::from_bytes(&seed);
        if sk.verifying_key().as_bytes()[..] != self.public_key[..] {
            return Err(WireError::Signing(
                "public key does not match private key".into(),
            ));
        }
        Ok(sk)
    }
}

fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Length-prefixed encoding of every non-signature field, in declaration
/// order. The body is serialized as JSON with sorted object keys.
pub fn canonical_bytes(env: &MessageEnvelope) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    put_field(&mut out, env.message_type.as_str().as_bytes());
    put_field(&mut out, env.sender_id.as_bytes());
    match &env.session_id {
        Some(s) => {
            out.push(1);
            put_field(&mut out, s.as_bytes());
        }
        None => out.push(0),
    }
    put_field(&mut out, &env.nonce.0);
    put_field(&mut out, &env.timestamp_ms.to_be_bytes());
    let body = serde_json::to_vec(&env.body).expect("json value serializes");
    put_field(&mut out, &body);
    out
}

pub fn sign_envelope(
    mut envelope: MessageEnvelope,
    key: &KeyMaterial,
) -> Result<MessageEnvelope, WireError> {
    let sk = key.signing_key()?;
    envelope.signature = None;
    let sig = sk.sign(&canonical_bytes(&envelope));
    envelope.signature = Some(sig.to_bytes().to_vec());
    Ok(envelope)
}

/// `false` on any mismatch, including malformed keys or a missing signature.
pub fn verify_envelope(envelope: &MessageEnvelope, public_key: &[u8]) -> bool {
    let Some(sig_bytes) = envelope.signature.as_deref() else {
        return false;
    };
    let Ok(pk): Result<[u8; 32], _> = public_key.try_into() else {
        return false;
    };
    let Ok(vk) = VerifyingKey::from_bytes(&pk) else {
        return false;
    };
    let Ok(sig) = Signature::from_slice(sig_bytes) else {
        return false;
    };
    vk.verify_strict(&canonical_bytes(envelope), &sig).is_ok()
}

/// Produces signed envelopes for one sender.
pub struct Signer {
    sender_id: String,
    key: KeyMaterial,
    nonces: Mutex<NonceSource>,
    clock: Arc<dyn Clock>,
}

impl Signer {
    pub fn new(
        sender_id: impl Into<String>,
        key: KeyMaterial,
        nonces: NonceSource,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            sender_id: sender_id.into(),
            key,
            nonces: Mutex::new(nonces),
            clock,
        }
    }

    /// Fresh key from `nonces`, system clock.
    pub fn generate(sender_id: impl Into<String>, mut nonces: NonceSource) -> Self {
        let key = KeyMaterial::generate(&mut nonces);
        Self::new(sender_id, key, nonces, Arc::new(SystemClock))
    }

    pub fn sender_id(&self) -> &str {
        &self.sender_id
    }

    pub fn key(&self) -> &KeyMaterial {
        &self.key
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn envelope(
        &self,
        message_type: MessageType,
        session_id: Option<String>,
        body: Value,
    ) -> Result<MessageEnvelope, WireError> {
        let nonce = self
            .nonces
            .lock()
            .expect("nonce source poisoned")
            .next_nonce();
        let env = MessageEnvelope::new(
            message_type,
            self.sender_id.clone(),
            session_id,
            nonce,
            self.clock.now_ms(),
            body,
        );
        sign_envelope(env, &self.key)
    }
}

impl std::fmt::Debug for Signer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Signer")
            .field("sender_id", &self.sender_id)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::Nonce;
    use serde_json::json;

    fn sample(nonce: u8) -> MessageEnvelope {
        MessageEnvelope::new(
            MessageType::TaskSubmit,
            "caller",
            Some("s-1".into()),
            Nonce([nonce; 16]),
            1_700_000_000_000,
            json!({"mode": "text", "content": "hello"}),
        )
    }

    fn key() -> KeyMaterial {
        KeyMaterial::from_seed([9; 32])
    }

    #[test]
    fn sign_then_verify() {
        let k = key();
        let signed = sign_envelope(sample(1), &k).unwrap();
        assert!(verify_envelope(&signed, &k.public_key));
    }

    #[test]
    fn flipped_body_byte_fails() {
        let k = key();
        let mut signed = sign_envelope(sample(1), &k).unwrap();
        signed.body = json!({"mode": "text", "content": "hellp"});
        assert!(!verify_envelope(&signed, &k.public_key));
    }

    #[test]
    fn wrong_key_fails() {
        let signed = sign_envelope(sample(1), &key()).unwrap();
        let other = KeyMaterial::from_seed([3; 32]);
        assert!(!verify_envelope(&signed, &other.public_key));
        assert!(!verify_envelope(&signed, b"short"));
    }

    #[test]
    fn distinct_nonces_give_distinct_signatures() {
        let k = key();
        let a = sign_envelope(sample(1), &k).unwrap();
        let b = sign_envelope(sample(2), &k).unwrap();
        assert_ne!(a.signature, b.signature);
    }

    #[test]
    fn every_signed_field_is_covered() {
        let k = key();
        let signed = sign_envelope(sample(1), &k).unwrap();
        type Mutation = Box<dyn Fn(&mut MessageEnvelope)>;
        let mutations: Vec<Mutation> = vec![
            Box::new(|e| e.message_type = MessageType::TaskUpdate),
            Box::new(|e| e.sender_id.push('x')),
            Box::new(|e| e.session_id = None),
            Box::new(|e| e.session_id = Some("s-2".into())),
            Box::new(|e| e.nonce.0[15] ^= 1),
            Box::new(|e| e.timestamp_ms += 1),
            Box::new(|e| e.body["extra"] = json!(1)),
        ];
        for m in mutations {
            let mut e = signed.clone();
            m(&mut e);
            assert!(!verify_envelope(&e, &k.public_key));
        }
    }

    #[test]
    fn malformed_key_material_is_a_signing_error() {
        let mut k = key();
        k.private_key = None;
        assert!(matches!(
            sign_envelope(sample(1), &k),
            Err(WireError::Signing(_))
        ));
        let mut k = key();
        k.private_key = Some(vec![1, 2, 3]);
        assert!(matches!(
            sign_envelope(sample(1), &k),
            Err(WireError::Signing(_))
        ));
        let mut k = key();
        k.public_key = KeyMaterial::from_seed([4; 32]).public_key;
        assert!(matches!(
            sign_envelope(sample(1), &k),
            Err(WireError::Signing(_))
        ));
    }

    #[test]
    fn signatures_are_deterministic() {
        let k = key();
        let a = sign_envelope(sample(5), &k).unwrap();
        let b = sign_envelope(sample(5), &k).unwrap();
        assert_eq!(a.signature, b.signature);
    }
}
