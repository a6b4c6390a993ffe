use std::fmt;

use sha2::{Digest, Sha256};

use crate::params::KeyParams;

/// Digest binding an evaluation key and every ciphertext to one secret key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyId(pub [u8; 32]);

impl KeyId {
    /// First 8 hex digits, for messages.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", hex::encode(self.0))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecretKey {
    pub params: KeyParams,
    pub seed: [u8; 32],
    pub key_id: KeyId,
}

/// Everything needed for homomorphic evaluation; carries no seed material.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalKey {
    pub params: KeyParams,
    pub key_id: KeyId,
}

pub fn keygen(params: &KeyParams, seed: [u8; 32]) -> (SecretKey, EvalKey) {
    let mut h = Sha256::new();
    h.update(b"heinfer/key-id/v1");
    h.update(params.to_json().as_bytes());
    h.update(seed);
    let key_id = KeyId(h.finalize().into());
    (SecretKey { params: params.clone(), seed, key_id }, EvalKey { params: params.clone(), key_id })
}
