//! Hashing, identities and signatures.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader};

/// A SHA-256 digest. Block keys are the Merkle root hash of the block.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash(pub [u8; 32]);

impl Hash {
    pub const ZERO: Hash = Hash([0; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Hash, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Hash(out))
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash({})", self.short())
    }
}

impl fmt::Display for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Hash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hash::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl Encode for Hash {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
}

impl Decode for Hash {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Hash(r.array()?))
    }
}

pub fn hash_bytes(data: &[u8]) -> Hash {
    Hash(Sha256::digest(data).into())
}

/// Hashes the concatenation of `parts` without allocating.
pub fn hash_parts(parts: &[&[u8]]) -> Hash {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Hash(h.finalize().into())
}

/// Public verification key bytes; the identity of a principal.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServerId(pub [u8; 32]);

impl ServerId {
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ServerId({})", self.short())
    }
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short())
    }
}

impl Serialize for ServerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for ServerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(ServerId(out))
    }
}

impl Encode for ServerId {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
}

impl Decode for ServerId {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ServerId(r.array()?))
    }
}

/// A principal: its key-derived id plus a display name that never takes part
/// in hashing or signing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Identity {
    pub id: ServerId,
    pub display_name: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid key: {0}")]
    InvalidKey(String),
}

/// An Ed25519 signing key with its identity.
#[derive(Clone)]
pub struct Keypair {
    signing: SigningKey,
    identity: Identity,
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keypair")
            .field("identity", &self.identity)
            .finish()
    }
}

impl Keypair {
    pub fn from_secret(secret: [u8; 32], display_name: impl Into<String>) -> Keypair {
        let signing = SigningKey::from_bytes(&secret);
        let id = ServerId(signing.verifying_key().to_bytes());
        Keypair {
            signing,
            identity: Identity {
                id,
                display_name: display_name.into(),
            },
        }
    }

    /// Derives a key from a name. Only for simulations, demos and tests:
    /// anyone who knows the name knows the key.
    pub fn from_name(name: &str) -> Keypair {
        let seed = hash_parts(&[b"blockweb/named-key/", name.as_bytes()]);
        Keypair::from_secret(seed.0, name)
    }

    pub fn id(&self) -> ServerId {
        self.identity.id
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn name(&self) -> &str {
        &self.identity.display_name
    }

    pub fn sign(&self, data: &[u8]) -> Signature {
        Signature {
            signer: self.id(),
            bytes: self.signing.sign(data).to_bytes(),
        }
    }
}

/// Signs `data` with a raw 32-byte secret key.
pub fn sign(secret: &[u8], data: &[u8]) -> Result<Signature, CryptoError> {
    let secret: [u8; 32] = secret
        .try_into()
        .map_err(|_| CryptoError::InvalidKey(format!("expected 32 bytes, got {}", secret.len())))?;
    Ok(Keypair::from_secret(secret, "").sign(data))
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature {
    pub signer: ServerId,
    pub bytes: [u8; 64],
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Signature({} by {})",
            hex::encode(&self.bytes[..4]),
            self.signer
        )
    }
}

impl Signature {
    /// Checks the signature over `data`. Successful checks are remembered
    /// per thread so repeated checks of the same message are cheap.
    pub fn verify(&self, data: &[u8]) -> bool {
        const CACHE_LIMIT: usize = 1 << 20;
        thread_local! {
            static VERIFIED: RefCell<HashSet<Hash>> = RefCell::new(HashSet::new());
        }
        let digest = hash_parts(&[b"blockweb/verified/", &self.signer.0, &self.bytes, data]);
        if VERIFIED.with(|v| v.borrow().contains(&digest)) {
            return true;
        }
        let Ok(key) = VerifyingKey::from_bytes(&self.signer.0) else {
            return false;
        };
        let sig = ed25519_dalek::Signature::from_bytes(&self.bytes);
        let ok = key.verify(data, &sig).is_ok();
        if ok {
            VERIFIED.with(|v| {
                let mut v = v.borrow_mut();
                if v.len() >= CACHE_LIMIT {
                    v.clear();
                }
                v.insert(digest);
            });
        }
        ok
    }
}

pub fn verify_sig(sig: &Signature, data: &[u8]) -> bool {
    sig.verify(data)
}

impl Encode for Signature {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.signer.encode_to(out);
        out.extend_from_slice(&self.bytes);
    }
}

impl Decode for Signature {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Signature {
            signer: ServerId::decode_from(r)?,
            bytes: r.array()?,
        })
    }
}
