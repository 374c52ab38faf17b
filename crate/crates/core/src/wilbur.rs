//! Availability servers: content-addressed storage that signs promises to
//! keep blocks forever, plus the audit that turns a broken promise into
//! evidence.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use thiserror::Error;

use crate::block::Block;
use crate::codec::{Decode, Encode};
use crate::crypto::{Hash, Keypair, ServerId, Signature};
use crate::message::Message;
use crate::policy::{AttestationKind, GoodSetFamily};
use crate::service::{Outbox, Service};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AvailabilityAttestation {
    pub kind: AttestationKind,
    pub block: Hash,
    pub server: ServerId,
    pub sig: Signature,
}

crate::impl_codec_struct!(AvailabilityAttestation {
    kind,
    block,
    server,
    sig
});

fn attest_bytes(kind: AttestationKind, block: &Hash, server: &ServerId) -> Vec<u8> {
    let mut out = b"blockweb/store-forever/".to_vec();
    (kind, block, server).encode_to(&mut out);
    out
}

impl AvailabilityAttestation {
    pub fn sign(key: &Keypair, block: Hash) -> Self {
        let kind = AttestationKind::StoreForever;
        let server = key.id();
        let sig = key.sign(&attest_bytes(kind, &block, &server));
        AvailabilityAttestation {
            kind,
            block,
            server,
            sig,
        }
    }

    pub fn verify(&self) -> bool {
        self.sig.signer == self.server
            && self
                .sig
                .verify(&attest_bytes(self.kind, &self.block, &self.server))
    }

    /// Holds wherever this server is correct.
    pub fn alpha(&self) -> GoodSetFamily {
        GoodSetFamily::singleton(self.server)
    }
}

/// A signed "block not found" reply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NotFound {
    pub block: Hash,
    pub server: ServerId,
    pub time_us: u64,
    pub sig: Signature,
}

crate::impl_codec_struct!(NotFound {
    block,
    server,
    time_us,
    sig
});

fn not_found_bytes(block: &Hash, server: &ServerId, time_us: u64) -> Vec<u8> {
    let mut out = b"blockweb/not-found/".to_vec();
    (block, server, time_us).encode_to(&mut out);
    out
}

impl NotFound {
    pub fn sign(key: &Keypair, block: Hash, time_us: u64) -> Self {
        let server = key.id();
        let sig = key.sign(&not_found_bytes(&block, &server, time_us));
        NotFound {
            block,
            server,
            time_us,
            sig,
        }
    }

    pub fn verify(&self) -> bool {
        self.sig.signer == self.server
            && self
                .sig
                .verify(&not_found_bytes(&self.block, &self.server, self.time_us))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GetReply {
    Found(Block),
    NotFound(NotFound),
}

/// A storage promise together with the same server's signed denial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViolationProof {
    pub attestation: AvailabilityAttestation,
    pub response: NotFound,
}

crate::impl_codec_struct!(ViolationProof {
    attestation,
    response
});

impl ViolationProof {
    pub fn verify(&self) -> bool {
        self.attestation.verify()
            && self.response.verify()
            && self.attestation.server == self.response.server
            && self.attestation.block == self.response.block
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WilburError {
    #[error("malformed block: {0}")]
    MalformedBlock(String),
    #[error("reply does not answer the audited query")]
    MismatchedQuery,
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AuditOutcome {
    Ok,
    Violation(ViolationProof),
}

pub fn audit(att: &AvailabilityAttestation, reply: &GetReply) -> Result<AuditOutcome, WilburError> {
    match reply {
        GetReply::Found(b) if b.root() == att.block => Ok(AuditOutcome::Ok),
        GetReply::NotFound(nf)
            if nf.server == att.server && nf.block == att.block && nf.verify() =>
        {
            Ok(AuditOutcome::Violation(ViolationProof {
                attestation: att.clone(),
                response: nf.clone(),
            }))
        }
        _ => Err(WilburError::MismatchedQuery),
    }
}

/// Append-only block storage keyed by root hash.
pub trait BlockStore: Send + Sync {
    fn put(&self, block: &Block) -> io::Result<()>;
    fn get(&self, hash: &Hash) -> Option<Block>;
    fn contains(&self, hash: &Hash) -> bool;
    fn hashes(&self) -> Vec<Hash>;
}

#[derive(Default)]
pub struct MemoryStore {
    blocks: RwLock<BTreeMap<Hash, Block>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl BlockStore for MemoryStore {
    fn put(&self, block: &Block) -> io::Result<()> {
        self.blocks
            .write()
            .expect("store lock")
            .entry(block.root())
            .or_insert_with(|| block.clone());
        Ok(())
    }

    fn get(&self, hash: &Hash) -> Option<Block> {
        self.blocks.read().expect("store lock").get(hash).cloned()
    }

    fn contains(&self, hash: &Hash) -> bool {
        self.blocks.read().expect("store lock").contains_key(hash)
    }

    fn hashes(&self) -> Vec<Hash> {
        self.blocks
            .read()
            .expect("store lock")
            .keys()
            .copied()
            .collect()
    }
}

/// One file per block, named by the lowercase hex root, holding the
/// canonical encoding.
pub struct DirStore {
    dir: PathBuf,
}

impl DirStore {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(DirStore {
            dir: dir.as_ref().to_path_buf(),
        })
    }

    fn path(&self, hash: &Hash) -> PathBuf {
        self.dir.join(hash.to_hex())
    }
}

impl BlockStore for DirStore {
    fn put(&self, block: &Block) -> io::Result<()> {
        let path = self.path(&block.root());
        if path.exists() {
            return Ok(());
        }
        let tmp = self.dir.join(format!(".{}.tmp", block.root().to_hex()));
        fs::write(&tmp, block.encode())?;
        fs::rename(tmp, path)
    }

    fn get(&self, hash: &Hash) -> Option<Block> {
        let bytes = fs::read(self.path(hash)).ok()?;
        Block::decode(&bytes).ok().filter(|b| b.root() == *hash)
    }

    fn contains(&self, hash: &Hash) -> bool {
        self.path(hash).exists()
    }

    fn hashes(&self) -> Vec<Hash> {
        let Ok(entries) = fs::read_dir(&self.dir) else {
            return Vec::new();
        };
        let mut out: Vec<Hash> = entries
            .filter_map(|e| Hash::from_hex(e.ok()?.file_name().to_str()?).ok())
            .collect();
        out.sort();
        out
    }
}

/// An availability server.
pub struct Wilbur {
    key: Keypair,
    store: Box<dyn BlockStore>,
    /// Fault injection: attest without storing.
    drop_storage: bool,
    stored_count: u64,
}

impl Wilbur {
    pub fn new(key: Keypair, store: Box<dyn BlockStore>) -> Self {
        Wilbur {
            key,
            store,
            drop_storage: false,
            stored_count: 0,
        }
    }

    pub fn in_memory(key: Keypair) -> Self {
        Wilbur::new(key, Box::new(MemoryStore::new()))
    }

    pub fn dropping_storage(mut self) -> Self {
        self.drop_storage = true;
        self
    }

    pub fn id(&self) -> ServerId {
        self.key.id()
    }

    pub fn key(&self) -> &Keypair {
        &self.key
    }

    pub fn store(&self) -> &dyn BlockStore {
        self.store.as_ref()
    }

    /// Number of distinct blocks newly stored.
    pub fn stored_count(&self) -> u64 {
        self.stored_count
    }

    /// Stores the block and returns a signed promise. Storing again returns
    /// an equal attestation.
    pub fn store_block(&mut self, block: &Block) -> io::Result<AvailabilityAttestation> {
        if !self.drop_storage && !self.store.contains(&block.root()) {
            self.store.put(block)?;
            self.stored_count += 1;
        }
        Ok(AvailabilityAttestation::sign(&self.key, block.root()))
    }

    pub fn store_encoded(&mut self, bytes: &[u8]) -> Result<AvailabilityAttestation, WilburError> {
        let block = Block::decode(bytes).map_err(|e| WilburError::MalformedBlock(e.to_string()))?;
        self.store_block(&block)
            .map_err(|e| WilburError::MalformedBlock(e.to_string()))
    }

    pub fn get_block(&self, hash: &Hash, now_us: u64) -> GetReply {
        match self.store.get(hash) {
            Some(b) => GetReply::Found(b),
            None => GetReply::NotFound(NotFound::sign(&self.key, *hash, now_us)),
        }
    }
}

impl Service for Wilbur {
    fn handle(&mut self, now_us: u64, from: ServerId, msg: Message, out: &mut Outbox) {
        match msg {
            Message::StoreBlock(block) => {
                if let Ok(att) = self.store_block(&block) {
                    out.send(from, Message::Stored(att));
                }
            }
            Message::GetBlock(hash) => {
                let reply = match self.get_block(&hash, now_us) {
                    GetReply::Found(b) => Message::BlockFound(b),
                    GetReply::NotFound(nf) => Message::NotFound(nf),
                };
                out.send(from, reply);
            }
            _ => {}
        }
    }
}
