//! References, chain construction and chain verification.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::block::{build_block, Block, LeafKind};
use crate::codec::Encode;
use crate::consensus::{InstanceId, ProofOfConsensus, SlotClaim};
use crate::crypto::Hash;
use crate::merkle::{leaf_hash, MerkleProof};
use crate::policy::{alpha_block, label_meet, label_satisfied, GoodSetFamily, Label, PolicyError};
use crate::wilbur::AvailabilityAttestation;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("label not satisfied by the attached attestations")]
    LabelUnsatisfied,
    #[error("attestation for another block")]
    AttestationMismatch,
    #[error("broken link at slot {slot}: {detail}")]
    BrokenLink { slot: u64, detail: String },
    #[error("slot gap: expected {expected}, found {found}")]
    SlotGap { expected: u64, found: u64 },
    #[error("invalid proof of consensus at slot {slot}")]
    InvalidProof { slot: u64 },
    #[error("label at slot {slot} is weaker than the chain label")]
    WeakLabel { slot: u64 },
    #[error("ancestor {0:?} not retrievable")]
    MissingAncestor(Hash),
    #[error("labels cannot be combined: {0}")]
    LabelMeetUndefined(PolicyError),
    #[error("no chains given")]
    NoChains,
    #[error("the same chain appears twice")]
    DuplicateChain,
}

/// A pointer to a block together with the evidence that it is safe to
/// build on: a copy of its label, a Merkle proof of that label, and
/// attestations satisfying it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reference {
    pub target: Hash,
    pub label_copy: Label,
    pub label_proof: MerkleProof,
    pub avail_atts: Vec<AvailabilityAttestation>,
    pub integ_atts: Vec<ProofOfConsensus>,
}

crate::impl_codec_struct!(Reference {
    target,
    label_copy,
    label_proof,
    avail_atts,
    integ_atts
});

impl Reference {
    /// Label proof verifies and every attestation binds the target.
    pub fn check_structure(&self) -> Result<(), ChainError> {
        let leaf = leaf_hash(LeafKind::Label as u8, &self.label_copy.encode());
        if !self.label_proof.verify(&self.target, leaf) {
            return Err(ChainError::BrokenLink {
                slot: 0,
                detail: "label proof does not verify".into(),
            });
        }
        if self.avail_atts.iter().any(|a| a.block != self.target)
            || self.integ_atts.iter().any(|p| p.value != self.target)
        {
            return Err(ChainError::AttestationMismatch);
        }
        Ok(())
    }

    pub fn is_satisfied(&self) -> bool {
        label_satisfied(&self.label_copy, &self.avail_atts, &self.integ_atts) == Ok(true)
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        self.check_structure()?;
        if self.is_satisfied() {
            Ok(())
        } else {
            Err(ChainError::LabelUnsatisfied)
        }
    }

    /// A valid proof deciding this block for `claim`.
    pub fn proof_for(&self, claim: &SlotClaim) -> Option<&ProofOfConsensus> {
        self.integ_atts
            .iter()
            .find(|p| p.covers(claim) && p.value == self.target && p.verify())
    }

    /// Slot this reference's attestations place the target at on `chain`.
    pub fn claimed_slot(&self, chain: &Hash) -> Option<u64> {
        self.integ_atts
            .iter()
            .find_map(|p| p.instance.slot_of(chain))
    }

    pub fn alpha(&self) -> GoodSetFamily {
        alpha_block(&self.avail_atts, &self.integ_atts).unwrap_or_else(|_| GoodSetFamily::never())
    }

    pub fn availability_alpha(&self) -> GoodSetFamily {
        GoodSetFamily::join(
            &self
                .avail_atts
                .iter()
                .map(|a| a.alpha())
                .collect::<Vec<_>>(),
        )
    }

    pub fn integrity_alpha(&self) -> GoodSetFamily {
        GoodSetFamily::join(
            &self
                .integ_atts
                .iter()
                .map(|p| p.alpha())
                .collect::<Vec<_>>(),
        )
    }

    pub fn add_proof(&mut self, proof: ProofOfConsensus) {
        if !self.integ_atts.contains(&proof) {
            self.integ_atts.push(proof);
        }
    }
}

/// Builds a reference, refusing if the attestations do not satisfy the
/// block's own label.
pub fn make_reference(
    block: &Block,
    avail: Vec<AvailabilityAttestation>,
    integ: Vec<ProofOfConsensus>,
) -> Result<Reference, ChainError> {
    let r = Reference {
        target: block.root(),
        label_copy: block.label().clone(),
        label_proof: block.label_proof(),
        avail_atts: avail,
        integ_atts: integ,
    };
    r.validate()?;
    Ok(r)
}

/// Builds a reference without checking label satisfaction.
pub fn reference_unchecked(
    block: &Block,
    avail: Vec<AvailabilityAttestation>,
    integ: Vec<ProofOfConsensus>,
) -> Reference {
    Reference {
        target: block.root(),
        label_copy: block.label().clone(),
        label_proof: block.label_proof(),
        avail_atts: avail,
        integ_atts: integ,
    }
}

/// What a client holds to extend a chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainHead {
    pub root: Reference,
    pub head: Reference,
    pub slot: u64,
}

impl ChainHead {
    pub fn from_root(root: Reference) -> Self {
        ChainHead {
            head: root.clone(),
            root,
            slot: 0,
        }
    }

    pub fn chain(&self) -> Hash {
        self.root.target
    }

    pub fn label(&self) -> &Label {
        &self.root.label_copy
    }

    pub fn advance(&mut self, head: Reference) {
        self.head = head;
        self.slot += 1;
    }
}

/// A block for a chain root: the label's integrity policy names the chain's
/// consortium and claims nothing.
pub fn root_block(label: Label, payload: Vec<Vec<u8>>) -> Block {
    build_block(payload, vec![], label)
}

/// Builds the block that appends `payload` to every chain in `heads` at
/// once, returning it with the instance it must be decided under.
pub fn append_block(
    heads: &[ChainHead],
    payload: Vec<Vec<u8>>,
) -> Result<(Block, InstanceId), ChainError> {
    let first = heads.first().ok_or(ChainError::NoChains)?;
    let mut label = first.label().clone();
    for h in &heads[1..] {
        label = label_meet(&label, h.label()).map_err(ChainError::LabelMeetUndefined)?;
    }
    let claims: BTreeSet<SlotClaim> = heads
        .iter()
        .map(|h| SlotClaim::new(h.chain(), h.slot + 1))
        .collect();
    let instance =
        InstanceId::new(claims.iter().copied()).map_err(|_| ChainError::DuplicateChain)?;
    let label = label
        .with_claims(claims)
        .map_err(ChainError::LabelMeetUndefined)?;
    let mut refs = Vec::new();
    for h in heads {
        if h.slot > 0 {
            refs.push(h.head.clone());
        }
        refs.push(h.root.clone());
    }
    Ok((build_block(payload, refs, label), instance))
}

#[derive(Clone, Debug)]
pub struct ChainEntry {
    pub slot: u64,
    pub hash: Hash,
    pub reference: Reference,
    pub block: Block,
}

/// A chain checked from head to root, in slot order.
#[derive(Clone, Debug)]
pub struct VerifiedChain {
    pub root: Hash,
    pub label: Label,
    pub blocks: Vec<ChainEntry>,
}

impl VerifiedChain {
    pub fn head_slot(&self) -> u64 {
        self.blocks.last().map(|e| e.slot).unwrap_or(0)
    }

    pub fn to_head(&self) -> ChainHead {
        ChainHead {
            root: self.blocks[0].reference.clone(),
            head: self.blocks.last().expect("root entry").reference.clone(),
            slot: self.head_slot(),
        }
    }
}

/// Walks predecessor references from `head` back to `chain_root`, checking
/// every rule a chain must obey. Stops at the first violation.
pub fn verify_chain(
    head: &Reference,
    chain_root: Hash,
    fetch: &dyn Fn(&Hash) -> Option<Block>,
) -> Result<VerifiedChain, ChainError> {
    let mut entries = Vec::new();
    let mut cur = head.clone();
    // slot of the block whose reference led here
    let mut from_slot: Option<u64> = None;
    let root_label;
    loop {
        let block = fetch(&cur.target).ok_or(ChainError::MissingAncestor(cur.target))?;
        let link_slot = from_slot.unwrap_or(0);
        if block.root() != cur.target {
            return Err(ChainError::BrokenLink {
                slot: link_slot,
                detail: "block hash mismatch".into(),
            });
        }
        if block.label() != &cur.label_copy {
            return Err(ChainError::BrokenLink {
                slot: link_slot,
                detail: "label copy differs from block".into(),
            });
        }
        cur.check_structure().map_err(|e| match e {
            ChainError::BrokenLink { detail, .. } => ChainError::BrokenLink {
                slot: link_slot,
                detail,
            },
            other => other,
        })?;

        if cur.target == chain_root {
            if let Some(s) = from_slot {
                if s != 1 {
                    return Err(ChainError::SlotGap {
                        expected: s - 1,
                        found: 0,
                    });
                }
            }
            if !cur.is_satisfied() || cur.proof_for(&SlotClaim::new(chain_root, 0)).is_none() {
                return Err(ChainError::InvalidProof { slot: 0 });
            }
            root_label = block.label().clone();
            entries.push(ChainEntry {
                slot: 0,
                hash: cur.target,
                reference: cur,
                block,
            });
            break;
        }

        let slot = block
            .label()
            .claims()
            .iter()
            .find(|c| c.chain == chain_root)
            .map(|c| c.slot)
            .ok_or_else(|| ChainError::BrokenLink {
                slot: link_slot,
                detail: "block does not claim this chain".into(),
            })?;
        if let Some(s) = from_slot {
            if slot + 1 != s {
                return Err(ChainError::SlotGap {
                    expected: s - 1,
                    found: slot,
                });
            }
        }
        let claim = SlotClaim::new(chain_root, slot);
        if cur.proof_for(&claim).is_none() {
            return Err(ChainError::InvalidProof { slot });
        }
        if !cur.is_satisfied() {
            return Err(ChainError::InvalidProof { slot });
        }

        let root_ref = block
            .references()
            .iter()
            .find(|r| r.target == chain_root)
            .ok_or_else(|| ChainError::BrokenLink {
                slot,
                detail: "no reference to the chain root".into(),
            })?;
        if !block.label().at_least_as_strong(&root_ref.label_copy) {
            return Err(ChainError::WeakLabel { slot });
        }
        let pred = if slot == 1 {
            root_ref.clone()
        } else {
            // Another chain's head may also sit on this chain, lower down.
            block
                .references()
                .iter()
                .filter(|r| r.target != chain_root)
                .filter_map(|r| r.claimed_slot(&chain_root).map(|s| (s, r)))
                .max_by_key(|(s, _)| *s)
                .map(|(_, r)| r.clone())
                .ok_or_else(|| ChainError::BrokenLink {
                    slot,
                    detail: "no predecessor reference".into(),
                })?
        };
        entries.push(ChainEntry {
            slot,
            hash: cur.target,
            reference: cur,
            block,
        });
        cur = pred;
        from_slot = Some(slot);
    }
    entries.reverse();
    for e in &entries[1..] {
        if !e.block.label().at_least_as_strong(&root_label) {
            return Err(ChainError::WeakLabel { slot: e.slot });
        }
    }
    Ok(VerifiedChain {
        root: chain_root,
        label: root_label,
        blocks: entries,
    })
}

fn recursive_alpha(
    start: &Reference,
    fetch: &dyn Fn(&Hash) -> Option<Block>,
    own: fn(&Reference) -> Option<GoodSetFamily>,
) -> Result<GoodSetFamily, ChainError> {
    let mut seen: BTreeMap<Hash, ()> = BTreeMap::new();
    let mut stack = vec![start.clone()];
    let mut parts = Vec::new();
    while let Some(r) = stack.pop() {
        if seen.insert(r.target, ()).is_some() {
            continue;
        }
        if let Some(f) = own(&r) {
            parts.push(f);
        }
        let block = fetch(&r.target).ok_or(ChainError::MissingAncestor(r.target))?;
        stack.extend(block.references().iter().rev().cloned());
    }
    Ok(GoodSetFamily::meet(&parts))
}

/// Universes in which the block and its entire ancestry are available.
pub fn recursive_availability(
    r: &Reference,
    fetch: &dyn Fn(&Hash) -> Option<Block>,
) -> Result<GoodSetFamily, ChainError> {
    recursive_alpha(r, fetch, |r| Some(r.availability_alpha()))
}

/// Universes in which nothing conflicting with the block or any ancestor is
/// approved. Blocks without integrity attestations constrain nothing.
pub fn recursive_integrity(
    r: &Reference,
    fetch: &dyn Fn(&Hash) -> Option<Block>,
) -> Result<GoodSetFamily, ChainError> {
    recursive_alpha(r, fetch, |r| {
        (!r.integ_atts.is_empty()).then(|| r.integrity_alpha())
    })
}
