//! Blocks: Merkle trees over payload, reference and label leaves.

use thiserror::Error;

use crate::chains::Reference;
use crate::codec::{Bytes, Decode, DecodeError, Encode, Reader};
use crate::crypto::Hash;
use crate::merkle::{self, MerkleProof};
use crate::policy::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LeafKind {
    Payload = 0,
    Reference = 1,
    Label = 2,
}

impl LeafKind {
    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            0 => Ok(LeafKind::Payload),
            1 => Ok(LeafKind::Reference),
            2 => Ok(LeafKind::Label),
            tag => Err(DecodeError::UnknownTag {
                what: "leaf kind",
                tag,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Leaf {
    pub kind: LeafKind,
    pub content: Vec<u8>,
}

impl Leaf {
    pub fn payload(bytes: impl Into<Vec<u8>>) -> Leaf {
        Leaf {
            kind: LeafKind::Payload,
            content: bytes.into(),
        }
    }

    pub fn reference(r: &Reference) -> Leaf {
        Leaf {
            kind: LeafKind::Reference,
            content: r.encode(),
        }
    }

    pub fn label(l: &Label) -> Leaf {
        Leaf {
            kind: LeafKind::Label,
            content: l.encode(),
        }
    }

    pub fn hash(&self) -> Hash {
        merkle::leaf_hash(self.kind as u8, &self.content)
    }
}

impl Encode for Leaf {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(self.kind as u8);
        self.content.as_slice().encode_to(out);
    }
}

impl Decode for Leaf {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let kind = LeafKind::from_tag(r.u8()?)?;
        let content = Bytes::decode_from(r)?.0;
        Ok(Leaf { kind, content })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("block has more than one label leaf")]
    MultipleLabels,
    #[error("block has no label leaf")]
    MissingLabel,
    #[error("leaves must be payloads, then references, then the label")]
    Misordered,
    #[error("leaf {index} does not decode: {error}")]
    BadLeaf { index: usize, error: DecodeError },
    #[error("leaf index {index} out of range ({len} leaves)")]
    IndexOutOfRange { index: usize, len: usize },
}

/// An immutable block. The decoded label and references are kept alongside
/// the raw leaves so callers never re-parse them.
#[derive(Clone, Debug)]
pub struct Block {
    leaves: Vec<Leaf>,
    leaf_hashes: Vec<Hash>,
    root: Hash,
    label: Label,
    references: Vec<Reference>,
}

impl PartialEq for Block {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl Eq for Block {}

pub fn build_block(payload: Vec<Vec<u8>>, references: Vec<Reference>, label: Label) -> Block {
    let mut leaves: Vec<Leaf> = payload.into_iter().map(Leaf::payload).collect();
    leaves.extend(references.iter().map(Leaf::reference));
    leaves.push(Leaf::label(&label));
    let leaf_hashes: Vec<Hash> = leaves.iter().map(Leaf::hash).collect();
    let root = merkle::root_of(&leaf_hashes);
    Block {
        leaves,
        leaf_hashes,
        root,
        label,
        references,
    }
}

impl Block {
    /// Validates and assembles a block from raw leaves.
    pub fn from_leaves(leaves: Vec<Leaf>) -> Result<Block, BlockError> {
        let labels = leaves.iter().filter(|l| l.kind == LeafKind::Label).count();
        match labels {
            0 => return Err(BlockError::MissingLabel),
            1 => {}
            _ => return Err(BlockError::MultipleLabels),
        }
        if !leaves.windows(2).all(|w| w[0].kind <= w[1].kind)
            || leaves.last().map(|l| l.kind) != Some(LeafKind::Label)
        {
            return Err(BlockError::Misordered);
        }
        let mut label = None;
        let mut references = Vec::new();
        for (index, leaf) in leaves.iter().enumerate() {
            let bad = |error| BlockError::BadLeaf { index, error };
            match leaf.kind {
                LeafKind::Payload => {}
                LeafKind::Reference => {
                    references.push(Reference::decode(&leaf.content).map_err(bad)?)
                }
                LeafKind::Label => label = Some(Label::decode(&leaf.content).map_err(bad)?),
            }
        }
        let leaf_hashes: Vec<Hash> = leaves.iter().map(Leaf::hash).collect();
        let root = merkle::root_of(&leaf_hashes);
        Ok(Block {
            leaves,
            leaf_hashes,
            root,
            label: label.expect("counted above"),
            references,
        })
    }

    pub fn root(&self) -> Hash {
        self.root
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn label(&self) -> &Label {
        &self.label
    }

    pub fn references(&self) -> &[Reference] {
        &self.references
    }

    pub fn payloads(&self) -> impl Iterator<Item = &[u8]> {
        self.leaves
            .iter()
            .filter(|l| l.kind == LeafKind::Payload)
            .map(|l| l.content.as_slice())
    }

    pub fn label_index(&self) -> usize {
        self.leaves.len() - 1
    }

    pub fn prove(&self, index: usize) -> Result<MerkleProof, BlockError> {
        merkle::prove(&self.leaf_hashes, index).ok_or(BlockError::IndexOutOfRange {
            index,
            len: self.leaves.len(),
        })
    }

    pub fn label_proof(&self) -> MerkleProof {
        self.prove(self.label_index()).expect("label leaf exists")
    }
}

pub fn merkle_prove(block: &Block, leaf_index: usize) -> Result<MerkleProof, BlockError> {
    block.prove(leaf_index)
}

pub fn merkle_verify(root: &Hash, leaf: &Leaf, proof: &MerkleProof) -> bool {
    proof.verify(root, leaf.hash())
}

impl Encode for Block {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.leaves.encode_to(out);
    }
}

impl Decode for Block {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let leaves = Vec::<Leaf>::decode_from(r)?;
        Block::from_leaves(leaves).map_err(|e| DecodeError::Invalid(e.to_string()))
    }
}
