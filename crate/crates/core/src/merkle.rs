//! Binary Merkle trees over an ordered leaf list.
//!
//! Leaf hash is `H(0x00 || kind || content)`, internal nodes are
//! `H(0x01 || left || right)`. A level with an odd node count promotes its
//! last node to the next level unchanged, so proofs for such nodes simply
//! skip that level.

use crate::codec::{Decode, DecodeError, Encode, Reader};
use crate::crypto::{hash_parts, Hash};

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

pub fn leaf_hash(kind: u8, content: &[u8]) -> Hash {
    hash_parts(&[&[LEAF_PREFIX, kind], content])
}

pub fn node_hash(left: &Hash, right: &Hash) -> Hash {
    hash_parts(&[&[NODE_PREFIX], &left.0, &right.0])
}

/// Which side of the running hash the sibling sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleProof {
    pub leaf_index: u32,
    pub path: Vec<(Hash, Side)>,
}

fn next_level(level: &[Hash]) -> Vec<Hash> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => node_hash(l, r),
            [single] => *single,
            _ => unreachable!(),
        })
        .collect()
}

/// Root over already-hashed leaves. Panics on an empty list; blocks always
/// carry at least their label leaf.
pub fn root_of(leaves: &[Hash]) -> Hash {
    assert!(!leaves.is_empty(), "merkle tree needs at least one leaf");
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    level[0]
}

pub fn prove(leaves: &[Hash], index: usize) -> Option<MerkleProof> {
    if index >= leaves.len() {
        return None;
    }
    let mut path = Vec::new();
    let mut level = leaves.to_vec();
    let mut idx = index;
    while level.len() > 1 {
        let sibling = idx ^ 1;
        if sibling < level.len() {
            let side = if sibling < idx {
                Side::Left
            } else {
                Side::Right
            };
            path.push((level[sibling], side));
        }
        level = next_level(&level);
        idx /= 2;
    }
    Some(MerkleProof {
        leaf_index: index as u32,
        path,
    })
}

impl MerkleProof {
    /// Replays the path from `leaf` and returns the resulting root.
    pub fn root_from(&self, leaf: Hash) -> Hash {
        self.path.iter().fold(leaf, |acc, (sib, side)| match side {
            Side::Left => node_hash(sib, &acc),
            Side::Right => node_hash(&acc, sib),
        })
    }

    pub fn verify(&self, root: &Hash, leaf: Hash) -> bool {
        self.root_from(leaf) == *root
    }
}

impl Encode for Side {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(match self {
            Side::Left => 0,
            Side::Right => 1,
        });
    }
}

impl Decode for Side {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Side::Left),
            1 => Ok(Side::Right),
            tag => Err(DecodeError::UnknownTag {
                what: "merkle side",
                tag,
            }),
        }
    }
}

crate::impl_codec_struct!(MerkleProof { leaf_index, path });
