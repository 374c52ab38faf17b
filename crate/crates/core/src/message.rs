//! Wire messages between clients, availability servers and integrity servers.

use crate::block::Block;
use crate::chains::Reference;
use crate::codec::{Decode, DecodeError, Encode, Reader};
use crate::consensus::{InstanceId, ProofOfConsensus, ProtocolMessage};
use crate::crypto::{hash_bytes, Hash};
use crate::wilbur::{AvailabilityAttestation, NotFound};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RejectReason {
    /// The slot already holds another block; carries the deciding proof.
    SlotTaken(Box<ProofOfConsensus>),
    LabelTooWeak,
    MissingPredecessor,
    AvailabilityUnsatisfied,
    LabelUnsatisfied,
    UnknownKind,
    UnknownChain(Hash),
    ClaimsMismatch,
    InvalidReference(String),
    NotParticipant,
    AppRejected(String),
    /// Endorsement asked of a server that already decides that chain.
    ServesChain(Hash),
    /// A chain root that claims a slot.
    RootClaimsSlot,
    GaveUp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    StoreBlock(Block),
    Stored(AvailabilityAttestation),
    GetBlock(Hash),
    BlockFound(Block),
    NotFound(NotFound),
    /// A timestamp block pushed to a peer with its author's attestation.
    Announce {
        block: Block,
        att: AvailabilityAttestation,
    },
    Register {
        root: Block,
        avail: Vec<AvailabilityAttestation>,
    },
    RequestIntegrity {
        block: Block,
        claims: InstanceId,
        avail: Vec<AvailabilityAttestation>,
    },
    Endorse {
        reference: Box<Reference>,
        claims: InstanceId,
    },
    Granted(Box<ProofOfConsensus>),
    Rejected {
        value: Hash,
        reason: RejectReason,
    },
    Protocol(ProtocolMessage),
    Committed(Box<ProofOfConsensus>),
    GetDecided(Hash),
    Decided {
        chain: Hash,
        entries: Vec<(u64, Hash)>,
    },
}

impl Message {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::StoreBlock(_) => "store_block",
            Message::Stored(_) => "stored",
            Message::GetBlock(_) => "get_block",
            Message::BlockFound(_) => "block_found",
            Message::NotFound(_) => "not_found",
            Message::Announce { .. } => "announce",
            Message::Register { .. } => "register",
            Message::RequestIntegrity { .. } => "request_integrity",
            Message::Endorse { .. } => "endorse",
            Message::Granted(_) => "granted",
            Message::Rejected { .. } => "rejected",
            Message::Protocol(_) => "protocol",
            Message::Committed(_) => "committed",
            Message::GetDecided(_) => "get_decided",
            Message::Decided { .. } => "decided",
        }
    }

    pub fn digest(&self) -> Hash {
        hash_bytes(&self.encode())
    }
}

impl Encode for RejectReason {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            RejectReason::SlotTaken(p) => {
                out.push(0);
                p.encode_to(out);
            }
            RejectReason::LabelTooWeak => out.push(1),
            RejectReason::MissingPredecessor => out.push(2),
            RejectReason::AvailabilityUnsatisfied => out.push(3),
            RejectReason::LabelUnsatisfied => out.push(4),
            RejectReason::UnknownKind => out.push(5),
            RejectReason::UnknownChain(h) => {
                out.push(6);
                h.encode_to(out);
            }
            RejectReason::ClaimsMismatch => out.push(7),
            RejectReason::InvalidReference(s) => {
                out.push(8);
                s.encode_to(out);
            }
            RejectReason::NotParticipant => out.push(9),
            RejectReason::AppRejected(s) => {
                out.push(10);
                s.encode_to(out);
            }
            RejectReason::ServesChain(h) => {
                out.push(11);
                h.encode_to(out);
            }
            RejectReason::RootClaimsSlot => out.push(12),
            RejectReason::GaveUp => out.push(13),
        }
    }
}

impl Decode for RejectReason {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            0 => RejectReason::SlotTaken(Box::decode_from(r)?),
            1 => RejectReason::LabelTooWeak,
            2 => RejectReason::MissingPredecessor,
            3 => RejectReason::AvailabilityUnsatisfied,
            4 => RejectReason::LabelUnsatisfied,
            5 => RejectReason::UnknownKind,
            6 => RejectReason::UnknownChain(Hash::decode_from(r)?),
            7 => RejectReason::ClaimsMismatch,
            8 => RejectReason::InvalidReference(String::decode_from(r)?),
            9 => RejectReason::NotParticipant,
            10 => RejectReason::AppRejected(String::decode_from(r)?),
            11 => RejectReason::ServesChain(Hash::decode_from(r)?),
            12 => RejectReason::RootClaimsSlot,
            13 => RejectReason::GaveUp,
            tag => {
                return Err(DecodeError::UnknownTag {
                    what: "reject reason",
                    tag,
                })
            }
        })
    }
}

impl Encode for Message {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            Message::StoreBlock(b) => {
                out.push(0);
                b.encode_to(out);
            }
            Message::Stored(a) => {
                out.push(1);
                a.encode_to(out);
            }
            Message::GetBlock(h) => {
                out.push(2);
                h.encode_to(out);
            }
            Message::BlockFound(b) => {
                out.push(3);
                b.encode_to(out);
            }
            Message::NotFound(nf) => {
                out.push(4);
                nf.encode_to(out);
            }
            Message::Announce { block, att } => {
                out.push(5);
                block.encode_to(out);
                att.encode_to(out);
            }
            Message::Register { root, avail } => {
                out.push(6);
                root.encode_to(out);
                avail.encode_to(out);
            }
            Message::RequestIntegrity {
                block,
                claims,
                avail,
            } => {
                out.push(7);
                block.encode_to(out);
                claims.encode_to(out);
                avail.encode_to(out);
            }
            Message::Endorse { reference, claims } => {
                out.push(8);
                reference.encode_to(out);
                claims.encode_to(out);
            }
            Message::Granted(p) => {
                out.push(9);
                p.encode_to(out);
            }
            Message::Rejected { value, reason } => {
                out.push(10);
                value.encode_to(out);
                reason.encode_to(out);
            }
            Message::Protocol(m) => {
                out.push(11);
                m.encode_to(out);
            }
            Message::Committed(p) => {
                out.push(12);
                p.encode_to(out);
            }
            Message::GetDecided(h) => {
                out.push(13);
                h.encode_to(out);
            }
            Message::Decided { chain, entries } => {
                out.push(14);
                chain.encode_to(out);
                entries.encode_to(out);
            }
        }
    }
}

impl Decode for Message {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            0 => Message::StoreBlock(Block::decode_from(r)?),
            1 => Message::Stored(AvailabilityAttestation::decode_from(r)?),
            2 => Message::GetBlock(Hash::decode_from(r)?),
            3 => Message::BlockFound(Block::decode_from(r)?),
            4 => Message::NotFound(NotFound::decode_from(r)?),
            5 => Message::Announce {
                block: Block::decode_from(r)?,
                att: AvailabilityAttestation::decode_from(r)?,
            },
            6 => Message::Register {
                root: Block::decode_from(r)?,
                avail: Vec::decode_from(r)?,
            },
            7 => Message::RequestIntegrity {
                block: Block::decode_from(r)?,
                claims: InstanceId::decode_from(r)?,
                avail: Vec::decode_from(r)?,
            },
            8 => Message::Endorse {
                reference: Box::decode_from(r)?,
                claims: InstanceId::decode_from(r)?,
            },
            9 => Message::Granted(Box::decode_from(r)?),
            10 => Message::Rejected {
                value: Hash::decode_from(r)?,
                reason: RejectReason::decode_from(r)?,
            },
            11 => Message::Protocol(ProtocolMessage::decode_from(r)?),
            12 => Message::Committed(Box::decode_from(r)?),
            13 => Message::GetDecided(Hash::decode_from(r)?),
            14 => Message::Decided {
                chain: Hash::decode_from(r)?,
                entries: Vec::decode_from(r)?,
            },
            tag => {
                return Err(DecodeError::UnknownTag {
                    what: "message",
                    tag,
                })
            }
        })
    }
}
