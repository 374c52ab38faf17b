//! Single-decree byzantine quorum consensus with externally verifiable proofs.
//!
//! Instances are named by the `(chain, slot)` claims they decide. A proof of
//! consensus is a quorum of signed `Accept` messages for one value; anyone can
//! check it with signatures alone.

mod replica;

pub use replica::{Input, LockTable, Output, Replica, ReplicaConfig, SlotGuard};

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader};
use crate::crypto::{hash_bytes, Hash, Keypair, ServerId, Signature};
use crate::policy::{GoodSetFamily, ServerSet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("quorum spec has no quorums")]
    NoQuorums,
    #[error("quorum spec contains an empty quorum")]
    EmptyQuorum,
    #[error("quorum member {0} is not a participant")]
    QuorumOutsideParticipants(ServerId),
    #[error("instance has no claims")]
    EmptyInstance,
    #[error("instance claims chain {0:?} twice")]
    DuplicateChain(Hash),
    #[error("accept senders do not form a quorum")]
    NoQuorum,
    #[error("accepts disagree on instance or value")]
    MixedValues,
    #[error("message is not an accept")]
    WrongPhase,
    #[error("bad signature from {0}")]
    BadSignature(ServerId),
    #[error("{0} is not a participant")]
    UnknownParticipant(ServerId),
    #[error("message belongs to another instance")]
    WrongInstance,
}

/// Who must take part in a consensus and which sets of them suffice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuorumSpec {
    participants: ServerSet,
    quorums: GoodSetFamily,
}

impl QuorumSpec {
    pub fn new(
        participants: impl IntoIterator<Item = ServerId>,
        quorums: GoodSetFamily,
    ) -> Result<Self, ConsensusError> {
        let participants: ServerSet = participants.into_iter().collect();
        if quorums.is_never() {
            return Err(ConsensusError::NoQuorums);
        }
        if quorums.is_always() {
            return Err(ConsensusError::EmptyQuorum);
        }
        if let Some(outside) = quorums.servers().difference(&participants).next() {
            return Err(ConsensusError::QuorumOutsideParticipants(*outside));
        }
        Ok(QuorumSpec {
            participants,
            quorums,
        })
    }

    /// Every `k`-subset of the participants is a quorum.
    pub fn threshold(
        participants: impl IntoIterator<Item = ServerId>,
        k: usize,
    ) -> Result<Self, ConsensusError> {
        let participants: ServerSet = participants.into_iter().collect();
        let quorums = GoodSetFamily::threshold(participants.iter().copied(), k);
        QuorumSpec::new(participants, quorums)
    }

    /// `n = 3f + 1` participants with quorums of size `2f + 1`.
    pub fn byzantine(
        participants: impl IntoIterator<Item = ServerId>,
    ) -> Result<Self, ConsensusError> {
        let participants: ServerSet = participants.into_iter().collect();
        let f = participants.len().saturating_sub(1) / 3;
        QuorumSpec::threshold(participants, 2 * f + 1)
    }

    pub fn participants(&self) -> &ServerSet {
        &self.participants
    }

    pub fn quorums(&self) -> &GoodSetFamily {
        &self.quorums
    }

    pub fn is_quorum(&self, senders: &ServerSet) -> bool {
        self.quorums.holds(senders)
    }

    /// Universes in which no two conflicting proofs can exist under this
    /// spec: those containing a correct member of every pairwise quorum
    /// intersection. Memoized per thread by encoding.
    pub fn safety_family(&self) -> GoodSetFamily {
        thread_local! {
            static CACHE: RefCell<HashMap<Hash, GoodSetFamily>> = RefCell::new(HashMap::new());
        }
        let key = hash_bytes(&self.encode());
        if let Some(f) = CACHE.with(|c| c.borrow().get(&key).cloned()) {
            return f;
        }
        let f = compute_safety_family(&self.quorums);
        CACHE.with(|c| c.borrow_mut().insert(key, f.clone()));
        f
    }
}

fn compute_safety_family(quorums: &GoodSetFamily) -> GoodSetFamily {
    let qs: Vec<&ServerSet> = quorums.good_sets().iter().collect();
    let mut intersections = Vec::new();
    for (i, a) in qs.iter().enumerate() {
        for b in &qs[i..] {
            intersections.push(a.intersection(b).copied().collect::<Vec<_>>());
        }
    }
    GoodSetFamily::from_sets(intersections).transversal()
}

impl Encode for QuorumSpec {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.participants.encode_to(out);
        self.quorums.encode_to(out);
    }
}

impl Decode for QuorumSpec {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let participants = ServerSet::decode_from(r)?;
        let quorums = GoodSetFamily::decode_from(r)?;
        QuorumSpec::new(participants, quorums).map_err(|e| DecodeError::Invalid(e.to_string()))
    }
}

/// A spec satisfied only by one quorum from each input.
pub fn quorum_meet(a: &QuorumSpec, b: &QuorumSpec) -> QuorumSpec {
    QuorumSpec {
        participants: a.participants.union(&b.participants).copied().collect(),
        quorums: a.quorums.meet_with(&b.quorums),
    }
}

/// One slot of one chain. Slot 0 is the chain root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotClaim {
    pub chain: Hash,
    pub slot: u64,
}

crate::impl_codec_struct!(SlotClaim { chain, slot });

impl SlotClaim {
    pub fn new(chain: Hash, slot: u64) -> Self {
        SlotClaim { chain, slot }
    }
}

/// The conflict unit of a consensus instance.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId {
    claims: BTreeSet<SlotClaim>,
}

impl InstanceId {
    pub fn new(claims: impl IntoIterator<Item = SlotClaim>) -> Result<Self, ConsensusError> {
        let claims: BTreeSet<SlotClaim> = claims.into_iter().collect();
        if claims.is_empty() {
            return Err(ConsensusError::EmptyInstance);
        }
        let mut chains = BTreeSet::new();
        for c in &claims {
            if !chains.insert(c.chain) {
                return Err(ConsensusError::DuplicateChain(c.chain));
            }
        }
        Ok(InstanceId { claims })
    }

    pub fn single(chain: Hash, slot: u64) -> Self {
        InstanceId {
            claims: [SlotClaim::new(chain, slot)].into(),
        }
    }

    pub fn claims(&self) -> &BTreeSet<SlotClaim> {
        &self.claims
    }

    pub fn key(&self) -> Hash {
        hash_bytes(&self.encode())
    }

    pub fn slot_of(&self, chain: &Hash) -> Option<u64> {
        self.claims
            .iter()
            .find(|c| c.chain == *chain)
            .map(|c| c.slot)
    }
}

impl Encode for InstanceId {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.claims.encode_to(out);
    }
}

impl Decode for InstanceId {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let claims = BTreeSet::<SlotClaim>::decode_from(r)?;
        InstanceId::new(claims).map_err(|e| DecodeError::Invalid(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Propose,
    Prepare,
    Accept,
}

impl Encode for Phase {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(*self as u8);
    }
}

impl Decode for Phase {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Phase::Propose),
            1 => Ok(Phase::Prepare),
            2 => Ok(Phase::Accept),
            tag => Err(DecodeError::UnknownTag { what: "phase", tag }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub instance: InstanceId,
    pub phase: Phase,
    pub value: Hash,
    pub round: u64,
    pub sender: ServerId,
    pub sig: Signature,
}

crate::impl_codec_struct!(ProtocolMessage {
    instance,
    phase,
    value,
    round,
    sender,
    sig
});

fn signed_bytes(
    instance: &InstanceId,
    phase: Phase,
    value: &Hash,
    round: u64,
    sender: &ServerId,
) -> Vec<u8> {
    let mut out = b"blockweb/consensus/".to_vec();
    (instance, phase, value, round, sender).encode_to(&mut out);
    out
}

impl ProtocolMessage {
    pub fn sign(
        key: &Keypair,
        instance: InstanceId,
        phase: Phase,
        value: Hash,
        round: u64,
    ) -> Self {
        let sender = key.id();
        let sig = key.sign(&signed_bytes(&instance, phase, &value, round, &sender));
        ProtocolMessage {
            instance,
            phase,
            value,
            round,
            sender,
            sig,
        }
    }

    pub fn verify(&self) -> bool {
        self.sig.signer == self.sender
            && self.sig.verify(&signed_bytes(
                &self.instance,
                self.phase,
                &self.value,
                self.round,
                &self.sender,
            ))
    }
}

/// A quorum of signed accepts for one value. Carries only the block hash.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProofOfConsensus {
    pub instance: InstanceId,
    pub value: Hash,
    /// Sorted by sender, one per sender.
    pub accepts: Vec<ProtocolMessage>,
    pub spec: QuorumSpec,
}

/// Integrity attestations are proofs of consensus.
pub type IntegrityAttestation = ProofOfConsensus;

impl Encode for ProofOfConsensus {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.instance.encode_to(out);
        self.value.encode_to(out);
        self.accepts.encode_to(out);
        self.spec.encode_to(out);
    }
}

impl Decode for ProofOfConsensus {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let instance = InstanceId::decode_from(r)?;
        let value = Hash::decode_from(r)?;
        let accepts = Vec::<ProtocolMessage>::decode_from(r)?;
        if !accepts.windows(2).all(|w| w[0].sender < w[1].sender) {
            return Err(DecodeError::NonCanonical("accepts not sorted by sender"));
        }
        let spec = QuorumSpec::decode_from(r)?;
        Ok(ProofOfConsensus {
            instance,
            value,
            accepts,
            spec,
        })
    }
}

pub fn assemble_proof(
    accepts: impl IntoIterator<Item = ProtocolMessage>,
    spec: &QuorumSpec,
) -> Result<ProofOfConsensus, ConsensusError> {
    let mut by_sender = std::collections::BTreeMap::new();
    let mut first: Option<(InstanceId, Hash)> = None;
    for m in accepts {
        if m.phase != Phase::Accept {
            return Err(ConsensusError::WrongPhase);
        }
        match &first {
            None => first = Some((m.instance.clone(), m.value)),
            Some((i, v)) if *i != m.instance || *v != m.value => {
                return Err(ConsensusError::MixedValues)
            }
            _ => {}
        }
        by_sender.entry(m.sender).or_insert(m);
    }
    let (instance, value) = first.ok_or(ConsensusError::NoQuorum)?;
    let senders: ServerSet = by_sender.keys().copied().collect();
    if !spec.is_quorum(&senders) {
        return Err(ConsensusError::NoQuorum);
    }
    Ok(ProofOfConsensus {
        instance,
        value,
        accepts: by_sender.into_values().collect(),
        spec: spec.clone(),
    })
}

impl ProofOfConsensus {
    pub fn signers(&self) -> ServerSet {
        self.accepts.iter().map(|a| a.sender).collect()
    }

    /// Checks every invariant using signatures alone.
    pub fn verify(&self) -> bool {
        let mut senders = ServerSet::new();
        for a in &self.accepts {
            if a.phase != Phase::Accept
                || a.instance != self.instance
                || a.value != self.value
                || !self.spec.participants.contains(&a.sender)
                || !senders.insert(a.sender)
                || !a.verify()
            {
                return false;
            }
        }
        self.spec.is_quorum(&senders)
    }

    /// Universes in which this proof cannot be contradicted.
    pub fn alpha(&self) -> GoodSetFamily {
        self.spec.safety_family()
    }

    /// The same decision viewed under a component spec: keeps the accepts
    /// from `spec`'s participants. `None` if they form no quorum of `spec`.
    pub fn restrict(&self, spec: &QuorumSpec) -> Option<ProofOfConsensus> {
        let accepts: Vec<ProtocolMessage> = self
            .accepts
            .iter()
            .filter(|a| spec.participants.contains(&a.sender))
            .cloned()
            .collect();
        let senders: ServerSet = accepts.iter().map(|a| a.sender).collect();
        spec.is_quorum(&senders).then(|| ProofOfConsensus {
            instance: self.instance.clone(),
            value: self.value,
            accepts,
            spec: spec.clone(),
        })
    }

    pub fn covers(&self, claim: &SlotClaim) -> bool {
        self.instance.claims.contains(claim)
    }
}

pub fn verify_proof(p: &ProofOfConsensus) -> bool {
    p.verify()
}

/// True iff the proofs decide different values for a shared slot.
pub fn conflicts(p1: &ProofOfConsensus, p2: &ProofOfConsensus) -> bool {
    p1.value != p2.value
        && p1
            .instance
            .claims
            .intersection(&p2.instance.claims)
            .next()
            .is_some()
}
