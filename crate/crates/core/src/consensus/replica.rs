//! The per-instance replica state machine.
//!
//! A round's coordinator proposes a value; replicas prepare at most one value
//! per round; a quorum of prepares lets a replica accept, and a replica
//! accepts at most once per instance; a quorum of accepts for one value
//! (from any rounds) is a decision. Cross-instance exclusion on shared slots
//! goes through a [`SlotGuard`] owned by the server.

use std::collections::{BTreeMap, BTreeSet};

use super::{
    assemble_proof, ConsensusError, InstanceId, Phase, ProofOfConsensus, ProtocolMessage,
    QuorumSpec, SlotClaim,
};
use crate::crypto::{hash_parts, Hash, Keypair, ServerId};

/// Slot-level exclusion shared by all instances on one server.
///
/// Rounds form one ballot space per claim across instances: a server votes
/// for at most one value per claim and round, follows the value with the
/// highest-round prepare quorum it has seen, and otherwise favours the
/// lowest live candidate.
pub trait SlotGuard {
    /// Registers a value some instance may decide.
    fn note_candidate(&mut self, instance: &InstanceId, value: &Hash);
    /// Records that `value` gathered a prepare quorum in `round`.
    fn note_quorum(&mut self, instance: &InstanceId, round: u64, value: &Hash);
    /// Whether this server may prepare `value` in `round`; on success the
    /// vote is recorded.
    fn may_prepare(&mut self, instance: &InstanceId, value: &Hash, round: u64) -> bool;
    /// Whether this server may accept `value` on the strength of a prepare
    /// quorum from `round`. On success the claims are bound to `value`
    /// forever.
    fn may_accept(&mut self, instance: &InstanceId, value: &Hash, round: u64) -> bool;
    /// Forgets the candidates of an instance that stopped running.
    fn release(&mut self, instance: &InstanceId);
}

#[derive(Clone, Debug, Default)]
struct ClaimState {
    lock: Option<Hash>,
    votes: BTreeMap<u64, Hash>,
    quorum: Option<(u64, Hash)>,
    candidates: BTreeSet<(Hash, Hash)>,
}

#[derive(Clone, Debug, Default)]
pub struct LockTable {
    claims: BTreeMap<SlotClaim, ClaimState>,
    instances: BTreeMap<Hash, InstanceId>,
}

impl LockTable {
    pub fn locked(&self, claim: &SlotClaim) -> Option<Hash> {
        self.claims.get(claim).and_then(|c| c.lock)
    }

    /// Binds a claim to a decided value, whatever was there before.
    pub fn force_lock(&mut self, claim: SlotClaim, value: Hash) {
        self.claims.entry(claim).or_default().lock = Some(value);
    }

    fn locked_elsewhere(&self, instance: &InstanceId, value: &Hash) -> bool {
        instance
            .claims()
            .iter()
            .any(|c| self.locked(c).is_some_and(|v| v != *value))
    }

    /// A candidate blocks others only while none of its claims is bound to
    /// a different value here.
    fn live(&self, key: &Hash, value: &Hash) -> bool {
        self.instances
            .get(key)
            .is_some_and(|i| !self.locked_elsewhere(i, value))
    }

    /// Whether `value` is the value this server backs on `claim`.
    fn favours(&self, claim: &SlotClaim, key: &Hash, value: &Hash) -> bool {
        let Some(st) = self.claims.get(claim) else {
            return true;
        };
        if let Some((_, q)) = st.quorum {
            return q == *value;
        }
        st.candidates
            .iter()
            .filter(|(v, k)| v != value && self.live(k, v))
            .all(|(v, k)| (value, key) < (v, k))
    }
}

impl SlotGuard for LockTable {
    fn note_candidate(&mut self, instance: &InstanceId, value: &Hash) {
        let key = instance.key();
        self.instances.insert(key, instance.clone());
        for c in instance.claims() {
            self.claims
                .entry(*c)
                .or_default()
                .candidates
                .insert((*value, key));
        }
    }

    fn note_quorum(&mut self, instance: &InstanceId, round: u64, value: &Hash) {
        for c in instance.claims() {
            let st = self.claims.entry(*c).or_default();
            let better = match st.quorum {
                None => true,
                Some((r, v)) => round > r || (round == r && *value < v),
            };
            if better {
                st.quorum = Some((round, *value));
            }
        }
    }

    fn may_prepare(&mut self, instance: &InstanceId, value: &Hash, round: u64) -> bool {
        let key = instance.key();
        if self.locked_elsewhere(instance, value) {
            return false;
        }
        for c in instance.claims() {
            if self
                .claims
                .get(c)
                .and_then(|st| st.votes.get(&round))
                .is_some_and(|v| v != value)
            {
                return false;
            }
            if self.locked(c) != Some(*value) && !self.favours(c, &key, value) {
                return false;
            }
        }
        for c in instance.claims() {
            self.claims
                .entry(*c)
                .or_default()
                .votes
                .insert(round, *value);
        }
        true
    }

    fn may_accept(&mut self, instance: &InstanceId, value: &Hash, round: u64) -> bool {
        if self.locked_elsewhere(instance, value) {
            return false;
        }
        let voted_against = instance.claims().iter().any(|c| {
            self.claims
                .get(c)
                .is_some_and(|st| st.votes.range(round..).any(|(_, v)| v != value))
        });
        if voted_against {
            return false;
        }
        for c in instance.claims() {
            self.claims.entry(*c).or_default().lock = Some(*value);
        }
        true
    }

    fn release(&mut self, instance: &InstanceId) {
        let key = instance.key();
        self.instances.remove(&key);
        for c in instance.claims() {
            if let Some(st) = self.claims.get_mut(c) {
                st.candidates.retain(|(_, k)| *k != key);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplicaConfig {
    pub base_timeout_us: u64,
    /// Rounds after which the replica gives up on the instance.
    pub max_rounds: u64,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        ReplicaConfig {
            base_timeout_us: 100_000,
            max_rounds: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Input {
    /// A value this server has validated and is willing to decide.
    Candidate(Hash),
    Message(ProtocolMessage),
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    /// Send to every other participant.
    Broadcast(ProtocolMessage),
    Decided(ProofOfConsensus),
}

#[derive(Debug)]
pub struct Replica {
    key: Keypair,
    instance: InstanceId,
    spec: QuorumSpec,
    order: Vec<ServerId>,
    offset: u64,
    config: ReplicaConfig,
    round: u64,
    candidates: Vec<Hash>,
    proposals: BTreeMap<u64, Hash>,
    proposed: BTreeSet<u64>,
    prepared: BTreeMap<u64, Hash>,
    prepares: BTreeMap<(u64, Hash), BTreeSet<ServerId>>,
    accepted: Option<ProtocolMessage>,
    accepts: BTreeMap<Hash, BTreeMap<ServerId, ProtocolMessage>>,
    decided: Option<ProofOfConsensus>,
}

impl Replica {
    pub fn new(
        key: Keypair,
        instance: InstanceId,
        spec: QuorumSpec,
        config: ReplicaConfig,
    ) -> Self {
        let order: Vec<ServerId> = spec.participants().iter().copied().collect();
        let k = instance.key();
        let offset = u64::from_be_bytes(k.0[..8].try_into().expect("8 bytes"));
        Replica {
            key,
            instance,
            spec,
            order,
            offset,
            config,
            round: 0,
            candidates: Vec::new(),
            proposals: BTreeMap::new(),
            proposed: BTreeSet::new(),
            prepared: BTreeMap::new(),
            prepares: BTreeMap::new(),
            accepted: None,
            accepts: BTreeMap::new(),
            decided: None,
        }
    }

    pub fn instance(&self) -> &InstanceId {
        &self.instance
    }

    pub fn spec(&self) -> &QuorumSpec {
        &self.spec
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn decided(&self) -> Option<&ProofOfConsensus> {
        self.decided.as_ref()
    }

    pub fn accepted_value(&self) -> Option<Hash> {
        self.accepted.as_ref().map(|a| a.value)
    }

    pub fn candidates(&self) -> &[Hash] {
        &self.candidates
    }

    pub fn coordinator(&self, round: u64) -> ServerId {
        let n = self.order.len() as u64;
        self.order[(self.offset.wrapping_add(round) % n) as usize]
    }

    pub fn exhausted(&self) -> bool {
        self.round >= self.config.max_rounds
    }

    /// Round timeout: exponential backoff with deterministic jitter.
    pub fn timeout_us(&self) -> u64 {
        let base = self.config.base_timeout_us.max(1);
        let h = hash_parts(&[
            b"blockweb/jitter/",
            &self.key.id().0,
            &self.instance.key().0,
            &self.round.to_be_bytes(),
        ]);
        let jitter = u64::from_be_bytes(h.0[..8].try_into().expect("8 bytes")) % base;
        base * (1 << self.round.min(5)) + jitter
    }

    pub fn step(
        &mut self,
        input: Input,
        guard: &mut dyn SlotGuard,
    ) -> Result<Vec<Output>, ConsensusError> {
        let mut out = Vec::new();
        match input {
            Input::Candidate(v) => {
                if !self.candidates.contains(&v) {
                    self.candidates.push(v);
                }
                guard.note_candidate(&self.instance, &v);
                if self.decided.is_none() {
                    self.maybe_propose(guard, &mut out);
                    self.try_prepare(self.round, guard, &mut out);
                    let rounds: Vec<u64> = self
                        .prepares
                        .keys()
                        .filter(|(_, pv)| *pv == v)
                        .map(|(r, _)| *r)
                        .collect();
                    for r in rounds {
                        self.try_accept(r, v, guard, &mut out);
                    }
                }
            }
            Input::Message(m) => {
                if m.instance != self.instance {
                    return Err(ConsensusError::WrongInstance);
                }
                if !self.spec.participants().contains(&m.sender) {
                    return Err(ConsensusError::UnknownParticipant(m.sender));
                }
                if !m.verify() {
                    return Err(ConsensusError::BadSignature(m.sender));
                }
                self.process(m, guard, &mut out);
            }
            Input::Timeout => {
                if self.decided.is_none() && !self.exhausted() {
                    self.round += 1;
                    if let Some(a) = &self.accepted {
                        out.push(Output::Broadcast(a.clone()));
                    }
                    self.maybe_propose(guard, &mut out);
                    self.try_prepare(self.round, guard, &mut out);
                    let seen: Vec<(u64, Hash)> = self.prepares.keys().copied().collect();
                    for (r, v) in seen {
                        self.try_accept(r, v, guard, &mut out);
                    }
                }
            }
        }
        Ok(out)
    }

    fn emit(
        &mut self,
        phase: Phase,
        round: u64,
        value: Hash,
        guard: &mut dyn SlotGuard,
        out: &mut Vec<Output>,
    ) {
        let m = ProtocolMessage::sign(&self.key, self.instance.clone(), phase, value, round);
        out.push(Output::Broadcast(m.clone()));
        self.process(m, guard, out);
    }

    fn process(&mut self, m: ProtocolMessage, guard: &mut dyn SlotGuard, out: &mut Vec<Output>) {
        match m.phase {
            Phase::Propose => {
                if m.sender != self.coordinator(m.round)
                    || m.round < self.round
                    || self.decided.is_some()
                {
                    return;
                }
                self.round = m.round;
                self.proposals.entry(m.round).or_insert(m.value);
                self.try_prepare(m.round, guard, out);
            }
            Phase::Prepare => {
                self.prepares
                    .entry((m.round, m.value))
                    .or_default()
                    .insert(m.sender);
                self.try_accept(m.round, m.value, guard, out);
            }
            Phase::Accept => {
                let v = m.value;
                self.accepts
                    .entry(v)
                    .or_default()
                    .entry(m.sender)
                    .or_insert(m);
                self.try_decide(v, out);
            }
        }
    }

    fn maybe_propose(&mut self, guard: &mut dyn SlotGuard, out: &mut Vec<Output>) {
        if self.coordinator(self.round) != self.key.id() || self.proposed.contains(&self.round) {
            return;
        }
        let value = self
            .accepted
            .as_ref()
            .map(|a| a.value)
            .or_else(|| self.quorum_value())
            .or_else(|| self.candidates.iter().min().copied());
        if let Some(v) = value {
            self.proposed.insert(self.round);
            self.emit(Phase::Propose, self.round, v, guard, out);
        }
    }

    /// The value of the highest-round prepare quorum seen, if any.
    fn quorum_value(&self) -> Option<Hash> {
        self.prepares
            .iter()
            .rev()
            .find(|(_, senders)| self.spec.is_quorum(senders))
            .map(|((_, v), _)| *v)
    }

    fn try_prepare(&mut self, round: u64, guard: &mut dyn SlotGuard, out: &mut Vec<Output>) {
        if self.decided.is_some() || self.prepared.contains_key(&round) {
            return;
        }
        let Some(&v) = self.proposals.get(&round) else {
            return;
        };
        if !self.candidates.contains(&v) || self.accepted.as_ref().is_some_and(|a| a.value != v) {
            return;
        }
        if !guard.may_prepare(&self.instance, &v, round) {
            return;
        }
        self.prepared.insert(round, v);
        self.emit(Phase::Prepare, round, v, guard, out);
    }

    fn try_accept(
        &mut self,
        round: u64,
        v: Hash,
        guard: &mut dyn SlotGuard,
        out: &mut Vec<Output>,
    ) {
        let Some(senders) = self.prepares.get(&(round, v)) else {
            return;
        };
        if !self.spec.is_quorum(senders) {
            return;
        }
        guard.note_quorum(&self.instance, round, &v);
        if self.accepted.is_some()
            || !self.candidates.contains(&v)
            || !guard.may_accept(&self.instance, &v, round)
        {
            return;
        }
        let m = ProtocolMessage::sign(&self.key, self.instance.clone(), Phase::Accept, v, round);
        self.accepted = Some(m.clone());
        out.push(Output::Broadcast(m.clone()));
        self.accepts
            .entry(v)
            .or_default()
            .entry(m.sender)
            .or_insert(m);
        self.try_decide(v, out);
    }

    fn try_decide(&mut self, v: Hash, out: &mut Vec<Output>) {
        if self.decided.is_some() {
            return;
        }
        let Some(accepts) = self.accepts.get(&v) else {
            return;
        };
        let senders: BTreeSet<ServerId> = accepts.keys().copied().collect();
        if !self.spec.is_quorum(&senders) {
            return;
        }
        let proof = assemble_proof(accepts.values().cloned(), &self.spec)
            .expect("same value, quorum checked");
        self.decided = Some(proof.clone());
        out.push(Output::Decided(proof));
    }

    /// Records a decision learned from elsewhere so the replica stops.
    pub fn learn(&mut self, proof: ProofOfConsensus) {
        if self.decided.is_none() && proof.instance == self.instance {
            self.decided = Some(proof);
        }
    }
}
