//! Integrity servers: the chain registry, slot validation and consensus
//! participation that turn a stored block into a proof of consensus.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::block::Block;
use crate::chains::Reference;
use crate::consensus::{
    quorum_meet, Input, InstanceId, LockTable, Output, Phase, ProofOfConsensus, ProtocolMessage,
    QuorumSpec, Replica, ReplicaConfig, SlotClaim, SlotGuard,
};
use crate::crypto::{Hash, Keypair, ServerId, Signature};
use crate::message::{Message, RejectReason};
use crate::policy::{label_meet, label_satisfied, AttestationKind, Label, PolicyError};
use crate::service::{Outbox, Service};
use crate::wilbur::AvailabilityAttestation;

/// Chain state as one integrity server sees it.
#[derive(Clone, Debug)]
pub struct ChainRecord {
    pub root: Hash,
    pub label: Label,
    pub registration: ProofOfConsensus,
    /// Slots 1..=k, contiguous.
    pub decided: BTreeMap<u64, (Hash, ProofOfConsensus)>,
}

impl ChainRecord {
    pub fn next_slot(&self) -> u64 {
        self.decided.len() as u64 + 1
    }

    pub fn spec(&self) -> &QuorumSpec {
        self.label
            .integrity
            .as_ref()
            .expect("registered chains have integrity policies")
            .quorum_spec()
    }
}

/// Read access to decided history for application validators.
pub trait ChainHistory {
    fn root_block(&self, chain: &Hash) -> Option<&Block>;
    /// Decided blocks in slot order from slot 1; `None` where only the
    /// proof is known.
    fn decided_blocks(&self, chain: &Hash) -> Vec<Option<&Block>>;
}

/// Application-level checks run before a server lends its vote.
pub trait AppValidator: Send {
    fn validate(
        &self,
        block: &Block,
        instance: &InstanceId,
        history: &dyn ChainHistory,
    ) -> Result<(), String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FernBehavior {
    #[default]
    Honest,
    /// Signs every value it hears about and splits its proposals.
    Equivocate,
    /// Answers every client request with a fabricated rejection, then
    /// participates normally.
    ForgeReject,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FernEvent {
    Proposed {
        instance: InstanceId,
        value: Hash,
        round: u64,
        time_us: u64,
    },
    Committed {
        instance: InstanceId,
        value: Hash,
        time_us: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Register,
    Append,
    Endorse,
}

struct Instance {
    kind: Kind,
    replica: Replica,
    requesters: BTreeMap<Hash, BTreeSet<ServerId>>,
    timer_round: Option<u64>,
    closed: bool,
}

#[derive(Default)]
struct ByzInstance {
    spec: Option<QuorumSpec>,
    values: BTreeSet<Hash>,
    sent: BTreeSet<(Phase, u64, Hash)>,
    accepts: BTreeMap<Hash, BTreeMap<ServerId, ProtocolMessage>>,
    proved: BTreeSet<Hash>,
}

const MAX_EARLY: usize = 4096;

pub struct Fern {
    key: Keypair,
    consortium: Option<QuorumSpec>,
    config: ReplicaConfig,
    behavior: FernBehavior,
    validator: Option<Box<dyn AppValidator>>,
    chains: BTreeMap<Hash, ChainRecord>,
    endorsements: BTreeMap<SlotClaim, (Hash, ProofOfConsensus)>,
    bodies: BTreeMap<Hash, Block>,
    instances: BTreeMap<InstanceId, Instance>,
    early: BTreeMap<InstanceId, Vec<ProtocolMessage>>,
    pending: Vec<ProofOfConsensus>,
    guard: LockTable,
    timers: BTreeMap<u64, (InstanceId, u64)>,
    next_token: u64,
    byz: BTreeMap<InstanceId, ByzInstance>,
    events: Vec<FernEvent>,
}

impl Fern {
    pub fn new(key: Keypair) -> Self {
        Fern {
            key,
            consortium: None,
            config: ReplicaConfig::default(),
            behavior: FernBehavior::Honest,
            validator: None,
            chains: BTreeMap::new(),
            endorsements: BTreeMap::new(),
            bodies: BTreeMap::new(),
            instances: BTreeMap::new(),
            early: BTreeMap::new(),
            pending: Vec::new(),
            guard: LockTable::default(),
            timers: BTreeMap::new(),
            next_token: 0,
            byz: BTreeMap::new(),
            events: Vec::new(),
        }
    }

    /// The consortium this server endorses blocks with.
    pub fn with_consortium(mut self, spec: QuorumSpec) -> Self {
        self.consortium = Some(spec);
        self
    }

    pub fn with_config(mut self, config: ReplicaConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_behavior(mut self, behavior: FernBehavior) -> Self {
        self.behavior = behavior;
        self
    }

    pub fn with_validator(mut self, v: Box<dyn AppValidator>) -> Self {
        self.validator = Some(v);
        self
    }

    pub fn id(&self) -> ServerId {
        self.key.id()
    }

    pub fn chain(&self, root: &Hash) -> Option<&ChainRecord> {
        self.chains.get(root)
    }

    pub fn chains(&self) -> &BTreeMap<Hash, ChainRecord> {
        &self.chains
    }

    pub fn endorsements(&self) -> &BTreeMap<SlotClaim, (Hash, ProofOfConsensus)> {
        &self.endorsements
    }

    pub fn events(&self) -> &[FernEvent] {
        &self.events
    }

    pub fn block_body(&self, hash: &Hash) -> Option<&Block> {
        self.bodies.get(hash)
    }

    /// Decided maps as JSON: `{chain_hex: {slot: block_hex}}`.
    pub fn decided_json(&self) -> serde_json::Value {
        let mut out = serde_json::Map::new();
        for (root, rec) in &self.chains {
            let slots: serde_json::Map<String, serde_json::Value> = rec
                .decided
                .iter()
                .map(|(s, (h, _))| (s.to_string(), json!(h.to_hex())))
                .collect();
            out.insert(root.to_hex(), serde_json::Value::Object(slots));
        }
        serde_json::Value::Object(out)
    }

    fn reject(&self, out: &mut Outbox, to: ServerId, value: Hash, reason: RejectReason) {
        out.send(to, Message::Rejected { value, reason });
    }

    fn forged_proof(&self, instance: &InstanceId, value: Hash) -> ProofOfConsensus {
        let fake = Hash(crate::crypto::hash_parts(&[b"forged", &value.0]).0);
        let accept = ProtocolMessage {
            instance: instance.clone(),
            phase: Phase::Accept,
            value: fake,
            round: 0,
            sender: self.id(),
            sig: Signature {
                signer: self.id(),
                bytes: [0; 64],
            },
        };
        let spec = QuorumSpec::threshold([self.id()], 1).expect("singleton spec");
        ProofOfConsensus {
            instance: instance.clone(),
            value: fake,
            accepts: vec![accept],
            spec,
        }
    }

    // ---- validation ----

    fn check_kinds(label: &Label) -> Result<(), RejectReason> {
        if label.availability.required_kind() != AttestationKind::StoreForever {
            return Err(RejectReason::UnknownKind);
        }
        match &label.integrity {
            Some(i) if i.required_kind() != AttestationKind::ProofOfConsensus => {
                Err(RejectReason::UnknownKind)
            }
            _ => Ok(()),
        }
    }

    fn check_availability(
        label: &Label,
        avail: &[AvailabilityAttestation],
    ) -> Result<(), RejectReason> {
        let only_avail = Label::new(label.availability.clone(), None);
        match label_satisfied(&only_avail, avail, &[]) {
            Ok(true) => Ok(()),
            Ok(false) | Err(PolicyError::MixedBlockHashes) => {
                Err(RejectReason::AvailabilityUnsatisfied)
            }
            Err(_) => Err(RejectReason::UnknownKind),
        }
    }

    fn check_reference(r: &Reference) -> Result<(), RejectReason> {
        r.validate()
            .map_err(|e| RejectReason::InvalidReference(e.to_string()))
    }

    /// Outcome of validating an append request.
    fn validate_append(
        &mut self,
        block: &Block,
        claims: &InstanceId,
        avail: &[AvailabilityAttestation],
        now_us: u64,
        out: &mut Outbox,
    ) -> Result<Result<QuorumSpec, ProofOfConsensus>, RejectReason> {
        let label = block.label();
        Self::check_kinds(label)?;
        if label.integrity.is_none() || &label.claims() != claims.claims() {
            return Err(RejectReason::ClaimsMismatch);
        }
        Self::check_availability(label, avail)?;

        if !claims
            .claims()
            .iter()
            .any(|c| self.chains.contains_key(&c.chain))
        {
            let c = claims
                .claims()
                .iter()
                .next()
                .expect("instances are non-empty");
            return Err(RejectReason::UnknownChain(c.chain));
        }
        let mut required: Option<Label> = None;
        let mut spec: Option<QuorumSpec> = None;
        for claim in claims.claims() {
            if claim.slot == 0 {
                return Err(RejectReason::RootClaimsSlot);
            }
            let root_ref = block
                .references()
                .iter()
                .find(|r| r.target == claim.chain)
                .ok_or(RejectReason::MissingPredecessor)?;
            Self::check_reference(root_ref)?;
            if root_ref
                .proof_for(&SlotClaim::new(claim.chain, 0))
                .is_none()
            {
                return Err(RejectReason::InvalidReference(
                    "root reference lacks its registration".into(),
                ));
            }
            let chain_label = match self.chains.get(&claim.chain) {
                Some(rec) => rec.label.clone(),
                None => root_ref.label_copy.clone(),
            };
            let chain_spec = chain_label
                .integrity
                .as_ref()
                .ok_or(RejectReason::InvalidReference(
                    "chain root without integrity policy".into(),
                ))?
                .quorum_spec()
                .clone();
            required = Some(match required {
                None => chain_label,
                Some(l) => label_meet(&l, &chain_label).map_err(|_| RejectReason::UnknownKind)?,
            });
            spec = Some(match spec {
                None => chain_spec,
                Some(s) => quorum_meet(&s, &chain_spec),
            });
            if !self.chains.contains_key(&claim.chain) {
                continue;
            }
            let pred = if claim.slot == 1 {
                None
            } else {
                let want = SlotClaim::new(claim.chain, claim.slot - 1);
                let r = block
                    .references()
                    .iter()
                    .find(|r| r.target != claim.chain && r.proof_for(&want).is_some())
                    .ok_or(RejectReason::MissingPredecessor)?;
                Self::check_reference(r)?;
                Some((r.target, r.proof_for(&want).expect("found above").clone()))
            };
            let rec = &self.chains[&claim.chain];
            if let Some((h, p)) = rec.decided.get(&claim.slot) {
                return if *h == block.root() {
                    Ok(Err(p.clone()))
                } else {
                    Err(RejectReason::SlotTaken(Box::new(p.clone())))
                };
            }
            if let Some((pred_hash, pred_proof)) = pred {
                if rec.next_slot() == claim.slot - 1 {
                    self.learn(pred_proof, now_us, out, false);
                }
                let rec = &self.chains[&claim.chain];
                match rec.decided.get(&(claim.slot - 1)) {
                    Some((h, _)) if *h == pred_hash => {}
                    Some((_, p)) => return Err(RejectReason::SlotTaken(Box::new(p.clone()))),
                    None => return Err(RejectReason::MissingPredecessor),
                }
            }
            if self.chains[&claim.chain].next_slot() != claim.slot {
                return Err(RejectReason::MissingPredecessor);
            }
        }

        if !label.at_least_as_strong(&required.expect("claims are non-empty")) {
            return Err(RejectReason::LabelTooWeak);
        }
        let spec = spec.expect("claims are non-empty");
        if !spec.participants().contains(&self.id()) {
            return Err(RejectReason::NotParticipant);
        }
        if let Some(v) = &self.validator {
            v.validate(block, claims, self)
                .map_err(RejectReason::AppRejected)?;
        }
        Ok(Ok(spec))
    }

    // ---- request handlers ----

    fn on_register(
        &mut self,
        now_us: u64,
        from: ServerId,
        root: Block,
        avail: Vec<AvailabilityAttestation>,
        out: &mut Outbox,
    ) {
        let value = root.root();
        let instance = InstanceId::single(value, 0);
        if self.behavior == FernBehavior::ForgeReject {
            let p = self.forged_proof(&instance, value);
            self.reject(out, from, value, RejectReason::SlotTaken(Box::new(p)));
        }
        if let Some(rec) = self.chains.get(&value) {
            out.send(from, Message::Granted(Box::new(rec.registration.clone())));
            return;
        }
        let label = root.label();
        let checked = Self::check_kinds(label).and_then(|_| {
            let Some(integrity) = &label.integrity else {
                return Err(RejectReason::ClaimsMismatch);
            };
            if !integrity.claims().is_empty() {
                return Err(RejectReason::RootClaimsSlot);
            }
            Self::check_availability(label, &avail).map_err(|_| RejectReason::LabelUnsatisfied)?;
            if !integrity.quorum_spec().participants().contains(&self.id()) {
                return Err(RejectReason::NotParticipant);
            }
            Ok(integrity.quorum_spec().clone())
        });
        match checked {
            Ok(spec) => {
                self.bodies.insert(value, root);
                self.start(now_us, Kind::Register, instance, spec, value, from, out);
            }
            Err(reason) => self.reject(out, from, value, reason),
        }
    }

    fn on_request(
        &mut self,
        now_us: u64,
        from: ServerId,
        block: Block,
        claims: InstanceId,
        avail: Vec<AvailabilityAttestation>,
        out: &mut Outbox,
    ) {
        let value = block.root();
        if self.behavior == FernBehavior::ForgeReject {
            let p = self.forged_proof(&claims, value);
            self.reject(out, from, value, RejectReason::SlotTaken(Box::new(p)));
        }
        match self.validate_append(&block, &claims, &avail, now_us, out) {
            Ok(Ok(spec)) => {
                self.bodies.insert(value, block);
                self.start(now_us, Kind::Append, claims, spec, value, from, out);
            }
            Ok(Err(existing)) => out.send(from, Message::Granted(Box::new(existing))),
            Err(reason) => self.reject(out, from, value, reason),
        }
    }

    fn on_endorse(
        &mut self,
        now_us: u64,
        from: ServerId,
        reference: Reference,
        claims: InstanceId,
        out: &mut Outbox,
    ) {
        let value = reference.target;
        if self.behavior == FernBehavior::ForgeReject {
            let p = self.forged_proof(&claims, value);
            self.reject(out, from, value, RejectReason::SlotTaken(Box::new(p)));
        }
        let checked = (|| {
            let spec = self
                .consortium
                .clone()
                .ok_or(RejectReason::NotParticipant)?;
            if !spec.participants().contains(&self.id()) {
                return Err(RejectReason::NotParticipant);
            }
            if let Some(c) = claims
                .claims()
                .iter()
                .find(|c| self.chains.contains_key(&c.chain))
            {
                return Err(RejectReason::ServesChain(c.chain));
            }
            Self::check_kinds(&reference.label_copy)?;
            Self::check_reference(&reference)?;
            let label_claims = reference.label_copy.claims();
            if !label_claims.is_empty() && &label_claims != claims.claims() {
                return Err(RejectReason::ClaimsMismatch);
            }
            for c in claims.claims() {
                if let Some((h, p)) = self.endorsements.get(c) {
                    if *h != value {
                        return Err(RejectReason::SlotTaken(Box::new(p.clone())));
                    }
                }
            }
            Ok(spec)
        })();
        match checked {
            Ok(spec) => {
                let done = claims
                    .claims()
                    .iter()
                    .map(|c| self.endorsements.get(c))
                    .collect::<Option<Vec<_>>>()
                    .and_then(|v| v.first().map(|(_, p)| p.clone()));
                match done {
                    Some(p) if p.instance == claims => {
                        out.send(from, Message::Granted(Box::new(p)))
                    }
                    _ => self.start(now_us, Kind::Endorse, claims, spec, value, from, out),
                }
            }
            Err(reason) => self.reject(out, from, value, reason),
        }
    }

    // ---- consensus plumbing ----

    #[allow(clippy::too_many_arguments)]
    fn start(
        &mut self,
        now_us: u64,
        kind: Kind,
        instance: InstanceId,
        spec: QuorumSpec,
        value: Hash,
        requester: ServerId,
        out: &mut Outbox,
    ) {
        if self.behavior == FernBehavior::Equivocate {
            let b = self.byz.entry(instance.clone()).or_default();
            b.spec = Some(spec);
            b.values.insert(value);
            self.byz_act(&instance, 0, out);
            return;
        }
        let fresh = !self.instances.contains_key(&instance);
        let inst = self
            .instances
            .entry(instance.clone())
            .or_insert_with(|| Instance {
                kind,
                replica: Replica::new(
                    self.key.clone(),
                    instance.clone(),
                    spec.clone(),
                    self.config,
                ),
                requesters: BTreeMap::new(),
                timer_round: None,
                closed: false,
            });
        if inst.replica.spec() != &spec {
            self.reject(out, requester, value, RejectReason::ClaimsMismatch);
            return;
        }
        inst.requesters.entry(value).or_default().insert(requester);
        if let Some(p) = inst.replica.decided().cloned() {
            if p.value == value {
                out.send(requester, Message::Granted(Box::new(p)));
            } else {
                self.reject(out, requester, value, RejectReason::SlotTaken(Box::new(p)));
            }
            return;
        }
        if inst.closed {
            self.reject(out, requester, value, RejectReason::GaveUp);
            return;
        }
        self.step(&instance, Input::Candidate(value), now_us, out);
        if fresh {
            for m in self.early.remove(&instance).unwrap_or_default() {
                self.step(&instance, Input::Message(m), now_us, out);
            }
        }
    }

    fn step(&mut self, instance: &InstanceId, input: Input, now_us: u64, out: &mut Outbox) {
        let Some(inst) = self.instances.get_mut(instance) else {
            return;
        };
        let Ok(outputs) = inst.replica.step(input, &mut self.guard) else {
            return;
        };
        let participants: Vec<ServerId> =
            inst.replica.spec().participants().iter().copied().collect();
        let me = self.key.id();
        for o in outputs {
            match o {
                Output::Broadcast(m) => {
                    if m.phase == Phase::Propose && m.sender == me {
                        self.events.push(FernEvent::Proposed {
                            instance: instance.clone(),
                            value: m.value,
                            round: m.round,
                            time_us: now_us,
                        });
                    }
                    for p in &participants {
                        if *p != me {
                            out.send(*p, Message::Protocol(m.clone()));
                        }
                    }
                }
                Output::Decided(p) => self.learn(p, now_us, out, true),
            }
        }
        self.arm(instance, out);
    }

    fn arm(&mut self, instance: &InstanceId, out: &mut Outbox) {
        let Some(inst) = self.instances.get_mut(instance) else {
            return;
        };
        let r = inst.replica.round();
        if inst.closed || inst.replica.decided().is_some() || inst.timer_round == Some(r) {
            return;
        }
        inst.timer_round = Some(r);
        let token = self.next_token;
        self.next_token += 1;
        self.timers.insert(token, (instance.clone(), r));
        out.set_timer(inst.replica.timeout_us(), token);
    }

    fn on_protocol(&mut self, now_us: u64, m: ProtocolMessage, out: &mut Outbox) {
        if self.behavior == FernBehavior::Equivocate {
            self.byz_observe(m, out);
            return;
        }
        if self.instances.contains_key(&m.instance) {
            let instance = m.instance.clone();
            self.step(&instance, Input::Message(m), now_us, out);
        } else {
            let buf = self.early.entry(m.instance.clone()).or_default();
            if buf.len() < MAX_EARLY {
                buf.push(m);
            }
        }
    }

    /// Records a decision if it extends every claimed record contiguously;
    /// otherwise parks it until it does.
    fn learn(&mut self, proof: ProofOfConsensus, now_us: u64, out: &mut Outbox, gossip: bool) {
        if !proof.verify() {
            return;
        }
        let kind = match self.instances.get(&proof.instance) {
            Some(i) => i.kind,
            None => self.infer_kind(&proof),
        };
        let recorded = match kind {
            Kind::Register => self.record_registration(&proof),
            Kind::Append => self.record_append(&proof),
            Kind::Endorse => self.record_endorsement(&proof),
        };
        if !recorded {
            if kind == Kind::Append && !self.pending.contains(&proof) {
                self.pending.push(proof);
            }
            return;
        }
        self.events.push(FernEvent::Committed {
            instance: proof.instance.clone(),
            value: proof.value,
            time_us: now_us,
        });
        for c in proof.instance.claims() {
            self.guard.force_lock(*c, proof.value);
        }
        self.settle(&proof, out);
        if gossip {
            let me = self.id();
            for p in proof.spec.participants() {
                if *p != me {
                    out.send(*p, Message::Committed(Box::new(proof.clone())));
                }
            }
        }
        if kind == Kind::Append {
            self.flush_pending(now_us, out);
        }
    }

    fn infer_kind(&self, proof: &ProofOfConsensus) -> Kind {
        let claims = proof.instance.claims();
        if claims.len() == 1 && claims.iter().all(|c| c.slot == 0 && c.chain == proof.value) {
            Kind::Register
        } else if claims.iter().any(|c| self.chains.contains_key(&c.chain)) {
            Kind::Append
        } else {
            Kind::Endorse
        }
    }

    fn record_registration(&mut self, proof: &ProofOfConsensus) -> bool {
        if self.chains.contains_key(&proof.value) {
            return true;
        }
        let Some(root) = self.bodies.get(&proof.value) else {
            return false;
        };
        let rec = ChainRecord {
            root: proof.value,
            label: root.label().clone(),
            registration: proof.clone(),
            decided: BTreeMap::new(),
        };
        self.chains.insert(proof.value, rec);
        true
    }

    fn record_append(&mut self, proof: &ProofOfConsensus) -> bool {
        let claims = proof.instance.claims();
        let served: Vec<SlotClaim> = claims
            .iter()
            .filter(|c| self.chains.contains_key(&c.chain))
            .copied()
            .collect();
        if served.is_empty() || self.is_recorded(proof) {
            return false;
        }
        if !served
            .iter()
            .all(|c| self.chains[&c.chain].next_slot() == c.slot)
        {
            return false;
        }
        for c in served {
            let rec = self.chains.get_mut(&c.chain).expect("served");
            rec.decided.insert(c.slot, (proof.value, proof.clone()));
        }
        true
    }

    /// Some served slot of the proof is already decided.
    fn is_stale(&self, proof: &ProofOfConsensus) -> bool {
        proof.instance.claims().iter().any(|c| {
            self.chains
                .get(&c.chain)
                .is_some_and(|r| c.slot < r.next_slot())
        })
    }

    fn is_recorded(&self, proof: &ProofOfConsensus) -> bool {
        let mut served = proof
            .instance
            .claims()
            .iter()
            .filter_map(|c| self.chains.get(&c.chain).map(|r| (r, c.slot)))
            .peekable();
        served.peek().is_some()
            && served.all(|(r, slot)| r.decided.get(&slot).is_some_and(|(h, _)| *h == proof.value))
    }

    fn record_endorsement(&mut self, proof: &ProofOfConsensus) -> bool {
        if proof.instance.claims().iter().all(|c| {
            self.endorsements
                .get(c)
                .is_some_and(|(h, _)| *h == proof.value)
        }) {
            return false;
        }
        for c in proof.instance.claims() {
            self.endorsements
                .entry(*c)
                .or_insert((proof.value, proof.clone()));
        }
        true
    }

    fn flush_pending(&mut self, now_us: u64, out: &mut Outbox) {
        loop {
            let pending = std::mem::take(&mut self.pending);
            let mut progressed = false;
            for p in pending {
                if self.record_append(&p) {
                    progressed = true;
                    self.events.push(FernEvent::Committed {
                        instance: p.instance.clone(),
                        value: p.value,
                        time_us: now_us,
                    });
                    for c in p.instance.claims() {
                        self.guard.force_lock(*c, p.value);
                    }
                    self.settle(&p, out);
                } else if !self.is_stale(&p) {
                    self.pending.push(p);
                }
            }
            if !progressed {
                return;
            }
        }
    }

    /// Answers everyone waiting on instances the proof decides or defeats.
    fn settle(&mut self, proof: &ProofOfConsensus, out: &mut Outbox) {
        let affected: Vec<InstanceId> = self
            .instances
            .keys()
            .filter(|i| {
                i.claims()
                    .iter()
                    .any(|c| proof.instance.claims().contains(c))
            })
            .cloned()
            .collect();
        for id in affected {
            let inst = self.instances.get_mut(&id).expect("listed above");
            if inst.closed {
                continue;
            }
            if id == proof.instance {
                inst.replica.learn(proof.clone());
            }
            inst.closed = true;
            self.guard.release(&id);
            for (value, who) in std::mem::take(&mut inst.requesters) {
                for r in who {
                    if value == proof.value {
                        out.send(r, Message::Granted(Box::new(proof.clone())));
                    } else {
                        out.send(
                            r,
                            Message::Rejected {
                                value,
                                reason: RejectReason::SlotTaken(Box::new(proof.clone())),
                            },
                        );
                    }
                }
            }
        }
    }

    fn on_timer(&mut self, now_us: u64, token: u64, out: &mut Outbox) {
        let Some((instance, round)) = self.timers.remove(&token) else {
            return;
        };
        let Some(inst) = self.instances.get_mut(&instance) else {
            return;
        };
        if inst.closed || inst.replica.decided().is_some() || inst.replica.round() != round {
            return;
        }
        inst.timer_round = None;
        if inst.replica.exhausted() {
            inst.closed = true;
            self.guard.release(&instance);
            for (value, who) in std::mem::take(&mut inst.requesters) {
                for r in who {
                    out.send(
                        r,
                        Message::Rejected {
                            value,
                            reason: RejectReason::GaveUp,
                        },
                    );
                }
            }
            return;
        }
        self.step(&instance, Input::Timeout, now_us, out);
    }

    // ---- byzantine behaviour ----

    fn byz_observe(&mut self, m: ProtocolMessage, out: &mut Outbox) {
        let instance = m.instance.clone();
        let round = m.round;
        let b = self.byz.entry(instance.clone()).or_default();
        b.values.insert(m.value);
        if m.phase == Phase::Accept && m.verify() {
            b.accepts.entry(m.value).or_default().insert(m.sender, m);
        }
        self.byz_act(&instance, round, out);
    }

    fn byz_act(&mut self, instance: &InstanceId, round: u64, out: &mut Outbox) {
        let key = self.key.clone();
        let me = key.id();
        let Some(b) = self.byz.get_mut(instance) else {
            return;
        };
        let Some(spec) = b.spec.clone() else {
            return;
        };
        let peers: Vec<ServerId> = spec
            .participants()
            .iter()
            .copied()
            .filter(|p| *p != me)
            .collect();
        let values: Vec<Hash> = b.values.iter().copied().collect();
        // Split proposals: peer i hears value i mod k.
        if b.sent.insert((Phase::Propose, round, Hash::ZERO)) {
            for (i, p) in peers.iter().enumerate() {
                let v = values[i % values.len()];
                let m = ProtocolMessage::sign(&key, instance.clone(), Phase::Propose, v, round);
                out.send(*p, Message::Protocol(m));
            }
        }
        for v in &values {
            for phase in [Phase::Prepare, Phase::Accept] {
                if b.sent.insert((phase, round, *v)) {
                    let m = ProtocolMessage::sign(&key, instance.clone(), phase, *v, round);
                    if phase == Phase::Accept {
                        b.accepts.entry(*v).or_default().insert(me, m.clone());
                    }
                    for p in &peers {
                        out.send(*p, Message::Protocol(m.clone()));
                    }
                }
            }
        }
        for (v, accepts) in &b.accepts {
            if b.proved.contains(v) {
                continue;
            }
            if let Ok(p) = crate::consensus::assemble_proof(accepts.values().cloned(), &spec) {
                b.proved.insert(*v);
                for peer in &peers {
                    out.send(*peer, Message::Committed(Box::new(p.clone())));
                }
            }
        }
    }
}

impl ChainHistory for Fern {
    fn root_block(&self, chain: &Hash) -> Option<&Block> {
        self.bodies.get(chain)
    }

    fn decided_blocks(&self, chain: &Hash) -> Vec<Option<&Block>> {
        self.chains
            .get(chain)
            .map(|r| {
                r.decided
                    .values()
                    .map(|(h, _)| self.bodies.get(h))
                    .collect()
            })
            .unwrap_or_default()
    }
}

impl Service for Fern {
    fn handle(&mut self, now_us: u64, from: ServerId, msg: Message, out: &mut Outbox) {
        match msg {
            Message::Register { root, avail } => self.on_register(now_us, from, root, avail, out),
            Message::RequestIntegrity {
                block,
                claims,
                avail,
            } => self.on_request(now_us, from, block, claims, avail, out),
            Message::Endorse { reference, claims } => {
                self.on_endorse(now_us, from, *reference, claims, out)
            }
            Message::Protocol(m) => self.on_protocol(now_us, m, out),
            Message::Committed(p) => self.learn(*p, now_us, out, false),
            Message::GetDecided(chain) => {
                let entries = self
                    .chains
                    .get(&chain)
                    .map(|r| r.decided.iter().map(|(s, (h, _))| (*s, *h)).collect())
                    .unwrap_or_default();
                out.send(from, Message::Decided { chain, entries });
            }
            _ => {}
        }
    }

    fn timer(&mut self, now_us: u64, token: u64, out: &mut Outbox) {
        self.on_timer(now_us, token, out);
    }
}
