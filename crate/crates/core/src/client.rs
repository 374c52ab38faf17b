//! Client-side request state machines, driven by the simulator or a socket
//! transport. Each op sends requests, digests replies and eventually
//! finishes with an outcome.

use std::collections::{BTreeMap, BTreeSet};

use crate::block::Block;
use crate::chains::{append_block, make_reference, ChainError, ChainHead, Reference};
use crate::consensus::{conflicts, InstanceId, ProofOfConsensus, QuorumSpec, SlotClaim};
use crate::crypto::{Hash, ServerId};
use crate::message::{Message, RejectReason};
use crate::policy::{label_satisfied, Label};
use crate::wilbur::{AvailabilityAttestation, NotFound};

pub type Outgoing = Vec<(ServerId, Message)>;

pub enum Step<T> {
    Pending(Outgoing),
    Done(T),
}

pub trait ClientOp {
    type Output;
    fn start(&mut self, now_us: u64) -> Step<Self::Output>;
    fn on_reply(&mut self, now_us: u64, from: ServerId, msg: &Message) -> Step<Self::Output>;
}

/// Stores a block on the servers its label names until the availability
/// policy is met.
pub struct StoreOp {
    block: Block,
    targets: Vec<ServerId>,
    atts: BTreeMap<ServerId, AvailabilityAttestation>,
}

impl StoreOp {
    pub fn new(block: Block) -> Self {
        let targets = block
            .label()
            .availability
            .family()
            .servers()
            .into_iter()
            .collect();
        StoreOp {
            block,
            targets,
            atts: BTreeMap::new(),
        }
    }

    pub fn to(block: Block, targets: Vec<ServerId>) -> Self {
        StoreOp {
            block,
            targets,
            atts: BTreeMap::new(),
        }
    }

    fn satisfied(&self) -> bool {
        let only_avail = Label::new(self.block.label().availability.clone(), None);
        let atts: Vec<_> = self.atts.values().cloned().collect();
        label_satisfied(&only_avail, &atts, &[]) == Ok(true)
    }
}

impl ClientOp for StoreOp {
    type Output = Vec<AvailabilityAttestation>;

    fn start(&mut self, _now_us: u64) -> Step<Self::Output> {
        Step::Pending(
            self.targets
                .iter()
                .map(|t| (*t, Message::StoreBlock(self.block.clone())))
                .collect(),
        )
    }

    fn on_reply(&mut self, _now_us: u64, from: ServerId, msg: &Message) -> Step<Self::Output> {
        if let Message::Stored(att) = msg {
            if att.block == self.block.root() && att.server == from && att.verify() {
                self.atts.insert(from, att.clone());
                if self.satisfied() {
                    return Step::Done(self.atts.values().cloned().collect());
                }
            }
        }
        Step::Pending(vec![])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    Granted(ProofOfConsensus),
    /// Another block won a claimed slot; carries its proof.
    Lost(ProofOfConsensus),
    Rejected(Vec<(ServerId, RejectReason)>),
}

/// Asks every participant of a spec to decide a value, and waits until a
/// valid proof arrives or the remaining servers can no longer form a quorum.
pub struct QuorumRequest {
    spec: QuorumSpec,
    value: Hash,
    claims: BTreeSet<SlotClaim>,
    request: Message,
    targets: Option<BTreeSet<ServerId>>,
    rejections: BTreeMap<ServerId, RejectReason>,
}

impl QuorumRequest {
    pub fn new(
        spec: QuorumSpec,
        value: Hash,
        claims: BTreeSet<SlotClaim>,
        request: Message,
    ) -> Self {
        QuorumRequest {
            spec,
            value,
            claims,
            request,
            targets: None,
            rejections: BTreeMap::new(),
        }
    }

    /// Restricts the request to `targets`; the rest of the spec never hears
    /// of it.
    pub fn with_targets(mut self, targets: impl IntoIterator<Item = ServerId>) -> Self {
        self.targets = Some(targets.into_iter().collect());
        self
    }

    fn asked(&self) -> BTreeSet<ServerId> {
        self.spec
            .participants()
            .iter()
            .filter(|p| self.targets.as_ref().is_none_or(|t| t.contains(p)))
            .copied()
            .collect()
    }

    pub fn register(root: &Block, avail: Vec<AvailabilityAttestation>) -> Option<Self> {
        let spec = root.label().integrity.as_ref()?.quorum_spec().clone();
        Some(QuorumRequest::new(
            spec,
            root.root(),
            [SlotClaim::new(root.root(), 0)].into(),
            Message::Register {
                root: root.clone(),
                avail,
            },
        ))
    }

    pub fn integrity(
        block: &Block,
        instance: InstanceId,
        spec: QuorumSpec,
        avail: Vec<AvailabilityAttestation>,
    ) -> Self {
        QuorumRequest::new(
            spec,
            block.root(),
            instance.claims().clone(),
            Message::RequestIntegrity {
                block: block.clone(),
                claims: instance,
                avail,
            },
        )
    }

    pub fn endorse(reference: Reference, claims: InstanceId, consortium: QuorumSpec) -> Self {
        QuorumRequest::new(
            consortium,
            reference.target,
            claims.claims().clone(),
            Message::Endorse {
                reference: Box::new(reference),
                claims,
            },
        )
    }
}

impl ClientOp for QuorumRequest {
    type Output = Decision;

    fn start(&mut self, _now_us: u64) -> Step<Decision> {
        Step::Pending(
            self.asked()
                .into_iter()
                .map(|p| (p, self.request.clone()))
                .collect(),
        )
    }

    fn on_reply(&mut self, _now_us: u64, from: ServerId, msg: &Message) -> Step<Decision> {
        if !self.spec.participants().contains(&from) {
            return Step::Pending(vec![]);
        }
        match msg {
            Message::Granted(p)
                if p.value == self.value
                    && self.claims.is_subset(p.instance.claims())
                    && p.verify() =>
            {
                return Step::Done(Decision::Granted((**p).clone()));
            }
            Message::Rejected { value, reason } if *value == self.value => {
                if let RejectReason::SlotTaken(p) = reason {
                    let shares = p.instance.claims().iter().any(|c| self.claims.contains(c));
                    if shares && p.value != self.value && p.verify() {
                        return Step::Done(Decision::Lost((**p).clone()));
                    }
                }
                self.rejections.insert(from, reason.clone());
                let rest: BTreeSet<ServerId> = self
                    .asked()
                    .into_iter()
                    .filter(|p| !self.rejections.contains_key(p))
                    .collect();
                if !self.spec.is_quorum(&rest) {
                    return Step::Done(Decision::Rejected(
                        self.rejections
                            .iter()
                            .map(|(k, v)| (*k, v.clone()))
                            .collect(),
                    ));
                }
            }
            _ => {}
        }
        Step::Pending(vec![])
    }
}

/// Reads a block from any of the given servers. Collects signed denials so
/// callers can audit them.
pub struct FetchOp {
    hash: Hash,
    servers: Vec<ServerId>,
    denials: Vec<NotFound>,
}

impl FetchOp {
    pub fn new(hash: Hash, servers: Vec<ServerId>) -> Self {
        FetchOp {
            hash,
            servers,
            denials: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchResult {
    pub block: Option<Block>,
    pub denials: Vec<NotFound>,
}

impl ClientOp for FetchOp {
    type Output = FetchResult;

    fn start(&mut self, _now_us: u64) -> Step<FetchResult> {
        Step::Pending(
            self.servers
                .iter()
                .map(|s| (*s, Message::GetBlock(self.hash)))
                .collect(),
        )
    }

    fn on_reply(&mut self, _now_us: u64, from: ServerId, msg: &Message) -> Step<FetchResult> {
        match msg {
            Message::BlockFound(b) if b.root() == self.hash && self.servers.contains(&from) => {
                return Step::Done(FetchResult {
                    block: Some(b.clone()),
                    denials: std::mem::take(&mut self.denials),
                });
            }
            Message::NotFound(nf) if nf.block == self.hash && nf.server == from && nf.verify() => {
                if !self.denials.iter().any(|d| d.server == from) {
                    self.denials.push(nf.clone());
                }
                if self.denials.len() == self.servers.len() {
                    return Step::Done(FetchResult {
                        block: None,
                        denials: std::mem::take(&mut self.denials),
                    });
                }
            }
            _ => {}
        }
        Step::Pending(vec![])
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended { block: Block, reference: Reference },
    Lost(ProofOfConsensus),
    Rejected(Vec<(ServerId, RejectReason)>),
    Invalid(ChainError),
}

#[allow(clippy::large_enum_variant)]
enum Phase2 {
    Store(StoreOp),
    Decide(QuorumRequest, Vec<AvailabilityAttestation>),
}

type MakeRequest = Box<dyn Fn(&Block, Vec<AvailabilityAttestation>) -> Option<QuorumRequest>>;

/// Stores a block, then obtains its proof of consensus: minting a chain
/// root (registration) or appending to chains.
pub struct BlockOp {
    block: Block,
    phase: Phase2,
    make_request: MakeRequest,
    targets: Option<Vec<ServerId>>,
}

impl BlockOp {
    pub fn mint_root(root: Block) -> Self {
        BlockOp {
            phase: Phase2::Store(StoreOp::new(root.clone())),
            block: root,
            make_request: Box::new(QuorumRequest::register),
            targets: None,
        }
    }

    pub fn append(heads: &[ChainHead], payload: Vec<Vec<u8>>) -> Result<Self, ChainError> {
        let (block, instance) = append_block(heads, payload)?;
        let spec = block
            .label()
            .integrity
            .as_ref()
            .expect("chain labels have integrity policies")
            .quorum_spec()
            .clone();
        Ok(BlockOp::append_built(block, instance, spec))
    }

    pub fn append_built(block: Block, instance: InstanceId, spec: QuorumSpec) -> Self {
        BlockOp {
            phase: Phase2::Store(StoreOp::new(block.clone())),
            block,
            make_request: Box::new(move |b, avail| {
                Some(QuorumRequest::integrity(
                    b,
                    instance.clone(),
                    spec.clone(),
                    avail,
                ))
            }),
            targets: None,
        }
    }

    /// Sends the consensus request only to `targets`.
    pub fn targeting(mut self, targets: Vec<ServerId>) -> Self {
        self.targets = Some(targets);
        self
    }

    pub fn block(&self) -> &Block {
        &self.block
    }

    fn advance(
        &mut self,
        now_us: u64,
        step: Step<Vec<AvailabilityAttestation>>,
    ) -> Step<AppendOutcome> {
        match step {
            Step::Pending(out) => Step::Pending(out),
            Step::Done(avail) => {
                let Some(mut req) = (self.make_request)(&self.block, avail.clone()) else {
                    return Step::Done(AppendOutcome::Invalid(ChainError::LabelUnsatisfied));
                };
                if let Some(t) = &self.targets {
                    req = req.with_targets(t.iter().copied());
                }
                let first = req.start(now_us);
                self.phase = Phase2::Decide(req, avail);
                match first {
                    Step::Pending(out) => Step::Pending(out),
                    Step::Done(d) => self.finish(d),
                }
            }
        }
    }

    fn finish(&mut self, d: Decision) -> Step<AppendOutcome> {
        let Phase2::Decide(_, avail) = &self.phase else {
            unreachable!("finish only after store");
        };
        Step::Done(match d {
            Decision::Granted(p) => match make_reference(&self.block, avail.clone(), vec![p]) {
                Ok(reference) => AppendOutcome::Appended {
                    block: self.block.clone(),
                    reference,
                },
                Err(e) => AppendOutcome::Invalid(e),
            },
            Decision::Lost(p) => AppendOutcome::Lost(p),
            Decision::Rejected(r) => AppendOutcome::Rejected(r),
        })
    }
}

impl ClientOp for BlockOp {
    type Output = AppendOutcome;

    fn start(&mut self, now_us: u64) -> Step<AppendOutcome> {
        let Phase2::Store(s) = &mut self.phase else {
            unreachable!("start is called once");
        };
        let step = s.start(now_us);
        self.advance(now_us, step)
    }

    fn on_reply(&mut self, now_us: u64, from: ServerId, msg: &Message) -> Step<AppendOutcome> {
        match &mut self.phase {
            Phase2::Store(s) => {
                let step = s.on_reply(now_us, from, msg);
                self.advance(now_us, step)
            }
            Phase2::Decide(req, _) => match req.on_reply(now_us, from, msg) {
                Step::Pending(out) => Step::Pending(out),
                Step::Done(d) => self.finish(d),
            },
        }
    }
}

/// Whether two decisions contradict each other.
pub fn decisions_conflict(a: &ProofOfConsensus, b: &ProofOfConsensus) -> bool {
    conflicts(a, b)
}

impl<T> ClientOp for Box<dyn ClientOp<Output = T>> {
    type Output = T;

    fn start(&mut self, now_us: u64) -> Step<T> {
        (**self).start(now_us)
    }

    fn on_reply(&mut self, now_us: u64, from: ServerId, msg: &Message) -> Step<T> {
        (**self).on_reply(now_us, from, msg)
    }
}
