//! Timestamping servers and the ancestry index that turns their blocks into
//! "stored no later than" evidence.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::block::{build_block, Block};
use crate::chains::{reference_unchecked, Reference};
use crate::codec::{Decode, Encode};
use crate::crypto::{Hash, Keypair, ServerId};
use crate::message::Message;
use crate::policy::{AvailabilityPolicy, GoodSetFamily, Label};
use crate::service::{Outbox, Service};
use crate::wilbur::{AvailabilityAttestation, Wilbur};

pub const DEFAULT_BATCH: usize = 10;
pub const DEFAULT_THRESHOLD: usize = 3;

/// Payload of a timestamp block.
pub fn timestamp_payload(server: ServerId, time_us: u64) -> Vec<u8> {
    (server, time_us).encode()
}

pub fn parse_timestamp(block: &Block) -> Option<(ServerId, u64)> {
    let payload = block.payloads().next()?;
    <(ServerId, u64)>::decode(payload).ok()
}

/// The label every timestamp block of `server` carries: stored by its
/// author, no integrity requirement.
pub fn timestamp_label(server: ServerId) -> Label {
    Label::new(
        AvailabilityPolicy::new(GoodSetFamily::singleton(server), 1).expect("one copy"),
        None,
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Emitted {
    pub hash: Hash,
    pub time_us: u64,
    pub client_refs: usize,
}

/// An availability server that also issues timestamp blocks.
///
/// Every `batch` newly stored client blocks it emits a block referencing
/// them, any peer timestamps received since its last emission and its own
/// previous timestamp, then announces it to all peers. When blocks wait
/// without a full batch, or a peer announces a timestamp that covers client
/// blocks, it flushes after `idle_us` so peers entangle promptly.
pub struct TimestampServer {
    wilbur: Wilbur,
    peers: Vec<ServerId>,
    batch: usize,
    idle_us: u64,
    stamp_servers: BTreeSet<ServerId>,
    clients: Vec<Reference>,
    peer_stamps: Vec<Reference>,
    primary_waiting: bool,
    prev: Option<Reference>,
    last_time: u64,
    armed: bool,
    last_activity: u64,
    emitted: Vec<Emitted>,
}

impl TimestampServer {
    pub fn new(key: Keypair, peers: Vec<ServerId>, batch: usize) -> Self {
        assert!(batch >= 1, "batch must be at least 1");
        let me = key.id();
        let stamp_servers = peers.iter().copied().chain([me]).collect();
        TimestampServer {
            wilbur: Wilbur::in_memory(key),
            peers: peers.into_iter().filter(|p| *p != me).collect(),
            batch,
            idle_us: 50_000,
            stamp_servers,
            clients: Vec::new(),
            peer_stamps: Vec::new(),
            primary_waiting: false,
            prev: None,
            last_time: 0,
            armed: false,
            last_activity: 0,
            emitted: Vec::new(),
        }
    }

    pub fn with_idle(mut self, idle_us: u64) -> Self {
        self.idle_us = idle_us;
        self
    }

    pub fn id(&self) -> ServerId {
        self.wilbur.id()
    }

    pub fn wilbur(&self) -> &Wilbur {
        &self.wilbur
    }

    pub fn emitted(&self) -> &[Emitted] {
        &self.emitted
    }

    /// A reference to a block shaped like a timestamp of a known server.
    fn is_stamp(&self, r: &Reference) -> bool {
        let l = &r.label_copy;
        l.integrity.is_none()
            && l.availability.min_copies() == 1
            && self
                .stamp_servers
                .iter()
                .any(|s| l.availability.family() == &GoodSetFamily::singleton(*s))
    }

    fn emit(&mut self, now_us: u64, out: &mut Outbox) {
        let time = now_us.max(self.last_time);
        let me = self.id();
        let client_refs = self.clients.len();
        let mut refs = std::mem::take(&mut self.clients);
        refs.append(&mut self.peer_stamps);
        refs.extend(self.prev.take());
        let block = build_block(vec![timestamp_payload(me, time)], refs, timestamp_label(me));
        let att = self.wilbur.store_block(&block).expect("in-memory store");
        self.prev = Some(reference_unchecked(&block, vec![att.clone()], vec![]));
        self.last_time = time;
        self.primary_waiting = false;
        self.emitted.push(Emitted {
            hash: block.root(),
            time_us: time,
            client_refs,
        });
        for p in &self.peers {
            out.send(
                *p,
                Message::Announce {
                    block: block.clone(),
                    att: att.clone(),
                },
            );
        }
    }

    fn arm(&mut self, now_us: u64, out: &mut Outbox) {
        self.last_activity = now_us;
        if !self.armed && (!self.clients.is_empty() || self.primary_waiting) {
            self.armed = true;
            out.set_timer(self.idle_us, 0);
        }
    }

    fn on_store(&mut self, from: ServerId, block: Block, now_us: u64, out: &mut Outbox) {
        let fresh = !self.wilbur.store().contains(&block.root());
        let Ok(att) = self.wilbur.store_block(&block) else {
            return;
        };
        out.send(from, Message::Stored(att.clone()));
        if fresh {
            self.clients
                .push(reference_unchecked(&block, vec![att], vec![]));
            if self.clients.len() >= self.batch {
                self.emit(now_us, out);
            }
        }
        self.arm(now_us, out);
    }

    fn on_announce(
        &mut self,
        now_us: u64,
        from: ServerId,
        block: Block,
        att: AvailabilityAttestation,
        out: &mut Outbox,
    ) {
        if att.server != from
            || att.block != block.root()
            || !att.verify()
            || !self.stamp_servers.contains(&from)
        {
            return;
        }
        if self.wilbur.store().contains(&block.root()) {
            return;
        }
        let _ = self.wilbur.store_block(&block);
        let r = reference_unchecked(&block, vec![att], vec![]);
        if !self.is_stamp(&r) {
            return;
        }
        if block.references().iter().any(|x| !self.is_stamp(x)) {
            self.primary_waiting = true;
        }
        self.peer_stamps.push(r);
        self.arm(now_us, out);
    }
}

impl Service for TimestampServer {
    fn handle(&mut self, now_us: u64, from: ServerId, msg: Message, out: &mut Outbox) {
        match msg {
            Message::StoreBlock(b) => self.on_store(from, b, now_us, out),
            Message::Announce { block, att } => self.on_announce(now_us, from, block, att, out),
            other => self.wilbur.handle(now_us, from, other, out),
        }
    }

    fn timer(&mut self, now_us: u64, _token: u64, out: &mut Outbox) {
        self.armed = false;
        let due = self.last_activity + self.idle_us;
        if now_us < due {
            self.armed = true;
            out.set_timer(due - now_us, 0);
        } else if !self.clients.is_empty() || self.primary_waiting {
            self.emit(now_us, out);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Insufficient {
    pub found: usize,
    pub needed: usize,
}

/// For every block, the earliest timestamp of each server that has it as
/// an ancestor (or is it).
#[derive(Clone, Debug, Default)]
pub struct TimestampIndex {
    earliest: HashMap<Hash, BTreeMap<ServerId, u64>>,
}

impl TimestampIndex {
    /// Indexes timestamp blocks, walking ancestry through `fetch`. Blocks
    /// `fetch` cannot return are treated as leaves.
    pub fn build(stamps: &[Block], fetch: &dyn Fn(&Hash) -> Option<Block>) -> Self {
        let mut by_server: BTreeMap<ServerId, Vec<(u64, &Block)>> = BTreeMap::new();
        for b in stamps {
            if let Some((s, t)) = parse_timestamp(b) {
                by_server.entry(s).or_default().push((t, b));
            }
        }
        let mut earliest: HashMap<Hash, BTreeMap<ServerId, u64>> = HashMap::new();
        for (server, mut list) in by_server {
            list.sort_by_key(|(t, b)| (*t, b.root()));
            // Visiting in time order means the first visit is the earliest,
            // so anything already seen for this server is pruned.
            let mut seen: HashSet<Hash> = HashSet::new();
            for (t, b) in list {
                let mut stack = vec![(b.root(), Some(b.clone()))];
                while let Some((h, body)) = stack.pop() {
                    if !seen.insert(h) {
                        continue;
                    }
                    earliest.entry(h).or_default().insert(server, t);
                    if let Some(body) = body.or_else(|| fetch(&h)) {
                        for r in body.references() {
                            if !seen.contains(&r.target) {
                                stack.push((r.target, None));
                            }
                        }
                    }
                }
            }
        }
        TimestampIndex { earliest }
    }

    /// Per server, the earliest time it vouches `block` existed by.
    pub fn timestamped_by(
        &self,
        block: &Hash,
        threshold: usize,
    ) -> Result<Vec<(ServerId, u64)>, Insufficient> {
        let found: Vec<(ServerId, u64)> = self
            .earliest
            .get(block)
            .map(|m| m.iter().map(|(s, t)| (*s, *t)).collect())
            .unwrap_or_default();
        if found.len() < threshold {
            return Err(Insufficient {
                found: found.len(),
                needed: threshold,
            });
        }
        Ok(found)
    }
}
