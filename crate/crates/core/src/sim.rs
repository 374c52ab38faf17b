//! Deterministic discrete-event network simulator.
//!
//! Events are ordered by `(virtual time, insertion counter)`. Each directed
//! link draws latency and loss from its own seeded generator, so traffic on
//! one link never perturbs another.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientOp, Step};
use crate::codec::Encode;
use crate::consensus::{conflicts, ProofOfConsensus, ReplicaConfig, SlotClaim};
use crate::crypto::{hash_parts, Hash, Keypair, ServerId};
use crate::fern::{Fern, FernBehavior};
use crate::message::{Message, RejectReason};
use crate::service::{Outbox, Service};
use crate::wilbur::Wilbur;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Latency {
    Fixed { us: u64 },
    Uniform { lo_us: u64, hi_us: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Everything the node sends is lost.
    Mute,
    Equivocate,
    ForgeReject,
    /// An availability server that attests but keeps nothing.
    DropStorage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub latency: Latency,
    pub drop_rate: f64,
    /// Processing time per handled event on server nodes.
    pub service_us: u64,
    /// Faults keyed by node name.
    pub faults: BTreeMap<String, Fault>,
    /// Budget of virtual time for a single `run_ops` call.
    pub max_time_us: u64,
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            latency: Latency::Uniform {
                lo_us: 5_000,
                hi_us: 15_000,
            },
            drop_rate: 0.0,
            service_us: 200,
            faults: BTreeMap::new(),
            max_time_us: 600_000_000,
            record_trace: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    ConfigInvalid(String),
}

impl SimConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_fault(mut self, name: &str, fault: Fault) -> Self {
        self.faults.insert(name.to_string(), fault);
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(SimError::ConfigInvalid(format!(
                "drop_rate {} outside [0, 1]",
                self.drop_rate
            )));
        }
        if let Latency::Uniform { lo_us, hi_us } = self.latency {
            if lo_us > hi_us {
                return Err(SimError::ConfigInvalid(format!(
                    "latency range {lo_us}..{hi_us} is empty"
                )));
            }
        }
        if self.max_time_us == 0 {
            return Err(SimError::ConfigInvalid(
                "max_time_us must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time_us: u64,
    pub from: ServerId,
    pub to: ServerId,
    pub digest: Hash,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Metrics {
    pub messages_total: u64,
    pub dropped: u64,
    pub by_kind: BTreeMap<&'static str, u64>,
}

/// The op ran out of virtual time before finishing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stalled;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpResult<T> {
    pub client: ServerId,
    pub started_us: u64,
    pub finished_us: u64,
    pub outcome: Result<T, Stalled>,
}

impl<T> OpResult<T> {
    pub fn latency_us(&self) -> u64 {
        self.finished_us - self.started_us
    }
}

#[allow(clippy::large_enum_variant)]
enum Event {
    Deliver {
        from: ServerId,
        to: ServerId,
        msg: Message,
    },
    Timer {
        node: ServerId,
        token: u64,
    },
}

struct Node {
    name: String,
    service: Box<dyn Service>,
    busy_until: u64,
}

/// Watches every proof that crosses the network and records pairs that
/// contradict each other.
#[derive(Default)]
struct SafetyMonitor {
    seen: HashSet<Hash>,
    by_claim: BTreeMap<SlotClaim, BTreeMap<Hash, ProofOfConsensus>>,
    conflicts: Vec<(ProofOfConsensus, ProofOfConsensus)>,
}

impl SafetyMonitor {
    fn observe(&mut self, msg: &Message) {
        let p = match msg {
            Message::Granted(p) | Message::Committed(p) => p,
            Message::Rejected {
                reason: RejectReason::SlotTaken(p),
                ..
            } => p,
            _ => return,
        };
        if !self.seen.insert(crate::crypto::hash_bytes(&p.encode())) || !p.verify() {
            return;
        }
        for c in p.instance.claims() {
            let known = self.by_claim.entry(*c).or_default();
            if known.contains_key(&p.value) {
                continue;
            }
            for other in known.values() {
                if conflicts(other, p) {
                    self.conflicts.push((other.clone(), (**p).clone()));
                }
            }
            known.insert(p.value, (**p).clone());
        }
    }
}

pub struct Sim {
    config: SimConfig,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Event>,
    nodes: BTreeMap<ServerId, Node>,
    names: BTreeMap<String, ServerId>,
    clients: BTreeSet<ServerId>,
    links: BTreeMap<(ServerId, ServerId), ChaCha8Rng>,
    muted: BTreeSet<ServerId>,
    trace: Vec<TraceEntry>,
    metrics: Metrics,
    safety: SafetyMonitor,
}

impl Sim {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Sim {
            config,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            nodes: BTreeMap::new(),
            names: BTreeMap::new(),
            clients: BTreeSet::new(),
            links: BTreeMap::new(),
            muted: BTreeSet::new(),
            trace: Vec::new(),
            metrics: Metrics::default(),
            safety: SafetyMonitor::default(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn fault(&self, name: &str) -> Option<Fault> {
        self.config.faults.get(name).copied()
    }

    fn register(&mut self, name: &str, id: ServerId) {
        if self.fault(name) == Some(Fault::Mute) {
            self.muted.insert(id);
        }
        self.names.insert(name.to_string(), id);
    }

    /// Adds a server node. Mute faults apply to any node by name.
    pub fn add_service(&mut self, name: &str, id: ServerId, service: Box<dyn Service>) -> ServerId {
        self.register(name, id);
        self.nodes.insert(
            id,
            Node {
                name: name.to_string(),
                service,
                busy_until: 0,
            },
        );
        id
    }

    pub fn add_wilbur(&mut self, name: &str) -> ServerId {
        let mut w = Wilbur::in_memory(Keypair::from_name(name));
        if self.fault(name) == Some(Fault::DropStorage) {
            w = w.dropping_storage();
        }
        let id = w.id();
        self.add_service(name, id, Box::new(w))
    }

    pub fn add_fern(&mut self, name: &str, config: ReplicaConfig) -> ServerId {
        self.add_fern_with(name, |f| f.with_config(config))
    }

    /// Adds an integrity server, letting the caller finish building it.
    pub fn add_fern_with(&mut self, name: &str, build: impl FnOnce(Fern) -> Fern) -> ServerId {
        let behavior = match self.fault(name) {
            Some(Fault::Equivocate) => FernBehavior::Equivocate,
            Some(Fault::ForgeReject) => FernBehavior::ForgeReject,
            _ => FernBehavior::Honest,
        };
        let f = build(Fern::new(Keypair::from_name(name))).with_behavior(behavior);
        let id = f.id();
        self.add_service(name, id, Box::new(f))
    }

    pub fn add_client(&mut self, name: &str) -> ServerId {
        let id = Keypair::from_name(name).id();
        self.register(name, id);
        self.clients.insert(id);
        id
    }

    /// Every fault names a node that exists and suits its kind.
    pub fn check_faults(&self) -> Result<(), SimError> {
        for (name, fault) in &self.config.faults {
            let id = self
                .names
                .get(name)
                .ok_or_else(|| SimError::ConfigInvalid(format!("fault on unknown node {name}")))?;
            let fits = match fault {
                Fault::Mute => true,
                Fault::Equivocate | Fault::ForgeReject => self.node::<Fern>(id).is_some(),
                Fault::DropStorage => self.node::<Wilbur>(id).is_some(),
            };
            if !fits {
                return Err(SimError::ConfigInvalid(format!(
                    "{fault:?} does not apply to {name}"
                )));
            }
        }
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<ServerId> {
        self.names.get(name).copied()
    }

    pub fn name_of(&self, id: &ServerId) -> Option<&str> {
        self.nodes.get(id).map(|n| n.name.as_str())
    }

    pub fn node_ids(&self) -> Vec<ServerId> {
        self.nodes.keys().copied().collect()
    }

    pub fn wilbur_ids(&self) -> Vec<ServerId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.service.downcast_ref::<Wilbur>().is_some())
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn node<T: Service>(&self, id: &ServerId) -> Option<&T> {
        self.nodes
            .get(id)
            .and_then(|n| n.service.downcast_ref::<T>())
    }

    pub fn node_mut<T: Service>(&mut self, id: &ServerId) -> Option<&mut T> {
        self.nodes
            .get_mut(id)
            .and_then(|n| n.service.downcast_mut::<T>())
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// A digest of the whole trace, for cheap determinism checks.
    pub fn trace_digest(&self) -> Hash {
        let mut bytes = Vec::with_capacity(self.trace.len() * 104);
        for t in &self.trace {
            (t.time_us, t.from, t.to, t.digest).encode_to(&mut bytes);
        }
        crate::crypto::hash_bytes(&bytes)
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    /// Pairs of valid proofs seen on the wire that decide different blocks
    /// for the same slot.
    pub fn conflicts(&self) -> &[(ProofOfConsensus, ProofOfConsensus)] {
        &self.safety.conflicts
    }

    fn push(&mut self, time: u64, ev: Event) {
        self.queue.insert((time, self.seq), ev);
        self.seq += 1;
    }

    fn link(&mut self, from: ServerId, to: ServerId) -> &mut ChaCha8Rng {
        let seed = self.config.seed;
        self.links.entry((from, to)).or_insert_with(|| {
            let h = hash_parts(&[b"blockweb/sim-link/", &seed.to_be_bytes(), &from.0, &to.0]);
            ChaCha8Rng::from_seed(h.0)
        })
    }

    fn dispatch(&mut self, from: ServerId, sends: Vec<(ServerId, Message)>, depart: u64) {
        for (to, msg) in sends {
            if self.muted.contains(&from) {
                self.metrics.dropped += 1;
                continue;
            }
            self.safety.observe(&msg);
            *self.metrics.by_kind.entry(msg.kind_name()).or_default() += 1;
            self.metrics.messages_total += 1;
            let (latency, config_drop) = (self.config.latency, self.config.drop_rate);
            let rng = self.link(from, to);
            let lost = config_drop > 0.0 && rng.gen_bool(config_drop);
            let delay = match latency {
                Latency::Fixed { us } => us,
                Latency::Uniform { lo_us, hi_us } => rng.gen_range(lo_us..=hi_us),
            };
            if self.config.record_trace {
                self.trace.push(TraceEntry {
                    time_us: depart,
                    from,
                    to,
                    digest: msg.digest(),
                });
            }
            if lost {
                self.metrics.dropped += 1;
                continue;
            }
            self.push(depart + delay, Event::Deliver { from, to, msg });
        }
    }

    /// Injects a message from `from` at the current time.
    pub fn send(&mut self, from: ServerId, to: ServerId, msg: Message) {
        self.dispatch(from, vec![(to, msg)], self.now);
    }

    /// Runs a server event, or defers it while the server is busy. Returns
    /// client deliveries for the caller.
    fn process(&mut self, time: u64, ev: Event) -> Option<(ServerId, ServerId, Message)> {
        let node_id = match &ev {
            Event::Deliver { to, .. } => *to,
            Event::Timer { node, .. } => *node,
        };
        let Some(node) = self.nodes.get_mut(&node_id) else {
            return match ev {
                Event::Deliver { from, to, msg } if self.clients.contains(&to) => {
                    Some((from, to, msg))
                }
                _ => None,
            };
        };
        if node.busy_until > time {
            let at = node.busy_until;
            self.push(at, ev);
            return None;
        }
        let mut out = Outbox::default();
        match ev {
            Event::Deliver { from, msg, .. } => node.service.handle(time, from, msg, &mut out),
            Event::Timer { token, .. } => node.service.timer(time, token, &mut out),
        }
        node.busy_until = time + self.config.service_us;
        let depart = node.busy_until;
        for (delay, token) in out.timers {
            self.push(
                time + delay,
                Event::Timer {
                    node: node_id,
                    token,
                },
            );
        }
        self.dispatch(node_id, out.sends, depart);
        None
    }

    fn pop_until(&mut self, deadline: u64) -> Option<(u64, Event)> {
        let (&(t, s), _) = self.queue.first_key_value()?;
        if t > deadline {
            return None;
        }
        let ev = self.queue.remove(&(t, s)).expect("key just seen");
        Some((t, ev))
    }

    /// Processes events for `duration_us` of virtual time. Messages to
    /// clients are discarded.
    pub fn run_for(&mut self, duration_us: u64) {
        let deadline = self.now + duration_us;
        while let Some((t, ev)) = self.pop_until(deadline) {
            self.now = t;
            self.process(t, ev);
        }
        self.now = deadline;
    }

    /// Processes events until none remain or `max_time_us` passes.
    pub fn run_until_idle(&mut self) {
        let deadline = self.now + self.config.max_time_us;
        while let Some((t, ev)) = self.pop_until(deadline) {
            self.now = t;
            self.process(t, ev);
        }
    }

    /// Runs client ops, at most `window` at a time, starting queued ops as
    /// earlier ones finish. Results come back in input order.
    pub fn run_ops<O: ClientOp>(
        &mut self,
        ops: Vec<(ServerId, O)>,
        window: usize,
    ) -> Vec<OpResult<O::Output>> {
        let window = window.max(1);
        let total = ops.len();
        let mut queued: VecDeque<(usize, ServerId, O)> = ops
            .into_iter()
            .enumerate()
            .map(|(i, (c, o))| (i, c, o))
            .collect();
        let mut active: BTreeMap<usize, (ServerId, O, u64)> = BTreeMap::new();
        let mut results: Vec<Option<OpResult<O::Output>>> = (0..total).map(|_| None).collect();
        let deadline = self.now + self.config.max_time_us;

        loop {
            while active.len() < window {
                let Some((i, client, mut op)) = queued.pop_front() else {
                    break;
                };
                self.clients.insert(client);
                let now = self.now;
                match op.start(now) {
                    Step::Pending(out) => {
                        self.dispatch(client, out, now);
                        active.insert(i, (client, op, now));
                    }
                    Step::Done(v) => {
                        results[i] = Some(OpResult {
                            client,
                            started_us: now,
                            finished_us: now,
                            outcome: Ok(v),
                        });
                    }
                }
            }
            if active.is_empty() {
                break;
            }
            let Some((t, ev)) = self.pop_until(deadline) else {
                break;
            };
            self.now = t;
            let Some((from, to, msg)) = self.process(t, ev) else {
                continue;
            };
            let mine: Vec<usize> = active
                .iter()
                .filter(|(_, (c, _, _))| *c == to)
                .map(|(i, _)| *i)
                .collect();
            for i in mine {
                let (client, op, _) = active.get_mut(&i).expect("listed above");
                let client = *client;
                match op.on_reply(t, from, &msg) {
                    Step::Pending(out) => self.dispatch(client, out, t),
                    Step::Done(v) => {
                        let (_, _, started) = active.remove(&i).expect("listed above");
                        results[i] = Some(OpResult {
                            client,
                            started_us: started,
                            finished_us: t,
                            outcome: Ok(v),
                        });
                    }
                }
            }
        }

        if !active.is_empty() || !queued.is_empty() {
            self.now = self.now.max(deadline);
        }
        for (i, (client, _, started)) in active {
            results[i] = Some(OpResult {
                client,
                started_us: started,
                finished_us: self.now,
                outcome: Err(Stalled),
            });
        }
        for (i, client, _) in queued {
            results[i] = Some(OpResult {
                client,
                started_us: self.now,
                finished_us: self.now,
                outcome: Err(Stalled),
            });
        }
        results
            .into_iter()
            .map(|r| r.expect("every op resolved"))
            .collect()
    }

    pub fn run_op<O: ClientOp>(&mut self, client: ServerId, op: O) -> OpResult<O::Output> {
        self.run_ops(vec![(client, op)], 1)
            .pop()
            .expect("one op in, one result out")
    }
}
