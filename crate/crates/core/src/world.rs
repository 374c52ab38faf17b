//! Simulated deployments: chain clusters of integrity and availability
//! servers plus a client that mints, appends, fetches and verifies.

use thiserror::Error;

use crate::block::Block;
use crate::chains::{
    append_block, root_block, verify_chain, ChainError, ChainHead, Reference, VerifiedChain,
};
use crate::client::{AppendOutcome, BlockOp, StoreOp};
use crate::consensus::{ProofOfConsensus, QuorumSpec, ReplicaConfig};
use crate::crypto::{Hash, ServerId};
use crate::fern::Fern;
use crate::message::RejectReason;
use crate::policy::{AvailabilityPolicy, IntegrityPolicy, Label};
use crate::sim::{OpResult, Sim, SimConfig, SimError, Stalled};
use crate::wilbur::{AvailabilityAttestation, Wilbur};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorldError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("operation did not finish in the time budget")]
    Stalled,
    #[error("slot already decided for another block")]
    Lost(Box<ProofOfConsensus>),
    #[error("request rejected: {0:?}")]
    Rejected(Vec<(ServerId, RejectReason)>),
}

/// The servers behind one chain.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub ferns: Vec<ServerId>,
    pub wilburs: Vec<ServerId>,
    pub label: Label,
}

/// Tolerates `f` faulty integrity servers out of `3f + 1` and keeps every
/// block on `store_k` of the availability servers.
pub fn chain_label(ferns: &[ServerId], wilburs: &[ServerId], store_k: u32) -> Label {
    let avail =
        AvailabilityPolicy::k_of(wilburs.iter().copied(), store_k).expect("store_k within range");
    let spec = QuorumSpec::byzantine(ferns.iter().copied()).expect("at least one integrity server");
    Label::new(avail, Some(IntegrityPolicy::new(spec)))
}

pub struct World {
    pub sim: Sim,
    pub client: ServerId,
    pub replica: ReplicaConfig,
}

impl World {
    pub fn new(config: SimConfig) -> Result<Self, WorldError> {
        let mut sim = Sim::new(config)?;
        let client = sim.add_client("client");
        Ok(World {
            sim,
            client,
            replica: ReplicaConfig::default(),
        })
    }

    /// Adds `ferns` integrity and `wilburs` availability servers named
    /// `{prefix}-fern{i}` and `{prefix}-wilbur{i}`.
    pub fn add_cluster(
        &mut self,
        prefix: &str,
        ferns: usize,
        wilburs: usize,
        store_k: u32,
    ) -> Cluster {
        self.add_cluster_with(prefix, ferns, wilburs, store_k, |f| f)
    }

    /// Like [`World::add_cluster`], finishing each integrity server with
    /// `build`.
    pub fn add_cluster_with(
        &mut self,
        prefix: &str,
        ferns: usize,
        wilburs: usize,
        store_k: u32,
        build: impl Fn(Fern) -> Fern,
    ) -> Cluster {
        let fs: Vec<ServerId> = (0..ferns)
            .map(|i| self.add_fern_with(&format!("{prefix}-fern{i}"), &build))
            .collect();
        let ws: Vec<ServerId> = (0..wilburs)
            .map(|i| self.sim.add_wilbur(&format!("{prefix}-wilbur{i}")))
            .collect();
        let label = chain_label(&fs, &ws, store_k);
        Cluster {
            ferns: fs,
            wilburs: ws,
            label,
        }
    }

    /// The default shape: four integrity servers and four availability
    /// servers storing on three.
    pub fn add_default_cluster(&mut self, prefix: &str) -> Cluster {
        self.add_cluster(prefix, 4, 4, 3)
    }

    pub fn add_fern_with(&mut self, name: &str, build: impl FnOnce(Fern) -> Fern) -> ServerId {
        let cfg = self.replica;
        self.sim
            .add_fern_with(name, move |f| build(f.with_config(cfg)))
    }

    fn settle(r: OpResult<AppendOutcome>) -> Result<(Block, Reference), WorldError> {
        match r.outcome.map_err(|Stalled| WorldError::Stalled)? {
            AppendOutcome::Appended { block, reference } => Ok((block, reference)),
            AppendOutcome::Lost(p) => Err(WorldError::Lost(Box::new(p))),
            AppendOutcome::Rejected(r) => Err(WorldError::Rejected(r)),
            AppendOutcome::Invalid(e) => Err(WorldError::Chain(e)),
        }
    }

    /// Mints and registers a chain root.
    pub fn mint(&mut self, label: &Label, payload: Vec<Vec<u8>>) -> Result<ChainHead, WorldError> {
        let root = root_block(label.clone(), payload);
        let r = self.sim.run_op(self.client, BlockOp::mint_root(root));
        let (_, reference) = Self::settle(r)?;
        Ok(ChainHead::from_root(reference))
    }

    /// Appends one block to every chain in `heads` and advances them.
    pub fn append(
        &mut self,
        heads: &mut [&mut ChainHead],
        payload: Vec<Vec<u8>>,
    ) -> Result<Block, WorldError> {
        let snapshot: Vec<ChainHead> = heads.iter().map(|h| (**h).clone()).collect();
        let op = BlockOp::append(&snapshot, payload)?;
        let r = self.sim.run_op(self.client, op);
        let (block, reference) = Self::settle(r)?;
        for h in heads.iter_mut() {
            h.advance(reference.clone());
        }
        Ok(block)
    }

    /// Runs several appends concurrently from distinct clients; each op is
    /// built against the heads as they are now.
    pub fn race(
        &mut self,
        attempts: Vec<(Vec<ChainHead>, Vec<Vec<u8>>)>,
    ) -> Result<Vec<OpResult<AppendOutcome>>, WorldError> {
        let mut ops = Vec::new();
        for (i, (heads, payload)) in attempts.into_iter().enumerate() {
            let client = self.sim.add_client(&format!("racer{i}"));
            ops.push((client, BlockOp::append(&heads, payload)?));
        }
        let n = ops.len();
        Ok(self.sim.run_ops(ops, n))
    }

    pub fn store(&mut self, block: Block) -> Result<Vec<AvailabilityAttestation>, WorldError> {
        self.sim
            .run_op(self.client, StoreOp::new(block))
            .outcome
            .map_err(|Stalled| WorldError::Stalled)
    }

    /// Reads a block straight from any availability server holding it.
    pub fn fetch(&self, hash: &Hash) -> Option<Block> {
        fetch_from(&self.sim, hash)
    }

    pub fn verify(&self, head: &ChainHead) -> Result<VerifiedChain, ChainError> {
        verify_chain(&head.head, head.chain(), &|h| self.fetch(h))
    }

    pub fn fern(&self, id: &ServerId) -> &Fern {
        self.sim.node::<Fern>(id).expect("integrity server")
    }

    /// Lets in-flight messages drain.
    pub fn quiesce(&mut self) {
        self.sim.run_until_idle();
    }

    /// The block an append to `heads` would produce, without running it.
    pub fn preview(heads: &[ChainHead], payload: Vec<Vec<u8>>) -> Result<Block, ChainError> {
        append_block(heads, payload).map(|(b, _)| b)
    }
}

pub fn fetch_from(sim: &Sim, hash: &Hash) -> Option<Block> {
    sim.wilbur_ids()
        .into_iter()
        .find_map(|id| sim.node::<Wilbur>(&id).and_then(|w| w.store().get(hash)))
}
