//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use blockweb::bank::{Bank, BankError};
use blockweb::block::{Block, Leaf, LeafKind};
use blockweb::chains::{append_block, reference_unchecked, root_block, ChainHead, Reference};
use blockweb::client::{Decision, QuorumRequest};
use blockweb::consensus::{
    assemble_proof, InstanceId, Phase, ProofOfConsensus, ProtocolMessage, QuorumSpec,
};
use blockweb::crypto::{Hash, Keypair, ServerId};
use blockweb::harness::reference_config;
use blockweb::policy::{GoodSetFamily, Label};
use blockweb::wilbur::AvailabilityAttestation;
use blockweb::world::{chain_label, World};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- chains built offline with known keys ----

/// Signs blocks and proofs for one chain without a network, so tests can
/// produce histories honest servers never would.
pub struct Forge {
    pub ferns: Vec<Keypair>,
    pub wilburs: Vec<Keypair>,
    pub spec: QuorumSpec,
    pub label: Label,
    pub store: BTreeMap<Hash, Block>,
}

impl Forge {
    pub fn new(tag: &str) -> Self {
        let ferns: Vec<Keypair> = (0..4)
            .map(|i| Keypair::from_name(&format!("{tag}-fern{i}")))
            .collect();
        let wilburs: Vec<Keypair> = (0..4)
            .map(|i| Keypair::from_name(&format!("{tag}-wilbur{i}")))
            .collect();
        let fids: Vec<ServerId> = ferns.iter().map(Keypair::id).collect();
        let wids: Vec<ServerId> = wilburs.iter().map(Keypair::id).collect();
        let label = chain_label(&fids, &wids, 3);
        let spec = QuorumSpec::byzantine(fids).unwrap();
        Forge {
            ferns,
            wilburs,
            spec,
            label,
            store: BTreeMap::new(),
        }
    }

    /// Accepts from the first `signers` integrity servers.
    pub fn proof(&self, instance: &InstanceId, value: Hash, signers: usize) -> ProofOfConsensus {
        let accepts: Vec<ProtocolMessage> = self.ferns[..signers]
            .iter()
            .map(|k| ProtocolMessage::sign(k, instance.clone(), Phase::Accept, value, 0))
            .collect();
        match assemble_proof(accepts.clone(), &self.spec) {
            Ok(p) => p,
            Err(_) => {
                let mut accepts = accepts;
                accepts.sort_by_key(|a| a.sender);
                ProofOfConsensus {
                    instance: instance.clone(),
                    value,
                    accepts,
                    spec: self.spec.clone(),
                }
            }
        }
    }

    fn avail(&self, hash: Hash) -> Vec<AvailabilityAttestation> {
        self.wilburs[..3]
            .iter()
            .map(|k| AvailabilityAttestation::sign(k, hash))
            .collect()
    }

    /// Stores `block` and returns a reference carrying `signers` accepts.
    pub fn attest(&mut self, block: Block, instance: &InstanceId, signers: usize) -> Reference {
        let hash = block.root();
        let proof = self.proof(instance, hash, signers);
        let r = reference_unchecked(&block, self.avail(hash), vec![proof]);
        self.store.insert(hash, block);
        r
    }

    pub fn mint(&mut self, payload: &[u8]) -> ChainHead {
        let root = root_block(self.label.clone(), vec![payload.to_vec()]);
        let instance = InstanceId::single(root.root(), 0);
        ChainHead::from_root(self.attest(root, &instance, 4))
    }

    pub fn append(&mut self, head: &mut ChainHead, payload: &[u8]) -> Reference {
        let (block, instance) =
            append_block(std::slice::from_ref(head), vec![payload.to_vec()]).unwrap();
        let r = self.attest(block, &instance, 4);
        head.advance(r.clone());
        r
    }

    pub fn fetch(&self, h: &Hash) -> Option<Block> {
        self.store.get(h).cloned()
    }
}

/// `block` with its first payload leaf altered.
pub fn tamper_payload(block: &Block) -> Block {
    let mut leaves: Vec<Leaf> = block.leaves().to_vec();
    let leaf = leaves
        .iter_mut()
        .find(|l| l.kind == LeafKind::Payload)
        .expect("payload leaf");
    leaf.content.push(0xff);
    Block::from_leaves(leaves).unwrap()
}

// ---- universes, enumerated ----

/// The universes (subsets of `servers`, as bitmasks) in which `f` holds.
pub fn universes(f: &GoodSetFamily, servers: &[ServerId]) -> Vec<bool> {
    let masks: Vec<u32> = f
        .good_sets()
        .iter()
        .map(|g| {
            g.iter()
                .map(|s| {
                    1u32 << servers
                        .iter()
                        .position(|x| x == s)
                        .expect("server in universe")
                })
                .fold(0, |a, b| a | b)
        })
        .collect();
    (0u32..1 << servers.len())
        .map(|u| masks.iter().any(|g| g & u == *g))
        .collect()
}

pub fn subset(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).all(|(x, y)| !x || *y)
}

// ---- endorsement ----

pub struct Endorsed {
    pub first: ProofOfConsensus,
    pub second: ProofOfConsensus,
    pub servers: Vec<ServerId>,
}

/// A block decided by one consortium and then endorsed by a second.
pub fn endorse_scenario(seed: u64) -> Result<Endorsed, String> {
    let mut world = World::new(reference_config(seed)).map_err(|e| e.to_string())?;
    let a = world.add_default_cluster("first");
    let second: Vec<ServerId> = (0..4)
        .map(|i| Keypair::from_name(&format!("second-fern{i}")).id())
        .collect();
    let spec_b = QuorumSpec::byzantine(second.clone()).unwrap();
    for i in 0..4 {
        let spec = spec_b.clone();
        world.add_fern_with(&format!("second-fern{i}"), move |f| f.with_consortium(spec));
    }
    let mut head = world
        .mint(&a.label, vec![b"ledger".to_vec()])
        .map_err(|e| e.to_string())?;
    world
        .append(&mut [&mut head], vec![b"deed".to_vec()])
        .map_err(|e| e.to_string())?;
    let reference = head.head.clone();
    let first = reference
        .integ_atts
        .first()
        .cloned()
        .ok_or("no first proof")?;
    let op = QuorumRequest::endorse(reference, first.instance.clone(), spec_b);
    let second_proof = match world.sim.run_op(world.client, op).outcome {
        Ok(Decision::Granted(p)) => p,
        other => return Err(format!("endorsement failed: {other:?}")),
    };
    let servers = a.ferns.iter().copied().chain(second).collect();
    Ok(Endorsed {
        first,
        second: second_proof,
        servers,
    })
}

// ---- bank workloads ----

#[derive(Clone, Debug)]
pub struct Committed {
    pub hash: Hash,
    pub from: Hash,
    pub to: Hash,
    pub amount: u64,
    /// Slot of the transfer on each of its two account chains.
    pub slots: BTreeMap<Hash, u64>,
}

pub struct Workload {
    pub bank: Bank,
    pub initial: BTreeMap<Hash, u64>,
    pub committed: Vec<Committed>,
    pub lost: usize,
}

/// Random transfers over `accounts` accounts, submitted in small concurrent
/// batches until `max_transfers` have been attempted.
pub fn bank_workload(
    seed: u64,
    accounts: usize,
    max_transfers: usize,
) -> Result<Workload, BankError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = Bank::new(reference_config(seed))?;
    let mut ids = Vec::new();
    let mut initial = BTreeMap::new();
    for i in 0..accounts {
        let amount = rng.gen_range(0..=100);
        let id = bank.open_account(&format!("acct{i}"), amount)?;
        ids.push(id);
        initial.insert(id, amount);
    }
    let mut attempted = 0;
    let mut lost = 0;
    while attempted < max_transfers {
        let n = rng.gen_range(1..=3).min(max_transfers - attempted);
        let mut batch = Vec::new();
        for _ in 0..n {
            let pair: Vec<&Hash> = ids.choose_multiple(&mut rng, 2).collect();
            let (from, to) = (*pair[0], *pair[1]);
            let bal = bank.balance(&from)?;
            if bal == 0 {
                continue;
            }
            batch.push((from, to, rng.gen_range(1..=bal)));
        }
        attempted += n;
        if batch.is_empty() {
            continue;
        }
        for r in bank.race(&batch)? {
            match r {
                Ok(_) => {}
                Err(BankError::Conflict(_)) | Err(BankError::World(_)) => lost += 1,
                Err(e) => return Err(e),
            }
        }
    }
    bank.world.quiesce();

    let mut by_hash: BTreeMap<Hash, Committed> = BTreeMap::new();
    for id in &ids {
        for e in bank.verified(id)?.blocks.iter().skip(1) {
            let Some(blockweb::bank::BankRecord::Transfer(t)) = blockweb::bank::record_of(&e.block)
            else {
                continue;
            };
            by_hash
                .entry(e.hash)
                .or_insert_with(|| Committed {
                    hash: e.hash,
                    from: t.from,
                    to: t.to,
                    amount: t.amount,
                    slots: BTreeMap::new(),
                })
                .slots
                .insert(*id, e.slot);
        }
    }
    Ok(Workload {
        bank,
        initial,
        committed: by_hash.into_values().collect(),
        lost,
    })
}

/// Replays every linearization of `txs` that keeps each account's slot
/// order, checking that none overdraws and all end at `expected`.
/// Returns the number of linearizations tried.
pub fn check_linearizations(
    initial: &BTreeMap<Hash, u64>,
    txs: &[Committed],
    expected: &BTreeMap<Hash, u64>,
) -> Result<usize, String> {
    let n = txs.len();
    // i must come before j when they share an account and i's slot is lower.
    let mut before = vec![BTreeSet::new(); n];
    for j in 0..n {
        for i in 0..n {
            let earlier = txs[j]
                .slots
                .iter()
                .any(|(acct, sj)| txs[i].slots.get(acct).is_some_and(|si| si < sj));
            if i != j && earlier {
                before[j].insert(i);
            }
        }
    }
    fn walk(
        txs: &[Committed],
        before: &[BTreeSet<usize>],
        used: &mut Vec<bool>,
        bal: &mut BTreeMap<Hash, i128>,
        expected: &BTreeMap<Hash, u64>,
        depth: usize,
        count: &mut usize,
    ) -> Result<(), String> {
        if depth == txs.len() {
            *count += 1;
            for (a, want) in expected {
                if bal[a] != i128::from(*want) {
                    return Err(format!(
                        "account {} ends at {} not {want}",
                        a.short(),
                        bal[a]
                    ));
                }
            }
            return Ok(());
        }
        for i in 0..txs.len() {
            if used[i] || before[i].iter().any(|&p| !used[p]) {
                continue;
            }
            let t = &txs[i];
            *bal.get_mut(&t.from).unwrap() -= i128::from(t.amount);
            *bal.get_mut(&t.to).unwrap() += i128::from(t.amount);
            if bal[&t.from] < 0 {
                return Err(format!("a linearization overdraws {}", t.from.short()));
            }
            used[i] = true;
            walk(txs, before, used, bal, expected, depth + 1, count)?;
            used[i] = false;
            *bal.get_mut(&t.from).unwrap() += i128::from(t.amount);
            *bal.get_mut(&t.to).unwrap() -= i128::from(t.amount);
        }
        Ok(())
    }
    let mut bal: BTreeMap<Hash, i128> = initial.iter().map(|(k, v)| (*k, i128::from(*v))).collect();
    let mut count = 0;
    walk(
        txs,
        &before,
        &mut vec![false; n],
        &mut bal,
        expected,
        0,
        &mut count,
    )?;
    Ok(count)
}
