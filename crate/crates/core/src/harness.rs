//! Experiments over the simulator and the JSON report they produce.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::bank::{Bank, BankError};
use crate::block::{build_block, Block};
use crate::chains::ChainHead;
use crate::client::{AppendOutcome, BlockOp, StoreOp};
use crate::consensus::ProofOfConsensus;
use crate::crypto::{Keypair, ServerId};
use crate::fern::Fern;
use crate::policy::{AvailabilityPolicy, Label};
use crate::sim::{Fault, Latency, Sim, SimConfig};
use crate::timestamp::{TimestampIndex, TimestampServer, DEFAULT_BATCH, DEFAULT_THRESHOLD};
use crate::world::{World, WorldError};

pub const EXPERIMENTS: [&str; 3] = ["timestamp-vs-chain", "multichain-append", "bank-race"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown experiment {0:?}; expected one of {EXPERIMENTS:?}")]
    UnknownExperiment(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Bank(#[from] BankError),
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct OpStat {
    pub name: String,
    pub mean_ms: f64,
    pub stddev_ms: f64,
}

impl OpStat {
    pub fn from_us(name: &str, samples: &[u64]) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|&s| (s as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        OpStat {
            name: name.to_string(),
            mean_ms: mean / 1000.0,
            stddev_ms: var.sqrt() / 1000.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Report {
    pub experiment: String,
    pub seed: u64,
    pub config: Value,
    pub per_op: Vec<OpStat>,
    pub throughput_per_s: f64,
    pub messages_total: u64,
    pub summary: Value,
}

/// The simulator settings every experiment starts from.
pub fn reference_config(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        latency: Latency::Uniform {
            lo_us: 5_000,
            hi_us: 15_000,
        },
        service_us: 200,
        record_trace: false,
        ..SimConfig::default()
    }
}

pub fn run_experiment(name: &str, seed: u64) -> Result<Report, HarnessError> {
    match name {
        "timestamp-vs-chain" => timestamp_vs_chain(seed, 1000, 16, 12),
        "multichain-append" => multichain_append(seed, &[1, 2, 3], 12, 10),
        "bank-race" => bank_race(seed, 100),
        other => Err(HarnessError::UnknownExperiment(other.to_string())),
    }
}

// ---- timestamping versus a serialized chain ----

pub struct TimestampRun {
    pub sim: Sim,
    pub servers: Vec<ServerId>,
    pub blocks: Vec<Block>,
    pub store_latencies_us: Vec<u64>,
    /// From the first store to the last timestamp emitted.
    pub elapsed_us: u64,
}

impl TimestampRun {
    pub fn stamps(&self) -> Vec<Block> {
        self.servers
            .iter()
            .flat_map(|s| {
                let ts = self
                    .sim
                    .node::<TimestampServer>(s)
                    .expect("timestamp server");
                ts.emitted()
                    .iter()
                    .filter_map(|e| ts.wilbur().store().get(&e.hash))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn index(&self) -> TimestampIndex {
        TimestampIndex::build(&self.stamps(), &|h| {
            fetch_timestamped(&self.sim, &self.servers, h)
        })
    }

    /// Blocks that fewer than `threshold` servers timestamp.
    pub fn under_threshold(&self, threshold: usize) -> usize {
        let index = self.index();
        self.blocks
            .iter()
            .filter(|b| index.timestamped_by(&b.root(), threshold).is_err())
            .count()
    }
}

fn fetch_timestamped(sim: &Sim, servers: &[ServerId], h: &crate::crypto::Hash) -> Option<Block> {
    servers
        .iter()
        .find_map(|s| sim.node::<TimestampServer>(s)?.wilbur().store().get(h))
}

/// Adds `n` timestamp servers named `ts{i}` that batch `batch` blocks.
pub fn add_timestampers(sim: &mut Sim, n: usize, batch: usize) -> Vec<ServerId> {
    let keys: Vec<Keypair> = (0..n)
        .map(|i| Keypair::from_name(&format!("ts{i}")))
        .collect();
    let ids: Vec<ServerId> = keys.iter().map(|k| k.id()).collect();
    for (i, k) in keys.into_iter().enumerate() {
        sim.add_service(
            &format!("ts{i}"),
            ids[i],
            Box::new(TimestampServer::new(k, ids.clone(), batch)),
        );
    }
    ids
}

/// Client blocks to be timestamped: stored on any one of the servers.
pub fn timestamp_client_block(servers: &[ServerId], i: u64) -> Block {
    let label = Label::new(
        AvailabilityPolicy::k_of(servers.iter().copied(), 1).expect("one of n"),
        None,
    );
    build_block(
        vec![format!("client block {i}").into_bytes()],
        vec![],
        label,
    )
}

pub fn run_timestamping(
    config: SimConfig,
    servers: usize,
    batch: usize,
    blocks: usize,
    window: usize,
) -> TimestampRun {
    let mut sim = Sim::new(config).expect("valid config");
    let ids = add_timestampers(&mut sim, servers, batch);
    let client = sim.add_client("ts-client");
    let bs: Vec<Block> = (0..blocks as u64)
        .map(|i| timestamp_client_block(&ids, i))
        .collect();
    let start = sim.now();
    let ops = bs
        .iter()
        .enumerate()
        .map(|(i, b)| (client, StoreOp::to(b.clone(), vec![ids[i % ids.len()]])))
        .collect();
    let results = sim.run_ops(ops, window);
    sim.run_until_idle();
    let last_stamp = ids
        .iter()
        .filter_map(|s| {
            sim.node::<TimestampServer>(s)
                .and_then(|t| t.emitted().last())
                .map(|e| e.time_us)
        })
        .max()
        .unwrap_or(start);
    let store_latencies_us = results.iter().map(|r| r.latency_us()).collect();
    TimestampRun {
        sim,
        servers: ids,
        blocks: bs,
        store_latencies_us,
        elapsed_us: last_stamp - start,
    }
}

pub struct ChainRun {
    pub world: World,
    pub head: ChainHead,
    pub latencies_us: Vec<u64>,
    pub elapsed_us: u64,
}

/// Mints a chain on the default cluster, then appends `appends` blocks one
/// after another.
pub fn run_serial_chain(config: SimConfig, appends: usize) -> Result<ChainRun, HarnessError> {
    let mut world = World::new(config)?;
    let cluster = world.add_default_cluster("chain");
    world.sim.check_faults().map_err(WorldError::from)?;
    let mut head = world.mint(&cluster.label, vec![b"root".to_vec()])?;
    let start = world.sim.now();
    let mut latencies_us = Vec::new();
    for i in 0..appends {
        let t0 = world.sim.now();
        world.append(&mut [&mut head], vec![format!("append {i}").into_bytes()])?;
        latencies_us.push(world.sim.now() - t0);
    }
    let elapsed_us = world.sim.now() - start;
    Ok(ChainRun {
        world,
        head,
        latencies_us,
        elapsed_us,
    })
}

fn per_second(count: usize, elapsed_us: u64) -> f64 {
    count as f64 * 1e6 / elapsed_us.max(1) as f64
}

pub fn timestamp_vs_chain(
    seed: u64,
    blocks: usize,
    window: usize,
    appends: usize,
) -> Result<Report, HarnessError> {
    let config = reference_config(seed);
    let ts = run_timestamping(config.clone(), 4, DEFAULT_BATCH, blocks, window);
    let chain = run_serial_chain(config.clone(), appends)?;
    let ts_rate = per_second(blocks, ts.elapsed_us);
    let chain_rate = per_second(appends, chain.elapsed_us);
    let under = ts.under_threshold(DEFAULT_THRESHOLD);
    Ok(Report {
        experiment: "timestamp-vs-chain".into(),
        seed,
        config: json!({
            "sim": config,
            "timestamp_servers": 4,
            "batch": DEFAULT_BATCH,
            "client_blocks": blocks,
            "client_window": window,
            "chain_appends": appends,
            "chain_cluster": {"integrity_servers": 4, "availability_servers": 4, "store_on": 3},
        }),
        per_op: vec![
            OpStat::from_us("timestamp_store", &ts.store_latencies_us),
            OpStat::from_us("chain_append", &chain.latencies_us),
        ],
        throughput_per_s: ts_rate,
        messages_total: ts.sim.metrics().messages_total + chain.world.sim.metrics().messages_total,
        summary: json!({
            "timestamp_throughput_per_s": ts_rate,
            "chain_throughput_per_s": chain_rate,
            "speedup": ts_rate / chain_rate,
            "blocks_below_threshold": under,
            "threshold": DEFAULT_THRESHOLD,
        }),
    })
}

// ---- appends spanning several chains ----

/// Latencies of `appends` joint appends to `chains` chains in a fresh world.
pub fn run_multichain(
    config: SimConfig,
    chains: usize,
    appends: usize,
) -> Result<(Vec<u64>, u64), HarnessError> {
    let mut world = World::new(config)?;
    let clusters: Vec<_> = (0..chains)
        .map(|i| world.add_default_cluster(&format!("c{i}")))
        .collect();
    let mut heads = Vec::new();
    for (i, c) in clusters.iter().enumerate() {
        heads.push(world.mint(&c.label, vec![format!("chain {i}").into_bytes()])?);
    }
    let mut lat = Vec::new();
    for i in 0..appends {
        let t0 = world.sim.now();
        let mut refs: Vec<&mut ChainHead> = heads.iter_mut().collect();
        world.append(&mut refs, vec![format!("joint {i}").into_bytes()])?;
        lat.push(world.sim.now() - t0);
    }
    for h in &heads {
        world.verify(h).map_err(WorldError::from)?;
    }
    Ok((lat, world.sim.metrics().messages_total))
}

pub fn multichain_append(
    seed: u64,
    chain_counts: &[usize],
    appends: usize,
    reps: usize,
) -> Result<Report, HarnessError> {
    let mut per_op = Vec::new();
    let mut messages = 0;
    let mut all = Vec::new();
    let mut means = Vec::new();
    for &k in chain_counts {
        let mut samples = Vec::new();
        for rep in 0..reps {
            let config = reference_config(
                seed.wrapping_mul(1_000)
                    .wrapping_add((k * 100 + rep) as u64),
            );
            let (lat, msgs) = run_multichain(config, k, appends)?;
            samples.extend(lat);
            messages += msgs;
        }
        let stat = OpStat::from_us(&format!("append_{k}_chains"), &samples);
        means.push(stat.mean_ms);
        per_op.push(stat);
        all.extend(samples);
    }
    let increasing = means.windows(2).all(|w| w[0] < w[1]);
    let total_us: u64 = all.iter().sum();
    Ok(Report {
        experiment: "multichain-append".into(),
        seed,
        config: json!({
            "sim": reference_config(seed),
            "chain_counts": chain_counts,
            "appends": appends,
            "repetitions": reps,
            "cluster": {"integrity_servers": 4, "availability_servers": 4, "store_on": 3},
        }),
        per_op,
        throughput_per_s: per_second(all.len(), total_us),
        messages_total: messages,
        summary: json!({ "mean_latency_ms": means, "strictly_increasing": increasing }),
    })
}

// ---- double-spend races ----

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RaceOutcome {
    pub winners: usize,
    pub conserved: bool,
    pub latency_us: u64,
}

/// Two transfers of 80 from an account holding 100, submitted together.
pub fn run_bank_race(seed: u64) -> Result<(RaceOutcome, u64), HarnessError> {
    let mut bank = Bank::new(reference_config(seed))?;
    let a = bank.open_account("alice", 100)?;
    let b = bank.open_account("bob", 0)?;
    let c = bank.open_account("carol", 0)?;
    let t0 = bank.world.sim.now();
    let out = bank.race(&[(a, b, 80), (a, c, 80)])?;
    let latency_us = bank.world.sim.now() - t0;
    bank.world.quiesce();
    let winners = out.iter().filter(|r| r.is_ok()).count();
    let conserved = bank.total()? == 100;
    Ok((
        RaceOutcome {
            winners,
            conserved,
            latency_us,
        },
        bank.world.sim.metrics().messages_total,
    ))
}

pub fn bank_race(seed: u64, seeds: u64) -> Result<Report, HarnessError> {
    let mut lat = Vec::new();
    let mut messages = 0;
    let mut one = 0;
    let mut conserved = 0;
    let mut bad = Vec::new();
    for s in 0..seeds {
        let run_seed = seed.wrapping_add(s);
        let (o, m) = run_bank_race(run_seed)?;
        messages += m;
        lat.push(o.latency_us);
        one += usize::from(o.winners == 1);
        conserved += usize::from(o.conserved);
        if o.winners != 1 || !o.conserved {
            bad.push(run_seed);
        }
    }
    let total_us: u64 = lat.iter().sum();
    Ok(Report {
        experiment: "bank-race".into(),
        seed,
        config: json!({
            "sim": reference_config(seed),
            "seeds": seeds,
            "initial_balance": 100,
            "transfers": [80, 80],
        }),
        per_op: vec![OpStat::from_us("race", &lat)],
        throughput_per_s: per_second(lat.len(), total_us),
        messages_total: messages,
        summary: json!({
            "runs": seeds,
            "exactly_one_winner": one,
            "conserved": conserved,
            "failing_seeds": bad,
        }),
    })
}

// ---- fault-injection sweeps ----

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SweepStats {
    pub runs: u64,
    pub conflicts: u64,
    /// Runs in which some race produced no winner.
    pub undecided: u64,
    /// Joint appends decided on one chain's servers but not the other's,
    /// or meet proofs that do not restrict to valid per-chain proofs.
    pub atomicity_violations: u64,
    pub conflicting_seeds: Vec<u64>,
}

pub struct SweepRun {
    pub conflicts: Vec<(ProofOfConsensus, ProofOfConsensus)>,
    pub decided: bool,
    pub atomic: bool,
}

/// One seeded schedule: `chains` clusters, `faulty` integrity servers of
/// the first cluster given `fault`, two clients racing for slot 1 of every
/// chain, then one more uncontended append by the winner.
pub fn sweep_once(
    seed: u64,
    fault: Fault,
    faulty: usize,
    chains: usize,
) -> Result<SweepRun, HarnessError> {
    let mut config = reference_config(seed);
    config.max_time_us = 120_000_000;
    for i in 0..faulty {
        config
            .faults
            .insert(format!("c0-fern{}", (seed as usize + i) % 4), fault);
    }
    let mut world = World::new(config)?;
    let clusters: Vec<_> = (0..chains)
        .map(|i| world.add_default_cluster(&format!("c{i}")))
        .collect();
    world.sim.check_faults().map_err(WorldError::from)?;
    let mut heads = Vec::new();
    for (i, c) in clusters.iter().enumerate() {
        match world.mint(
            &c.label,
            vec![format!("chain {i} seed {seed}").into_bytes()],
        ) {
            Ok(h) => heads.push(h),
            Err(WorldError::Stalled | WorldError::Rejected(_)) => {
                world.quiesce();
                let conflicts = world.sim.conflicts().to_vec();
                return Ok(SweepRun {
                    conflicts,
                    decided: false,
                    atomic: true,
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let results = world.race(vec![
        (heads.clone(), vec![b"left".to_vec()]),
        (heads.clone(), vec![b"right".to_vec()]),
    ])?;
    let mut decided = false;
    for r in results {
        if let Ok(AppendOutcome::Appended { reference, .. }) = r.outcome {
            if !decided {
                decided = true;
                for h in heads.iter_mut() {
                    h.advance(reference.clone());
                }
            }
        }
    }
    if decided {
        let mut refs: Vec<&mut ChainHead> = heads.iter_mut().collect();
        decided = world.append(&mut refs, vec![b"after".to_vec()]).is_ok();
    }
    world.quiesce();

    let honest: Vec<ServerId> = clusters
        .iter()
        .flat_map(|c| c.ferns.iter().copied())
        .filter(|id| {
            let name = world.sim.name_of(id).unwrap_or_default();
            !matches!(
                world.sim.fault(name),
                Some(Fault::Equivocate | Fault::ForgeReject)
            )
        })
        .collect();
    let atomic = chains < 2 || joint_decisions_atomic(&world, &clusters, &honest, &heads);
    Ok(SweepRun {
        conflicts: world.sim.conflicts().to_vec(),
        decided,
        atomic,
    })
}

/// Two clients race for slot 1 of one chain, each asking a different
/// smallest quorum. The quorums share the `faulty` servers and as few
/// honest ones as possible, which is none once `faulty` exceeds the
/// tolerance.
pub fn split_race(seed: u64, fault: Fault, faulty: usize) -> Result<SweepRun, HarnessError> {
    let mut config = reference_config(seed);
    config.max_time_us = 120_000_000;
    let bad_names: Vec<String> = (0..faulty)
        .map(|i| format!("c0-fern{}", (seed as usize + i) % 4))
        .collect();
    for n in &bad_names {
        config.faults.insert(n.clone(), fault);
    }
    let mut world = World::new(config)?;
    let cluster = world.add_default_cluster("c0");
    world.sim.check_faults().map_err(WorldError::from)?;
    let undecided = |world: &World| SweepRun {
        conflicts: world.sim.conflicts().to_vec(),
        decided: false,
        atomic: true,
    };
    let head = match world.mint(
        &cluster.label,
        vec![format!("split seed {seed}").into_bytes()],
    ) {
        Ok(h) => h,
        Err(WorldError::Stalled | WorldError::Rejected(_)) => {
            world.quiesce();
            return Ok(undecided(&world));
        }
        Err(e) => return Err(e.into()),
    };
    let (bad, good): (Vec<ServerId>, Vec<ServerId>) = cluster.ferns.iter().partition(|id| {
        world
            .sim
            .name_of(id)
            .is_some_and(|n| bad_names.iter().any(|b| b == n))
    });
    let spec = cluster
        .label
        .integrity
        .as_ref()
        .expect("chain label")
        .quorum_spec();
    let quorum = spec
        .quorums()
        .good_sets()
        .iter()
        .map(|q| q.len())
        .min()
        .unwrap_or(0);
    let k = quorum.saturating_sub(bad.len()).min(good.len());
    let left: Vec<ServerId> = bad.iter().chain(&good[..k]).copied().collect();
    let right: Vec<ServerId> = bad.iter().chain(&good[good.len() - k..]).copied().collect();
    let mut ops = Vec::new();
    for (i, (targets, payload)) in [(left, &b"left"[..]), (right, &b"right"[..])]
        .into_iter()
        .enumerate()
    {
        let client = world.sim.add_client(&format!("racer{i}"));
        let op = BlockOp::append(std::slice::from_ref(&head), vec![payload.to_vec()])
            .map_err(WorldError::from)?
            .targeting(targets);
        ops.push((client, op));
    }
    let results = world.sim.run_ops(ops, 2);
    world.quiesce();
    let decided = results
        .iter()
        .any(|r| matches!(r.outcome, Ok(AppendOutcome::Appended { .. })));
    Ok(SweepRun {
        conflicts: world.sim.conflicts().to_vec(),
        decided,
        atomic: true,
    })
}

/// Every joint decision recorded by an honest server of one chain is
/// recorded identically by every honest server of each other claimed
/// chain, and its proof restricts to a valid proof for each chain.
fn joint_decisions_atomic(
    world: &World,
    clusters: &[crate::world::Cluster],
    honest: &[ServerId],
    heads: &[ChainHead],
) -> bool {
    let chain_of: BTreeMap<_, _> = heads
        .iter()
        .zip(clusters)
        .map(|(h, c)| (h.chain(), c))
        .collect();
    for id in honest {
        let fern = world.sim.node::<Fern>(id).expect("integrity server");
        for rec in fern.chains().values() {
            for (hash, proof) in rec.decided.values() {
                for claim in proof.instance.claims() {
                    let Some(cluster) = chain_of.get(&claim.chain) else {
                        return false;
                    };
                    let spec = cluster
                        .label
                        .integrity
                        .as_ref()
                        .expect("chain label")
                        .quorum_spec();
                    if proof.restrict(spec).is_none_or(|p| !p.verify()) {
                        return false;
                    }
                    for other in cluster.ferns.iter().filter(|o| honest.contains(o)) {
                        let f = world.sim.node::<Fern>(other).expect("integrity server");
                        let got = f
                            .chain(&claim.chain)
                            .and_then(|r| r.decided.get(&claim.slot))
                            .map(|(h, _)| *h);
                        if got != Some(*hash) {
                            return false;
                        }
                    }
                }
            }
        }
    }
    true
}

pub fn sweep(
    seeds: std::ops::Range<u64>,
    fault: Fault,
    faulty: usize,
    chains: usize,
) -> Result<SweepStats, HarnessError> {
    let mut stats = SweepStats::default();
    for seed in seeds {
        let run = sweep_once(seed, fault, faulty, chains)?;
        stats.runs += 1;
        if !run.conflicts.is_empty() {
            stats.conflicts += run.conflicts.len() as u64;
            stats.conflicting_seeds.push(seed);
        }
        stats.undecided += u64::from(!run.decided);
        stats.atomicity_violations += u64::from(!run.atomic);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_experiment_is_an_error() {
        assert!(matches!(
            run_experiment("nope", 1),
            Err(HarnessError::UnknownExperiment(_))
        ));
    }

    #[test]
    fn op_stat_matches_hand_computation() {
        let s = OpStat::from_us("x", &[1_000, 3_000]);
        assert_eq!((s.mean_ms, s.stddev_ms), (2.0, 1.0));
    }

    #[test]
    fn report_has_the_documented_keys() {
        let r = timestamp_vs_chain(1, 60, 8, 3).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for k in [
            "experiment",
            "seed",
            "config",
            "per_op",
            "throughput_per_s",
            "messages_total",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["per_op"][0]["name"], "timestamp_store");
        assert!(v["per_op"][1]["mean_ms"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn experiments_are_deterministic() {
        let a = multichain_append(5, &[1, 2], 2, 1).unwrap();
        let b = multichain_append(5, &[1, 2], 2, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_sweeps_are_safe() {
        for fault in [Fault::Mute, Fault::Equivocate, Fault::ForgeReject] {
            let s = sweep(0..8, fault, 1, 1).unwrap();
            assert_eq!(s.conflicts, 0, "{fault:?}: {s:?}");
        }
        let s = sweep(0..4, Fault::Equivocate, 1, 2).unwrap();
        assert_eq!((s.conflicts, s.atomicity_violations), (0, 0), "{s:?}");
    }
}
