use std::collections::BTreeSet;

use blockweb::bank::Bank;
use blockweb::crypto::ServerId;
use blockweb::harness::{
    add_timestampers, reference_config, run_timestamping, timestamp_client_block,
    timestamp_vs_chain,
};
use blockweb::message::Message;
use blockweb::sim::TraceEntry;
use blockweb::timestamp::{parse_timestamp, DEFAULT_BATCH, DEFAULT_THRESHOLD};

#[test]
fn every_block_is_stamped_by_three_servers() {
    let run = run_timestamping(reference_config(5), 4, DEFAULT_BATCH, 200, 16);
    assert_eq!(run.under_threshold(DEFAULT_THRESHOLD), 0);
    let index = run.index();
    for b in &run.blocks {
        let by = index.timestamped_by(&b.root(), DEFAULT_THRESHOLD).unwrap();
        let servers: BTreeSet<ServerId> = by.iter().map(|(s, _)| *s).collect();
        assert!(servers.len() >= DEFAULT_THRESHOLD);
    }
    for stamp in run.stamps() {
        let (server, _) = parse_timestamp(&stamp).unwrap();
        assert!(run.servers.contains(&server));
        assert!(stamp.label().integrity.is_none());
    }
}

#[test]
fn timestamping_outpaces_a_serialized_chain() {
    let r = timestamp_vs_chain(8, 300, 16, 6).unwrap();
    let speedup = r.summary["speedup"].as_f64().unwrap();
    assert!(speedup >= 10.0, "speedup {speedup}");
    assert_eq!(r.summary["blocks_below_threshold"], 0);
}

/// A bank run, optionally sharing its simulator with busy timestampers.
/// Returns the trace restricted to messages between bank nodes.
fn bank_trace(with_timestamps: bool) -> Vec<TraceEntry> {
    let mut config = reference_config(21);
    config.record_trace = true;
    let mut bank = Bank::new(config).unwrap();
    let mut noise: BTreeSet<ServerId> = BTreeSet::new();
    let mut inject = |bank: &mut Bank, wave: u64| {
        if !with_timestamps {
            return;
        }
        let sim = &mut bank.world.sim;
        if noise.is_empty() {
            noise.extend(add_timestampers(sim, 4, DEFAULT_BATCH));
            noise.insert(sim.add_client("ts-client"));
        }
        let ts: Vec<ServerId> = noise
            .iter()
            .copied()
            .filter(|id| sim.name_of(id) != Some("ts-client"))
            .collect();
        let client = sim.id_of("ts-client").unwrap();
        for i in 0..40 {
            let b = timestamp_client_block(&ts, wave * 1000 + i);
            sim.send(client, ts[i as usize % ts.len()], Message::StoreBlock(b));
        }
    };
    inject(&mut bank, 0);
    let a = bank.open_account("alice", 100).unwrap();
    inject(&mut bank, 1);
    let b = bank.open_account("bob", 0).unwrap();
    for (i, amount) in [10, 20, 30].into_iter().enumerate() {
        inject(&mut bank, 2 + i as u64);
        bank.transfer(a, b, amount, b"").unwrap();
    }
    bank.world.quiesce();
    if with_timestamps {
        let stamped: usize = noise
            .iter()
            .filter_map(|id| {
                bank.world
                    .sim
                    .node::<blockweb::timestamp::TimestampServer>(id)
            })
            .map(|t| t.emitted().len())
            .sum();
        assert!(stamped > 0, "timestampers stayed idle");
    }
    bank.world
        .sim
        .trace()
        .iter()
        .filter(|e| !noise.contains(&e.from) && !noise.contains(&e.to))
        .cloned()
        .collect()
}

#[test]
fn timestamping_does_not_perturb_chains() {
    let quiet = bank_trace(false);
    let busy = bank_trace(true);
    assert!(!quiet.is_empty());
    assert_eq!(quiet, busy);
}
