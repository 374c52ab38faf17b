mod support;

use std::collections::BTreeMap;

use blockweb_txgraph::{
    compare, critical_path, refactor_graph, refactor_values, scale_free, GenParams, Id,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{
    adjacency, all_paths, ceil_log2, check_fragment, max_flow, random_dag, recompute, split,
};

#[test]
fn critical_path_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1_000 {
        let n = rng.gen_range(1..=12);
        let g = random_dag(&mut rng, n);
        let costs: BTreeMap<Id, f64> = g
            .txs()
            .iter()
            .map(|t| (t.id.clone(), f64::from(rng.gen_range(1..=3u8))))
            .collect();
        let got = critical_path(&g, |t| costs[&t.id]);

        let best = all_paths(&adjacency(&g))
            .into_iter()
            .map(|p| {
                let ids: Vec<Id> = p.iter().map(|&i| g.txs()[i].id.clone()).collect();
                let len: f64 = ids.iter().map(|id| costs[id]).sum();
                (len, ids)
            })
            .min_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)))
            .unwrap();
        assert_eq!(got.length, best.0);
        assert_eq!(got.path, best.1);
    }
}

#[test]
fn critical_path_reaches_the_total_only_on_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut chains = 0;
    for _ in 0..1_000 {
        let n = rng.gen_range(1..=8);
        let g = random_dag(&mut rng, n);
        let costs: BTreeMap<Id, f64> = g
            .txs()
            .iter()
            .map(|t| (t.id.clone(), f64::from(rng.gen_range(1..=5u8))))
            .collect();
        let total: f64 = costs.values().sum();
        let cp = critical_path(&g, |t| costs[&t.id]).length;
        let through_all = all_paths(&adjacency(&g)).iter().any(|p| p.len() == n);
        assert!(cp <= total);
        assert_eq!(cp == total, through_all);
        assert_eq!(g.is_chain(), through_all);
        chains += usize::from(through_all);
    }
    assert!(chains > 50, "too few chains sampled: {chains}");
}

#[test]
fn refactoring_holds_for_every_size_up_to_64() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=64 {
        for m in 1..=64 {
            let total = rng.gen_range(0..10_000);
            let ins = split(&mut rng, total, n);
            let outs = split(&mut rng, total, m);
            let depth = check_fragment(&ins, &outs);
            assert!(
                depth <= ceil_log2(n.max(m)) + 1,
                "n={n} m={m} depth={depth}"
            );
        }
    }
}

#[test]
fn fragments_carry_a_saturating_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        let (n, m) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let total = rng.gen_range(1..5_000);
        let ins = split(&mut rng, total, n);
        let outs = split(&mut rng, total, m);
        check_fragment(&ins, &outs);
        let f = refactor_values(&ins, &outs).unwrap();
        let g = &f.graph;

        // Nodes: source, fragment txs, one node per sink, target.
        let k = g.len();
        let (s, t) = (0, k + m + 1);
        let mut cap = vec![vec![0u64; k + m + 2]; k + m + 2];
        let tx_of: BTreeMap<&Id, usize> = g
            .txs()
            .iter()
            .enumerate()
            .map(|(i, tx)| (&tx.id, i + 1))
            .collect();
        let producer: BTreeMap<&Id, (usize, u64)> = g
            .txs()
            .iter()
            .flat_map(|tx| {
                let node = tx_of[&tx.id];
                tx.outputs.iter().map(move |(e, v)| (e, (node, *v)))
            })
            .collect();
        let source_value: BTreeMap<&Id, u64> = f.sources.iter().map(|(e, v)| (e, *v)).collect();
        for tx in g.txs() {
            for e in &tx.inputs {
                match producer.get(e) {
                    Some(&(p, v)) => cap[p][tx_of[&tx.id]] += v,
                    None => cap[s][tx_of[&tx.id]] += source_value[e],
                }
            }
        }
        for (j, sink) in f.sinks.iter().enumerate() {
            for (e, v) in &sink.parts {
                cap[producer[e].0][k + 1 + j] += v;
            }
            cap[k + 1 + j][t] = outs[j];
        }
        assert_eq!(max_flow(&mut cap, s, t), total);
        for j in 0..m {
            assert_eq!(cap[k + 1 + j][t], 0, "sink {j} not saturated");
        }
    }
}

#[test]
fn scale_free_speedups_match_a_recomputation() {
    for seed in 0..5 {
        let g = scale_free(seed, GenParams::default());
        let report = compare(&g, 3.0, 2.0, true).unwrap();
        let (ser, par) = recompute(&g, 3.0, 2.0);
        assert_eq!(report.original.serialized, ser);
        assert_eq!(report.original.parallel, par);
        assert!((report.original.speedup - ser / par).abs() < 1e-12);

        let refactored = refactor_graph(&g).unwrap();
        let (ser2, par2) = recompute(&refactored, 3.0, 2.0);
        let two = report.two_account.unwrap();
        assert_eq!(two.txs, refactored.len());
        assert_eq!((two.serialized, two.parallel), (ser2, par2));
        assert!((two.speedup - ser2 / par2).abs() < 1e-12);

        for tx in refactored.txs().iter().filter(|t| !t.inputs.is_empty()) {
            assert!(tx.inputs.len() <= 2 && tx.outputs.len() <= 2);
            let spent: u64 = tx
                .inputs
                .iter()
                .map(|e| refactored.edge_value(e).unwrap())
                .sum();
            assert_eq!(spent, tx.output_value());
        }
    }
}
