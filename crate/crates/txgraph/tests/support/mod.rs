//! Independent oracles shared by the txgraph tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use blockweb_txgraph::{critical_path, refactor_values, Id, Tx, TxGraph};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A random DAG on `n` transactions with shuffled ids and listing order.
pub fn random_dag(rng: &mut ChaCha8Rng, n: usize) -> TxGraph {
    let density = rng.gen_range(0.0..0.6);
    let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
    ids.shuffle(rng);
    let mut txs: Vec<Tx> = (0..n)
        .map(|i| Tx {
            id: Id::Num(ids[i]),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
        .collect();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(density) {
                let e = Id::Name(format!("{a}-{b}"));
                txs[a].outputs.push((e.clone(), 1));
                txs[b].inputs.push(e);
            }
        }
        if rng.gen_bool(0.3) {
            txs[a].inputs.push(Id::Name(format!("ext{a}")));
        }
    }
    txs.shuffle(rng);
    TxGraph::new(txs).unwrap()
}

/// Edges between transactions rebuilt from the raw lists.
pub fn adjacency(g: &TxGraph) -> Vec<Vec<usize>> {
    let producer: BTreeMap<&Id, usize> = g
        .txs()
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.outputs.iter().map(move |(e, _)| (e, i)))
        .collect();
    let mut next = vec![BTreeSet::new(); g.len()];
    for (i, t) in g.txs().iter().enumerate() {
        for e in &t.inputs {
            if let Some(&p) = producer.get(e) {
                next[p].insert(i);
            }
        }
    }
    next.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Every path, as index sequences.
pub fn all_paths(next: &[Vec<usize>]) -> Vec<Vec<usize>> {
    fn extend(next: &[Vec<usize>], path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(path.clone());
        let last = *path.last().unwrap();
        for &s in &next[last] {
            path.push(s);
            extend(next, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    for start in 0..next.len() {
        extend(next, &mut vec![start], &mut out);
    }
    out
}

/// Value carried by every edge of a fragment, and the per-node checks.
pub fn check_fragment(ins: &[u64], outs: &[u64]) -> usize {
    let f = refactor_values(ins, outs).unwrap();
    let g = &f.graph;
    let mut value: BTreeMap<Id, u64> = f.sources.iter().cloned().collect();
    let mut spent = BTreeSet::new();
    for t in g.txs() {
        assert!(
            t.inputs.len() <= 2 && t.outputs.len() <= 2,
            "{} touches too many accounts",
            t.id
        );
        for (e, v) in &t.outputs {
            assert!(value.insert(e.clone(), *v).is_none());
        }
    }
    for t in g.txs() {
        let got: u64 = t.inputs.iter().map(|e| value[e]).sum();
        assert_eq!(got, t.output_value(), "{} does not conserve", t.id);
        for e in &t.inputs {
            assert!(spent.insert(e.clone()), "{e} spent twice");
        }
    }
    let sources: BTreeSet<Id> = f.sources.iter().map(|(e, _)| e.clone()).collect();
    let external: BTreeSet<Id> = spent
        .iter()
        .filter(|e| g.edge_value(e).is_none())
        .cloned()
        .collect();
    assert_eq!(external, sources);

    let mut sink_parts = BTreeSet::new();
    assert_eq!(f.sinks.len(), outs.len());
    for (sink, &want) in f.sinks.iter().zip(outs) {
        assert_eq!(sink.value, want);
        assert!(!sink.parts.is_empty());
        let got: u64 = sink
            .parts
            .iter()
            .map(|(e, v)| {
                assert_eq!(value[e], *v);
                assert!(!spent.contains(e));
                sink_parts.insert(e.clone());
                *v
            })
            .sum();
        assert_eq!(got, want);
    }
    let unspent: BTreeSet<Id> = g
        .txs()
        .iter()
        .flat_map(|t| t.outputs.iter().map(|(e, _)| e.clone()))
        .filter(|e| !spent.contains(e))
        .collect();
    assert_eq!(unspent, sink_parts);

    let layers = critical_path(g, |_| 1.0).length as usize;
    assert_eq!(layers, f.depth);
    f.depth
}

pub fn ceil_log2(x: usize) -> usize {
    let mut d = 0;
    while (1usize << d) < x {
        d += 1;
    }
    d
}

/// Random values summing to `total` over `k` parts, zeros allowed.
pub fn split(rng: &mut ChaCha8Rng, total: u64, k: usize) -> Vec<u64> {
    let mut cuts: Vec<u64> = (1..k).map(|_| rng.gen_range(0..=total)).collect();
    cuts.push(0);
    cuts.push(total);
    cuts.sort_unstable();
    cuts.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Edmonds-Karp on a dense capacity matrix.
pub fn max_flow(cap: &mut [Vec<u64>], s: usize, t: usize) -> u64 {
    let n = cap.len();
    let mut total = 0;
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[s] = s;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if prev[v] == usize::MAX && cap[u][v] > 0 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[t] == usize::MAX {
            return total;
        }
        let mut push = u64::MAX;
        let mut v = t;
        while v != s {
            push = push.min(cap[prev[v]][v]);
            v = prev[v];
        }
        let mut v = t;
        while v != s {
            cap[prev[v]][v] -= push;
            cap[v][prev[v]] += push;
            v = prev[v];
        }
        total += push;
    }
}

/// Completion times recomputed by memoized recursion over the raw lists.
pub fn recompute(g: &TxGraph, serialized: f64, parallel: f64) -> (f64, f64) {
    let next = adjacency(g);
    let mut memo: Vec<Option<f64>> = vec![None; g.len()];
    fn longest(i: usize, next: &[Vec<usize>], memo: &mut [Option<f64>], c: f64) -> f64 {
        if let Some(v) = memo[i] {
            return v;
        }
        let v = c + next[i]
            .iter()
            .map(|&s| longest(s, next, memo, c))
            .fold(0.0, f64::max);
        memo[i] = Some(v);
        v
    }
    let par = (0..g.len())
        .map(|i| longest(i, &next, &mut memo, parallel))
        .fold(0.0, f64::max);
    (serialized * g.len() as f64, par)
}
