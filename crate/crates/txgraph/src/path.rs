//! Longest weighted path: the completion time when every transaction runs
//! as soon as its inputs exist.

use std::cmp::Ordering;

use serde::Serialize;

use crate::graph::{Id, Tx, TxGraph};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriticalPath {
    pub length: f64,
    pub path: Vec<Id>,
}

fn walk_back<'a>(g: &'a TxGraph, via: &[Option<usize>], end: usize) -> Vec<&'a Id> {
    let mut seq = vec![&g.txs()[end].id];
    let mut at = end;
    while let Some(p) = via[at] {
        seq.push(&g.txs()[p].id);
        at = p;
    }
    seq.reverse();
    seq
}

/// Longer wins; equal lengths go to the lexicographically smaller id
/// sequence.
fn better(g: &TxGraph, via: &[Option<usize>], len: &[f64], a: usize, b: usize) -> bool {
    match len[a].partial_cmp(&len[b]).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => walk_back(g, via, a) < walk_back(g, via, b),
    }
}

/// Longest path by total `cost`, with ties broken by the smallest sequence
/// of transaction ids.
pub fn critical_path(g: &TxGraph, cost: impl Fn(&Tx) -> f64) -> CriticalPath {
    let n = g.len();
    let mut len = vec![0.0; n];
    let mut via: Vec<Option<usize>> = vec![None; n];
    for &i in g.order() {
        let mut best: Option<usize> = None;
        for &p in g.preds(i) {
            if best.is_none_or(|b| better(g, &via, &len, p, b)) {
                best = Some(p);
            }
        }
        via[i] = best;
        len[i] = best.map_or(0.0, |b| len[b]) + cost(&g.txs()[i]);
    }
    let mut end: Option<usize> = None;
    for i in 0..n {
        if end.is_none_or(|e| better(g, &via, &len, i, e)) {
            end = Some(i);
        }
    }
    match end {
        None => CriticalPath {
            length: 0.0,
            path: Vec::new(),
        },
        Some(e) => CriticalPath {
            length: len[e],
            path: walk_back(g, &via, e).into_iter().cloned().collect(),
        },
    }
}
