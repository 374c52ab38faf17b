//! Rewrites one many-party transaction as a log-depth DAG of transactions
//! that each spend at most two outputs and create at most two.
//!
//! Lanes are padded to a power of two `P`. Layer `s` has one node per lane;
//! the node on lane `k` pays lanes `k` and `k + 2^s (mod P)` of the next
//! layer, and the last layer pays the sinks the same way. Every source
//! reaches every sink along exactly one path, so any transport plan can be
//! routed. The plan is filled greedily left to right.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{GraphError, Id, Tx, TxGraph};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RefactorError {
    #[error("inputs carry {inputs} but outputs carry {outputs}")]
    ValueMismatch { inputs: u128, outputs: u128 },
    #[error("a transaction needs at least one input and one output")]
    EmptySide,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// An output of the original transaction. The last layer may pay it in
/// two parts; a part keeps the output's own id when it is the only one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sink {
    pub edge: Id,
    pub value: u64,
    pub parts: Vec<(Id, u64)>,
}

#[derive(Clone, Debug)]
pub struct Fragment {
    pub graph: TxGraph,
    /// Number of layers on the longest source-to-sink path.
    pub depth: usize,
    pub sources: Vec<(Id, u64)>,
    pub sinks: Vec<Sink>,
}

/// Greedy transport plan: `(input, output, amount)` triples.
fn plan(inputs: &[u64], outputs: &[u64]) -> Vec<(usize, usize, u64)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    let (mut left, mut need) = (
        inputs.first().copied().unwrap_or(0),
        outputs.first().copied().unwrap_or(0),
    );
    while i < inputs.len() && j < outputs.len() {
        let f = left.min(need);
        if f > 0 {
            out.push((i, j, f));
        }
        left -= f;
        need -= f;
        if left == 0 {
            i += 1;
            left = inputs.get(i).copied().unwrap_or(0);
        }
        if need == 0 {
            j += 1;
            need = outputs.get(j).copied().unwrap_or(0);
        }
    }
    out
}

/// Refactors transaction `id`, spending `inputs` and creating `outputs`.
pub fn refactor_two_account(
    id: &Id,
    inputs: &[(Id, u64)],
    outputs: &[(Id, u64)],
) -> Result<Fragment, RefactorError> {
    let (n, m) = (inputs.len(), outputs.len());
    if n == 0 || m == 0 {
        return Err(RefactorError::EmptySide);
    }
    let total_in: u128 = inputs.iter().map(|(_, v)| u128::from(*v)).sum();
    let total_out: u128 = outputs.iter().map(|(_, v)| u128::from(*v)).sum();
    if total_in != total_out {
        return Err(RefactorError::ValueMismatch {
            inputs: total_in,
            outputs: total_out,
        });
    }
    let p = n.max(m).next_power_of_two();
    let layers = (p.trailing_zeros() as usize).max(1);
    let node_id = |s: usize, k: usize| Id::Name(format!("{id}/{s}.{k}"));
    // Stage `s` sends lane `k` to `k` and `k + 2^s`; stage `layers - 1`
    // targets the sinks.
    let step = |s: usize, k: usize| [k, (k + (1 << s)) % p];

    let mut live = vec![vec![false; p]; layers];
    live[0][..n].fill(true);
    for s in 1..layers {
        for k in 0..p {
            if live[s - 1][k] {
                for x in step(s - 1, k) {
                    live[s][x] = true;
                }
            }
        }
    }
    let mut reaches = vec![vec![false; p]; layers];
    for k in 0..p {
        reaches[layers - 1][k] = live[layers - 1][k] && step(layers - 1, k).iter().any(|&j| j < m);
    }
    for s in (0..layers - 1).rev() {
        for k in 0..p {
            reaches[s][k] = live[s][k] && step(s, k).iter().any(|&x| reaches[s + 1][x]);
        }
    }

    // Value on each stage edge (s, from lane, to lane).
    let mut flow: BTreeMap<(usize, usize, usize), u64> = BTreeMap::new();
    let in_values: Vec<u64> = inputs.iter().map(|(_, v)| *v).collect();
    let out_values: Vec<u64> = outputs.iter().map(|(_, v)| *v).collect();
    for (i, j, f) in plan(&in_values, &out_values) {
        let d = (j + p - i) % p;
        let mut lane = i;
        for s in 0..layers {
            let next = if d & (1 << s) != 0 {
                (lane + (1 << s)) % p
            } else {
                lane
            };
            *flow.entry((s, lane, next)).or_default() += f;
            lane = next;
        }
    }

    let edge_id = |s: usize, from: usize, to: usize| Id::Name(format!("{id}/{s}.{from}-{to}"));
    let last = layers - 1;
    let payers = |j: usize| -> Vec<usize> {
        (0..p)
            .filter(|&k| reaches[last][k] && step(last, k).contains(&j))
            .collect()
    };
    let part_id = |j: usize, k: usize| {
        if payers(j).len() == 1 {
            outputs[j].0.clone()
        } else {
            Id::Name(format!("{}@{k}", outputs[j].0))
        }
    };
    let mut txs = Vec::new();
    for s in 0..layers {
        for k in 0..p {
            if !reaches[s][k] {
                continue;
            }
            let mut tx_in = Vec::new();
            if s == 0 {
                tx_in.push(inputs[k].0.clone());
            } else {
                for (from, &reached) in reaches[s - 1].iter().enumerate() {
                    if reached && step(s - 1, from).contains(&k) {
                        tx_in.push(edge_id(s - 1, from, k));
                    }
                }
            }
            let mut tx_out = Vec::new();
            let mut targets = step(s, k).to_vec();
            targets.dedup();
            for x in targets {
                let v = flow.get(&(s, k, x)).copied().unwrap_or(0);
                if s == last {
                    if x < m {
                        tx_out.push((part_id(x, k), v));
                    }
                } else if reaches[s + 1][x] {
                    tx_out.push((edge_id(s, k, x), v));
                }
            }
            txs.push(Tx {
                id: node_id(s, k),
                inputs: tx_in,
                outputs: tx_out,
            });
        }
    }
    let sinks = outputs
        .iter()
        .enumerate()
        .map(|(j, (edge, value))| Sink {
            edge: edge.clone(),
            value: *value,
            parts: payers(j)
                .into_iter()
                .map(|k| {
                    let x = step(last, k).into_iter().find(|&x| x == j).expect("payer");
                    (part_id(j, k), flow.get(&(last, k, x)).copied().unwrap_or(0))
                })
                .collect(),
        })
        .collect();
    Ok(Fragment {
        graph: TxGraph::new(txs)?,
        depth: layers,
        sources: inputs.to_vec(),
        sinks,
    })
}

/// [`refactor_two_account`] with generated edge names `in{i}` and
/// `out{j}`.
pub fn refactor_values(inputs: &[u64], outputs: &[u64]) -> Result<Fragment, RefactorError> {
    let ins: Vec<(Id, u64)> = inputs
        .iter()
        .enumerate()
        .map(|(i, v)| (Id::Name(format!("in{i}")), *v))
        .collect();
    let outs: Vec<(Id, u64)> = outputs
        .iter()
        .enumerate()
        .map(|(j, v)| (Id::Name(format!("out{j}")), *v))
        .collect();
    refactor_two_account(&Id::from("tx"), &ins, &outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_to_one_is_a_pass_through() {
        let f = refactor_values(&[7], &[7]).unwrap();
        assert_eq!(f.depth, 1);
        assert_eq!(f.graph.len(), 1);
        let tx = &f.graph.txs()[0];
        assert_eq!(tx.inputs, vec![Id::from("in0")]);
        assert_eq!(tx.outputs, vec![(Id::from("out0"), 7)]);
        assert_eq!(f.sinks[0].parts, vec![(Id::from("out0"), 7)]);
    }

    #[test]
    fn four_by_four_is_the_butterfly() {
        let f = refactor_values(&[5; 4], &[5; 4]).unwrap();
        assert_eq!(f.depth, 2);
        assert_eq!(f.graph.len(), 8);
        let succ = |name: &str| -> Vec<String> {
            let tx = f.graph.get(&Id::from(name)).unwrap();
            tx.outputs
                .iter()
                .map(|(e, _)| {
                    f.graph
                        .txs()
                        .iter()
                        .find(|t| t.inputs.contains(e))
                        .map(|t| t.id.to_string())
                        .unwrap_or_else(|| e.to_string())
                })
                .collect()
        };
        assert_eq!(succ("tx/0.0"), ["tx/1.0", "tx/1.1"]);
        assert_eq!(succ("tx/0.3"), ["tx/1.3", "tx/1.0"]);
        assert_eq!(succ("tx/1.1"), ["out1@1", "out3@1"]);
        assert_eq!(succ("tx/1.2"), ["out2@2", "out0@2"]);
        for sink in &f.sinks {
            assert_eq!(sink.parts.iter().map(|(_, v)| v).sum::<u64>(), 5);
        }
    }

    #[test]
    fn mismatched_values_are_rejected() {
        assert_eq!(
            refactor_values(&[3, 4], &[8]).unwrap_err(),
            RefactorError::ValueMismatch {
                inputs: 7,
                outputs: 8
            }
        );
        assert_eq!(
            refactor_values(&[], &[]).unwrap_err(),
            RefactorError::EmptySide
        );
    }

    #[test]
    fn greedy_plan_conserves() {
        let p = plan(&[4, 0, 6], &[5, 5]);
        assert_eq!(p, vec![(0, 0, 4), (2, 0, 1), (2, 1, 5)]);
    }
}
