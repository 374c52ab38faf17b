//! Serialized versus parallel completion time of a payment graph.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::graph::{Id, Tx, TxGraph};
use crate::path::{critical_path, CriticalPath};
use crate::refactor::{refactor_two_account, RefactorError};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub txs: usize,
    pub serialized: f64,
    pub parallel: f64,
    pub speedup: f64,
    pub critical_path: Vec<Id>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub cost_serialized: f64,
    pub cost_parallel: f64,
    pub original: Timing,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub two_account: Option<Timing>,
}

/// Every transaction costs `serialized_cost` when run one at a time and
/// `parallel_cost` on the critical path.
pub fn timing(g: &TxGraph, serialized_cost: f64, parallel_cost: f64) -> Timing {
    let CriticalPath { length, path } = critical_path(g, |_| parallel_cost);
    let serialized = serialized_cost * g.len() as f64;
    Timing {
        txs: g.len(),
        serialized,
        parallel: length,
        speedup: if length > 0.0 {
            serialized / length
        } else {
            1.0
        },
        critical_path: path,
    }
}

/// Input values for refactoring `tx`. Outputs produced outside the graph
/// have unknown values: the first of them absorbs whatever balances the
/// transaction, and a shortfall on the input side becomes a fee output.
type Side = Vec<(Id, u64)>;

fn balanced_sides(g: &TxGraph, tx: &Tx) -> (Side, Side) {
    let known: u128 = tx
        .inputs
        .iter()
        .filter_map(|e| g.edge_value(e))
        .map(u128::from)
        .sum();
    let out: u128 = tx.outputs.iter().map(|(_, v)| u128::from(*v)).sum();
    let mut residual = out.saturating_sub(known);
    let mut ins = Vec::new();
    for e in &tx.inputs {
        let v = match g.edge_value(e) {
            Some(v) => v,
            None => {
                let v = u64::try_from(residual).unwrap_or(u64::MAX);
                residual -= u128::from(v);
                v
            }
        };
        ins.push((e.clone(), v));
    }
    let mut outs = tx.outputs.clone();
    let total_in: u128 = ins.iter().map(|(_, v)| u128::from(*v)).sum();
    if total_in > out {
        outs.push((
            Id::Name(format!("{}/fee", tx.id)),
            u64::try_from(total_in - out).unwrap_or(u64::MAX),
        ));
    }
    (ins, outs)
}

/// Replaces every transaction with at least one input and one output by
/// its two-account fragment. Outputs paid in parts are spent part by part.
pub fn refactor_graph(g: &TxGraph) -> Result<TxGraph, RefactorError> {
    let mut parts: BTreeMap<Id, Vec<(Id, u64)>> = BTreeMap::new();
    let mut txs = Vec::new();
    for &i in g.order() {
        let tx = &g.txs()[i];
        let (ins, outs) = balanced_sides(g, tx);
        let ins: Vec<(Id, u64)> = ins
            .into_iter()
            .flat_map(|(e, v)| parts.remove(&e).unwrap_or_else(|| vec![(e, v)]))
            .collect();
        if ins.is_empty() || tx.outputs.is_empty() {
            txs.push(Tx {
                id: tx.id.clone(),
                inputs: ins.into_iter().map(|(e, _)| e).collect(),
                outputs: tx.outputs.clone(),
            });
            continue;
        }
        let frag = refactor_two_account(&tx.id, &ins, &outs)?;
        for sink in frag.sinks {
            parts.insert(sink.edge, sink.parts);
        }
        txs.extend(frag.graph.txs().iter().cloned());
    }
    Ok(TxGraph::new(txs)?)
}

pub fn compare(
    g: &TxGraph,
    serialized_cost: f64,
    parallel_cost: f64,
    refactor: bool,
) -> Result<Comparison, RefactorError> {
    let two_account = if refactor {
        Some(timing(&refactor_graph(g)?, serialized_cost, parallel_cost))
    } else {
        None
    };
    Ok(Comparison {
        cost_serialized: serialized_cost,
        cost_parallel: parallel_cost,
        original: timing(g, serialized_cost, parallel_cost),
        two_account,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_graph;

    #[test]
    fn independent_txs_speed_up_by_their_count() {
        let g = parse_graph(
            &(0..6)
                .map(|i| format!("{{\"id\":{i},\"inputs\":[],\"outputs\":[]}}"))
                .collect::<Vec<_>>()
                .join("\n"),
        )
        .unwrap();
        let t = timing(&g, 1.0, 1.0);
        assert_eq!((t.serialized, t.parallel, t.speedup), (6.0, 1.0, 6.0));
    }

    #[test]
    fn a_chain_does_not_speed_up() {
        let lines: Vec<String> = (0..4)
            .map(|i| {
                format!(
                    "{{\"id\":{i},\"inputs\":[\"e{i}\"],\"outputs\":[[\"e{}\",1]]}}",
                    i + 1
                )
            })
            .collect();
        let g = parse_graph(&lines.join("\n")).unwrap();
        assert_eq!(timing(&g, 1.0, 1.0).speedup, 1.0);
    }

    #[test]
    fn unknown_inputs_absorb_the_balance_and_fees_become_outputs() {
        let g = parse_graph(
            "{\"id\":1,\"inputs\":[],\"outputs\":[[\"a\",10]]}\n\
             {\"id\":2,\"inputs\":[\"a\",\"x\",\"y\"],\"outputs\":[[\"b\",15],[\"c\",1]]}\n\
             {\"id\":3,\"inputs\":[\"b\"],\"outputs\":[[\"d\",12]]}",
        )
        .unwrap();
        let (ins, _) = balanced_sides(&g, &g.txs()[1]);
        assert_eq!(
            ins.iter().map(|(_, v)| *v).collect::<Vec<_>>(),
            vec![10, 6, 0]
        );
        let (_, outs) = balanced_sides(&g, &g.txs()[2]);
        assert_eq!(outs.last().unwrap().1, 3);
        let r = compare(&g, 1.0, 1.0, true).unwrap();
        let two = r.two_account.unwrap();
        assert!(two.txs > 3);
        assert!(two.parallel >= r.original.parallel);
    }
}
