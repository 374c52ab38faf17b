//! Payment graphs: transactions are vertices, spent outputs are edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A transaction or output identifier. Numbers order before names and
/// compare numerically.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Id {
    Num(u64),
    Name(String),
}

impl fmt::Display for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Id::Num(n) => write!(f, "{n}"),
            Id::Name(s) => f.write_str(s),
        }
    }
}

impl From<u64> for Id {
    fn from(n: u64) -> Self {
        Id::Num(n)
    }
}

impl From<&str> for Id {
    fn from(s: &str) -> Self {
        Id::Name(s.to_string())
    }
}

impl From<String> for Id {
    fn from(s: String) -> Self {
        Id::Name(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tx {
    pub id: Id,
    pub inputs: Vec<Id>,
    pub outputs: Vec<(Id, u64)>,
}

impl Tx {
    pub fn new(id: impl Into<Id>, inputs: Vec<Id>, outputs: Vec<(Id, u64)>) -> Self {
        Tx {
            id: id.into(),
            inputs,
            outputs,
        }
    }

    pub fn output_value(&self) -> u64 {
        self.outputs.iter().map(|(_, v)| v).sum()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("transactions {0:?} form a cycle")]
    CycleDetected(Vec<Id>),
    #[error("output {edge} is spent by {first} and {second}")]
    DoubleSpendInInput { edge: Id, first: Id, second: Id },
}

/// A validated payment DAG.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxGraph {
    txs: Vec<Tx>,
    index: BTreeMap<Id, usize>,
    producer: BTreeMap<Id, (usize, u64)>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    order: Vec<usize>,
}

impl TxGraph {
    /// Validates `txs`: unique ids, each output produced once, each output
    /// spent at most once, no cycles.
    pub fn new(txs: Vec<Tx>) -> Result<Self, GraphError> {
        let mut index = BTreeMap::new();
        for (i, tx) in txs.iter().enumerate() {
            if index.insert(tx.id.clone(), i).is_some() {
                return Err(GraphError::ParseError {
                    line: i + 1,
                    message: format!("duplicate transaction {}", tx.id),
                });
            }
        }
        let mut producer = BTreeMap::new();
        for (i, tx) in txs.iter().enumerate() {
            for (e, v) in &tx.outputs {
                if producer.insert(e.clone(), (i, *v)).is_some() {
                    return Err(GraphError::ParseError {
                        line: i + 1,
                        message: format!("output {e} produced twice"),
                    });
                }
            }
        }
        let mut spender: BTreeMap<&Id, usize> = BTreeMap::new();
        let mut preds = vec![Vec::new(); txs.len()];
        let mut succs = vec![Vec::new(); txs.len()];
        for (i, tx) in txs.iter().enumerate() {
            for e in &tx.inputs {
                if let Some(&first) = spender.get(e) {
                    return Err(GraphError::DoubleSpendInInput {
                        edge: e.clone(),
                        first: txs[first].id.clone(),
                        second: tx.id.clone(),
                    });
                }
                spender.insert(e, i);
                if let Some(&(p, _)) = producer.get(e) {
                    if !preds[i].contains(&p) {
                        preds[i].push(p);
                        succs[p].push(i);
                    }
                }
            }
        }
        let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: VecDeque<usize> = (0..txs.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(txs.len());
        while let Some(i) = ready.pop_front() {
            order.push(i);
            for &s in &succs[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.push_back(s);
                }
            }
        }
        if order.len() < txs.len() {
            let placed: BTreeSet<usize> = order.iter().copied().collect();
            let stuck = (0..txs.len())
                .filter(|i| !placed.contains(i))
                .map(|i| txs[i].id.clone())
                .collect();
            return Err(GraphError::CycleDetected(stuck));
        }
        Ok(TxGraph {
            txs,
            index,
            producer,
            preds,
            succs,
            order,
        })
    }

    pub fn txs(&self) -> &[Tx] {
        &self.txs
    }

    pub fn len(&self) -> usize {
        self.txs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txs.is_empty()
    }

    pub fn get(&self, id: &Id) -> Option<&Tx> {
        self.index.get(id).map(|&i| &self.txs[i])
    }

    /// Indices of the transactions whose outputs transaction `i` spends.
    pub fn preds(&self, i: usize) -> &[usize] {
        &self.preds[i]
    }

    /// Indices of the transactions that spend an output of transaction `i`.
    pub fn succs(&self, i: usize) -> &[usize] {
        &self.succs[i]
    }

    /// Transaction indices in a topological order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// The value of an output, if some transaction in the graph produced it.
    pub fn edge_value(&self, edge: &Id) -> Option<u64> {
        self.producer.get(edge).map(|(_, v)| *v)
    }

    /// Whether one path runs through every transaction, so that none of
    /// them can run in parallel with another.
    pub fn is_chain(&self) -> bool {
        !self.txs.is_empty()
            && self
                .order
                .windows(2)
                .all(|w| self.preds[w[1]].contains(&w[0]))
    }
}

/// Parses one JSON transaction per line; blank lines are skipped.
pub fn parse_graph(text: &str) -> Result<TxGraph, GraphError> {
    let mut txs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tx: Tx = serde_json::from_str(line).map_err(|e| GraphError::ParseError {
            line: n + 1,
            message: e.to_string(),
        })?;
        txs.push(tx);
    }
    TxGraph::new(txs)
}

pub fn load_graph(path: &Path) -> Result<TxGraph, GraphError> {
    let text = std::fs::read_to_string(path).map_err(|e| GraphError::ParseError {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    parse_graph(&text)
}

/// Serializes a graph in the line format [`parse_graph`] reads.
pub fn write_graph(g: &TxGraph) -> String {
    let mut out = String::new();
    for tx in g.txs() {
        out.push_str(&serde_json::to_string(tx).expect("plain data"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_numeric_and_named_ids() {
        let g = parse_graph(
            r#"{"id":1,"inputs":[],"outputs":[["a",5],[7,3]]}

{"id":"two","inputs":["a",7],"outputs":[["b",8]]}"#,
        )
        .unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(
            g.get(&Id::from("two")).unwrap().inputs,
            vec![Id::from("a"), Id::Num(7)]
        );
        assert_eq!(g.preds(1), &[0]);
        assert_eq!(g.edge_value(&Id::Num(7)), Some(3));
        assert_eq!(parse_graph(&write_graph(&g)).unwrap(), g);
    }

    #[test]
    fn rejects_double_spends_cycles_and_garbage() {
        let ds = "{\"id\":1,\"inputs\":[],\"outputs\":[[\"a\",1]]}\n\
                  {\"id\":2,\"inputs\":[\"a\"],\"outputs\":[]}\n\
                  {\"id\":3,\"inputs\":[\"a\"],\"outputs\":[]}";
        assert!(matches!(
            parse_graph(ds),
            Err(GraphError::DoubleSpendInInput { .. })
        ));
        let cyc = "{\"id\":1,\"inputs\":[\"b\"],\"outputs\":[[\"a\",1]]}\n\
                   {\"id\":2,\"inputs\":[\"a\"],\"outputs\":[[\"b\",1]]}";
        assert_eq!(
            parse_graph(cyc),
            Err(GraphError::CycleDetected(vec![Id::Num(1), Id::Num(2)]))
        );
        assert!(matches!(
            parse_graph("{\"id\":1"),
            Err(GraphError::ParseError { line: 1, .. })
        ));
        let dup =
            "{\"id\":1,\"inputs\":[],\"outputs\":[]}\n{\"id\":1,\"inputs\":[],\"outputs\":[]}";
        assert!(matches!(
            parse_graph(dup),
            Err(GraphError::ParseError { line: 2, .. })
        ));
    }

    #[test]
    fn chains_are_recognized() {
        let chain = "{\"id\":1,\"inputs\":[],\"outputs\":[[\"a\",1]]}\n{\"id\":2,\"inputs\":[\"a\"],\"outputs\":[]}";
        assert!(parse_graph(chain).unwrap().is_chain());
        let pair =
            "{\"id\":1,\"inputs\":[],\"outputs\":[]}\n{\"id\":2,\"inputs\":[],\"outputs\":[]}";
        assert!(!parse_graph(pair).unwrap().is_chain());
    }
}
