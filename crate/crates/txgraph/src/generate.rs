//! Seeded synthetic payment graphs with preferential attachment: outputs of
//! busy transactions are more likely to be spent again, which yields a
//! heavy-tailed degree distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Id, Tx, TxGraph};

#[derive(Clone, Copy, Debug)]
pub struct GenParams {
    pub txs: usize,
    /// Chance that a transaction mints fresh value instead of spending.
    pub mint_rate: f64,
    pub max_inputs: usize,
    pub max_outputs: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            txs: 500,
            mint_rate: 0.1,
            max_inputs: 4,
            max_outputs: 4,
        }
    }
}

struct Unspent {
    edge: Id,
    value: u64,
    weight: u64,
}

pub fn scale_free(seed: u64, params: GenParams) -> TxGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<Unspent> = Vec::new();
    let mut txs = Vec::with_capacity(params.txs);
    let mut next_edge = 0u64;
    for t in 0..params.txs as u64 {
        let mut inputs = Vec::new();
        let mut value = 0u64;
        if pool.is_empty() || rng.gen_bool(params.mint_rate) {
            value = rng.gen_range(1..=1_000);
        } else {
            let k = rng.gen_range(1..=params.max_inputs.max(1)).min(pool.len());
            for _ in 0..k {
                let total: u64 = pool.iter().map(|u| u.weight).sum();
                let mut pick = rng.gen_range(0..total);
                let idx = pool
                    .iter()
                    .position(|u| {
                        if pick < u.weight {
                            true
                        } else {
                            pick -= u.weight;
                            false
                        }
                    })
                    .expect("pick below total weight");
                let u = pool.swap_remove(idx);
                value += u.value;
                inputs.push(u.edge);
            }
        }
        let m = rng.gen_range(1..=params.max_outputs.max(1)) as u64;
        let mut cuts: Vec<u64> = (1..m).map(|_| rng.gen_range(0..=value)).collect();
        cuts.push(0);
        cuts.push(value);
        cuts.sort_unstable();
        let weight = inputs.len() as u64 + m;
        let mut outputs = Vec::new();
        for w in cuts.windows(2) {
            let edge = Id::Num(next_edge);
            next_edge += 1;
            outputs.push((edge.clone(), w[1] - w[0]));
            pool.push(Unspent {
                edge,
                value: w[1] - w[0],
                weight,
            });
        }
        txs.push(Tx {
            id: Id::Num(t),
            inputs,
            outputs,
        });
    }
    TxGraph::new(txs).expect("generated graphs spend each output once, in order")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_conserving() {
        let p = GenParams {
            txs: 200,
            ..GenParams::default()
        };
        let a = scale_free(7, p);
        assert_eq!(a, scale_free(7, p));
        assert_ne!(a, scale_free(8, p));
        for tx in a.txs().iter().filter(|t| !t.inputs.is_empty()) {
            let spent: u64 = tx.inputs.iter().map(|e| a.edge_value(e).unwrap()).sum();
            assert_eq!(spent, tx.output_value());
        }
    }
}
