mod common;

use std::collections::BTreeMap;

use blockweb::bank::{Bank, BankError};
use blockweb::harness::{reference_config, run_bank_race};
use blockweb::sim::Fault;
use common::{bank_workload, check_linearizations};

#[test]
fn every_linearization_matches_slot_order_replay() {
    let mut tried = 0;
    let mut raced_losses = 0;
    for seed in 0..12 {
        let accounts = 2 + (seed as usize % 4);
        let w = bank_workload(seed, accounts, 8).unwrap();
        let replayed: BTreeMap<_, _> = w
            .initial
            .keys()
            .map(|id| (*id, w.bank.balance(id).unwrap()))
            .collect();
        assert!(w.committed.len() <= 8);
        for t in &w.committed {
            assert_eq!(t.slots.len(), 2, "a transfer sits on both account chains");
        }
        tried += check_linearizations(&w.initial, &w.committed, &replayed).unwrap();
        assert_eq!(
            replayed.values().sum::<u64>(),
            w.initial.values().sum::<u64>()
        );
        raced_losses += w.lost;
    }
    assert!(tried >= 12);
    assert!(raced_losses > 0, "no batch ever raced");
}

#[test]
fn double_spend_races_have_one_winner() {
    for seed in 0..50 {
        let (o, _) = run_bank_race(seed).unwrap();
        assert_eq!(o.winners, 1, "seed {seed}");
        assert!(o.conserved, "seed {seed}");
    }
}

#[test]
fn races_stay_safe_with_a_faulty_server() {
    for (seed, fault) in [
        (1, Fault::Mute),
        (2, Fault::Equivocate),
        (3, Fault::ForgeReject),
    ] {
        let config = reference_config(seed).with_fault(&format!("bank-fern{}", seed % 4), fault);
        let mut bank = Bank::new(config).unwrap();
        let a = bank.open_account("alice", 100).unwrap();
        let b = bank.open_account("bob", 0).unwrap();
        let c = bank.open_account("carol", 0).unwrap();
        let out = bank.race(&[(a, b, 80), (a, c, 80)]).unwrap();
        bank.world.quiesce();
        assert!(out.iter().filter(|r| r.is_ok()).count() <= 1, "{fault:?}");
        assert!(bank.world.sim.conflicts().is_empty(), "{fault:?}");
        assert_eq!(bank.total().unwrap(), 100);
    }
}

#[test]
fn history_lists_transfers_in_slot_order() {
    let mut bank = Bank::new(reference_config(9)).unwrap();
    let a = bank.open_account("alice", 50).unwrap();
    let b = bank.open_account("bob", 5).unwrap();
    bank.transfer(a, b, 20, b"rent").unwrap();
    bank.transfer(b, a, 3, b"change").unwrap();
    assert_eq!(
        (bank.balance(&a).unwrap(), bank.balance(&b).unwrap()),
        (33, 22)
    );
    let h = bank.history(&b).unwrap();
    assert_eq!(
        h.iter().map(|(s, t)| (*s, t.amount)).collect::<Vec<_>>(),
        vec![(1, 20), (2, 3)]
    );
    assert!(matches!(
        bank.transfer(b, a, 23, b""),
        Err(BankError::InsufficientFunds {
            available: 22,
            requested: 23
        })
    ));
}
