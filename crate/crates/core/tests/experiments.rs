use blockweb::harness::{bank_race, multichain_append, run_experiment};

#[test]
fn joint_appends_slow_down_with_more_chains() {
    let r = multichain_append(2, &[1, 2, 3], 12, 10).unwrap();
    let means: Vec<f64> = r.per_op.iter().map(|s| s.mean_ms).collect();
    assert_eq!(means.len(), 3);
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    assert_eq!(r.summary["strictly_increasing"], true);
}

#[test]
fn bank_race_has_one_winner_across_a_hundred_seeds() {
    let r = bank_race(0, 100).unwrap();
    assert_eq!(r.summary["runs"], 100);
    assert_eq!(r.summary["exactly_one_winner"], 100);
    assert_eq!(r.summary["conserved"], 100);
}

#[test]
fn named_experiments_echo_their_config() {
    for name in ["timestamp-vs-chain", "multichain-append", "bank-race"] {
        let r = run_experiment(name, 5).unwrap();
        assert_eq!(r.experiment, name);
        assert_eq!(r.seed, 5);
        assert!(r.config.is_object() && !r.per_op.is_empty() && r.messages_total > 0);
    }
}
