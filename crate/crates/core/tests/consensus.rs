use blockweb::client::AppendOutcome;
use blockweb::harness::{reference_config, split_race, sweep};
use blockweb::sim::Fault;
use blockweb::world::World;

#[test]
fn one_faulty_server_never_splits_a_chain() {
    for fault in [Fault::Mute, Fault::Equivocate, Fault::ForgeReject] {
        let s = sweep(100..160, fault, 1, 1).unwrap();
        assert_eq!(s.conflicts, 0, "{fault:?}: {s:?}");
        assert_eq!(s.undecided, 0, "{fault:?}: {s:?}");
    }
}

#[test]
fn joint_appends_are_atomic_under_one_fault() {
    for fault in [Fault::Mute, Fault::Equivocate] {
        let s = sweep(200..230, fault, 1, 2).unwrap();
        assert_eq!(
            (s.conflicts, s.atomicity_violations),
            (0, 0),
            "{fault:?}: {s:?}"
        );
    }
}

#[test]
fn split_quorums_hold_within_tolerance() {
    for seed in 0..40 {
        let run = split_race(seed, Fault::Equivocate, 1).unwrap();
        assert!(run.conflicts.is_empty(), "seed {seed}");
    }
}

#[test]
fn two_equivocators_can_split_a_chain() {
    let run = split_race(33, Fault::Equivocate, 2).unwrap();
    assert!(
        !run.conflicts.is_empty(),
        "the detector should fire on this schedule"
    );
    for (a, b) in &run.conflicts {
        assert!(a.verify() && b.verify());
        assert!(blockweb::consensus::conflicts(a, b));
    }
}

#[test]
fn a_faulty_server_in_each_consortium_cannot_break_a_meet() {
    for seed in 0..10 {
        let config = reference_config(seed)
            .with_fault(&format!("left-fern{}", seed % 4), Fault::Equivocate)
            .with_fault(&format!("right-fern{}", (seed + 1) % 4), Fault::Mute);
        let mut world = World::new(config).unwrap();
        let left = world.add_default_cluster("left");
        let right = world.add_default_cluster("right");
        world.sim.check_faults().unwrap();
        let l = world.mint(&left.label, vec![b"left".to_vec()]).unwrap();
        let r = world.mint(&right.label, vec![b"right".to_vec()]).unwrap();
        let heads = vec![l.clone(), r.clone()];
        let results = world
            .race(vec![
                (heads.clone(), vec![b"one".to_vec()]),
                (heads.clone(), vec![b"two".to_vec()]),
            ])
            .unwrap();
        world.quiesce();
        assert!(world.sim.conflicts().is_empty(), "seed {seed}");
        let won: Vec<_> = results
            .into_iter()
            .filter_map(|r| match r.outcome {
                Ok(AppendOutcome::Appended { reference, .. }) => Some(reference),
                _ => None,
            })
            .collect();
        assert_eq!(won.len(), 1, "seed {seed}");
        let proof = &won[0].integ_atts[0];
        for c in [&left, &right] {
            let spec = c.label.integrity.as_ref().unwrap().quorum_spec();
            assert!(
                proof.restrict(spec).is_some_and(|p| p.verify()),
                "seed {seed}"
            );
        }
        let (mut l, mut r) = (l, r);
        l.advance(won[0].clone());
        r.advance(won[0].clone());
        assert_eq!(world.verify(&l).unwrap().head_slot(), 1);
        assert_eq!(world.verify(&r).unwrap().head_slot(), 1);
    }
}

#[test]
fn same_seed_same_trace() {
    let digest = || {
        let mut config = reference_config(77).with_fault("c-fern2", Fault::Mute);
        config.record_trace = true;
        let mut world = World::new(config).unwrap();
        let c = world.add_default_cluster("c");
        let mut head = world.mint(&c.label, vec![]).unwrap();
        for i in 0..3u8 {
            world.append(&mut [&mut head], vec![vec![i]]).unwrap();
        }
        world.quiesce();
        assert!(!world.sim.trace().is_empty());
        (world.sim.trace_digest(), world.sim.metrics().messages_total)
    };
    assert_eq!(digest(), digest());
}
