mod common;

use blockweb::block::build_block;
use blockweb::chains::{
    append_block, recursive_availability, recursive_integrity, verify_chain, ChainError, ChainHead,
};
use blockweb::consensus::InstanceId;
use blockweb::harness::reference_config;
use blockweb::policy::{AvailabilityPolicy, IntegrityPolicy, Label};
use blockweb::world::World;
use common::{tamper_payload, Forge};

#[test]
fn twelve_appends_verify_over_the_simulator() {
    let mut world = World::new(reference_config(12)).unwrap();
    let c = world.add_default_cluster("c");
    let mut head = world.mint(&c.label, vec![b"root".to_vec()]).unwrap();
    for i in 0..12 {
        world
            .append(&mut [&mut head], vec![format!("append {i}").into_bytes()])
            .unwrap();
    }
    let chain = world.verify(&head).unwrap();
    assert_eq!(chain.blocks.len(), 13);
    assert_eq!(
        chain.blocks.iter().map(|e| e.slot).collect::<Vec<_>>(),
        (0..=12).collect::<Vec<_>>()
    );
}

fn forged_chain(appends: usize) -> (Forge, ChainHead) {
    let mut f = Forge::new("forged");
    let mut head = f.mint(b"root");
    for i in 0..appends {
        f.append(&mut head, format!("append {i}").as_bytes());
    }
    (f, head)
}

#[test]
fn honest_forged_chain_verifies() {
    let (f, head) = forged_chain(12);
    let chain = verify_chain(&head.head, head.chain(), &|h| f.fetch(h)).unwrap();
    assert_eq!(chain.head_slot(), 12);
}

#[test]
fn payload_tamper_is_a_broken_link() {
    let (f, head) = forged_chain(12);
    let victim = f
        .store
        .values()
        .find(|b| b.label().claims().iter().any(|c| c.slot == 5))
        .unwrap()
        .root();
    let fetch = |h: &blockweb::crypto::Hash| {
        f.fetch(h).map(|b| {
            if b.root() == victim {
                tamper_payload(&b)
            } else {
                b
            }
        })
    };
    let err = verify_chain(&head.head, head.chain(), &fetch).unwrap_err();
    assert!(
        matches!(err, ChainError::BrokenLink { slot: 6, .. }),
        "{err:?}"
    );
}

#[test]
fn skipped_slot_is_a_slot_gap() {
    let (mut f, head) = forged_chain(1);
    let skipping = ChainHead {
        slot: 2,
        ..head.clone()
    };
    let (block, instance) = append_block(&[skipping], vec![b"skip".to_vec()]).unwrap();
    let r = f.attest(block, &instance, 4);
    let err = verify_chain(&r, head.chain(), &|h| f.fetch(h)).unwrap_err();
    assert_eq!(
        err,
        ChainError::SlotGap {
            expected: 2,
            found: 1
        }
    );
}

#[test]
fn dropped_accept_is_an_invalid_proof() {
    let (mut f, mut head) = forged_chain(3);
    let (block, instance) =
        append_block(std::slice::from_ref(&head), vec![b"short".to_vec()]).unwrap();
    let r = f.attest(block, &instance, 2);
    head.advance(r);
    f.append(&mut head, b"after");
    let err = verify_chain(&head.head, head.chain(), &|h| f.fetch(h)).unwrap_err();
    assert_eq!(err, ChainError::InvalidProof { slot: 4 });
}

#[test]
fn weaker_label_is_reported() {
    let (mut f, head) = forged_chain(2);
    let wids: Vec<_> = f.wilburs.iter().map(|k| k.id()).collect();
    let weak = Label::new(
        AvailabilityPolicy::k_of(wids, 1).unwrap(),
        Some(IntegrityPolicy::new(f.spec.clone())),
    );
    let instance = InstanceId::single(head.chain(), 3);
    let weak = weak.with_claims(instance.claims().clone()).unwrap();
    let block = build_block(
        vec![b"weak".to_vec()],
        vec![head.head.clone(), head.root.clone()],
        weak,
    );
    let r = f.attest(block, &instance, 4);
    let err = verify_chain(&r, head.chain(), &|h| f.fetch(h)).unwrap_err();
    assert_eq!(err, ChainError::WeakLabel { slot: 3 });
}

#[test]
fn missing_ancestor_is_reported() {
    let (mut f, head) = forged_chain(4);
    let gone = head.root.target;
    f.store.remove(&gone);
    let err = verify_chain(&head.head, head.chain(), &|h| f.fetch(h)).unwrap_err();
    assert_eq!(err, ChainError::MissingAncestor(gone));
}

#[test]
fn recursive_families_need_every_ancestor() {
    let (f, head) = forged_chain(3);
    let avail = recursive_availability(&head.head, &|h| f.fetch(h)).unwrap();
    let integ = recursive_integrity(&head.head, &|h| f.fetch(h)).unwrap();
    assert!(head.head.availability_alpha().at_least_as_strong(&avail));
    assert!(head.head.integrity_alpha().at_least_as_strong(&integ));
    assert!(!avail.is_never() && !integ.is_never());
}
