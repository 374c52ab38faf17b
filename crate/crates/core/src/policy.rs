//! The universe algebra behind attestations and labels.
//!
//! A *universe* is the set of servers that keep their promises. A
//! [`GoodSetFamily`] describes a set of universes extensionally: a universe
//! belongs to it iff it contains one of the family's good sets. Families are
//! kept minimized (no good set is a superset of another), which makes the
//! representation unique.
//!
//! The same structure serves two roles. As the *semantics* of an attestation
//! (its α) it lists the server sets whose honesty suffices. As an
//! *availability policy* it lists the acceptable sets of servers that must
//! all store a block. The two meet through [`GoodSetFamily::transversal`]:
//! the universes in which every acceptable storage set keeps at least one
//! honest copy are exactly those containing a minimal transversal.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader};
use crate::consensus::{ProofOfConsensus, QuorumSpec, SlotClaim};
use crate::crypto::{hash_bytes, Hash, ServerId};
use crate::wilbur::AvailabilityAttestation;

pub type ServerSet = BTreeSet<ServerId>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("attestation kind mismatch: expected {expected:?}, found {found:?}")]
    KindMismatch {
        expected: AttestationKind,
        found: AttestationKind,
    },
    #[error("attestations reference different blocks")]
    MixedBlockHashes,
    #[error("min_copies must be positive and no larger than the smallest good set")]
    BadMinCopies,
    #[error("labels claim different slots on chain {0:?}")]
    ConflictingClaims(Hash),
    #[error("claims name chain {0:?} more than once")]
    DuplicateChain(Hash),
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct GoodSetFamily {
    sets: BTreeSet<ServerSet>,
}

impl fmt::Debug for GoodSetFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, s) in self.sets.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str("{")?;
            for (j, id) in s.iter().enumerate() {
                if j > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{id}")?;
            }
            f.write_str("}")?;
        }
        f.write_str("}")
    }
}

fn minimize(mut sets: Vec<ServerSet>) -> BTreeSet<ServerSet> {
    sets.sort_by_key(|s| s.len());
    sets.dedup();
    let mut kept: Vec<ServerSet> = Vec::with_capacity(sets.len());
    for s in sets {
        if !kept.iter().any(|k| k.is_subset(&s)) {
            kept.push(s);
        }
    }
    kept.into_iter().collect()
}

impl GoodSetFamily {
    /// Holds in no universe.
    pub fn never() -> Self {
        GoodSetFamily {
            sets: BTreeSet::new(),
        }
    }

    /// Holds in every universe.
    pub fn always() -> Self {
        GoodSetFamily {
            sets: std::iter::once(ServerSet::new()).collect(),
        }
    }

    pub fn from_sets<I, S>(sets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = ServerId>,
    {
        let sets = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        GoodSetFamily {
            sets: minimize(sets),
        }
    }

    pub fn singleton(id: ServerId) -> Self {
        Self::from_sets([[id]])
    }

    /// Holds when any one of `ids` is good.
    pub fn any_of(ids: impl IntoIterator<Item = ServerId>) -> Self {
        Self::from_sets(ids.into_iter().map(|id| [id]))
    }

    /// Holds when all of `ids` are good.
    pub fn all_of(ids: impl IntoIterator<Item = ServerId>) -> Self {
        Self::from_sets([ids])
    }

    /// Every `k`-subset of `ids`.
    pub fn threshold(ids: impl IntoIterator<Item = ServerId>, k: usize) -> Self {
        let ids: Vec<ServerId> = ids
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = Vec::new();
        let mut pick = Vec::with_capacity(k);
        fn rec(
            ids: &[ServerId],
            k: usize,
            start: usize,
            pick: &mut Vec<ServerId>,
            out: &mut Vec<ServerSet>,
        ) {
            if pick.len() == k {
                out.push(pick.iter().copied().collect());
                return;
            }
            for i in start..ids.len() {
                if ids.len() - i < k - pick.len() {
                    break;
                }
                pick.push(ids[i]);
                rec(ids, k, i + 1, pick, out);
                pick.pop();
            }
        }
        if k <= ids.len() {
            rec(&ids, k, 0, &mut pick, &mut out);
        }
        GoodSetFamily {
            sets: minimize(out),
        }
    }

    pub fn good_sets(&self) -> &BTreeSet<ServerSet> {
        &self.sets
    }

    pub fn is_never(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn is_always(&self) -> bool {
        self.sets.first().is_some_and(|s| s.is_empty())
    }

    /// All servers mentioned by some good set.
    pub fn servers(&self) -> ServerSet {
        self.sets.iter().flatten().copied().collect()
    }

    /// True iff some good set is contained in `universe`.
    pub fn holds(&self, universe: &ServerSet) -> bool {
        self.sets.iter().any(|g| g.is_subset(universe))
    }

    /// Universes where at least one family holds.
    pub fn join<'a>(fs: impl IntoIterator<Item = &'a GoodSetFamily>) -> Self {
        let sets = fs
            .into_iter()
            .flat_map(|f| f.sets.iter().cloned())
            .collect();
        GoodSetFamily {
            sets: minimize(sets),
        }
    }

    /// Universes where every family holds.
    pub fn meet<'a>(fs: impl IntoIterator<Item = &'a GoodSetFamily>) -> Self {
        let mut acc = GoodSetFamily::always();
        for f in fs {
            acc = acc.meet_with(f);
            if acc.is_never() {
                break;
            }
        }
        acc
    }

    pub fn join_with(&self, other: &GoodSetFamily) -> Self {
        Self::join([self, other])
    }

    pub fn meet_with(&self, other: &GoodSetFamily) -> Self {
        let mut sets = Vec::with_capacity(self.sets.len() * other.sets.len());
        for a in &self.sets {
            for b in &other.sets {
                sets.push(a.union(b).copied().collect());
            }
        }
        GoodSetFamily {
            sets: minimize(sets),
        }
    }

    /// True iff `self` holds in every universe where `other` holds.
    pub fn at_least_as_strong(&self, other: &GoodSetFamily) -> bool {
        other
            .sets
            .iter()
            .all(|g2| self.sets.iter().any(|g| g.is_subset(g2)))
    }

    /// Minimal sets that intersect every good set of `self`. Memoized per
    /// thread by encoding.
    pub fn transversal(&self) -> Self {
        thread_local! {
            static CACHE: RefCell<HashMap<Hash, GoodSetFamily>> = RefCell::new(HashMap::new());
        }
        let key = hash_bytes(&self.encode());
        if let Some(f) = CACHE.with(|c| c.borrow().get(&key).cloned()) {
            return f;
        }
        let f = self.compute_transversal();
        CACHE.with(|c| c.borrow_mut().insert(key, f.clone()));
        f
    }

    fn compute_transversal(&self) -> Self {
        let hits: Vec<GoodSetFamily> = self
            .sets
            .iter()
            .map(|g| GoodSetFamily::any_of(g.iter().copied()))
            .collect();
        GoodSetFamily::meet(&hits)
    }
}

pub fn family_holds(f: &GoodSetFamily, universe: &ServerSet) -> bool {
    f.holds(universe)
}

pub fn join(fs: &[GoodSetFamily]) -> GoodSetFamily {
    GoodSetFamily::join(fs)
}

pub fn meet(fs: &[GoodSetFamily]) -> GoodSetFamily {
    GoodSetFamily::meet(fs)
}

pub fn at_least_as_strong(a: &GoodSetFamily, b: &GoodSetFamily) -> bool {
    a.at_least_as_strong(b)
}

impl Encode for GoodSetFamily {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.sets.encode_to(out);
    }
}

impl Decode for GoodSetFamily {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let sets = BTreeSet::<ServerSet>::decode_from(r)?;
        let minimized = minimize(sets.iter().cloned().collect());
        if minimized != sets {
            return Err(DecodeError::NonCanonical("good-set family not minimized"));
        }
        Ok(GoodSetFamily { sets })
    }
}

/// Attestation formats a policy may require. Only `StoreForever` and
/// `ProofOfConsensus` have semantics here; other tags survive decoding so
/// servers can reject them explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttestationKind {
    StoreForever,
    ProofOfConsensus,
    ProofOfWork,
    Unknown(u8),
}

impl AttestationKind {
    fn tag(self) -> u8 {
        match self {
            AttestationKind::StoreForever => 0,
            AttestationKind::ProofOfConsensus => 1,
            AttestationKind::ProofOfWork => 2,
            AttestationKind::Unknown(t) => t,
        }
    }

    fn from_tag(tag: u8) -> Self {
        match tag {
            0 => AttestationKind::StoreForever,
            1 => AttestationKind::ProofOfConsensus,
            2 => AttestationKind::ProofOfWork,
            t => AttestationKind::Unknown(t),
        }
    }
}

impl Encode for AttestationKind {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(self.tag());
    }
}

impl Decode for AttestationKind {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let kind = AttestationKind::from_tag(r.u8()?);
        if let AttestationKind::Unknown(t) = kind {
            if t <= 2 {
                return Err(DecodeError::NonCanonical("known kind encoded as unknown"));
            }
        }
        Ok(kind)
    }
}

/// Acceptable sets of Wilbur servers that must store the block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AvailabilityPolicy {
    family: GoodSetFamily,
    required_kind: AttestationKind,
    min_copies: u32,
}

impl AvailabilityPolicy {
    pub fn new(family: GoodSetFamily, min_copies: u32) -> Result<Self, PolicyError> {
        Self::with_kind(family, AttestationKind::StoreForever, min_copies)
    }

    pub fn with_kind(
        family: GoodSetFamily,
        required_kind: AttestationKind,
        min_copies: u32,
    ) -> Result<Self, PolicyError> {
        if min_copies == 0
            || family
                .good_sets()
                .iter()
                .any(|g| g.len() < min_copies as usize)
        {
            return Err(PolicyError::BadMinCopies);
        }
        Ok(AvailabilityPolicy {
            family,
            required_kind,
            min_copies,
        })
    }

    /// Any `k` of `servers` must store the block.
    pub fn k_of(servers: impl IntoIterator<Item = ServerId>, k: u32) -> Result<Self, PolicyError> {
        Self::new(GoodSetFamily::threshold(servers, k as usize), k)
    }

    pub fn family(&self) -> &GoodSetFamily {
        &self.family
    }

    pub fn required_kind(&self) -> AttestationKind {
        self.required_kind
    }

    pub fn min_copies(&self) -> u32 {
        self.min_copies
    }

    /// Universes in which a block stored per this policy stays available.
    pub fn alpha(&self) -> GoodSetFamily {
        self.family.transversal()
    }
}

impl Encode for AvailabilityPolicy {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.family.encode_to(out);
        self.required_kind.encode_to(out);
        self.min_copies.encode_to(out);
    }
}

impl Decode for AvailabilityPolicy {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let family = GoodSetFamily::decode_from(r)?;
        let kind = AttestationKind::decode_from(r)?;
        let min = u32::decode_from(r)?;
        AvailabilityPolicy::with_kind(family, kind, min)
            .map_err(|e| DecodeError::Invalid(e.to_string()))
    }
}

/// Which consensus must approve the block, and the slots it claims.
///
/// The claims name the data structures the block joins; a chain root claims
/// nothing (its own slot 0 is implied by its hash).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegrityPolicy {
    quorum_spec: QuorumSpec,
    required_kind: AttestationKind,
    claims: BTreeSet<SlotClaim>,
}

fn check_claims(claims: &BTreeSet<SlotClaim>) -> Result<(), PolicyError> {
    let mut chains = BTreeSet::new();
    for c in claims {
        if !chains.insert(c.chain) {
            return Err(PolicyError::DuplicateChain(c.chain));
        }
    }
    Ok(())
}

impl IntegrityPolicy {
    pub fn new(quorum_spec: QuorumSpec) -> Self {
        IntegrityPolicy {
            quorum_spec,
            required_kind: AttestationKind::ProofOfConsensus,
            claims: BTreeSet::new(),
        }
    }

    pub fn with_kind(quorum_spec: QuorumSpec, required_kind: AttestationKind) -> Self {
        IntegrityPolicy {
            required_kind,
            ..Self::new(quorum_spec)
        }
    }

    pub fn with_claims(mut self, claims: BTreeSet<SlotClaim>) -> Result<Self, PolicyError> {
        check_claims(&claims)?;
        self.claims = claims;
        Ok(self)
    }

    pub fn quorum_spec(&self) -> &QuorumSpec {
        &self.quorum_spec
    }

    pub fn required_kind(&self) -> AttestationKind {
        self.required_kind
    }

    pub fn claims(&self) -> &BTreeSet<SlotClaim> {
        &self.claims
    }

    pub fn alpha(&self) -> GoodSetFamily {
        self.quorum_spec.safety_family()
    }
}

impl Encode for IntegrityPolicy {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.quorum_spec.encode_to(out);
        self.required_kind.encode_to(out);
        self.claims.encode_to(out);
    }
}

impl Decode for IntegrityPolicy {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let quorum_spec = QuorumSpec::decode_from(r)?;
        let required_kind = AttestationKind::decode_from(r)?;
        let claims = BTreeSet::<SlotClaim>::decode_from(r)?;
        check_claims(&claims).map_err(|e| DecodeError::Invalid(e.to_string()))?;
        Ok(IntegrityPolicy {
            quorum_spec,
            required_kind,
            claims,
        })
    }
}

/// The least strong attestations a block requires.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Label {
    pub availability: AvailabilityPolicy,
    /// `None` for blocks of non-exclusive structures, which need no
    /// integrity attestation at all.
    pub integrity: Option<IntegrityPolicy>,
}

crate::impl_codec_struct!(Label {
    availability,
    integrity
});

impl Label {
    pub fn new(availability: AvailabilityPolicy, integrity: Option<IntegrityPolicy>) -> Self {
        Label {
            availability,
            integrity,
        }
    }

    pub fn claims(&self) -> BTreeSet<SlotClaim> {
        self.integrity
            .as_ref()
            .map(|i| i.claims.clone())
            .unwrap_or_default()
    }

    /// Same label with the integrity claims replaced.
    pub fn with_claims(&self, claims: BTreeSet<SlotClaim>) -> Result<Label, PolicyError> {
        let mut out = self.clone();
        if let Some(i) = out.integrity.take() {
            out.integrity = Some(i.with_claims(claims)?);
        }
        Ok(out)
    }

    /// Compares requirements: every attestation set meeting `self` also
    /// meets `other`, as measured by the universes each guarantees.
    /// Claims are not compared.
    pub fn at_least_as_strong(&self, other: &Label) -> bool {
        if self.availability.required_kind != other.availability.required_kind
            || self.availability.min_copies < other.availability.min_copies
            || !self
                .availability
                .alpha()
                .at_least_as_strong(&other.availability.alpha())
        {
            return false;
        }
        match (&self.integrity, &other.integrity) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(b)) => {
                a.required_kind == b.required_kind && a.alpha().at_least_as_strong(&b.alpha())
            }
        }
    }
}

fn same_kind(expected: AttestationKind, found: AttestationKind) -> Result<(), PolicyError> {
    if expected == found {
        Ok(())
    } else {
        Err(PolicyError::KindMismatch { expected, found })
    }
}

/// Combines two labels so that anything satisfying the result satisfies
/// both: storage on an acceptable set of each, a quorum from each consensus,
/// and the union of the slot claims.
pub fn label_meet(l1: &Label, l2: &Label) -> Result<Label, PolicyError> {
    same_kind(l1.availability.required_kind, l2.availability.required_kind)?;
    let availability = AvailabilityPolicy {
        family: l1.availability.family.meet_with(&l2.availability.family),
        required_kind: l1.availability.required_kind,
        min_copies: l1.availability.min_copies.max(l2.availability.min_copies),
    };
    let integrity = match (&l1.integrity, &l2.integrity) {
        (None, None) => None,
        (Some(i), None) | (None, Some(i)) => Some(i.clone()),
        (Some(a), Some(b)) => {
            same_kind(a.required_kind, b.required_kind)?;
            let mut claims = a.claims.clone();
            for c in &b.claims {
                if let Some(existing) = claims.iter().find(|x| x.chain == c.chain) {
                    if existing.slot != c.slot {
                        return Err(PolicyError::ConflictingClaims(c.chain));
                    }
                }
                claims.insert(*c);
            }
            Some(IntegrityPolicy {
                quorum_spec: crate::consensus::quorum_meet(&a.quorum_spec, &b.quorum_spec),
                required_kind: a.required_kind,
                claims,
            })
        }
    };
    Ok(Label {
        availability,
        integrity,
    })
}

fn common_block<'a>(
    mut hashes: impl Iterator<Item = &'a Hash>,
) -> Result<Option<Hash>, PolicyError> {
    let Some(first) = hashes.next() else {
        return Ok(None);
    };
    if hashes.all(|h| h == first) {
        Ok(Some(*first))
    } else {
        Err(PolicyError::MixedBlockHashes)
    }
}

/// α of a block: available and uncontradicted. A block without integrity
/// attestations belongs to no exclusive structure, so only availability
/// counts.
pub fn alpha_block(
    avail: &[AvailabilityAttestation],
    integ: &[ProofOfConsensus],
) -> Result<GoodSetFamily, PolicyError> {
    common_block(
        avail
            .iter()
            .map(|a| &a.block)
            .chain(integ.iter().map(|p| &p.value)),
    )?;
    let a = GoodSetFamily::join(&avail.iter().map(|a| a.alpha()).collect::<Vec<_>>());
    if integ.is_empty() {
        return Ok(a);
    }
    let i = GoodSetFamily::join(&integ.iter().map(|p| p.alpha()).collect::<Vec<_>>());
    Ok(a.meet_with(&i))
}

/// Whether the attestations satisfy the label. Attestations with bad
/// signatures (or proofs that fail verification) are ignored rather than
/// rejected, so adding attestations can never turn a `true` into `false`.
pub fn label_satisfied(
    label: &Label,
    avail: &[AvailabilityAttestation],
    integ: &[ProofOfConsensus],
) -> Result<bool, PolicyError> {
    same_kind(
        AttestationKind::StoreForever,
        label.availability.required_kind,
    )?;
    if let Some(ip) = &label.integrity {
        same_kind(AttestationKind::ProofOfConsensus, ip.required_kind)?;
    }
    let block = common_block(
        avail
            .iter()
            .map(|a| &a.block)
            .chain(integ.iter().map(|p| &p.value)),
    )?;

    let attesters: ServerSet = avail
        .iter()
        .filter(|a| a.kind == AttestationKind::StoreForever && a.verify())
        .map(|a| a.server)
        .collect();
    let stored = GoodSetFamily::any_of(attesters.iter().copied());
    if !stored.at_least_as_strong(&label.availability.alpha())
        || attesters.len() < label.availability.min_copies as usize
    {
        return Ok(false);
    }

    let Some(required) = &label.integrity else {
        return Ok(true);
    };
    let proofs: Vec<&ProofOfConsensus> = integ
        .iter()
        .filter(|p| Some(p.value) == block && p.verify())
        .collect();
    let covered: BTreeSet<SlotClaim> = proofs
        .iter()
        .flat_map(|p| p.instance.claims().iter().copied())
        .collect();
    if !required.claims.is_subset(&covered) {
        return Ok(false);
    }
    let alphas: Vec<GoodSetFamily> = proofs.iter().map(|p| p.alpha()).collect();
    let held = GoodSetFamily::join(&alphas);
    Ok(held.at_least_as_strong(&required.alpha()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sid(i: u8) -> ServerId {
        ServerId([i; 32])
    }

    fn fam(sets: &[&[u8]]) -> GoodSetFamily {
        GoodSetFamily::from_sets(
            sets.iter()
                .map(|s| s.iter().map(|&i| sid(i)).collect::<Vec<_>>()),
        )
    }

    fn universe(mask: u32, n: u8) -> ServerSet {
        (0..n).filter(|i| mask & (1 << i) != 0).map(sid).collect()
    }

    /// Definitional membership, independent of `holds`.
    fn oracle_holds(f: &GoodSetFamily, u: &ServerSet) -> bool {
        f.good_sets()
            .iter()
            .any(|g| g.iter().all(|x| u.contains(x)))
    }

    fn arb_family(n: u8) -> impl Strategy<Value = GoodSetFamily> {
        proptest::collection::vec(0u32..(1 << n), 0..5).prop_map(move |masks| {
            GoodSetFamily::from_sets(masks.into_iter().map(|m| universe(m, n)))
        })
    }

    #[test]
    fn holds_examples() {
        let u: ServerSet = [sid(1), sid(2)].into();
        assert!(fam(&[&[1]]).holds(&u));
        assert!(!fam(&[&[1, 2]]).holds(&[sid(1)].into()));
        assert!(GoodSetFamily::always().holds(&ServerSet::new()));
        assert!(!GoodSetFamily::never().holds(&u));
    }

    #[test]
    fn join_and_meet_examples() {
        assert_eq!(fam(&[&[1]]).join_with(&fam(&[&[2]])), fam(&[&[1], &[2]]));
        assert_eq!(fam(&[&[1]]).meet_with(&fam(&[&[2]])), fam(&[&[1, 2]]));
        let f = fam(&[&[1, 2], &[3]]);
        assert_eq!(f.join_with(&f), f);
        assert_eq!(f.meet_with(&GoodSetFamily::always()), f);
    }

    #[test]
    fn from_sets_minimizes() {
        assert_eq!(fam(&[&[1, 2], &[1], &[1, 3]]), fam(&[&[1]]));
    }

    #[test]
    fn strength_examples_by_enumeration() {
        let a = fam(&[&[1], &[2]]);
        let b = fam(&[&[1]]);
        let in_a: Vec<bool> = (0..4).map(|m| a.holds(&universe(m << 1, 3))).collect();
        let in_b: Vec<bool> = (0..4).map(|m| b.holds(&universe(m << 1, 3))).collect();
        // α(b) ⊆ α(a) but not conversely
        assert!(in_b.iter().zip(&in_a).all(|(b, a)| !b || *a));
        assert!(in_a.iter().zip(&in_b).any(|(a, b)| *a && !b));
        assert!(a.at_least_as_strong(&b));
        assert!(!b.at_least_as_strong(&a));
    }

    #[test]
    fn transversal_of_three_of_four_is_all_pairs() {
        let f = GoodSetFamily::threshold((1..=4).map(sid), 3);
        assert_eq!(
            f.transversal(),
            GoodSetFamily::threshold((1..=4).map(sid), 2)
        );
        assert_eq!(
            GoodSetFamily::never().transversal(),
            GoodSetFamily::always()
        );
        assert_eq!(
            GoodSetFamily::always().transversal(),
            GoodSetFamily::never()
        );
    }

    #[test]
    fn threshold_counts() {
        assert_eq!(
            GoodSetFamily::threshold((0..5).map(sid), 2)
                .good_sets()
                .len(),
            10
        );
        assert!(GoodSetFamily::threshold((0..2).map(sid), 3).is_never());
    }

    #[test]
    fn min_copies_must_fit_every_good_set() {
        assert_eq!(
            AvailabilityPolicy::new(fam(&[&[1, 2], &[3]]), 2),
            Err(PolicyError::BadMinCopies)
        );
        assert!(AvailabilityPolicy::new(fam(&[&[1, 2]]), 0).is_err());
    }

    proptest! {
        #[test]
        fn holds_matches_definition(f in arb_family(5), mask in 0u32..32) {
            let u = universe(mask, 5);
            prop_assert_eq!(f.holds(&u), oracle_holds(&f, &u));
        }

        #[test]
        fn join_meet_are_union_intersection(f in arb_family(5), g in arb_family(5)) {
            let j = f.join_with(&g);
            let m = f.meet_with(&g);
            for mask in 0..32 {
                let u = universe(mask, 5);
                prop_assert_eq!(j.holds(&u), oracle_holds(&f, &u) || oracle_holds(&g, &u));
                prop_assert_eq!(m.holds(&u), oracle_holds(&f, &u) && oracle_holds(&g, &u));
            }
        }

        #[test]
        fn strength_is_universe_containment(f in arb_family(5), g in arb_family(5)) {
            let contained = (0..32).all(|m| {
                let u = universe(m, 5);
                !oracle_holds(&g, &u) || oracle_holds(&f, &u)
            });
            prop_assert_eq!(f.at_least_as_strong(&g), contained);
            prop_assert!(f.at_least_as_strong(&f));
        }

        #[test]
        fn transversal_hits_every_good_set(f in arb_family(5)) {
            let t = f.transversal();
            for mask in 0..32u32 {
                let u = universe(mask, 5);
                let hits_all = f.good_sets().iter().all(|g| g.iter().any(|x| u.contains(x)));
                prop_assert_eq!(t.holds(&u), hits_all);
            }
        }

        #[test]
        fn family_encoding_round_trips(f in arb_family(6)) {
            prop_assert_eq!(GoodSetFamily::decode(&f.encode()).unwrap(), f);
        }
    }
}
