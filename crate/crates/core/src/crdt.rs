//! State-based CRDT kernel backing the eventual strategy.
//!
//! Two kinds are provided: a last-writer-wins register and an
//! observed-remove set. Both are state-based: replicas exchange full states
//! and merge them with a join that is commutative, associative and
//! idempotent, so all replicas converge regardless of delivery order or
//! duplication. Values are kept in canonical form (sorted entries, no
//! tombstoned tags) so structural equality equals semantic equality and the
//! canonical byte encoding is unique.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{CrdtKind, MachineId, NodeId};

/// Logical timestamp for LWW writes, ordered by `(counter, origin)`.
///
/// The origin is the writing machine; machine order extends node order, so
/// ties between different fog nodes resolve by node id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LamportStamp {
    pub counter: u64,
    pub origin: MachineId,
}

impl LamportStamp {
    pub fn new(counter: u64, origin: MachineId) -> Self {
        LamportStamp { counter, origin }
    }
}

/// Unique identifier of one OR-set add: the adding machine plus its
/// monotone per-machine counter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AddTag {
    pub origin: MachineId,
    pub counter: u64,
}

/// Last-writer-wins register. Merge keeps the entry with the maximal stamp;
/// equal stamps (possible only if a machine identity is reused) fall back to
/// byte order of the values so the merge stays total and convergent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LwwRegister {
    pub value: Vec<u8>,
    pub stamp: LamportStamp,
}

/// Observed-remove set. An element is present iff it has at least one add
/// tag that has not been tombstoned; removals tombstone only tags the
/// remover has observed, so a concurrent add wins.
///
/// Canonical form invariant: `entries` never contains tombstoned tags or
/// empty tag sets. Tombstones are retained for the whole run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrSet {
    pub entries: BTreeMap<Vec<u8>, BTreeSet<AddTag>>,
    pub tombstones: BTreeSet<AddTag>,
}

impl OrSet {
    fn canonicalize(&mut self) {
        for tags in self.entries.values_mut() {
            tags.retain(|t| !self.tombstones.contains(t));
        }
        self.entries.retain(|_, tags| !tags.is_empty());
    }
}

/// A replicated coordination value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrdtValue {
    Lww(LwwRegister),
    Set(OrSet),
}

impl CrdtValue {
    pub fn kind(&self) -> CrdtKind {
        match self {
            CrdtValue::Lww(_) => CrdtKind::LwwRegister,
            CrdtValue::Set(_) => CrdtKind::OrSet,
        }
    }

    /// Largest stamp counter present anywhere in the value; merging peers
    /// raise their Lamport clocks above this.
    pub fn max_counter(&self) -> u64 {
        match self {
            CrdtValue::Lww(r) => r.stamp.counter,
            CrdtValue::Set(s) => {
                let tags = s.entries.values().flatten().map(|t| t.counter);
                let tombs = s.tombstones.iter().map(|t| t.counter);
                tags.chain(tombs).max().unwrap_or(0)
            }
        }
    }
}

/// An application-level update applied at one replica.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalOp {
    /// LWW register assignment.
    Set(Vec<u8>),
    /// OR-set element insertion.
    Add(Vec<u8>),
    /// OR-set element removal (affects only locally observed tags).
    Remove(Vec<u8>),
}

/// What a read returns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryResult {
    Value(Vec<u8>),
    Elements(BTreeSet<Vec<u8>>),
}

/// The state disseminated after a local update. Full-state replication: the
/// delta is the entire new state.
pub type Delta = CrdtValue;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("operation or state does not match CRDT kind {expected}")]
pub struct KindMismatch {
    pub expected: CrdtKind,
}

/// Applies a local operation, producing the new state and the delta to
/// disseminate. `state` is `None` for a key's first local update. The stamp
/// counter must come from the caller's Lamport clock (already bumped).
pub fn update_local(
    state: Option<&CrdtValue>,
    kind: CrdtKind,
    op: &LocalOp,
    origin: &MachineId,
    counter: u64,
) -> Result<(CrdtValue, Delta), KindMismatch> {
    if let Some(s) = state {
        if s.kind() != kind {
            return Err(KindMismatch { expected: kind });
        }
    }
    let mismatch = || KindMismatch { expected: kind };
    let new_state = match (kind, op) {
        (CrdtKind::LwwRegister, LocalOp::Set(v)) => CrdtValue::Lww(LwwRegister {
            value: v.clone(),
            stamp: LamportStamp::new(counter, origin.clone()),
        }),
        (CrdtKind::OrSet, LocalOp::Add(e)) => {
            let mut set = match state {
                Some(CrdtValue::Set(s)) => s.clone(),
                _ => OrSet::default(),
            };
            set.entries.entry(e.clone()).or_default().insert(AddTag {
                origin: origin.clone(),
                counter,
            });
            CrdtValue::Set(set)
        }
        (CrdtKind::OrSet, LocalOp::Remove(e)) => {
            let mut set = match state {
                Some(CrdtValue::Set(s)) => s.clone(),
                _ => OrSet::default(),
            };
            // Tombstone exactly the tags observed here; an element we have
            // never seen is a no-op.
            if let Some(tags) = set.entries.remove(e) {
                set.tombstones.extend(tags);
            }
            CrdtValue::Set(set)
        }
        _ => return Err(mismatch()),
    };
    Ok((new_state.clone(), new_state))
}

/// Join of two states: the least upper bound in the kind's semilattice.
pub fn merge(a: &CrdtValue, b: &CrdtValue) -> Result<CrdtValue, KindMismatch> {
    match (a, b) {
        (CrdtValue::Lww(x), CrdtValue::Lww(y)) => {
            let winner = if (&y.stamp, &y.value) > (&x.stamp, &x.value) { y } else { x };
            Ok(CrdtValue::Lww(winner.clone()))
        }
        (CrdtValue::Set(x), CrdtValue::Set(y)) => {
            let mut out = x.clone();
            for (elem, tags) in &y.entries {
                out.entries.entry(elem.clone()).or_default().extend(tags.iter().cloned());
            }
            out.tombstones.extend(y.tombstones.iter().cloned());
            out.canonicalize();
            Ok(CrdtValue::Set(out))
        }
        _ => Err(KindMismatch { expected: a.kind() }),
    }
}

/// True iff `a` already subsumes `b`, i.e. merging `b` into `a` changes
/// nothing. Drives gossip replies and staleness accounting.
pub fn dominates(a: &CrdtValue, b: &CrdtValue) -> bool {
    match merge(a, b) {
        Ok(m) => &m == a,
        Err(_) => false,
    }
}

/// Reads the current application-visible value. Pure.
pub fn query(state: &CrdtValue) -> QueryResult {
    match state {
        CrdtValue::Lww(r) => QueryResult::Value(r.value.clone()),
        CrdtValue::Set(s) => QueryResult::Elements(s.entries.keys().cloned().collect()),
    }
}

/// Canonical binary encoding; see `docs/formats.md`. Two states are
/// structurally equal iff their encodings are byte-equal.
pub fn canonical_encode(state: &CrdtValue) -> Vec<u8> {
    let mut out = Vec::new();
    match state {
        CrdtValue::Lww(r) => {
            out.push(0x01);
            out.extend_from_slice(&r.stamp.counter.to_be_bytes());
            encode_machine(&mut out, &r.stamp.origin);
            encode_bytes(&mut out, &r.value);
        }
        CrdtValue::Set(s) => {
            out.push(0x02);
            out.extend_from_slice(&(s.entries.len() as u32).to_be_bytes());
            for (elem, tags) in &s.entries {
                encode_bytes(&mut out, elem);
                out.extend_from_slice(&(tags.len() as u32).to_be_bytes());
                for tag in tags {
                    encode_machine(&mut out, &tag.origin);
                    out.extend_from_slice(&tag.counter.to_be_bytes());
                }
            }
            out.extend_from_slice(&(s.tombstones.len() as u32).to_be_bytes());
            for tag in &s.tombstones {
                encode_machine(&mut out, &tag.origin);
                out.extend_from_slice(&tag.counter.to_be_bytes());
            }
        }
    }
    out
}

fn encode_machine(out: &mut Vec<u8>, m: &MachineId) {
    let name = m.node.as_str().as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_be_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&m.index.to_be_bytes());
}

fn encode_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

/// Convenience for tests and builders.
pub fn machine(node: &str, index: u32) -> MachineId {
    MachineId::new(NodeId::new(node), index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lww(v: &str, counter: u64, node: &str) -> CrdtValue {
        CrdtValue::Lww(LwwRegister {
            value: v.as_bytes().to_vec(),
            stamp: LamportStamp::new(counter, machine(node, 0)),
        })
    }

    #[test]
    fn lww_set_constructs_register() {
        let (state, delta) = update_local(
            None,
            CrdtKind::LwwRegister,
            &LocalOp::Set(b"x".to_vec()),
            &machine("n1", 0),
            5,
        )
        .unwrap();
        assert_eq!(state, lww("x", 5, "n1"));
        assert_eq!(delta, state);
    }

    #[test]
    fn lww_merge_higher_counter_wins() {
        let m = merge(&lww("x", 1, "nA"), &lww("y", 2, "nB")).unwrap();
        assert_eq!(query(&m), QueryResult::Value(b"y".to_vec()));
    }

    #[test]
    fn lww_merge_tie_broken_by_node_order() {
        let m = merge(&lww("x", 1, "nA"), &lww("y", 1, "nB")).unwrap();
        assert_eq!(query(&m), QueryResult::Value(b"y".to_vec()));
        let m = merge(&lww("y", 1, "nB"), &lww("x", 1, "nA")).unwrap();
        assert_eq!(query(&m), QueryResult::Value(b"y".to_vec()));
    }

    #[test]
    fn merge_is_idempotent() {
        let a = lww("x", 3, "n1");
        assert_eq!(merge(&a, &a).unwrap(), a);
    }

    #[test]
    fn merge_stamp_is_max_of_inputs() {
        let a = lww("x", 7, "nA");
        let b = lww("y", 4, "nB");
        let m = merge(&a, &b).unwrap();
        match m {
            CrdtValue::Lww(r) => assert_eq!(r.stamp, LamportStamp::new(7, machine("nA", 0))),
            _ => unreachable!(),
        }
    }

    #[test]
    fn kind_mismatch_detected() {
        let a = lww("x", 1, "n1");
        let b = CrdtValue::Set(OrSet::default());
        assert!(merge(&a, &b).is_err());
        assert!(update_local(Some(&a), CrdtKind::LwwRegister, &LocalOp::Add(b"e".to_vec()), &machine("n1", 0), 2).is_err());
        assert!(update_local(Some(&a), CrdtKind::OrSet, &LocalOp::Add(b"e".to_vec()), &machine("n1", 0), 2).is_err());
    }

    #[test]
    fn orset_add_then_remove_locally() {
        let m = machine("n1", 0);
        let (s1, _) = update_local(None, CrdtKind::OrSet, &LocalOp::Add(b"e".to_vec()), &m, 1).unwrap();
        assert_eq!(query(&s1), QueryResult::Elements([b"e".to_vec()].into()));
        let (s2, _) = update_local(Some(&s1), CrdtKind::OrSet, &LocalOp::Remove(b"e".to_vec()), &m, 2).unwrap();
        assert_eq!(query(&s2), QueryResult::Elements(BTreeSet::new()));
    }

    #[test]
    fn orset_remove_of_unobserved_element_is_noop() {
        let m = machine("n1", 0);
        let (s1, _) = update_local(None, CrdtKind::OrSet, &LocalOp::Add(b"a".to_vec()), &m, 1).unwrap();
        let (s2, delta) =
            update_local(Some(&s1), CrdtKind::OrSet, &LocalOp::Remove(b"ghost".to_vec()), &m, 2).unwrap();
        assert_eq!(s2, s1);
        assert_eq!(delta, s1);
    }

    #[test]
    fn orset_concurrent_add_wins_over_unseen_remove() {
        // Replica 1 adds e (tag t1). Replica 2, which never observed t1,
        // removes e (tombstoning nothing). The merged state contains e.
        let m1 = machine("n1", 0);
        let m2 = machine("n2", 0);
        let (r1, _) = update_local(None, CrdtKind::OrSet, &LocalOp::Add(b"e".to_vec()), &m1, 1).unwrap();
        let (r2, _) = update_local(None, CrdtKind::OrSet, &LocalOp::Remove(b"e".to_vec()), &m2, 1).unwrap();
        let merged = merge(&r1, &r2).unwrap();
        assert_eq!(query(&merged), QueryResult::Elements([b"e".to_vec()].into()));
    }

    #[test]
    fn orset_observed_remove_beats_observed_add() {
        let m1 = machine("n1", 0);
        let m2 = machine("n2", 0);
        let (r1, _) = update_local(None, CrdtKind::OrSet, &LocalOp::Add(b"e".to_vec()), &m1, 1).unwrap();
        // Replica 2 merges r1 (observing the tag), then removes.
        let r2 = merge(&CrdtValue::Set(OrSet::default()), &r1).unwrap();
        let (r2, _) = update_local(Some(&r2), CrdtKind::OrSet, &LocalOp::Remove(b"e".to_vec()), &m2, 2).unwrap();
        let merged = merge(&r1, &r2).unwrap();
        assert_eq!(query(&merged), QueryResult::Elements(BTreeSet::new()));
    }

    #[test]
    fn query_examples() {
        assert_eq!(query(&lww("x", 3, "n1")), QueryResult::Value(b"x".to_vec()));
        assert_eq!(query(&CrdtValue::Set(OrSet::default())), QueryResult::Elements(BTreeSet::new()));
        let m = machine("n1", 0);
        let (s, _) = update_local(None, CrdtKind::OrSet, &LocalOp::Add(b"e1".to_vec()), &m, 1).unwrap();
        let (s, _) = update_local(Some(&s), CrdtKind::OrSet, &LocalOp::Add(b"e2".to_vec()), &m, 2).unwrap();
        let (s, _) = update_local(Some(&s), CrdtKind::OrSet, &LocalOp::Remove(b"e1".to_vec()), &m, 3).unwrap();
        assert_eq!(query(&s), QueryResult::Elements([b"e2".to_vec()].into()));
    }

    #[test]
    fn canonical_encoding_is_injective_on_examples() {
        let a = lww("x", 1, "nA");
        let b = lww("x", 1, "nB");
        assert_ne!(canonical_encode(&a), canonical_encode(&b));
        assert_eq!(canonical_encode(&a), canonical_encode(&a.clone()));
    }

    #[test]
    fn dominates_matches_merge_equality() {
        let a = lww("x", 2, "n1");
        let b = lww("y", 1, "n2");
        assert!(dominates(&a, &b));
        assert!(!dominates(&b, &a));
    }
}
