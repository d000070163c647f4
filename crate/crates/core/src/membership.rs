//! Membership: resolves, for any descriptor, the participating nodes or
//! machines, and maintains replica-set membership as coordination data in
//! its own right.
//!
//! Replica-set membership lives under the reserved `sys.membership`
//! namespace with a hardwired strict system-level descriptor, which breaks
//! the bootstrap recursion: the data that says who coordinates what is
//! itself coordinated, but its own configuration never needs a lookup.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::types::{
    CoordinationKey, DataTypeDescriptor, Level, MachineId, NodeId, ParticipantId,
    ParticipationOption, ReadMode, ReplicaSetId, Strategy,
};

/// Reserved namespace for membership data.
pub const MEMBERSHIP_NAMESPACE: &str = "sys.membership";

/// A versioned snapshot of who is in the system and how it is organised.
/// Views are immutable; applying a change produces the next version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipView {
    pub version: u64,
    pub system_nodes: BTreeSet<NodeId>,
    pub replica_sets: BTreeMap<ReplicaSetId, BTreeSet<NodeId>>,
    pub node_machines: BTreeMap<NodeId, BTreeSet<MachineId>>,
    pub node_attributes: BTreeMap<NodeId, BTreeSet<String>>,
}

impl MembershipView {
    /// Checks the structural invariants: replica-set members are system
    /// nodes and every node has at least one machine.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (rs, members) in &self.replica_sets {
            for n in members {
                if !self.system_nodes.contains(n) {
                    return Err(ConfigError::InvalidDescriptor {
                        namespace: MEMBERSHIP_NAMESPACE.to_string(),
                        field: format!("replica_sets.{rs}"),
                        reason: format!("member {n} is not a system node"),
                    });
                }
            }
        }
        for n in &self.system_nodes {
            if self.node_machines.get(n).map_or(true, |m| m.is_empty()) {
                return Err(ConfigError::InvalidDescriptor {
                    namespace: MEMBERSHIP_NAMESPACE.to_string(),
                    field: format!("node_machines.{n}"),
                    reason: "every node needs at least one machine".to_string(),
                });
            }
        }
        Ok(())
    }

    /// Applies one committed membership entry, producing the next view.
    pub fn apply_replica_set_change(
        &self,
        set: &ReplicaSetId,
        members: BTreeSet<NodeId>,
    ) -> MembershipView {
        let mut next = self.clone();
        next.version += 1;
        next.replica_sets.insert(set.clone(), members);
        next
    }

    pub fn machines_of(&self, node: &NodeId) -> impl Iterator<Item = &MachineId> {
        self.node_machines.get(node).into_iter().flatten()
    }

    pub fn all_machines(&self) -> impl Iterator<Item = &MachineId> {
        self.node_machines.values().flatten()
    }
}

/// The resolved participants of one (descriptor, scope), with the designated
/// leader when participation is leader-follower.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipantSet {
    pub members: BTreeSet<ParticipantId>,
    pub leader: Option<ParticipantId>,
}

impl ParticipantSet {
    pub fn contains_machine(&self, m: &MachineId) -> bool {
        self.members.contains(&ParticipantId::Machine(m.clone()))
            || self.members.contains(&ParticipantId::Node(m.node.clone()))
    }

    /// The nodes allowed to see traffic for this scope.
    pub fn allowed_nodes(&self) -> BTreeSet<NodeId> {
        self.members.iter().map(|p| p.node().clone()).collect()
    }
}

/// Resolves the participants for a descriptor against a view: the level
/// picks the base set (system nodes, one replica set's nodes, or one node's
/// machines), then the participation option filters it. Pure and
/// deterministic.
pub fn resolve_members(
    view: &MembershipView,
    d: &DataTypeDescriptor,
) -> Result<ParticipantSet, ConfigError> {
    let base: BTreeSet<ParticipantId> = match &d.level {
        Level::System => view.system_nodes.iter().cloned().map(ParticipantId::Node).collect(),
        Level::ReplicaSet(r) => view
            .replica_sets
            .get(r)
            .ok_or_else(|| ConfigError::UnknownReplicaSet(r.clone()))?
            .iter()
            .cloned()
            .map(ParticipantId::Node)
            .collect(),
        Level::Node(n) => {
            if !view.node_machines.contains_key(n) {
                return Err(ConfigError::UnknownNode(n.clone()));
            }
            view.machines_of(n).cloned().map(ParticipantId::Machine).collect()
        }
    };
    match &d.participation {
        ParticipationOption::AllMembers => Ok(ParticipantSet { members: base, leader: None }),
        ParticipationOption::Subset(pred) => {
            let attr = ParticipationOption::subset_attribute(pred);
            let members: BTreeSet<ParticipantId> = base
                .into_iter()
                .filter(|p| {
                    view.node_attributes
                        .get(p.node())
                        .is_some_and(|attrs| attrs.contains(attr))
                })
                .collect();
            if members.is_empty() {
                return Err(ConfigError::EmptySubset {
                    predicate: pred.clone(),
                    scope: d.level.scope_tag(),
                });
            }
            Ok(ParticipantSet { members, leader: None })
        }
        ParticipationOption::LeaderFollower => {
            let leader = base.iter().min().cloned();
            Ok(ParticipantSet { members: base, leader })
        }
    }
}

/// The hardwired descriptor for the reserved membership namespace.
pub fn membership_descriptor() -> DataTypeDescriptor {
    DataTypeDescriptor {
        namespace: MEMBERSHIP_NAMESPACE.to_string(),
        strategy: Strategy::Strict,
        level: Level::System,
        participation: ParticipationOption::AllMembers,
        crdt_kind: None,
        read_mode: ReadMode::ReadQuorum,
        pinned_leader: None,
    }
}

/// Key under which one replica set's membership is stored.
pub fn replica_set_key(set: &ReplicaSetId) -> CoordinationKey {
    CoordinationKey::new(MEMBERSHIP_NAMESPACE, format!("replica_set/{set}"))
}

/// Inverse of [`replica_set_key`].
pub fn parse_replica_set_key(key: &CoordinationKey) -> Option<ReplicaSetId> {
    if key.namespace != MEMBERSHIP_NAMESPACE {
        return None;
    }
    key.name.strip_prefix("replica_set/").map(ReplicaSetId::new)
}

/// Canonical value encoding for a replica-set membership entry: the sorted
/// node names joined by commas.
pub fn encode_members(members: &BTreeSet<NodeId>) -> Vec<u8> {
    members
        .iter()
        .map(|n| n.as_str())
        .collect::<Vec<_>>()
        .join(",")
        .into_bytes()
}

pub fn decode_members(bytes: &[u8]) -> Option<BTreeSet<NodeId>> {
    let s = std::str::from_utf8(bytes).ok()?;
    if s.is_empty() {
        return Some(BTreeSet::new());
    }
    Some(s.split(',').map(NodeId::new).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CrdtKind;

    fn view() -> MembershipView {
        let nodes = ["n1", "n2", "n3", "n4", "n5"];
        let mut v = MembershipView {
            version: 0,
            system_nodes: nodes.iter().map(|n| NodeId::new(*n)).collect(),
            replica_sets: BTreeMap::new(),
            node_machines: BTreeMap::new(),
            node_attributes: BTreeMap::new(),
        };
        for n in nodes {
            v.node_machines.insert(
                NodeId::new(n),
                [MachineId::new(NodeId::new(n), 0)].into(),
            );
        }
        v.replica_sets.insert(
            ReplicaSetId::new("r1"),
            [NodeId::new("n1"), NodeId::new("n3")].into(),
        );
        v.node_attributes
            .insert(NodeId::new("n1"), ["cloud".to_string()].into());
        v
    }

    fn descriptor(level: Level, participation: ParticipationOption) -> DataTypeDescriptor {
        DataTypeDescriptor {
            namespace: "cfg".to_string(),
            strategy: Strategy::Eventual,
            level,
            participation,
            crdt_kind: Some(CrdtKind::LwwRegister),
            read_mode: ReadMode::LocalCache,
            pinned_leader: None,
        }
    }

    #[test]
    fn system_level_resolves_all_nodes() {
        let set = resolve_members(&view(), &descriptor(Level::System, ParticipationOption::AllMembers)).unwrap();
        assert_eq!(set.members.len(), 5);
    }

    #[test]
    fn replica_set_level_resolves_its_members() {
        let set = resolve_members(
            &view(),
            &descriptor(Level::ReplicaSet(ReplicaSetId::new("r1")), ParticipationOption::AllMembers),
        )
        .unwrap();
        let want: BTreeSet<ParticipantId> =
            [ParticipantId::Node(NodeId::new("n1")), ParticipantId::Node(NodeId::new("n3"))].into();
        assert_eq!(set.members, want);
    }

    #[test]
    fn unknown_replica_set_is_an_error() {
        let err = resolve_members(
            &view(),
            &descriptor(Level::ReplicaSet(ReplicaSetId::new("nope")), ParticipationOption::AllMembers),
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::UnknownReplicaSet(_)));
    }

    #[test]
    fn cloud_only_subset_filters_by_attribute() {
        let set = resolve_members(
            &view(),
            &descriptor(Level::System, ParticipationOption::Subset("cloud-only".to_string())),
        )
        .unwrap();
        assert_eq!(set.members, [ParticipantId::Node(NodeId::new("n1"))].into());
    }

    #[test]
    fn empty_subset_is_an_error() {
        let err = resolve_members(
            &view(),
            &descriptor(Level::System, ParticipationOption::Subset("gpu-only".to_string())),
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::EmptySubset { .. }));
    }

    #[test]
    fn leader_follower_designates_lowest_id() {
        let set = resolve_members(
            &view(),
            &descriptor(Level::System, ParticipationOption::LeaderFollower),
        )
        .unwrap();
        assert_eq!(set.leader, Some(ParticipantId::Node(NodeId::new("n1"))));
    }

    #[test]
    fn node_level_resolves_machines() {
        let mut v = view();
        v.node_machines.insert(
            NodeId::new("n1"),
            [MachineId::new(NodeId::new("n1"), 0), MachineId::new(NodeId::new("n1"), 1)].into(),
        );
        let set = resolve_members(
            &v,
            &descriptor(Level::Node(NodeId::new("n1")), ParticipationOption::LeaderFollower),
        )
        .unwrap();
        assert_eq!(set.members.len(), 2);
        assert_eq!(
            set.leader,
            Some(ParticipantId::Machine(MachineId::new(NodeId::new("n1"), 0)))
        );
    }

    #[test]
    fn view_change_bumps_version() {
        let v = view();
        let next = v.apply_replica_set_change(
            &ReplicaSetId::new("r1"),
            [NodeId::new("n1"), NodeId::new("n4")].into(),
        );
        assert_eq!(next.version, 1);
        assert_eq!(
            next.replica_sets[&ReplicaSetId::new("r1")],
            [NodeId::new("n1"), NodeId::new("n4")].into()
        );
        // The original snapshot is untouched.
        assert_eq!(v.version, 0);
    }

    #[test]
    fn membership_keys_roundtrip() {
        let k = replica_set_key(&ReplicaSetId::new("r1"));
        assert_eq!(k.to_string(), "sys.membership/replica_set/r1");
        assert_eq!(parse_replica_set_key(&k), Some(ReplicaSetId::new("r1")));
        let members: BTreeSet<NodeId> = [NodeId::new("n2"), NodeId::new("n1")].into();
        assert_eq!(decode_members(&encode_members(&members)), Some(members));
    }

    #[test]
    fn invalid_views_are_rejected() {
        let mut v = view();
        v.replica_sets
            .insert(ReplicaSetId::new("bad"), [NodeId::new("ghost")].into());
        assert!(v.validate().is_err());
    }
}
