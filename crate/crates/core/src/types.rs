//! Shared domain model: identities, coordination keys, and the per-data-set
//! configuration registry.
//!
//! Every set of coordination data is configured along two axes: a *strategy*
//! (how updates propagate: eventually consistent CRDT dissemination vs.
//! strictly consistent consensus) and a *level* (who participates: the whole
//! system, one replica set, or the machines of a single fog node). The
//! [`DescriptorRegistry`] binds dot-separated key namespaces to such
//! configurations via longest-prefix matching.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Identity of a fog node: a virtual group of machines in one location.
///
/// Node ids are totally ordered (lexicographically); that order is the
/// tie-break authority everywhere (LWW merge ties, designated leaders).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(name: impl Into<String>) -> Self {
        NodeId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One physical machine of a fog node. Ordered by (node, index), so the
/// "next machine" after a crashed facade leader is well defined.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MachineId {
    pub node: NodeId,
    pub index: u32,
}

impl MachineId {
    pub fn new(node: NodeId, index: u32) -> Self {
        MachineId { node, index }
    }

    /// Parses the `node/index` notation used in scenario files and traces.
    pub fn parse(s: &str) -> Option<MachineId> {
        let (node, idx) = s.rsplit_once('/')?;
        if node.is_empty() {
            return None;
        }
        Some(MachineId::new(NodeId::new(node), idx.parse().ok()?))
    }
}

impl fmt::Display for MachineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.node, self.index)
    }
}

/// A participant in a coordination scope: a whole fog node (system and
/// replica-set levels, addressed through its facade) or a single machine
/// (node level).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParticipantId {
    Node(NodeId),
    Machine(MachineId),
}

impl ParticipantId {
    /// The fog node this participant belongs to.
    pub fn node(&self) -> &NodeId {
        match self {
            ParticipantId::Node(n) => n,
            ParticipantId::Machine(m) => &m.node,
        }
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParticipantId::Node(n) => write!(f, "{n}"),
            ParticipantId::Machine(m) => write!(f, "{m}"),
        }
    }
}

/// Identifier of a replica set: the group of fog nodes jointly managing one
/// application-level replica.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaSetId(String);

impl ReplicaSetId {
    pub fn new(name: impl Into<String>) -> Self {
        ReplicaSetId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ReplicaSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A key for one piece of coordination data. The namespace (a dot-separated
/// path) selects the configuration; the name distinguishes items within it.
///
/// Textual form: `namespace/name`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoordinationKey {
    pub namespace: String,
    pub name: String,
}

impl CoordinationKey {
    pub fn new(namespace: impl Into<String>, name: impl Into<String>) -> Self {
        CoordinationKey {
            namespace: namespace.into(),
            name: name.into(),
        }
    }

    /// Parses `namespace/name`; the namespace is everything before the first
    /// slash, so names may themselves contain slashes.
    pub fn parse(s: &str) -> Option<CoordinationKey> {
        let (ns, name) = s.split_once('/')?;
        if ns.is_empty() || name.is_empty() {
            return None;
        }
        Some(CoordinationKey::new(ns, name))
    }
}

impl fmt::Display for CoordinationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.name)
    }
}

/// How updates to a data set propagate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// CRDT dissemination plus gossip anti-entropy; always available, converges.
    Eventual,
    /// Leader-based majority consensus; unavailable without a quorum.
    Strict,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Eventual => f.write_str("eventual"),
            Strategy::Strict => f.write_str("strict"),
        }
    }
}

/// Who participates in coordination for a data set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    /// Every fog node in the system.
    System,
    /// The nodes of one replica set.
    ReplicaSet(ReplicaSetId),
    /// The machines of one fog node.
    Node(NodeId),
}

impl Level {
    /// Short scope tag used in group ids, traces and metrics.
    pub fn scope_tag(&self) -> String {
        match self {
            Level::System => "system".to_string(),
            Level::ReplicaSet(r) => format!("rs:{r}"),
            Level::Node(n) => format!("node:{n}"),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.scope_tag())
    }
}

/// Restricts the resolved member set of a level.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParticipationOption {
    /// Every resolved member participates.
    AllMembers,
    /// Only members matching an attribute predicate, e.g. `cloud-only`
    /// keeps members whose node carries the `cloud` attribute.
    Subset(String),
    /// Every member participates, with a designated leader (the lowest id
    /// initially); used for node facades and primary-copy style groups.
    LeaderFollower,
}

impl ParticipationOption {
    /// The attribute a `Subset` predicate requires. `cloud-only` and plain
    /// `cloud` both require the `cloud` attribute.
    pub fn subset_attribute(pred: &str) -> &str {
        pred.strip_suffix("-only").unwrap_or(pred)
    }
}

/// How strict data is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadMode {
    /// Serve from the machine-local cache (the only mode for eventual data).
    LocalCache,
    /// Route to the leader, which confirms leadership with a majority round.
    LeaderRead,
    /// Probe a majority and return the newest committed value.
    ReadQuorum,
}

impl fmt::Display for ReadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReadMode::LocalCache => f.write_str("local-cache"),
            ReadMode::LeaderRead => f.write_str("leader-read"),
            ReadMode::ReadQuorum => f.write_str("read-quorum"),
        }
    }
}

/// Which CRDT backs an eventual data set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrdtKind {
    LwwRegister,
    OrSet,
}

impl fmt::Display for CrdtKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CrdtKind::LwwRegister => f.write_str("lww-register"),
            CrdtKind::OrSet => f.write_str("or-set"),
        }
    }
}

/// Per-data-set configuration: binds a key namespace to a strategy, a level,
/// a participation option, and (depending on the strategy) a CRDT kind or a
/// strict read mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataTypeDescriptor {
    pub namespace: String,
    pub strategy: Strategy,
    pub level: Level,
    pub participation: ParticipationOption,
    /// Required iff `strategy` is `Eventual`.
    pub crdt_kind: Option<CrdtKind>,
    pub read_mode: ReadMode,
    /// Pins the consensus leader for this data set (primary-copy style:
    /// elections disabled). Only meaningful for strict descriptors.
    pub pinned_leader: Option<NodeId>,
}

impl DataTypeDescriptor {
    /// Checks the internal consistency rules; returns the offending field on
    /// violation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, reason: &str| {
            Err(ConfigError::InvalidDescriptor {
                namespace: self.namespace.clone(),
                field: field.to_string(),
                reason: reason.to_string(),
            })
        };
        if !self.namespace.is_empty() {
            let ok = self
                .namespace
                .split('.')
                .all(|seg| !seg.is_empty() && !seg.contains('/'));
            if !ok {
                return invalid("namespace", "must be a dot-separated path without empty segments");
            }
        }
        match self.strategy {
            Strategy::Eventual => {
                if self.crdt_kind.is_none() {
                    return invalid("crdt_kind", "required for eventual strategy");
                }
                if self.read_mode != ReadMode::LocalCache {
                    return invalid("read_mode", "eventual data is read from the local cache");
                }
                if self.pinned_leader.is_some() {
                    return invalid("pinned_leader", "only strict data has a leader");
                }
            }
            Strategy::Strict => {
                if self.crdt_kind.is_some() {
                    return invalid("crdt_kind", "only eventual data is CRDT-backed");
                }
                if self.read_mode == ReadMode::LocalCache {
                    return invalid("read_mode", "strict data requires leader-read or read-quorum");
                }
            }
        }
        Ok(())
    }

    /// Scope identifier used for group ids, traces and metrics:
    /// `<namespace>@<scope>`.
    pub fn scope_id(&self) -> String {
        format!("{}@{}", self.namespace, self.level.scope_tag())
    }
}

/// Maps key namespaces to descriptors by longest-prefix match.
///
/// Immutable after the setup phase; lookups are pure functions of the
/// registry contents and the key, independent of registration order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DescriptorRegistry {
    by_namespace: BTreeMap<String, DataTypeDescriptor>,
}

impl DescriptorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a descriptor for its namespace.
    pub fn register(&mut self, d: DataTypeDescriptor) -> Result<(), ConfigError> {
        d.validate()?;
        if self.by_namespace.contains_key(&d.namespace) {
            return Err(ConfigError::DuplicateNamespace(d.namespace));
        }
        self.by_namespace.insert(d.namespace.clone(), d);
        Ok(())
    }

    /// Returns the descriptor whose namespace is the longest registered
    /// prefix of the key's namespace. Prefixes match on dot boundaries:
    /// `a.b` covers `a.b` and `a.b.c` but not `a.bc`. The empty namespace,
    /// if registered, matches every key.
    pub fn lookup(&self, key: &CoordinationKey) -> Result<&DataTypeDescriptor, ConfigError> {
        self.by_namespace
            .iter()
            .filter(|(ns, _)| Self::ns_covers(ns, &key.namespace))
            .max_by_key(|(ns, _)| ns.len())
            .map(|(_, d)| d)
            .ok_or_else(|| ConfigError::NoDescriptor(key.clone()))
    }

    fn ns_covers(prefix: &str, ns: &str) -> bool {
        prefix.is_empty()
            || ns == prefix
            || (ns.starts_with(prefix) && ns.as_bytes()[prefix.len()] == b'.')
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &DataTypeDescriptor> {
        self.by_namespace.values()
    }

    pub fn is_empty(&self) -> bool {
        self.by_namespace.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strict(ns: &str, level: Level) -> DataTypeDescriptor {
        DataTypeDescriptor {
            namespace: ns.to_string(),
            strategy: Strategy::Strict,
            level,
            participation: ParticipationOption::AllMembers,
            crdt_kind: None,
            read_mode: ReadMode::ReadQuorum,
            pinned_leader: None,
        }
    }

    fn eventual(ns: &str) -> DataTypeDescriptor {
        DataTypeDescriptor {
            namespace: ns.to_string(),
            strategy: Strategy::Eventual,
            level: Level::System,
            participation: ParticipationOption::AllMembers,
            crdt_kind: Some(CrdtKind::LwwRegister),
            read_mode: ReadMode::LocalCache,
            pinned_leader: None,
        }
    }

    #[test]
    fn register_and_lookup_by_prefix() {
        let mut reg = DescriptorRegistry::new();
        reg.register(strict("acl", Level::ReplicaSet(ReplicaSetId::new("r1"))))
            .unwrap();
        let d = reg.lookup(&CoordinationKey::new("acl.svc1", "x")).unwrap();
        assert_eq!(d.namespace, "acl");
        let d = reg.lookup(&CoordinationKey::new("acl", "x")).unwrap();
        assert_eq!(d.namespace, "acl");
    }

    #[test]
    fn duplicate_namespace_rejected() {
        let mut reg = DescriptorRegistry::new();
        reg.register(eventual("cfg")).unwrap();
        let err = reg.register(eventual("cfg")).unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateNamespace(ns) if ns == "cfg"));
    }

    #[test]
    fn eventual_with_quorum_read_rejected() {
        let mut d = eventual("cfg");
        d.read_mode = ReadMode::ReadQuorum;
        let err = d.validate().unwrap_err();
        assert!(matches!(err, ConfigError::InvalidDescriptor { field, .. } if field == "read_mode"));
    }

    #[test]
    fn strict_with_crdt_kind_rejected() {
        let mut d = strict("cfg", Level::System);
        d.crdt_kind = Some(CrdtKind::OrSet);
        assert!(d.validate().is_err());
    }

    #[test]
    fn longest_prefix_wins() {
        let mut reg = DescriptorRegistry::new();
        reg.register(eventual("a")).unwrap();
        reg.register(eventual("a.b")).unwrap();
        let d = reg.lookup(&CoordinationKey::new("a.b.c", "x")).unwrap();
        assert_eq!(d.namespace, "a.b");
        let d = reg.lookup(&CoordinationKey::new("a.bc", "x")).unwrap();
        assert_eq!(d.namespace, "a");
    }

    #[test]
    fn no_prefix_match_is_an_error() {
        let mut reg = DescriptorRegistry::new();
        reg.register(eventual("a")).unwrap();
        let err = reg.lookup(&CoordinationKey::new("z", "x")).unwrap_err();
        assert!(matches!(err, ConfigError::NoDescriptor(_)));
    }

    #[test]
    fn root_namespace_matches_everything() {
        let mut reg = DescriptorRegistry::new();
        reg.register(eventual("")).unwrap();
        assert!(reg.lookup(&CoordinationKey::new("anything.at.all", "x")).is_ok());
    }

    #[test]
    fn lookup_is_order_independent() {
        let namespaces = ["a", "a.b", "a.b.c", "z", ""];
        let keys = [
            CoordinationKey::new("a.b.c.d", "k"),
            CoordinationKey::new("a.b", "k"),
            CoordinationKey::new("q", "k"),
        ];
        let reference: Vec<String> = {
            let mut reg = DescriptorRegistry::new();
            for ns in namespaces {
                reg.register(eventual(ns)).unwrap();
            }
            keys.iter()
                .map(|k| reg.lookup(k).unwrap().namespace.clone())
                .collect()
        };
        // All permutations of five namespaces.
        let mut order: Vec<usize> = (0..namespaces.len()).collect();
        permute(&mut order, 0, &mut |perm| {
            let mut reg = DescriptorRegistry::new();
            for &i in perm.iter() {
                reg.register(eventual(namespaces[i])).unwrap();
            }
            let got: Vec<String> = keys
                .iter()
                .map(|k| reg.lookup(k).unwrap().namespace.clone())
                .collect();
            assert_eq!(got, reference);
        });
    }

    fn permute(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, f);
            items.swap(k, i);
        }
    }

    #[test]
    fn machine_id_order_and_parse() {
        let a = MachineId::new(NodeId::new("n1"), 0);
        let b = MachineId::new(NodeId::new("n1"), 1);
        let c = MachineId::new(NodeId::new("n2"), 0);
        assert!(a < b && b < c);
        assert_eq!(MachineId::parse("n1/3"), Some(MachineId::new(NodeId::new("n1"), 3)));
        assert_eq!(MachineId::parse("n1"), None);
    }

    #[test]
    fn key_parse_roundtrip() {
        let k = CoordinationKey::parse("acl.svc/user/alice").unwrap();
        assert_eq!(k.namespace, "acl.svc");
        assert_eq!(k.name, "user/alice");
        assert_eq!(k.to_string(), "acl.svc/user/alice");
        assert_eq!(CoordinationKey::parse("noslash"), None);
    }
}
