//! Scenario files: the topology, data-type configuration, fault schedule,
//! workload and timers of one simulated run.
//!
//! Scenarios are TOML with a versioned `schema_version` field; the full
//! grammar is documented in `docs/scenario-format.md`. Parsing is strict
//! (unknown fields are errors) and validation reports the offending
//! section. A `ScenarioBuilder` produces the same structure
//! programmatically and funnels through the same validation path.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use crate::consensus::QuorumRule;
use crate::coordinator::{ClientOp, RuntimeConfig, ScopeTimers, NODE_FACADE_NAMESPACE};
use crate::error::ScenarioError;
use crate::membership::{self, MembershipView, MEMBERSHIP_NAMESPACE};
use crate::simnet::{FaultKind, Topology};
use crate::time::SimTime;
use crate::types::{
    CoordinationKey, CrdtKind, DataTypeDescriptor, DescriptorRegistry, Level, MachineId, NodeId,
    ParticipationOption, ReadMode, ReplicaSetId, Strategy,
};

pub const SCHEMA_VERSION: u32 = 1;

/// One time-stamped workload operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadOp {
    pub at: SimTime,
    pub node: NodeId,
    pub op: ClientOp,
    /// Absolute deadline.
    pub deadline: SimTime,
}

/// A fully built and validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub end: SimTime,
    pub topology: Topology,
    pub registry: DescriptorRegistry,
    pub base_view: MembershipView,
    /// Per-namespace timers, including the built-in scopes and a default
    /// entry under the empty key.
    pub timers: BTreeMap<String, ScopeTimers>,
    pub gossip_fanout: usize,
    pub client_retry_us: u64,
    pub faults: Vec<(SimTime, FaultKind)>,
    pub workload: Vec<WorkloadOp>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text)
            .map_err(|e| ScenarioError::new("toml", e.to_string().trim().replace('\n', "; ")))?;
        Scenario::from_file(file)
    }

    pub fn builder(seed: u64) -> ScenarioBuilder {
        ScenarioBuilder::new(seed)
    }

    /// The runtime configuration handed to every coordinator.
    pub fn runtime_config(&self, seed: u64, quorum_rule: QuorumRule) -> RuntimeConfig {
        RuntimeConfig {
            registry: self.registry.clone(),
            base_view: self.base_view.clone(),
            timers: self.timers.clone(),
            gossip_fanout: self.gossip_fanout,
            seed,
            quorum_rule,
        }
    }

    /// Longest gossip interval of any eventual descriptor; the quiescence
    /// window for convergence checking is a multiple of this.
    pub fn max_gossip_interval_us(&self) -> u64 {
        self.registry
            .descriptors()
            .filter(|d| d.strategy == Strategy::Eventual)
            .map(|d| {
                self.timers
                    .get(&d.namespace)
                    .or_else(|| self.timers.get(""))
                    .map_or(0, |t| t.gossip_interval_us)
            })
            .max()
            .unwrap_or(0)
    }

    /// Cheap invariant re-check for programmatically assembled scenarios.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.base_view.system_nodes.is_empty() {
            return Err(ScenarioError::new("topology", "no nodes"));
        }
        self.base_view
            .validate()
            .map_err(|e| ScenarioError::new("topology", e.to_string()))?;
        if !self.faults.windows(2).all(|w| w[0].0 <= w[1].0) {
            return Err(ScenarioError::new("faults", "not sorted by time"));
        }
        for (i, op) in self.workload.iter().enumerate() {
            if let Some(key) = op.op.key() {
                let known = key.namespace.starts_with(MEMBERSHIP_NAMESPACE)
                    || self.registry.lookup(key).is_ok();
                if !known {
                    return Err(ScenarioError::new(
                        format!("workload[{i}]"),
                        format!("key {key} matches no descriptor"),
                    ));
                }
            }
            if op.deadline > self.end {
                return Err(ScenarioError::new(
                    format!("workload[{i}]"),
                    "deadline extends past end_ms; every op must resolve within the run",
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn from_file(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
        let err = |loc: &str, why: String| Err(ScenarioError::new(loc, why));
        if file.schema_version != SCHEMA_VERSION {
            return err(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", file.schema_version),
            );
        }
        if file.topology.nodes.is_empty() {
            return err("topology.nodes", "at least one node required".into());
        }

        // Topology and base view.
        let mut node_machines: BTreeMap<NodeId, BTreeSet<MachineId>> = BTreeMap::new();
        let mut node_attributes: BTreeMap<NodeId, BTreeSet<String>> = BTreeMap::new();
        for (i, n) in file.topology.nodes.iter().enumerate() {
            let loc = format!("topology.nodes[{i}]");
            if n.name.is_empty() || n.name.contains(['/', ',', '@', ';']) {
                return err(&loc, format!("invalid node name {:?}", n.name));
            }
            let node = NodeId::new(&n.name);
            if node_machines.contains_key(&node) {
                return err(&loc, format!("duplicate node {}", n.name));
            }
            if n.machines == 0 {
                return err(&loc, "every node needs at least one machine".into());
            }
            let machines: BTreeSet<MachineId> =
                (0..n.machines).map(|i| MachineId::new(node.clone(), i)).collect();
            node_machines.insert(node.clone(), machines);
            node_attributes.insert(node.clone(), n.attrs.iter().cloned().collect());
        }
        let to_us = |ms: f64| -> u64 { (ms * 1000.0).round().max(0.0) as u64 };
        let mut links: BTreeMap<(NodeId, NodeId), u64> = BTreeMap::new();
        for (i, l) in file.topology.links.iter().enumerate() {
            let loc = format!("topology.links[{i}]");
            let a = NodeId::new(&l.a);
            let b = NodeId::new(&l.b);
            if !node_machines.contains_key(&a) || !node_machines.contains_key(&b) {
                return err(&loc, format!("link references unknown node {} or {}", l.a, l.b));
            }
            if a == b {
                return err(&loc, "self links are implicit (intra-node latency)".into());
            }
            if !l.latency_ms.is_finite() || l.latency_ms < 0.0 {
                return err(&loc, format!("invalid latency {}", l.latency_ms));
            }
            let key = if a < b { (a, b) } else { (b, a) };
            if links.insert(key, to_us(l.latency_ms)).is_some() {
                return err(&loc, format!("duplicate link {}-{}", l.a, l.b));
            }
        }
        let topology = Topology::new(
            node_machines.clone(),
            links,
            to_us(file.topology.default_latency_ms),
            to_us(file.topology.intra_node_latency_ms),
        );

        let mut replica_sets: BTreeMap<ReplicaSetId, BTreeSet<NodeId>> = BTreeMap::new();
        for (name, members) in &file.replica_sets {
            let set: BTreeSet<NodeId> = members.iter().map(NodeId::new).collect();
            for m in &set {
                if !node_machines.contains_key(m) {
                    return err(
                        &format!("replica_sets.{name}"),
                        format!("unknown node {m}"),
                    );
                }
            }
            replica_sets.insert(ReplicaSetId::new(name.clone()), set);
        }
        let base_view = MembershipView {
            version: 0,
            system_nodes: node_machines.keys().cloned().collect(),
            replica_sets,
            node_machines,
            node_attributes,
        };
        base_view
            .validate()
            .map_err(|e| ScenarioError::new("topology", e.to_string()))?;

        // Descriptors.
        let mut registry = DescriptorRegistry::new();
        for (i, d) in file.data_types.iter().enumerate() {
            let loc = format!("data_types[{i}]");
            let descriptor = parse_descriptor(d, &loc)?;
            if descriptor.namespace == "sys" || descriptor.namespace.starts_with("sys.") {
                return err(&loc, "the sys.* namespaces are reserved".into());
            }
            registry
                .register(descriptor.clone())
                .map_err(|e| ScenarioError::new(&loc, e.to_string()))?;
            // Configure-time checks: the scope must resolve (known replica
            // set, non-empty subset) and a pinned leader must be a member.
            let participants = membership::resolve_members(&base_view, &descriptor)
                .map_err(|e| ScenarioError::new(&loc, e.to_string()))?;
            if let Some(pin) = &descriptor.pinned_leader {
                let as_participant = crate::types::ParticipantId::Node(pin.clone());
                if !participants.members.contains(&as_participant) {
                    return err(&loc, format!("pinned leader {pin} is not in the scope"));
                }
            }
        }

        // Timers: global overrides, otherwise derived per scope from the
        // latency matrix.
        let t = &file.timers;
        let derived = |max_lat_us: u64| -> ScopeTimers {
            let election = t
                .election_ms
                .map(to_us)
                .unwrap_or_else(|| (10 * max_lat_us).max(1_000));
            ScopeTimers {
                election_base_us: election,
                heartbeat_us: t.heartbeat_ms.map(to_us).unwrap_or_else(|| (election / 5).max(200)),
                gossip_interval_us: t
                    .gossip_ms
                    .map(to_us)
                    .unwrap_or_else(|| (5 * max_lat_us).max(1_000)),
            }
        };
        let mut timers: BTreeMap<String, ScopeTimers> = BTreeMap::new();
        let all_machines: Vec<MachineId> = base_view.all_machines().cloned().collect();
        let system_max = topology.max_latency_among(&all_machines);
        timers.insert(String::new(), derived(system_max));
        timers.insert(MEMBERSHIP_NAMESPACE.to_string(), derived(system_max));
        for d in registry.descriptors() {
            let machines: Vec<MachineId> = membership::resolve_members(&base_view, d)
                .map(|p| {
                    p.members
                        .iter()
                        .flat_map(|m| match m {
                            crate::types::ParticipantId::Node(n) => {
                                base_view.machines_of(n).cloned().collect::<Vec<_>>()
                            }
                            crate::types::ParticipantId::Machine(m) => vec![m.clone()],
                        })
                        .collect()
                })
                .unwrap_or_default();
            timers.insert(d.namespace.clone(), derived(topology.max_latency_among(&machines)));
        }
        let node_election = t
            .node_election_ms
            .map(to_us)
            .unwrap_or_else(|| (10 * topology.intra_node_us()).max(1_000));
        timers.insert(
            NODE_FACADE_NAMESPACE.to_string(),
            ScopeTimers {
                election_base_us: node_election,
                heartbeat_us: (node_election / 5).max(100),
                gossip_interval_us: node_election,
            },
        );

        let end = SimTime(to_us(file.end_ms));
        let client_retry_us = t
            .client_retry_ms
            .map(to_us)
            .unwrap_or_else(|| timers[""].heartbeat_us.max(1));

        // Fault schedule.
        let mut faults: Vec<(SimTime, FaultKind)> = Vec::new();
        for (i, f) in file.faults.iter().enumerate() {
            let loc = format!("faults[{i}]");
            let at = SimTime(to_us(f.at_ms));
            let kind = parse_fault(f, &base_view, &loc)?;
            faults.push((at, kind));
        }
        faults.sort_by_key(|(at, _)| *at);

        // Workload.
        let mut workload = Vec::new();
        for (i, w) in file.workload.iter().enumerate() {
            let loc = format!("workload[{i}]");
            let node = NodeId::new(&w.node);
            if !base_view.system_nodes.contains(&node) {
                return err(&loc, format!("unknown node {}", w.node));
            }
            let at = SimTime(to_us(w.at_ms));
            let deadline = at.plus_us(to_us(w.deadline_ms.unwrap_or(1_000.0)));
            let op = match w.op.as_str() {
                "write" => {
                    let key = parse_key(w.key.as_deref(), &loc)?;
                    if key.namespace == "sys" || key.namespace.starts_with("sys.") {
                        return err(&loc, "sys.* keys are written via reconfigure".into());
                    }
                    ClientOp::Write {
                        key,
                        value: w.value.clone().unwrap_or_default().into_bytes(),
                    }
                }
                "read" => ClientOp::Read { key: parse_key(w.key.as_deref(), &loc)? },
                "reconfigure" => {
                    let set = w
                        .set
                        .as_deref()
                        .ok_or_else(|| ScenarioError::new(&loc, "reconfigure needs `set`"))?;
                    let members = w
                        .members
                        .as_ref()
                        .ok_or_else(|| ScenarioError::new(&loc, "reconfigure needs `members`"))?;
                    ClientOp::Reconfigure {
                        set: ReplicaSetId::new(set),
                        members: members.iter().map(NodeId::new).collect(),
                    }
                }
                other => return err(&loc, format!("unknown op {other:?}")),
            };
            workload.push(WorkloadOp { at, node, op, deadline });
        }
        workload.sort_by_key(|w| w.at);

        let sc = Scenario {
            seed: file.seed,
            end,
            topology,
            registry,
            base_view,
            timers,
            gossip_fanout: t.fanout.unwrap_or(2).max(1),
            client_retry_us,
            faults,
            workload,
        };
        sc.validate()?;
        Ok(sc)
    }
}

fn parse_key(key: Option<&str>, loc: &str) -> Result<CoordinationKey, ScenarioError> {
    let raw = key.ok_or_else(|| ScenarioError::new(loc, "missing `key`"))?;
    CoordinationKey::parse(raw)
        .ok_or_else(|| ScenarioError::new(loc, format!("malformed key {raw:?} (want ns/name)")))
}

fn parse_descriptor(d: &DataTypeFile, loc: &str) -> Result<DataTypeDescriptor, ScenarioError> {
    let strategy = match d.strategy.as_str() {
        "eventual" => Strategy::Eventual,
        "strict" => Strategy::Strict,
        other => return Err(ScenarioError::new(loc, format!("unknown strategy {other:?}"))),
    };
    let level = if d.level == "system" {
        Level::System
    } else if let Some(rs) = d.level.strip_prefix("replica-set:") {
        Level::ReplicaSet(ReplicaSetId::new(rs))
    } else if let Some(n) = d.level.strip_prefix("node:") {
        Level::Node(NodeId::new(n))
    } else {
        return Err(ScenarioError::new(loc, format!("unknown level {:?}", d.level)));
    };
    let participation = match d.participation.as_str() {
        "all" => ParticipationOption::AllMembers,
        "leader-follower" => ParticipationOption::LeaderFollower,
        other => match other.strip_prefix("subset:") {
            Some(pred) => ParticipationOption::Subset(pred.to_string()),
            None => {
                return Err(ScenarioError::new(loc, format!("unknown participation {other:?}")))
            }
        },
    };
    let read_mode = match (&d.read_mode, strategy) {
        (None, Strategy::Eventual) => ReadMode::LocalCache,
        (None, Strategy::Strict) => ReadMode::ReadQuorum,
        (Some(m), _) => match m.as_str() {
            "local-cache" => ReadMode::LocalCache,
            "leader-read" => ReadMode::LeaderRead,
            "read-quorum" => ReadMode::ReadQuorum,
            other => return Err(ScenarioError::new(loc, format!("unknown read_mode {other:?}"))),
        },
    };
    let crdt_kind = match (&d.crdt, strategy) {
        (None, Strategy::Eventual) => Some(CrdtKind::LwwRegister),
        (None, Strategy::Strict) => None,
        (Some(k), _) => Some(match k.as_str() {
            "lww-register" => CrdtKind::LwwRegister,
            "or-set" => CrdtKind::OrSet,
            other => return Err(ScenarioError::new(loc, format!("unknown crdt {other:?}"))),
        }),
    };
    let descriptor = DataTypeDescriptor {
        namespace: d.namespace.clone(),
        strategy,
        level,
        participation,
        crdt_kind,
        read_mode,
        pinned_leader: d.pinned_leader.as_deref().map(NodeId::new),
    };
    descriptor.validate().map_err(|e| ScenarioError::new(loc, e.to_string()))?;
    Ok(descriptor)
}

fn parse_fault(
    f: &FaultFile,
    view: &MembershipView,
    loc: &str,
) -> Result<FaultKind, ScenarioError> {
    let parse_machine = |name: &str| -> Result<MachineId, ScenarioError> {
        if let Some(m) = MachineId::parse(name) {
            if view.node_machines.get(&m.node).is_some_and(|ms| ms.contains(&m)) {
                return Ok(m);
            }
            return Err(ScenarioError::new(loc, format!("unknown machine {name}")));
        }
        let node = NodeId::new(name);
        match view.node_machines.get(&node) {
            Some(ms) if ms.len() == 1 => Ok(ms.iter().next().unwrap().clone()),
            Some(_) => Err(ScenarioError::new(
                loc,
                format!("{name} has several machines; name one as {name}/<index>"),
            )),
            None => Err(ScenarioError::new(loc, format!("unknown node {name}"))),
        }
    };
    match f.kind.as_str() {
        "partition" => {
            let groups_spec = f
                .groups
                .as_ref()
                .ok_or_else(|| ScenarioError::new(loc, "partition needs `groups`"))?;
            let mut seen: BTreeSet<MachineId> = BTreeSet::new();
            let mut groups: Vec<BTreeSet<MachineId>> = Vec::new();
            for spec in groups_spec {
                let mut group = BTreeSet::new();
                for name in spec {
                    // A bare node name means all of its machines; partitions
                    // cut between locations, never through one.
                    let machines: Vec<MachineId> = if let Some(m) = MachineId::parse(name) {
                        vec![m]
                    } else {
                        view.machines_of(&NodeId::new(name.clone())).cloned().collect()
                    };
                    if machines.is_empty() {
                        return Err(ScenarioError::new(loc, format!("unknown node {name}")));
                    }
                    group.extend(machines);
                }
                for m in &group {
                    if !seen.insert(m.clone()) {
                        return Err(ScenarioError::new(
                            loc,
                            format!("machine {m} appears in two partition groups"),
                        ));
                    }
                }
                groups.push(group);
            }
            // Machines not named fall into one implicit remainder group, so
            // the groups always cover all machines.
            let rest: BTreeSet<MachineId> =
                view.all_machines().filter(|m| !seen.contains(*m)).cloned().collect();
            if !rest.is_empty() {
                groups.push(rest);
            }
            for g in &groups {
                for m in g {
                    let siblings = view.machines_of(&m.node);
                    for s in siblings {
                        if !g.contains(s) {
                            return Err(ScenarioError::new(
                                loc,
                                format!("partition splits node {} across groups", m.node),
                            ));
                        }
                    }
                }
            }
            Ok(FaultKind::Partition(groups))
        }
        "heal" => Ok(FaultKind::Heal),
        "crash" => {
            let m = f
                .machine
                .as_deref()
                .ok_or_else(|| ScenarioError::new(loc, "crash needs `machine`"))?;
            Ok(FaultKind::Crash(parse_machine(m)?))
        }
        "restart" => {
            let m = f
                .machine
                .as_deref()
                .ok_or_else(|| ScenarioError::new(loc, "restart needs `machine`"))?;
            Ok(FaultKind::Restart(parse_machine(m)?))
        }
        "set_loss" => {
            let p = f
                .loss
                .ok_or_else(|| ScenarioError::new(loc, "set_loss needs `loss`"))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(ScenarioError::new(loc, format!("loss {p} outside [0, 1]")));
            }
            Ok(FaultKind::SetLoss { ppm: (p * 1_000_000.0).round() as u32 })
        }
        other => Err(ScenarioError::new(loc, format!("unknown fault kind {other:?}"))),
    }
}

// ---------------------------------------------------------------------
// Raw file model
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ScenarioFile {
    pub(crate) schema_version: u32,
    pub(crate) seed: u64,
    pub(crate) end_ms: f64,
    #[serde(default)]
    pub(crate) timers: TimersFile,
    pub(crate) topology: TopologyFile,
    #[serde(default)]
    pub(crate) replica_sets: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub(crate) data_types: Vec<DataTypeFile>,
    #[serde(default)]
    pub(crate) workload: Vec<WorkloadFile>,
    #[serde(default)]
    pub(crate) faults: Vec<FaultFile>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TimersFile {
    pub(crate) election_ms: Option<f64>,
    pub(crate) heartbeat_ms: Option<f64>,
    pub(crate) gossip_ms: Option<f64>,
    pub(crate) node_election_ms: Option<f64>,
    pub(crate) fanout: Option<usize>,
    pub(crate) client_retry_ms: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TopologyFile {
    #[serde(default = "default_latency")]
    pub(crate) default_latency_ms: f64,
    #[serde(default = "default_intra")]
    pub(crate) intra_node_latency_ms: f64,
    pub(crate) nodes: Vec<NodeFile>,
    #[serde(default)]
    pub(crate) links: Vec<LinkFile>,
}

fn default_latency() -> f64 {
    10.0
}

fn default_intra() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct NodeFile {
    pub(crate) name: String,
    #[serde(default = "one")]
    pub(crate) machines: u32,
    #[serde(default)]
    pub(crate) attrs: Vec<String>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct LinkFile {
    pub(crate) a: String,
    pub(crate) b: String,
    pub(crate) latency_ms: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct DataTypeFile {
    pub(crate) namespace: String,
    pub(crate) strategy: String,
    pub(crate) level: String,
    #[serde(default = "all")]
    pub(crate) participation: String,
    pub(crate) read_mode: Option<String>,
    pub(crate) crdt: Option<String>,
    pub(crate) pinned_leader: Option<String>,
}

fn all() -> String {
    "all".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct WorkloadFile {
    pub(crate) at_ms: f64,
    pub(crate) node: String,
    pub(crate) op: String,
    pub(crate) key: Option<String>,
    pub(crate) value: Option<String>,
    pub(crate) deadline_ms: Option<f64>,
    pub(crate) set: Option<String>,
    pub(crate) members: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct FaultFile {
    pub(crate) at_ms: f64,
    pub(crate) kind: String,
    pub(crate) groups: Option<Vec<Vec<String>>>,
    pub(crate) machine: Option<String>,
    pub(crate) loss: Option<f64>,
}

// ---------------------------------------------------------------------
// Builder (tests, sweeps, generated corpora)
// ---------------------------------------------------------------------

/// Assembles a scenario in code; `build` runs the same validation as
/// parsing a file.
#[derive(Debug, Clone)]
pub struct ScenarioBuilder {
    seed: u64,
    end_ms: f64,
    default_latency_ms: f64,
    intra_node_latency_ms: f64,
    nodes: Vec<(String, u32, Vec<String>)>,
    links: Vec<(String, String, f64)>,
    replica_sets: BTreeMap<String, Vec<String>>,
    data_types: Vec<DataTypeFile>,
    workload: Vec<WorkloadFile>,
    faults: Vec<FaultFile>,
    timers: TimersFile,
}

impl ScenarioBuilder {
    fn new(seed: u64) -> ScenarioBuilder {
        ScenarioBuilder {
            seed,
            end_ms: 10_000.0,
            default_latency_ms: 10.0,
            intra_node_latency_ms: 0.5,
            nodes: Vec::new(),
            links: Vec::new(),
            replica_sets: BTreeMap::new(),
            data_types: Vec::new(),
            workload: Vec::new(),
            faults: Vec::new(),
            timers: TimersFile::default(),
        }
    }

    pub fn end_ms(mut self, ms: f64) -> Self {
        self.end_ms = ms;
        self
    }

    pub fn default_latency_ms(mut self, ms: f64) -> Self {
        self.default_latency_ms = ms;
        self
    }

    pub fn intra_node_latency_ms(mut self, ms: f64) -> Self {
        self.intra_node_latency_ms = ms;
        self
    }

    pub fn node(mut self, name: &str) -> Self {
        self.nodes.push((name.to_string(), 1, Vec::new()));
        self
    }

    pub fn node_with(mut self, name: &str, machines: u32, attrs: &[&str]) -> Self {
        self.nodes
            .push((name.to_string(), machines, attrs.iter().map(|s| s.to_string()).collect()));
        self
    }

    pub fn link(mut self, a: &str, b: &str, latency_ms: f64) -> Self {
        self.links.push((a.to_string(), b.to_string(), latency_ms));
        self
    }

    pub fn replica_set(mut self, id: &str, members: &[&str]) -> Self {
        self.replica_sets
            .insert(id.to_string(), members.iter().map(|s| s.to_string()).collect());
        self
    }

    /// Registers a data type; `level` and `participation` use the textual
    /// scenario-file forms (`system`, `replica-set:r1`, `node:n1`; `all`,
    /// `leader-follower`, `subset:cloud-only`).
    pub fn data_type(mut self, namespace: &str, strategy: &str, level: &str, participation: &str) -> Self {
        self.data_types.push(DataTypeFile {
            namespace: namespace.to_string(),
            strategy: strategy.to_string(),
            level: level.to_string(),
            participation: participation.to_string(),
            read_mode: None,
            crdt: None,
            pinned_leader: None,
        });
        self
    }

    pub fn read_mode(mut self, mode: &str) -> Self {
        if let Some(d) = self.data_types.last_mut() {
            d.read_mode = Some(mode.to_string());
        }
        self
    }

    pub fn crdt(mut self, kind: &str) -> Self {
        if let Some(d) = self.data_types.last_mut() {
            d.crdt = Some(kind.to_string());
        }
        self
    }

    pub fn pinned_leader(mut self, node: &str) -> Self {
        if let Some(d) = self.data_types.last_mut() {
            d.pinned_leader = Some(node.to_string());
        }
        self
    }

    pub fn write(mut self, at_ms: f64, node: &str, key: &str, value: &str, deadline_ms: f64) -> Self {
        self.workload.push(WorkloadFile {
            at_ms,
            node: node.to_string(),
            op: "write".to_string(),
            key: Some(key.to_string()),
            value: Some(value.to_string()),
            deadline_ms: Some(deadline_ms),
            set: None,
            members: None,
        });
        self
    }

    pub fn read(mut self, at_ms: f64, node: &str, key: &str, deadline_ms: f64) -> Self {
        self.workload.push(WorkloadFile {
            at_ms,
            node: node.to_string(),
            op: "read".to_string(),
            key: Some(key.to_string()),
            value: None,
            deadline_ms: Some(deadline_ms),
            set: None,
            members: None,
        });
        self
    }

    pub fn reconfigure(mut self, at_ms: f64, node: &str, set: &str, members: &[&str], deadline_ms: f64) -> Self {
        self.workload.push(WorkloadFile {
            at_ms,
            node: node.to_string(),
            op: "reconfigure".to_string(),
            key: None,
            value: None,
            deadline_ms: Some(deadline_ms),
            set: Some(set.to_string()),
            members: Some(members.iter().map(|s| s.to_string()).collect()),
        });
        self
    }

    pub fn partition(mut self, at_ms: f64, groups: &[&[&str]]) -> Self {
        self.faults.push(FaultFile {
            at_ms,
            kind: "partition".to_string(),
            groups: Some(
                groups.iter().map(|g| g.iter().map(|s| s.to_string()).collect()).collect(),
            ),
            machine: None,
            loss: None,
        });
        self
    }

    pub fn heal(mut self, at_ms: f64) -> Self {
        self.faults.push(FaultFile {
            at_ms,
            kind: "heal".to_string(),
            groups: None,
            machine: None,
            loss: None,
        });
        self
    }

    pub fn crash(mut self, at_ms: f64, machine: &str) -> Self {
        self.faults.push(FaultFile {
            at_ms,
            kind: "crash".to_string(),
            groups: None,
            machine: Some(machine.to_string()),
            loss: None,
        });
        self
    }

    pub fn restart(mut self, at_ms: f64, machine: &str) -> Self {
        self.faults.push(FaultFile {
            at_ms,
            kind: "restart".to_string(),
            groups: None,
            machine: Some(machine.to_string()),
            loss: None,
        });
        self
    }

    pub fn set_loss(mut self, at_ms: f64, loss: f64) -> Self {
        self.faults.push(FaultFile {
            at_ms,
            kind: "set_loss".to_string(),
            groups: None,
            machine: None,
            loss: Some(loss),
        });
        self
    }

    pub fn election_ms(mut self, ms: f64) -> Self {
        self.timers.election_ms = Some(ms);
        self
    }

    pub fn heartbeat_ms(mut self, ms: f64) -> Self {
        self.timers.heartbeat_ms = Some(ms);
        self
    }

    pub fn gossip_ms(mut self, ms: f64) -> Self {
        self.timers.gossip_ms = Some(ms);
        self
    }

    pub fn fanout(mut self, n: usize) -> Self {
        self.timers.fanout = Some(n);
        self
    }

    pub fn build(self) -> Result<Scenario, ScenarioError> {
        let file = ScenarioFile {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            end_ms: self.end_ms,
            timers: self.timers,
            topology: TopologyFile {
                default_latency_ms: self.default_latency_ms,
                intra_node_latency_ms: self.intra_node_latency_ms,
                nodes: self
                    .nodes
                    .into_iter()
                    .map(|(name, machines, attrs)| NodeFile { name, machines, attrs })
                    .collect(),
                links: self
                    .links
                    .into_iter()
                    .map(|(a, b, latency_ms)| LinkFile { a, b, latency_ms })
                    .collect(),
            },
            replica_sets: self.replica_sets,
            data_types: self.data_types,
            workload: self.workload,
            faults: self.faults,
        };
        Scenario::from_file(file)
    }
}
