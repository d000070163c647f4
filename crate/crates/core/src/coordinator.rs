//! The per-machine coordination middleware: takes application writes and
//! reads, determines the relevant participants for the key's configured
//! level, and either disseminates a CRDT update immediately or drives a
//! consensus commit with the members. Reads are served from the local cache
//! or through the strict read paths. Gossip anti-entropy repairs eventual
//! divergence in the background.
//!
//! A coordinator is a single-threaded deterministic state machine: it is
//! advanced only by client ops, messages and timer wakes, and every side
//! effect is returned as an [`Effect`], never performed through a hidden
//! channel, so runs are replayable.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::consensus::{
    ClientRef, ConsensusMsg, EntryPayload, GroupConfig, GroupId, LeaderMode, LogIndex, Persist,
    QuorumRule, Reject, Replica, ReplicaOut, Term, ValueAt,
};
use crate::crdt::{self, CrdtValue, LocalOp};
use crate::membership::{
    self, membership_descriptor, resolve_members, MembershipView, MEMBERSHIP_NAMESPACE,
};
use crate::time::SimTime;
use crate::types::{
    CoordinationKey, CrdtKind, DataTypeDescriptor, DescriptorRegistry, Level, MachineId, NodeId,
    ParticipantId, ReadMode, ReplicaSetId, Strategy,
};
use crate::util::derive_seed;

/// Reserved namespace for the built-in node facade groups.
pub const NODE_FACADE_NAMESPACE: &str = "sys.node";

/// Wire destination: a concrete machine, or a fog node (the simulator
/// routes node addresses to the node's current facade leader machine).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Address {
    Machine(MachineId),
    Node(NodeId),
}

impl Address {
    pub fn of(p: &ParticipantId) -> Address {
        match p {
            ParticipantId::Node(n) => Address::Node(n.clone()),
            ParticipantId::Machine(m) => Address::Machine(m.clone()),
        }
    }
}

impl std::fmt::Display for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Address::Machine(m) => write!(f, "{m}"),
            Address::Node(n) => write!(f, "{n}"),
        }
    }
}

/// Why a state exchange was sent; determines the trace message kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeKind {
    /// Immediate dissemination of a fresh local write.
    UpdatePush,
    /// Periodic anti-entropy push (push-pull: a reply is requested).
    GossipPush,
    /// Anti-entropy reply carrying entries the pusher was missing.
    GossipReply,
}

/// Everything that travels on the simulated wire between coordinators.
#[derive(Debug, Clone, PartialEq)]
pub enum Msg {
    Consensus {
        group: GroupId,
        inner: ConsensusMsg,
    },
    /// Strict write forwarded to the group leader.
    Propose {
        group: GroupId,
        payload: EntryPayload,
        client: ClientRef,
        deadline: SimTime,
    },
    /// The leader appended the proposal (not yet committed).
    ProposeAck { client: ClientRef },
    ProposeReply {
        client: ClientRef,
        result: Result<(LogIndex, Term), Reject>,
    },
    /// Leader read forwarded to the group leader.
    ReadRequest {
        group: GroupId,
        key: CoordinationKey,
        client: ClientRef,
        deadline: SimTime,
    },
    ReadResult {
        client: ClientRef,
        result: Result<Option<Vec<u8>>, Reject>,
    },
    StateExchange {
        namespace: String,
        states: Vec<(CoordinationKey, CrdtValue)>,
        kind: ExchangeKind,
    },
}

impl Msg {
    pub fn kind(&self) -> &'static str {
        match self {
            Msg::Consensus { inner, .. } => inner.kind(),
            Msg::Propose { .. } => "propose",
            Msg::ProposeAck { .. } => "propose-ack",
            Msg::ProposeReply { .. } => "propose-reply",
            Msg::ReadRequest { .. } => "read-req",
            Msg::ReadResult { .. } => "read-result",
            Msg::StateExchange { kind, .. } => match kind {
                ExchangeKind::UpdatePush => "update-push",
                ExchangeKind::GossipPush => "gossip-push",
                ExchangeKind::GossipReply => "gossip-reply",
            },
        }
    }

    /// Deterministic wire-size accounting; see `docs/formats.md`.
    pub fn wire_size(&self) -> u32 {
        const HEADER: u32 = 24;
        let payload_size = |p: &EntryPayload| -> u32 {
            match p {
                EntryPayload::Noop => 1,
                EntryPayload::Put { key, value } => {
                    (key.to_string().len() + value.len()) as u32 + 8
                }
                EntryPayload::Config { members } => {
                    members.iter().map(|m| m.to_string().len() as u32 + 1).sum::<u32>() + 8
                }
            }
        };
        let value_at = |v: &Option<ValueAt>| v.as_ref().map_or(0, |v| v.value.len() as u32 + 16);
        HEADER
            + match self {
                Msg::Consensus { inner, .. } => match inner {
                    ConsensusMsg::Append { entries, .. } => {
                        32 + entries.iter().map(|e| 16 + payload_size(&e.payload)).sum::<u32>()
                    }
                    ConsensusMsg::AppendReply { .. } => 16,
                    ConsensusMsg::VoteRequest { .. } => 24,
                    ConsensusMsg::VoteReply { .. } => 8,
                    ConsensusMsg::ReadProbe { probe, .. } => match probe {
                        crate::consensus::ProbeKind::Confirm => 16,
                        crate::consensus::ProbeKind::Quorum { key } => {
                            16 + key.to_string().len() as u32
                        }
                    },
                    ConsensusMsg::ReadReply { logged, committed, .. } => {
                        16 + value_at(logged) + value_at(committed)
                    }
                },
                Msg::Propose { payload, .. } => 16 + payload_size(payload),
                Msg::ProposeAck { .. } => 8,
                Msg::ProposeReply { .. } => 16,
                Msg::ReadRequest { key, .. } => 16 + key.to_string().len() as u32,
                Msg::ReadResult { result, .. } => {
                    16 + result.as_ref().ok().and_then(|v| v.as_ref()).map_or(0, |v| v.len() as u32)
                }
                Msg::StateExchange { namespace, states, .. } => {
                    namespace.len() as u32
                        + states
                            .iter()
                            .map(|(k, s)| {
                                k.to_string().len() as u32
                                    + crdt::canonical_encode(s).len() as u32
                            })
                            .sum::<u32>()
                }
            }
    }
}

/// Scope stamp attached to every outbound message: which descriptor/group
/// scope it serves and which nodes may legitimately receive it, resolved
/// from the sender's view at send time. The simulator asserts scoping on
/// every delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeTag {
    pub scope: String,
    pub allowed: BTreeSet<NodeId>,
}

/// An application-level operation injected at a node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOp {
    Write { key: CoordinationKey, value: Vec<u8> },
    Read { key: CoordinationKey },
    Reconfigure { set: ReplicaSetId, members: BTreeSet<NodeId> },
}

impl ClientOp {
    pub fn key(&self) -> Option<&CoordinationKey> {
        match self {
            ClientOp::Write { key, .. } | ClientOp::Read { key } => Some(key),
            ClientOp::Reconfigure { .. } => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ClientOp::Write { .. } => "write",
            ClientOp::Read { .. } => "read",
            ClientOp::Reconfigure { .. } => "reconfigure",
        }
    }
}

/// Final outcome of a client op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpOutcome {
    /// Write applied (eventual: locally; strict: committed).
    WriteOk,
    ReadValue(Vec<u8>),
    ReadElements(BTreeSet<Vec<u8>>),
    NotFound,
    ReconfigureOk,
    NoDescriptor,
    NotParticipant,
    /// Quorum or leadership unavailable before the deadline. For strict
    /// writes this is indeterminate: the entry may still commit later.
    NoQuorum,
    /// The facade never answered (machine down); also indeterminate.
    Timeout,
    InvalidChange(String),
    UnknownNode(NodeId),
    KindMismatch,
}

impl OpOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(
            self,
            OpOutcome::WriteOk
                | OpOutcome::ReadValue(_)
                | OpOutcome::ReadElements(_)
                | OpOutcome::NotFound
                | OpOutcome::ReconfigureOk
        )
    }

    pub fn label(&self) -> &'static str {
        match self {
            OpOutcome::WriteOk | OpOutcome::ReadValue(_) | OpOutcome::ReadElements(_) => "ok",
            OpOutcome::ReconfigureOk => "ok",
            OpOutcome::NotFound => "not-found",
            OpOutcome::NoDescriptor => "no-descriptor",
            OpOutcome::NotParticipant => "not-participant",
            OpOutcome::NoQuorum => "no-quorum",
            OpOutcome::Timeout => "timeout",
            OpOutcome::InvalidChange(_) => "invalid-change",
            OpOutcome::UnknownNode(_) => "unknown-node",
            OpOutcome::KindMismatch => "kind-mismatch",
        }
    }
}

/// Side effects returned from one coordinator step.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Send { to: Address, msg: Msg, scope: ScopeTag },
    Persist { owner: ParticipantId, group: GroupId, state: Persist },
    OpDone { op_id: u64, attempt: u32, outcome: OpOutcome },
    /// Eventual cache state for a key changed (merge or local update).
    CacheChanged { key: CoordinationKey },
    /// A strict entry was applied locally.
    AppliedStrict { group: GroupId, key: CoordinationKey, index: LogIndex, term: Term },
    /// This replica regards (index, term) as committed.
    CommitRecord {
        group: GroupId,
        index: LogIndex,
        term: Term,
        digest: u64,
        quorum: Option<BTreeSet<ParticipantId>>,
    },
    Leader { group: GroupId, term: Term },
    SteppedDown { group: GroupId, term: Term },
    /// This machine is now the facade leader of its node.
    FacadeClaim,
    ScopeViolation { scope: String, detail: String },
    ViewChanged { version: u64, set: ReplicaSetId, members: BTreeSet<NodeId> },
}

/// What a coordinator step produced, plus when it next wants a wake.
#[derive(Debug, Clone, PartialEq)]
pub struct Effects {
    pub list: Vec<Effect>,
    pub next_wake: SimTime,
}

/// Inputs a coordinator is advanced by.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Client { op_id: u64, attempt: u32, op: ClientOp, deadline: SimTime },
    Message { from: MachineId, msg: Msg },
    /// Timer wake; deadlines are re-derived from state, so spurious wakes
    /// are harmless.
    Wake,
    /// This machine just became its node's facade: adopt the node-owned
    /// stable records and start acting for the node.
    AdoptFacade { persists: BTreeMap<GroupId, Persist> },
}

/// Per-scope timer configuration, precomputed from the scenario (defaults
/// derive from the latency matrix: election base 10x, gossip interval 5x
/// the scope's max one-way latency).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeTimers {
    pub election_base_us: u64,
    pub heartbeat_us: u64,
    pub gossip_interval_us: u64,
}

/// Everything coordinators need to know that is fixed for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub registry: DescriptorRegistry,
    pub base_view: MembershipView,
    /// Keyed by descriptor namespace; the empty key is the default and is
    /// always present. Also covers the built-in membership and node facade
    /// scopes.
    pub timers: BTreeMap<String, ScopeTimers>,
    pub gossip_fanout: usize,
    pub seed: u64,
    pub quorum_rule: QuorumRule,
}

impl RuntimeConfig {
    pub fn timers_for(&self, namespace: &str) -> &ScopeTimers {
        self.timers
            .get(namespace)
            .or_else(|| self.timers.get(""))
            .expect("runtime config carries a default timer entry")
    }
}

const INTERNAL_OP_BIT: u64 = 1 << 63;

#[derive(Debug, Clone)]
enum SessionState {
    StrictWrite {
        group: GroupId,
        payload: EntryPayload,
        acked: bool,
        routed_to: Option<ParticipantId>,
        next_retry: SimTime,
    },
    LeaderRead {
        group: GroupId,
        key: CoordinationKey,
        routed_to: Option<ParticipantId>,
        next_retry: SimTime,
    },
    QuorumRead {
        group: GroupId,
        key: CoordinationKey,
        read_id: u64,
        replies: BTreeMap<ParticipantId, (Option<ValueAt>, Option<ValueAt>)>,
        next_retry: SimTime,
    },
    Reconfigure {
        plan: Vec<ReconfigStep>,
        next_step: usize,
        inflight: Option<u64>,
    },
}

#[derive(Debug, Clone)]
enum ReconfigStep {
    MembershipWrite { key: CoordinationKey, value: Vec<u8> },
    GroupChange { group: GroupId, members: BTreeSet<ParticipantId> },
}

#[derive(Debug, Clone)]
struct Session {
    attempt: u32,
    deadline: SimTime,
    state: SessionState,
    /// Parent session for internal sub-ops spawned by reconfiguration.
    parent: Option<u64>,
}

/// The middleware instance running on one machine.
#[derive(Debug)]
pub struct Coordinator {
    me: MachineId,
    runtime: RuntimeConfig,
    view: MembershipView,
    is_facade: bool,
    lamport: u64,
    eventual: BTreeMap<CoordinationKey, CrdtValue>,
    /// Keys per descriptor namespace, for gossip batching.
    by_namespace: BTreeMap<String, BTreeSet<CoordinationKey>>,
    strict_applied: BTreeMap<CoordinationKey, (Vec<u8>, Term, LogIndex)>,
    replicas: BTreeMap<GroupId, Replica>,
    /// Stable records owned by this machine or (while facade) its node.
    persists: BTreeMap<(ParticipantId, GroupId), Persist>,
    sessions: BTreeMap<u64, Session>,
    gossip_due: BTreeMap<String, SimTime>,
    next_internal_op: u64,
    next_read_id: u64,
    rng: ChaCha12Rng,
}

impl Coordinator {
    /// Brings up the middleware on a machine. `persists` holds the stable
    /// records this machine may own (its own, plus its node's when it is
    /// the facade); `restart_epoch` makes post-restart randomness distinct.
    pub fn new(
        me: MachineId,
        runtime: RuntimeConfig,
        persists: BTreeMap<(ParticipantId, GroupId), Persist>,
        is_facade: bool,
        restart_epoch: u32,
        now: SimTime,
    ) -> (Coordinator, Effects) {
        let machine_ordinal = {
            let mut all: Vec<&MachineId> = runtime.base_view.all_machines().collect();
            all.sort();
            all.iter().position(|m| **m == me).unwrap_or(0) as u64
        };
        let seed = derive_seed(runtime.seed, machine_ordinal * 1009 + restart_epoch as u64);
        let view = runtime.base_view.clone();
        let mut c = Coordinator {
            me,
            view,
            is_facade,
            lamport: 0,
            eventual: BTreeMap::new(),
            by_namespace: BTreeMap::new(),
            strict_applied: BTreeMap::new(),
            replicas: BTreeMap::new(),
            persists,
            sessions: BTreeMap::new(),
            gossip_due: BTreeMap::new(),
            next_internal_op: 0,
            next_read_id: 0,
            rng: ChaCha12Rng::seed_from_u64(seed),
            runtime,
        };
        let mut out = Vec::new();
        c.bootstrap_groups(now, &mut out);
        let eventual_ns: Vec<String> = c
            .runtime
            .registry
            .descriptors()
            .filter(|d| d.strategy == Strategy::Eventual)
            .map(|d| d.namespace.clone())
            .collect();
        for ns in eventual_ns {
            let interval = c.runtime.timers_for(&ns).gossip_interval_us;
            c.gossip_due.insert(ns, now.plus_us(interval));
        }
        let fx = c.seal(out);
        (c, fx)
    }

    pub fn me(&self) -> &MachineId {
        &self.me
    }

    pub fn is_facade(&self) -> bool {
        self.is_facade
    }

    pub fn view(&self) -> &MembershipView {
        &self.view
    }

    pub fn eventual_state(&self, key: &CoordinationKey) -> Option<&CrdtValue> {
        self.eventual.get(key)
    }

    pub fn eventual_cache(&self) -> &BTreeMap<CoordinationKey, CrdtValue> {
        &self.eventual
    }

    pub fn strict_value(&self, key: &CoordinationKey) -> Option<&(Vec<u8>, Term, LogIndex)> {
        self.strict_applied.get(key)
    }

    pub fn replicas(&self) -> impl Iterator<Item = (&GroupId, &Replica)> {
        self.replicas.iter()
    }

    /// Log of the local replica for a group, for cross-replica invariant
    /// checks by the simulator.
    pub fn replica_log(&self, gid: &GroupId) -> Option<&[crate::consensus::LogEntry]> {
        self.replicas.get(gid).map(|r| r.log())
    }

    pub fn strict_applied_snapshot(
        &self,
    ) -> BTreeMap<CoordinationKey, (Vec<u8>, Term, LogIndex)> {
        self.strict_applied.clone()
    }

    /// Resolved participants of a group per this machine's current view.
    pub fn group_participants(&self, gid: &GroupId) -> Option<BTreeSet<ParticipantId>> {
        let d = self.descriptor_for_group(gid)?;
        resolve_members(&self.view, &d).ok().map(|p| p.members)
    }

    /// Resolved participants of the scope a key belongs to.
    pub fn group_participants_for_key(&self, key: &CoordinationKey) -> Option<BTreeSet<ParticipantId>> {
        let d = self.runtime.registry.lookup(key).ok()?;
        resolve_members(&self.view, d).ok().map(|p| p.members)
    }

    /// Advances the coordinator by one input and returns all effects.
    pub fn handle(&mut self, now: SimTime, input: Input) -> Effects {
        let mut out = Vec::new();
        match input {
            Input::Client { op_id, attempt, op, deadline } => {
                self.start_client_op(now, op_id, attempt, op, deadline, &mut out);
            }
            Input::Message { from, msg } => {
                self.on_message(now, from, msg, &mut out);
            }
            Input::Wake => {}
            Input::AdoptFacade { persists } => {
                self.is_facade = true;
                for (gid, p) in persists {
                    self.persists.insert((ParticipantId::Node(self.me.node.clone()), gid), p);
                }
                self.bootstrap_groups(now, &mut out);
            }
        }
        self.advance(now, &mut out);
        self.seal(out)
    }

    /// Collects dirty stable records and computes the next wake time.
    fn seal(&mut self, mut out: Vec<Effect>) -> Effects {
        for (gid, r) in self.replicas.iter_mut() {
            if let Some(p) = r.take_persist() {
                let owner = r.me.clone();
                self.persists.insert((owner.clone(), gid.clone()), p.clone());
                out.push(Effect::Persist { owner, group: gid.clone(), state: p });
            }
        }
        let mut wake = SimTime::NEVER;
        for r in self.replicas.values() {
            wake = wake.min(r.next_wake());
        }
        for due in self.gossip_due.values() {
            wake = wake.min(*due);
        }
        for s in self.sessions.values() {
            wake = wake.min(s.deadline);
            match &s.state {
                SessionState::StrictWrite { next_retry, .. }
                | SessionState::LeaderRead { next_retry, .. }
                | SessionState::QuorumRead { next_retry, .. } => wake = wake.min(*next_retry),
                SessionState::Reconfigure { .. } => {}
            }
        }
        Effects { list: out, next_wake: wake }
    }

    /// Fires everything that is due: replica timers, gossip, session
    /// retries and deadlines.
    fn advance(&mut self, now: SimTime, out: &mut Vec<Effect>) {
        let gids: Vec<GroupId> = self.replicas.keys().cloned().collect();
        for gid in gids {
            let mut routs = Vec::new();
            if let Some(r) = self.replicas.get_mut(&gid) {
                if now >= r.next_wake() {
                    r.tick(now, &mut self.rng, &mut routs);
                }
            }
            self.absorb_replica_outs(now, &gid, routs, out);
        }
        self.gossip(now, out);
        self.drive_sessions(now, out);
    }

    // ------------------------------------------------------------------
    // Group bookkeeping
    // ------------------------------------------------------------------

    /// The id of this machine's node facade group, if its node has more
    /// than one machine.
    fn facade_group_id(&self) -> Option<GroupId> {
        let machines = self.view.node_machines.get(&self.me.node)?;
        if machines.len() > 1 {
            Some(GroupId::new(
                NODE_FACADE_NAMESPACE,
                &Level::Node(self.me.node.clone()).scope_tag(),
            ))
        } else {
            None
        }
    }

    /// Descriptor for a group id, including the built-in scopes.
    fn descriptor_for_group(&self, gid: &GroupId) -> Option<DataTypeDescriptor> {
        let (ns, scope) = gid.as_str().split_once('@')?;
        if ns == NODE_FACADE_NAMESPACE {
            let node = scope.strip_prefix("node:")?;
            return Some(DataTypeDescriptor {
                namespace: NODE_FACADE_NAMESPACE.to_string(),
                strategy: Strategy::Strict,
                level: Level::Node(NodeId::new(node)),
                participation: crate::types::ParticipationOption::LeaderFollower,
                crdt_kind: None,
                read_mode: ReadMode::LeaderRead,
                pinned_leader: None,
            });
        }
        if ns == MEMBERSHIP_NAMESPACE {
            return Some(membership_descriptor());
        }
        self.runtime
            .registry
            .descriptors()
            .find(|d| d.namespace == ns && d.level.scope_tag() == scope)
            .cloned()
    }

    fn group_id_for(&self, d: &DataTypeDescriptor) -> GroupId {
        GroupId::new(&d.namespace, &d.level.scope_tag())
    }

    /// Which participant identity this machine plays in a scope, if any.
    /// For node-level scopes the machine itself participates; for system
    /// and replica-set scopes the machine acts for its node, but only while
    /// it is the node's facade.
    fn participant_in(&self, members: &BTreeSet<ParticipantId>) -> Option<ParticipantId> {
        let as_machine = ParticipantId::Machine(self.me.clone());
        if members.contains(&as_machine) {
            return Some(as_machine);
        }
        let as_node = ParticipantId::Node(self.me.node.clone());
        if self.is_facade && members.contains(&as_node) {
            return Some(as_node);
        }
        None
    }

    fn group_config(&self, gid: &GroupId, d: &DataTypeDescriptor) -> Option<GroupConfig> {
        let participants = resolve_members(&self.view, d).ok()?;
        let timers = self.runtime.timers_for(&d.namespace);
        let mode = if let Some(pin) = &d.pinned_leader {
            LeaderMode::Pinned(ParticipantId::Node(pin.clone()))
        } else if matches!(d.participation, crate::types::ParticipationOption::LeaderFollower) {
            LeaderMode::Ranked
        } else {
            LeaderMode::Elected
        };
        Some(GroupConfig {
            id: gid.clone(),
            initial_members: participants.members,
            mode,
            election_base_us: timers.election_base_us,
            heartbeat_us: timers.heartbeat_us,
        })
    }

    /// Instantiates the local replica for a group if this machine should
    /// host one and it does not exist yet.
    fn ensure_replica(&mut self, gid: &GroupId, now: SimTime, out: &mut Vec<Effect>) -> bool {
        if self.replicas.contains_key(gid) {
            return true;
        }
        let Some(d) = self.descriptor_for_group(gid) else {
            return false;
        };
        if d.strategy != Strategy::Strict {
            return false;
        }
        let Some(cfg) = self.group_config(gid, &d) else {
            return false;
        };
        let Some(me_as) = self.participant_in(&cfg.initial_members) else {
            return false;
        };
        let persist = self.persists.get(&(me_as.clone(), gid.clone())).cloned();
        let mut routs = Vec::new();
        let mut replica = Replica::new(cfg, me_as, persist, now, &mut self.rng, &mut routs);
        replica.set_quorum_rule(self.runtime.quorum_rule);
        self.replicas.insert(gid.clone(), replica);
        self.absorb_replica_outs(now, gid, routs, out);
        true
    }

    /// Creates replicas for every strict group this machine participates in.
    fn bootstrap_groups(&mut self, now: SimTime, out: &mut Vec<Effect>) {
        let mut gids: Vec<GroupId> =
            vec![GroupId::new(MEMBERSHIP_NAMESPACE, &Level::System.scope_tag())];
        let strict: Vec<GroupId> = self
            .runtime
            .registry
            .descriptors()
            .filter(|d| d.strategy == Strategy::Strict)
            .map(|d| self.group_id_for(d))
            .collect();
        gids.extend(strict);
        if let Some(fg) = self.facade_group_id() {
            gids.push(fg);
        }
        for gid in gids {
            self.ensure_replica(&gid, now, out);
        }
    }

    fn scope_for_group(&self, gid: &GroupId) -> ScopeTag {
        let allowed = self
            .descriptor_for_group(gid)
            .and_then(|d| resolve_members(&self.view, &d).ok())
            .map(|p| p.allowed_nodes())
            .unwrap_or_default();
        ScopeTag { scope: gid.as_str().to_string(), allowed }
    }

    fn send_to_participant(
        &self,
        to: &ParticipantId,
        gid: &GroupId,
        msg: Msg,
        out: &mut Vec<Effect>,
    ) {
        let scope = self.scope_for_group(gid);
        out.push(Effect::Send { to: Address::of(to), msg, scope });
    }

    fn send_to_client(&self, client: &MachineId, gid: &GroupId, msg: Msg, out: &mut Vec<Effect>) {
        let mut scope = self.scope_for_group(gid);
        scope.allowed.insert(client.node.clone());
        out.push(Effect::Send { to: Address::Machine(client.clone()), msg, scope });
    }

    /// The consensus-level sender identity for a wire-level sender.
    fn sender_participant(gid: &GroupId, from: &MachineId) -> ParticipantId {
        if gid.as_str().contains("@node:") {
            ParticipantId::Machine(from.clone())
        } else {
            ParticipantId::Node(from.node.clone())
        }
    }

    // ------------------------------------------------------------------
    // Client operations
    // ------------------------------------------------------------------

    fn start_client_op(
        &mut self,
        now: SimTime,
        op_id: u64,
        attempt: u32,
        op: ClientOp,
        deadline: SimTime,
        out: &mut Vec<Effect>,
    ) {
        if self.sessions.contains_key(&op_id) {
            // A retry reached the same machine while the first attempt is
            // still in flight; the existing session will answer.
            return;
        }
        match op {
            ClientOp::Write { key, value } => {
                self.start_write(now, op_id, attempt, key, value, deadline, out)
            }
            ClientOp::Read { key } => self.start_read(now, op_id, attempt, key, deadline, out),
            ClientOp::Reconfigure { set, members } => {
                self.start_reconfigure(now, op_id, attempt, set, members, deadline, out)
            }
        }
    }

    fn start_write(
        &mut self,
        now: SimTime,
        op_id: u64,
        attempt: u32,
        key: CoordinationKey,
        value: Vec<u8>,
        deadline: SimTime,
        out: &mut Vec<Effect>,
    ) {
        if key.namespace.starts_with(MEMBERSHIP_NAMESPACE) {
            // Membership changes go through reconfigure, which also walks
            // the affected groups; direct writes would bypass that.
            self.finish_op(
                op_id,
                attempt,
                OpOutcome::InvalidChange("membership namespace is written via reconfigure".into()),
                out,
            );
            return;
        }
        let Ok(d) = self.runtime.registry.lookup(&key).cloned() else {
            self.finish_op(op_id, attempt, OpOutcome::NoDescriptor, out);
            return;
        };
        let Ok(participants) = resolve_members(&self.view, &d) else {
            self.finish_op(op_id, attempt, OpOutcome::NoDescriptor, out);
            return;
        };
        if self.participant_in(&participants.members).is_none() {
            self.finish_op(op_id, attempt, OpOutcome::NotParticipant, out);
            return;
        }
        match d.strategy {
            Strategy::Eventual => {
                let kind = d.crdt_kind.expect("validated descriptor");
                let op = match kind {
                    CrdtKind::LwwRegister => LocalOp::Set(value),
                    // OR-set write syntax: leading '+' adds, '-' removes.
                    CrdtKind::OrSet => {
                        if let Some(stripped) = value.strip_prefix(b"-".as_ref()) {
                            LocalOp::Remove(stripped.to_vec())
                        } else if let Some(stripped) = value.strip_prefix(b"+".as_ref()) {
                            LocalOp::Add(stripped.to_vec())
                        } else {
                            LocalOp::Add(value)
                        }
                    }
                };
                self.apply_eventual_write(&d, &key, &op, op_id, attempt, out);
            }
            Strategy::Strict => {
                let gid = self.group_id_for(&d);
                self.ensure_replica(&gid, now, out);
                let payload = EntryPayload::Put { key, value };
                self.open_strict_write(now, op_id, attempt, None, gid, payload, deadline, out);
            }
        }
    }

    /// Local CRDT update plus immediate full-state dissemination to every
    /// other participant of the scope.
    fn apply_eventual_write(
        &mut self,
        d: &DataTypeDescriptor,
        key: &CoordinationKey,
        op: &LocalOp,
        op_id: u64,
        attempt: u32,
        out: &mut Vec<Effect>,
    ) {
        let kind = d.crdt_kind.expect("validated descriptor");
        let current = self.eventual.get(key);
        self.lamport = self.lamport.max(current.map_or(0, |s| s.max_counter())) + 1;
        let counter = self.lamport;
        match crdt::update_local(current, kind, op, &self.me, counter) {
            Ok((state, delta)) => {
                self.eventual.insert(key.clone(), state);
                self.by_namespace
                    .entry(d.namespace.clone())
                    .or_default()
                    .insert(key.clone());
                out.push(Effect::CacheChanged { key: key.clone() });
                // Fire-and-forget push to all resolved participants; gossip
                // repairs anything this burst misses.
                let participants = resolve_members(&self.view, d).expect("resolved by caller");
                let me_node = ParticipantId::Node(self.me.node.clone());
                let me_machine = ParticipantId::Machine(self.me.clone());
                let gid = self.group_id_for(d);
                for p in &participants.members {
                    if *p == me_node || *p == me_machine {
                        continue;
                    }
                    self.send_to_participant(
                        p,
                        &gid,
                        Msg::StateExchange {
                            namespace: d.namespace.clone(),
                            states: vec![(key.clone(), delta.clone())],
                            kind: ExchangeKind::UpdatePush,
                        },
                        out,
                    );
                }
                self.finish_op(op_id, attempt, OpOutcome::WriteOk, out);
            }
            Err(_) => self.finish_op(op_id, attempt, OpOutcome::KindMismatch, out),
        }
    }

    fn start_read(
        &mut self,
        now: SimTime,
        op_id: u64,
        attempt: u32,
        key: CoordinationKey,
        deadline: SimTime,
        out: &mut Vec<Effect>,
    ) {
        let d = if key.namespace.starts_with(MEMBERSHIP_NAMESPACE) {
            Some(membership_descriptor())
        } else {
            self.runtime.registry.lookup(&key).ok().cloned()
        };
        let Some(d) = d else {
            self.finish_op(op_id, attempt, OpOutcome::NoDescriptor, out);
            return;
        };
        let Ok(participants) = resolve_members(&self.view, &d) else {
            self.finish_op(op_id, attempt, OpOutcome::NoDescriptor, out);
            return;
        };
        if self.participant_in(&participants.members).is_none() {
            self.finish_op(op_id, attempt, OpOutcome::NotParticipant, out);
            return;
        }
        match d.read_mode {
            ReadMode::LocalCache => {
                let outcome = match self.eventual.get(&key) {
                    None => OpOutcome::NotFound,
                    Some(state) => match crdt::query(state) {
                        crdt::QueryResult::Value(v) => OpOutcome::ReadValue(v),
                        crdt::QueryResult::Elements(es) => OpOutcome::ReadElements(es),
                    },
                };
                self.finish_op(op_id, attempt, outcome, out);
            }
            ReadMode::LeaderRead => {
                let gid = self.group_id_for(&d);
                self.ensure_replica(&gid, now, out);
                self.sessions.insert(
                    op_id,
                    Session {
                        attempt,
                        deadline,
                        state: SessionState::LeaderRead {
                            group: gid,
                            key,
                            routed_to: None,
                            next_retry: now,
                        },
                        parent: None,
                    },
                );
                self.drive_session(now, op_id, out);
            }
            ReadMode::ReadQuorum => {
                let gid = self.group_id_for(&d);
                self.ensure_replica(&gid, now, out);
                let read_id = self.next_read_id;
                self.next_read_id += 1;
                self.sessions.insert(
                    op_id,
                    Session {
                        attempt,
                        deadline,
                        state: SessionState::QuorumRead {
                            group: gid,
                            key,
                            read_id,
                            replies: BTreeMap::new(),
                            next_retry: now,
                        },
                        parent: None,
                    },
                );
                self.drive_session(now, op_id, out);
            }
        }
    }

    fn start_reconfigure(
        &mut self,
        now: SimTime,
        op_id: u64,
        attempt: u32,
        set: ReplicaSetId,
        members: BTreeSet<NodeId>,
        deadline: SimTime,
        out: &mut Vec<Effect>,
    ) {
        for n in &members {
            if !self.view.system_nodes.contains(n) {
                self.finish_op(op_id, attempt, OpOutcome::UnknownNode(n.clone()), out);
                return;
            }
        }
        let old: BTreeSet<NodeId> = self.view.replica_sets.get(&set).cloned().unwrap_or_default();
        // Plan: commit the view change first, then walk every strict group
        // scoped to this set through single-node steps, additions in node
        // order, then removals in node order.
        let mut plan = vec![ReconfigStep::MembershipWrite {
            key: membership::replica_set_key(&set),
            value: membership::encode_members(&members),
        }];
        let additions: Vec<NodeId> = members.difference(&old).cloned().collect();
        let removals: Vec<NodeId> = old.difference(&members).cloned().collect();
        let affected: Vec<DataTypeDescriptor> = self
            .runtime
            .registry
            .descriptors()
            .filter(|d| d.strategy == Strategy::Strict && d.level == Level::ReplicaSet(set.clone()))
            .cloned()
            .collect();
        for d in affected {
            let gid = self.group_id_for(&d);
            let mut current: BTreeSet<ParticipantId> =
                old.iter().cloned().map(ParticipantId::Node).collect();
            for n in &additions {
                current.insert(ParticipantId::Node(n.clone()));
                plan.push(ReconfigStep::GroupChange { group: gid.clone(), members: current.clone() });
            }
            for n in &removals {
                current.remove(&ParticipantId::Node(n.clone()));
                plan.push(ReconfigStep::GroupChange { group: gid.clone(), members: current.clone() });
            }
        }
        self.sessions.insert(
            op_id,
            Session {
                attempt,
                deadline,
                state: SessionState::Reconfigure { plan, next_step: 0, inflight: None },
                parent: None,
            },
        );
        self.drive_session(now, op_id, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn open_strict_write(
        &mut self,
        now: SimTime,
        op_id: u64,
        attempt: u32,
        parent: Option<u64>,
        group: GroupId,
        payload: EntryPayload,
        deadline: SimTime,
        out: &mut Vec<Effect>,
    ) {
        self.sessions.insert(
            op_id,
            Session {
                attempt,
                deadline,
                state: SessionState::StrictWrite {
                    group,
                    payload,
                    acked: false,
                    routed_to: None,
                    next_retry: now,
                },
                parent,
            },
        );
        self.drive_session(now, op_id, out);
    }

    /// Completes an op: either reports it to the client (the simulator) or
    /// feeds the parent reconfiguration session.
    fn finish_op(&mut self, op_id: u64, attempt: u32, outcome: OpOutcome, out: &mut Vec<Effect>) {
        let parent = self.sessions.remove(&op_id).and_then(|s| s.parent);
        if let Some(parent_id) = parent {
            self.reconfigure_step_done(parent_id, outcome, out);
            return;
        }
        if op_id & INTERNAL_OP_BIT != 0 {
            return; // orphaned sub-op; the parent already failed
        }
        out.push(Effect::OpDone { op_id, attempt, outcome });
    }

    fn reconfigure_step_done(&mut self, parent_id: u64, sub: OpOutcome, out: &mut Vec<Effect>) {
        let Some(session) = self.sessions.get_mut(&parent_id) else { return };
        let attempt = session.attempt;
        match &mut session.state {
            SessionState::Reconfigure { inflight, .. } => {
                *inflight = None;
                if !sub.is_ok() {
                    self.finish_op(parent_id, attempt, sub, out);
                }
                // The next step launches from drive_sessions on this same
                // pass (advance runs after message handling).
            }
            _ => {}
        }
    }

    // ------------------------------------------------------------------
    // Session driving
    // ------------------------------------------------------------------

    fn drive_sessions(&mut self, now: SimTime, out: &mut Vec<Effect>) {
        let ids: Vec<u64> = self.sessions.keys().cloned().collect();
        for id in ids {
            self.drive_session(now, id, out);
        }
    }

    fn drive_session(&mut self, now: SimTime, id: u64, out: &mut Vec<Effect>) {
        let Some(session) = self.sessions.get(&id) else { return };
        let attempt = session.attempt;
        let deadline = session.deadline;
        if now >= deadline {
            self.finish_op(id, attempt, OpOutcome::NoQuorum, out);
            return;
        }
        let state = self.sessions.get(&id).map(|s| s.state.clone());
        match state {
            Some(SessionState::StrictWrite { group, payload, routed_to, next_retry, .. }) => {
                if now < next_retry {
                    return;
                }
                self.route_strict_write(now, id, &group, payload, routed_to, deadline, out);
            }
            Some(SessionState::LeaderRead { group, key, routed_to, next_retry }) => {
                if now < next_retry {
                    return;
                }
                self.route_leader_read(now, id, &group, key, routed_to, deadline, out);
            }
            Some(SessionState::QuorumRead { group, key, read_id, next_retry, .. }) => {
                if now < next_retry {
                    return;
                }
                self.probe_quorum_read(now, id, &group, &key, read_id, out);
            }
            Some(SessionState::Reconfigure { plan, next_step, inflight }) => {
                if inflight.is_some() {
                    return;
                }
                if next_step >= plan.len() {
                    self.finish_op(id, attempt, OpOutcome::ReconfigureOk, out);
                    return;
                }
                let step = plan[next_step].clone();
                let sub_id = INTERNAL_OP_BIT | self.next_internal_op;
                self.next_internal_op += 1;
                if let Some(Session {
                    state: SessionState::Reconfigure { inflight, next_step: ns, .. },
                    ..
                }) = self.sessions.get_mut(&id)
                {
                    *inflight = Some(sub_id);
                    *ns += 1;
                }
                match step {
                    ReconfigStep::MembershipWrite { key, value } => {
                        let gid = GroupId::new(MEMBERSHIP_NAMESPACE, &Level::System.scope_tag());
                        self.ensure_replica(&gid, now, out);
                        self.open_strict_write(
                            now,
                            sub_id,
                            attempt,
                            Some(id),
                            gid,
                            EntryPayload::Put { key, value },
                            deadline,
                            out,
                        );
                    }
                    ReconfigStep::GroupChange { group, members } => {
                        self.ensure_replica(&group, now, out);
                        self.open_strict_write(
                            now,
                            sub_id,
                            attempt,
                            Some(id),
                            group,
                            EntryPayload::Config { members },
                            deadline,
                            out,
                        );
                    }
                }
            }
            None => {}
        }
    }

    /// Sends (or re-sends) a strict write toward the current leader; local
    /// when this machine's replica leads.
    #[allow(clippy::too_many_arguments)]
    fn route_strict_write(
        &mut self,
        now: SimTime,
        id: u64,
        gid: &GroupId,
        payload: EntryPayload,
        routed_to: Option<ParticipantId>,
        deadline: SimTime,
        out: &mut Vec<Effect>,
    ) {
        let hb = self.heartbeat_for_group(gid);
        let hint = self.replicas.get(gid).and_then(|r| r.leader_hint().cloned());
        let attempt = self.sessions.get(&id).map_or(0, |s| s.attempt);
        let client = ClientRef { client: self.me.clone(), op_id: id, attempt };
        let Some(target) = hint else {
            // No leader known yet; re-check after a heartbeat.
            self.set_session_retry(id, now.plus_us(hb), None);
            return;
        };
        let me_as = self.replicas.get(gid).map(|r| r.me.clone());
        if Some(&target) == me_as.as_ref() {
            if self.replicas.get(gid).map(|r| r.role()) != Some(crate::consensus::Role::Leader) {
                // Hint points at ourselves but we are not (or no longer)
                // the leader; wait for heartbeats to teach us a fresh one.
                self.set_session_retry(id, now.plus_us(hb), None);
                return;
            }
            let mut routs = Vec::new();
            if let Some(r) = self.replicas.get_mut(gid) {
                r.propose(now, payload, client, deadline, &mut routs);
            }
            self.absorb_replica_outs(now, gid, routs, out);
            self.set_session_retry(id, SimTime::NEVER, Some(target));
        } else {
            if routed_to.as_ref() == Some(&target) {
                // Already asked this leader; give it a heartbeat interval
                // before re-sending.
                self.set_session_retry(id, now.plus_us(hb), Some(target));
                return;
            }
            self.send_to_participant(
                &target,
                gid,
                Msg::Propose { group: gid.clone(), payload, client, deadline },
                out,
            );
            self.set_session_retry(id, now.plus_us(hb), Some(target));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn route_leader_read(
        &mut self,
        now: SimTime,
        id: u64,
        gid: &GroupId,
        key: CoordinationKey,
        routed_to: Option<ParticipantId>,
        deadline: SimTime,
        out: &mut Vec<Effect>,
    ) {
        let hb = self.heartbeat_for_group(gid);
        let hint = self.replicas.get(gid).and_then(|r| r.leader_hint().cloned());
        let attempt = self.sessions.get(&id).map_or(0, |s| s.attempt);
        let client = ClientRef { client: self.me.clone(), op_id: id, attempt };
        let Some(target) = hint else {
            self.set_session_retry(id, now.plus_us(hb), None);
            return;
        };
        let me_as = self.replicas.get(gid).map(|r| r.me.clone());
        if Some(&target) == me_as.as_ref() {
            if self.replicas.get(gid).map(|r| r.role()) != Some(crate::consensus::Role::Leader) {
                self.set_session_retry(id, now.plus_us(hb), None);
                return;
            }
            let mut routs = Vec::new();
            if let Some(r) = self.replicas.get_mut(gid) {
                r.leader_read(now, key, client, deadline, &mut routs);
            }
            self.absorb_replica_outs(now, gid, routs, out);
            self.set_session_retry(id, SimTime::NEVER, Some(target));
        } else {
            if routed_to.as_ref() == Some(&target) {
                self.set_session_retry(id, now.plus_us(hb), Some(target));
                return;
            }
            self.send_to_participant(
                &target,
                gid,
                Msg::ReadRequest { group: gid.clone(), key, client, deadline },
                out,
            );
            self.set_session_retry(id, now.plus_us(hb), Some(target));
        }
    }

    /// Probes all members for their newest logged/committed witnesses of
    /// the key; the session resolves once a quorum of replies shows the
    /// newest logged write committed.
    fn probe_quorum_read(
        &mut self,
        now: SimTime,
        id: u64,
        gid: &GroupId,
        key: &CoordinationKey,
        read_id: u64,
        out: &mut Vec<Effect>,
    ) {
        let hb = self.heartbeat_for_group(gid);
        let Some(replica) = self.replicas.get(gid) else {
            self.set_session_retry(id, now.plus_us(hb), None);
            return;
        };
        let me_as = replica.me.clone();
        let term = replica.current_term();
        let members = replica.committed_config();
        let self_witness = replica.local_probe(key);
        if let Some(Session { state: SessionState::QuorumRead { replies, .. }, .. }) =
            self.sessions.get_mut(&id)
        {
            replies.insert(me_as.clone(), self_witness);
        }
        for m in &members {
            if *m == me_as {
                continue;
            }
            self.send_to_participant(
                m,
                gid,
                Msg::Consensus {
                    group: gid.clone(),
                    inner: ConsensusMsg::ReadProbe {
                        term,
                        read_id,
                        probe: crate::consensus::ProbeKind::Quorum { key: key.clone() },
                    },
                },
                out,
            );
        }
        self.set_session_retry(id, now.plus_us(hb), None);
        self.evaluate_quorum_read(id, out);
    }

    fn evaluate_quorum_read(&mut self, id: u64, out: &mut Vec<Effect>) {
        let Some(session) = self.sessions.get(&id) else { return };
        let attempt = session.attempt;
        let SessionState::QuorumRead { group, replies, .. } = &session.state else {
            return;
        };
        let Some(replica) = self.replicas.get(group) else { return };
        let members = replica.committed_config();
        let quorum = QuorumRule::Majority.quorum(members.len());
        let counted: Vec<&(Option<ValueAt>, Option<ValueAt>)> = replies
            .iter()
            .filter(|(p, _)| members.contains(*p))
            .map(|(_, w)| w)
            .collect();
        if counted.len() < quorum {
            return;
        }
        fn newest<'a>(
            counted: &[&'a (Option<ValueAt>, Option<ValueAt>)],
            pick: fn(&'a (Option<ValueAt>, Option<ValueAt>)) -> &'a Option<ValueAt>,
        ) -> Option<ValueAt> {
            counted
                .iter()
                .filter_map(|w| pick(w).as_ref())
                .max_by_key(|v| (v.term, v.index))
                .cloned()
        }
        let logged = newest(&counted, |w| &w.0);
        let committed = newest(&counted, |w| &w.1);
        match (logged, committed) {
            (None, _) => {
                // No write anywhere in a majority: the key was never
                // committed (write quorums intersect read quorums).
                self.finish_op(id, attempt, OpOutcome::NotFound, out);
            }
            (Some(l), Some(c)) if (c.term, c.index) >= (l.term, l.index) => {
                // The newest logged write is known committed: safe to
                // return and at least as new as any committed write.
                self.finish_op(id, attempt, OpOutcome::ReadValue(c.value), out);
            }
            _ => {
                // A logged-but-unconfirmed write is newer; wait for commit
                // evidence (re-probe on retry) rather than return a value
                // that may never take effect.
            }
        }
    }

    fn set_session_retry(&mut self, id: u64, at: SimTime, routed: Option<ParticipantId>) {
        if let Some(s) = self.sessions.get_mut(&id) {
            match &mut s.state {
                SessionState::StrictWrite { next_retry, routed_to, .. }
                | SessionState::LeaderRead { next_retry, routed_to, .. } => {
                    *next_retry = at;
                    if routed.is_some() {
                        *routed_to = routed;
                    }
                }
                SessionState::QuorumRead { next_retry, .. } => *next_retry = at,
                SessionState::Reconfigure { .. } => {}
            }
        }
    }

    fn heartbeat_for_group(&self, gid: &GroupId) -> u64 {
        let ns = gid.as_str().split_once('@').map(|(ns, _)| ns).unwrap_or("");
        self.runtime.timers_for(ns).heartbeat_us
    }

    // ------------------------------------------------------------------
    // Message handling
    // ------------------------------------------------------------------

    fn on_message(&mut self, now: SimTime, from: MachineId, msg: Msg, out: &mut Vec<Effect>) {
        match msg {
            Msg::Consensus { group, inner } => {
                if !self.ensure_replica(&group, now, out) {
                    out.push(Effect::ScopeViolation {
                        scope: group.as_str().to_string(),
                        detail: format!(
                            "{} received {} for a scope it is not in",
                            self.me,
                            inner.kind()
                        ),
                    });
                    return;
                }
                // Quorum read replies resolve sessions, not replica state.
                if let ConsensusMsg::ReadReply { confirm: false, read_id, logged, committed, .. } =
                    &inner
                {
                    self.on_quorum_read_reply(
                        Self::sender_participant(&group, &from),
                        *read_id,
                        logged.clone(),
                        committed.clone(),
                        out,
                    );
                    return;
                }
                let sender = Self::sender_participant(&group, &from);
                let mut routs = Vec::new();
                if let Some(r) = self.replicas.get_mut(&group) {
                    r.handle(now, &sender, inner, &mut self.rng, &mut routs);
                }
                self.absorb_replica_outs(now, &group, routs, out);
            }
            Msg::Propose { group, payload, client, deadline } => {
                if !self.ensure_replica(&group, now, out) {
                    return;
                }
                let mut routs = Vec::new();
                if let Some(r) = self.replicas.get_mut(&group) {
                    r.propose(now, payload, client, deadline, &mut routs);
                }
                self.absorb_replica_outs(now, &group, routs, out);
            }
            Msg::ReadRequest { group, key, client, deadline } => {
                if !self.ensure_replica(&group, now, out) {
                    return;
                }
                let mut routs = Vec::new();
                if let Some(r) = self.replicas.get_mut(&group) {
                    r.leader_read(now, key, client, deadline, &mut routs);
                }
                self.absorb_replica_outs(now, &group, routs, out);
            }
            Msg::ProposeAck { client } => {
                if let Some(Session { state: SessionState::StrictWrite { acked, .. }, .. }) =
                    self.sessions.get_mut(&client.op_id)
                {
                    *acked = true;
                }
            }
            Msg::ProposeReply { client, result } => match result {
                Ok(_) => self.finish_op(client.op_id, client.attempt, OpOutcome::WriteOk, out),
                Err(Reject::NoQuorum) => {
                    self.finish_op(client.op_id, client.attempt, OpOutcome::NoQuorum, out)
                }
                Err(Reject::InvalidChange(why)) => self.finish_op(
                    client.op_id,
                    client.attempt,
                    OpOutcome::InvalidChange(why),
                    out,
                ),
                Err(Reject::NotLeader(_)) => {
                    self.unroute_session(now, client.op_id, out);
                }
            },
            Msg::ReadResult { client, result } => match result {
                Ok(Some(v)) => {
                    self.finish_op(client.op_id, client.attempt, OpOutcome::ReadValue(v), out)
                }
                Ok(None) => self.finish_op(client.op_id, client.attempt, OpOutcome::NotFound, out),
                Err(Reject::NoQuorum) | Err(Reject::InvalidChange(_)) => {
                    self.finish_op(client.op_id, client.attempt, OpOutcome::NoQuorum, out)
                }
                Err(Reject::NotLeader(_)) => {
                    self.unroute_session(now, client.op_id, out);
                }
            },
            Msg::StateExchange { namespace, states, kind } => {
                self.on_state_exchange(from, namespace, states, kind, out);
            }
        }
    }

    /// A NotLeader rejection: clear the routing lock so the next drive
    /// re-routes toward the freshest hint.
    fn unroute_session(&mut self, now: SimTime, op_id: u64, out: &mut Vec<Effect>) {
        if let Some(s) = self.sessions.get_mut(&op_id) {
            match &mut s.state {
                SessionState::StrictWrite { routed_to, next_retry, .. }
                | SessionState::LeaderRead { routed_to, next_retry, .. } => {
                    *routed_to = None;
                    *next_retry = now;
                }
                _ => {}
            }
            self.drive_session(now, op_id, out);
        }
    }

    fn on_quorum_read_reply(
        &mut self,
        from: ParticipantId,
        read_id: u64,
        logged: Option<ValueAt>,
        committed: Option<ValueAt>,
        out: &mut Vec<Effect>,
    ) {
        let session_id = self.sessions.iter().find_map(|(id, s)| match &s.state {
            SessionState::QuorumRead { read_id: rid, .. } if *rid == read_id => Some(*id),
            _ => None,
        });
        let Some(id) = session_id else { return };
        if let Some(Session { state: SessionState::QuorumRead { replies, .. }, .. }) =
            self.sessions.get_mut(&id)
        {
            replies.insert(from, (logged, committed));
        }
        self.evaluate_quorum_read(id, out);
    }

    /// Anti-entropy receive path: merge, then (for push-pull) reply with
    /// entries where the local state is not dominated by what arrived.
    fn on_state_exchange(
        &mut self,
        from: MachineId,
        namespace: String,
        states: Vec<(CoordinationKey, CrdtValue)>,
        kind: ExchangeKind,
        out: &mut Vec<Effect>,
    ) {
        let Some(d) = self
            .runtime
            .registry
            .descriptors()
            .find(|d| d.namespace == namespace)
            .cloned()
        else {
            out.push(Effect::ScopeViolation {
                scope: namespace.clone(),
                detail: format!("state exchange for unknown namespace {namespace}"),
            });
            return;
        };
        let Ok(participants) = resolve_members(&self.view, &d) else { return };
        if self.participant_in(&participants.members).is_none() {
            out.push(Effect::ScopeViolation {
                scope: d.scope_id(),
                detail: format!("{} is not a participant of {}", self.me, d.scope_id()),
            });
            return;
        }
        let mut incoming: BTreeMap<CoordinationKey, CrdtValue> = BTreeMap::new();
        for (key, state) in states {
            self.lamport = self.lamport.max(state.max_counter());
            let merged = match self.eventual.get(&key) {
                None => Some(state.clone()),
                Some(local) => match crdt::merge(local, &state) {
                    Ok(m) if &m != local => Some(m),
                    _ => None,
                },
            };
            if let Some(m) = merged {
                self.eventual.insert(key.clone(), m);
                self.by_namespace
                    .entry(d.namespace.clone())
                    .or_default()
                    .insert(key.clone());
                out.push(Effect::CacheChanged { key: key.clone() });
            }
            incoming.insert(key, state);
        }
        if matches!(kind, ExchangeKind::GossipPush) {
            // Pull half: send back anything we hold that the pusher's
            // states do not dominate, including keys it did not mention.
            let mut reply = Vec::new();
            for key in self.by_namespace.get(&d.namespace).cloned().unwrap_or_default() {
                let Some(local) = self.eventual.get(&key) else { continue };
                let dominated =
                    incoming.get(&key).is_some_and(|theirs| crdt::dominates(theirs, local));
                if !dominated {
                    reply.push((key.clone(), local.clone()));
                }
            }
            let gid = self.group_id_for(&d);
            let mut scope = self.scope_for_group(&gid);
            scope.allowed.insert(from.node.clone());
            out.push(Effect::Send {
                to: Address::Machine(from),
                msg: Msg::StateExchange {
                    namespace: d.namespace.clone(),
                    states: reply,
                    kind: ExchangeKind::GossipReply,
                },
                scope,
            });
        }
    }

    // ------------------------------------------------------------------
    // Gossip
    // ------------------------------------------------------------------

    /// Periodic push-pull anti-entropy: for every eventual scope this node
    /// participates in, push the scope's full local state to `fanout`
    /// uniformly chosen other participants.
    fn gossip(&mut self, now: SimTime, out: &mut Vec<Effect>) {
        let due: Vec<String> = self
            .gossip_due
            .iter()
            .filter(|(_, at)| now >= **at)
            .map(|(ns, _)| ns.clone())
            .collect();
        for ns in due {
            let interval = self.runtime.timers_for(&ns).gossip_interval_us;
            self.gossip_due.insert(ns.clone(), now.plus_us(interval));
            let Some(d) = self
                .runtime
                .registry
                .descriptors()
                .find(|d| d.namespace == ns)
                .cloned()
            else {
                continue;
            };
            let Ok(participants) = resolve_members(&self.view, &d) else { continue };
            let Some(me_as) = self.participant_in(&participants.members) else { continue };
            let others: Vec<ParticipantId> =
                participants.members.iter().filter(|p| **p != me_as).cloned().collect();
            if others.is_empty() {
                continue;
            }
            let fanout = self.runtime.gossip_fanout.min(others.len());
            let picks = rand::seq::index::sample(&mut self.rng, others.len(), fanout);
            let states: Vec<(CoordinationKey, CrdtValue)> = self
                .by_namespace
                .get(&ns)
                .into_iter()
                .flatten()
                .filter_map(|k| self.eventual.get(k).map(|s| (k.clone(), s.clone())))
                .collect();
            let gid = self.group_id_for(&d);
            for i in picks.iter() {
                self.send_to_participant(
                    &others[i],
                    &gid,
                    Msg::StateExchange {
                        namespace: ns.clone(),
                        states: states.clone(),
                        kind: ExchangeKind::GossipPush,
                    },
                    out,
                );
            }
        }
    }

    // ------------------------------------------------------------------
    // Replica output absorption
    // ------------------------------------------------------------------

    fn absorb_replica_outs(
        &mut self,
        now: SimTime,
        gid: &GroupId,
        routs: Vec<ReplicaOut>,
        out: &mut Vec<Effect>,
    ) {
        for o in routs {
            match o {
                ReplicaOut::Send { to, msg } => {
                    self.send_to_participant(
                        &to,
                        gid,
                        Msg::Consensus { group: gid.clone(), inner: msg },
                        out,
                    );
                }
                ReplicaOut::Accepted { client, .. } => {
                    if client.client == self.me {
                        if let Some(Session {
                            state: SessionState::StrictWrite { acked, .. }, ..
                        }) = self.sessions.get_mut(&client.op_id)
                        {
                            *acked = true;
                        }
                    } else {
                        let to = client.client.clone();
                        self.send_to_client(&to, gid, Msg::ProposeAck { client }, out);
                    }
                }
                ReplicaOut::Committed { client, index, term } => {
                    if client.client == self.me {
                        self.finish_op(client.op_id, client.attempt, OpOutcome::WriteOk, out);
                    } else {
                        let to = client.client.clone();
                        self.send_to_client(
                            &to,
                            gid,
                            Msg::ProposeReply { client, result: Ok((index, term)) },
                            out,
                        );
                    }
                }
                ReplicaOut::Rejected { client, reason } => {
                    if client.client == self.me {
                        match reason {
                            Reject::NoQuorum => self.finish_op(
                                client.op_id,
                                client.attempt,
                                OpOutcome::NoQuorum,
                                out,
                            ),
                            Reject::InvalidChange(why) => self.finish_op(
                                client.op_id,
                                client.attempt,
                                OpOutcome::InvalidChange(why),
                                out,
                            ),
                            Reject::NotLeader(_) => self.unroute_session(now, client.op_id, out),
                        }
                    } else {
                        let to = client.client.clone();
                        self.send_to_client(
                            &to,
                            gid,
                            Msg::ProposeReply { client, result: Err(reason) },
                            out,
                        );
                    }
                }
                ReplicaOut::ServeRead { client, key } => {
                    let value = self.strict_applied.get(&key).map(|(v, _, _)| v.clone());
                    if client.client == self.me {
                        let outcome = match value {
                            Some(v) => OpOutcome::ReadValue(v),
                            None => OpOutcome::NotFound,
                        };
                        self.finish_op(client.op_id, client.attempt, outcome, out);
                    } else {
                        let to = client.client.clone();
                        self.send_to_client(&to, gid, Msg::ReadResult { client, result: Ok(value) }, out);
                    }
                }
                ReplicaOut::ReadFailed { client, reason } => {
                    if client.client == self.me {
                        match reason {
                            Reject::NotLeader(_) => self.unroute_session(now, client.op_id, out),
                            Reject::NoQuorum | Reject::InvalidChange(_) => self.finish_op(
                                client.op_id,
                                client.attempt,
                                OpOutcome::NoQuorum,
                                out,
                            ),
                        }
                    } else {
                        let to = client.client.clone();
                        self.send_to_client(&to, gid, Msg::ReadResult { client, result: Err(reason) }, out);
                    }
                }
                ReplicaOut::Apply { index, term, payload } => {
                    self.apply_committed(gid, index, term, payload, out);
                }
                ReplicaOut::CommitRecord { index, term, digest, quorum } => {
                    out.push(Effect::CommitRecord {
                        group: gid.clone(),
                        index,
                        term,
                        digest,
                        quorum,
                    });
                }
                ReplicaOut::BecameLeader { term } => {
                    out.push(Effect::Leader { group: gid.clone(), term });
                    if Some(gid.clone()) == self.facade_group_id() {
                        out.push(Effect::FacadeClaim);
                    }
                }
                ReplicaOut::SteppedDown { term } => {
                    out.push(Effect::SteppedDown { group: gid.clone(), term });
                }
            }
        }
    }

    /// Applies a committed entry to the machine-local strict store; the
    /// membership namespace additionally updates the view.
    fn apply_committed(
        &mut self,
        gid: &GroupId,
        index: LogIndex,
        term: Term,
        payload: EntryPayload,
        out: &mut Vec<Effect>,
    ) {
        match payload {
            EntryPayload::Noop | EntryPayload::Config { .. } => {}
            EntryPayload::Put { key, value } => {
                let newer = self
                    .strict_applied
                    .get(&key)
                    .is_none_or(|(_, t, i)| (term, index) > (*t, *i));
                if newer {
                    self.strict_applied.insert(key.clone(), (value.clone(), term, index));
                }
                if let Some(set) = membership::parse_replica_set_key(&key) {
                    if let Some(members) = membership::decode_members(&value) {
                        self.view = self.view.apply_replica_set_change(&set, members.clone());
                        out.push(Effect::ViewChanged {
                            version: self.view.version,
                            set,
                            members,
                        });
                    }
                }
                out.push(Effect::AppliedStrict { group: gid.clone(), key, index, term });
            }
        }
    }
}
