//! Deterministic discrete-event network and fault simulator.
//!
//! Virtual time is integer microseconds. Events (message deliveries, timer
//! wakes, faults, client ops) pop in (time, sequence) order; the sequence
//! number is assigned at enqueue, so ties break by schedule order and a run
//! is a pure function of (scenario, seed): the trace is byte-identical
//! across repetitions.
//!
//! Faults: group partitions (full cuts between machine groups), machine
//! crashes and restarts, and i.i.d. message loss. A crashed machine emits
//! and receives nothing; on restart its volatile state is gone but the
//! per-participant stable records (term, vote, log) survive in the
//! simulator's stable store.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::consensus::{GroupId, LogEntry, LogIndex, Persist, QuorumRule, Term};
use crate::coordinator::{
    Address, ClientOp, Coordinator, Effect, Input, Msg, OpOutcome, ScopeTag,
};
use crate::crdt::{self, CrdtValue};
use crate::error::RunError;
use crate::membership::MembershipView;
use crate::metrics::{Metrics, OpMetric, StalenessSample};
use crate::scenario::Scenario;
use crate::time::SimTime;
use crate::trace::{TraceLog, TraceRow};
use crate::types::{CoordinationKey, MachineId, NodeId, ParticipantId, Strategy};
use crate::util::{derive_seed, escape_bytes, fnv1a64};

/// Static latency model: one-way delays between machines, symmetric, zero
/// to self, intra-node default for machines of the same fog node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    node_machines: BTreeMap<NodeId, BTreeSet<MachineId>>,
    links_us: BTreeMap<(NodeId, NodeId), u64>,
    default_us: u64,
    intra_node_us: u64,
}

impl Topology {
    pub fn new(
        node_machines: BTreeMap<NodeId, BTreeSet<MachineId>>,
        links_us: BTreeMap<(NodeId, NodeId), u64>,
        default_us: u64,
        intra_node_us: u64,
    ) -> Topology {
        Topology { node_machines, links_us, default_us, intra_node_us }
    }

    pub fn machines(&self) -> impl Iterator<Item = &MachineId> {
        self.node_machines.values().flatten()
    }

    pub fn intra_node_us(&self) -> u64 {
        self.intra_node_us
    }

    /// One-way delay between two machines.
    pub fn latency_us(&self, a: &MachineId, b: &MachineId) -> u64 {
        if a == b {
            return 0;
        }
        if a.node == b.node {
            return self.intra_node_us;
        }
        let key = if a.node < b.node {
            (a.node.clone(), b.node.clone())
        } else {
            (b.node.clone(), a.node.clone())
        };
        self.links_us.get(&key).copied().unwrap_or(self.default_us)
    }

    /// Largest one-way delay among a set of machines; scope timer defaults
    /// derive from this.
    pub fn max_latency_among(&self, machines: &[MachineId]) -> u64 {
        let mut max = 0;
        for (i, a) in machines.iter().enumerate() {
            for b in &machines[i + 1..] {
                max = max.max(self.latency_us(a, b));
            }
        }
        max
    }
}

/// A scheduled change to the network or a machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultKind {
    /// Disjoint machine groups covering all machines; traffic crosses no
    /// group boundary.
    Partition(Vec<BTreeSet<MachineId>>),
    Heal,
    Crash(MachineId),
    Restart(MachineId),
    /// I.i.d. Bernoulli message loss, in parts per million.
    SetLoss { ppm: u32 },
}

impl FaultKind {
    fn describe(&self) -> String {
        match self {
            FaultKind::Partition(groups) => {
                let parts: Vec<String> = groups
                    .iter()
                    .map(|g| {
                        g.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("+")
                    })
                    .collect();
                format!("partition {}", parts.join("|"))
            }
            FaultKind::Heal => "heal".to_string(),
            FaultKind::Crash(m) => format!("crash {m}"),
            FaultKind::Restart(m) => format!("restart {m}"),
            FaultKind::SetLoss { ppm } => format!("loss {}ppm", ppm),
        }
    }
}

/// Deliberately broken variants for checker validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Commit once ⌊n/2⌋ replicas hold an entry (not a majority).
    CommitAtFloorHalf,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub mutation: Option<Mutation>,
}

/// Cross-replica assertions accumulated while the run executes. A correct
/// build leaves every list empty.
#[derive(Debug, Clone, Default)]
pub struct SafetyLedger {
    /// (term, payload digest) pairs ever regarded committed, per slot.
    pub committed: BTreeMap<(GroupId, LogIndex), BTreeSet<(Term, u64)>>,
    /// Acknowledging quorum recorded at each committing leader.
    pub commit_quorums: Vec<(GroupId, LogIndex, Term, BTreeSet<String>)>,
    /// Every participant that ever led a (group, term).
    pub leaders: BTreeMap<(GroupId, Term), BTreeSet<String>>,
    pub log_matching_violations: Vec<String>,
    pub scope_violations: Vec<String>,
}

impl SafetyLedger {
    /// Slots where more than one (term, value) was ever committed.
    pub fn commit_violations(&self) -> Vec<String> {
        self.committed
            .iter()
            .filter(|(_, set)| set.len() > 1)
            .map(|((g, i), set)| format!("{g} index {i}: {} distinct committed entries", set.len()))
            .collect()
    }

    /// (group, term) pairs claimed by more than one leader.
    pub fn leader_violations(&self) -> Vec<String> {
        self.leaders
            .iter()
            .filter(|(_, who)| who.len() > 1)
            .map(|((g, t), who)| format!("{g} term {t}: leaders {:?}", who))
            .collect()
    }
}

/// Machine state captured when the run ends.
#[derive(Debug, Clone)]
pub struct EndStates {
    pub eventual: BTreeMap<MachineId, BTreeMap<CoordinationKey, CrdtValue>>,
    pub strict: BTreeMap<MachineId, BTreeMap<CoordinationKey, (Vec<u8>, Term, LogIndex)>>,
    pub views: BTreeMap<MachineId, MembershipView>,
    pub facades: BTreeMap<NodeId, MachineId>,
    pub alive: BTreeSet<MachineId>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub trace: TraceLog,
    pub metrics: Metrics,
    pub end: EndStates,
    pub safety: SafetyLedger,
}

/// Executes a scenario to completion. Identical (scenario, seed) inputs
/// produce byte-identical traces.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<RunOutput, RunError> {
    sc.validate()?;
    let seed = opts.seed_override.unwrap_or(sc.seed);
    let mut sim = Sim::new(sc, seed, opts);
    sim.init();
    sim.run()?;
    Ok(sim.finish())
}

const EVENT_BUDGET: u64 = 50_000_000;

#[derive(Debug)]
enum EvKind {
    Deliver { from: MachineId, to: MachineId, msg: Msg, scope: ScopeTag, size: u32 },
    Wake(MachineId),
    Fault(usize),
    ClientStart(usize),
    ClientRetry(usize),
}

#[derive(Debug)]
struct Ev {
    at: SimTime,
    seq: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ev {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug)]
struct ClientState {
    node: NodeId,
    op: ClientOp,
    submitted: SimTime,
    deadline: SimTime,
    attempts: u32,
    outcome: Option<(SimTime, OpOutcome)>,
}

#[derive(Debug)]
struct EventualWatcher {
    threshold: CrdtValue,
    written: SimTime,
    origin: NodeId,
    remaining: BTreeSet<NodeId>,
}

#[derive(Debug)]
struct StrictWatcher {
    key: CoordinationKey,
    written: SimTime,
    origin: NodeId,
    remaining: BTreeSet<NodeId>,
}

struct Sim<'a> {
    sc: &'a Scenario,
    seed: u64,
    quorum_rule: QuorumRule,
    now: SimTime,
    seq: u64,
    heap: BinaryHeap<Reverse<Ev>>,
    coords: BTreeMap<MachineId, Coordinator>,
    crashed: BTreeSet<MachineId>,
    restart_epochs: BTreeMap<MachineId, u32>,
    stable: BTreeMap<(ParticipantId, GroupId), Persist>,
    partition: BTreeMap<MachineId, u32>,
    loss_ppm: u32,
    facades: BTreeMap<NodeId, MachineId>,
    wake_at: BTreeMap<MachineId, SimTime>,
    rng: ChaCha12Rng,
    trace: TraceLog,
    metrics: Metrics,
    ledger: SafetyLedger,
    clients: Vec<ClientState>,
    ev_watchers: BTreeMap<CoordinationKey, Vec<EventualWatcher>>,
    strict_watchers: BTreeMap<(GroupId, LogIndex), StrictWatcher>,
    events: u64,
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario, seed: u64, opts: &RunOptions) -> Sim<'a> {
        let quorum_rule = match opts.mutation {
            Some(Mutation::CommitAtFloorHalf) => QuorumRule::FloorHalf,
            None => QuorumRule::Majority,
        };
        let facades: BTreeMap<NodeId, MachineId> = sc
            .base_view
            .node_machines
            .iter()
            .map(|(n, ms)| (n.clone(), ms.iter().next().expect("validated").clone()))
            .collect();
        Sim {
            sc,
            seed,
            quorum_rule,
            now: SimTime::ZERO,
            seq: 0,
            heap: BinaryHeap::new(),
            coords: BTreeMap::new(),
            crashed: BTreeSet::new(),
            restart_epochs: BTreeMap::new(),
            stable: BTreeMap::new(),
            partition: BTreeMap::new(),
            loss_ppm: 0,
            facades,
            wake_at: BTreeMap::new(),
            rng: ChaCha12Rng::seed_from_u64(derive_seed(seed, u64::MAX)),
            trace: TraceLog::default(),
            metrics: Metrics::default(),
            ledger: SafetyLedger::default(),
            clients: sc
                .workload
                .iter()
                .map(|w| ClientState {
                    node: w.node.clone(),
                    op: w.op.clone(),
                    submitted: w.at,
                    deadline: w.deadline,
                    attempts: 0,
                    outcome: None,
                })
                .collect(),
            ev_watchers: BTreeMap::new(),
            strict_watchers: BTreeMap::new(),
            events: 0,
        }
    }

    fn push(&mut self, at: SimTime, kind: EvKind) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Ev { at, seq, kind }));
    }

    fn init(&mut self) {
        let machines: Vec<MachineId> = self.sc.topology.machines().cloned().collect();
        for m in machines {
            self.spawn_coordinator(m, 0);
        }
        for (i, (at, _)) in self.sc.faults.iter().enumerate() {
            self.push(*at, EvKind::Fault(i));
        }
        for i in 0..self.clients.len() {
            self.push(self.clients[i].submitted, EvKind::ClientStart(i));
        }
    }

    fn spawn_coordinator(&mut self, m: MachineId, epoch: u32) {
        let runtime = self.sc.runtime_config(self.seed, self.quorum_rule);
        let is_facade = self.facades.get(&m.node) == Some(&m);
        let mut persists: BTreeMap<(ParticipantId, GroupId), Persist> = BTreeMap::new();
        for ((owner, gid), p) in &self.stable {
            let mine = match owner {
                ParticipantId::Machine(om) => om == &m,
                ParticipantId::Node(on) => is_facade && *on == m.node,
            };
            if mine {
                persists.insert((owner.clone(), gid.clone()), p.clone());
            }
        }
        let (coord, fx) = Coordinator::new(m.clone(), runtime, persists, is_facade, epoch, self.now);
        self.coords.insert(m.clone(), coord);
        self.wake_at.insert(m.clone(), SimTime::NEVER);
        self.process_effects(&m, fx.list);
        self.schedule_wake(&m, fx.next_wake);
    }

    fn run(&mut self) -> Result<(), RunError> {
        while let Some(Reverse(ev)) = self.heap.pop() {
            if ev.at > self.sc.end {
                break;
            }
            self.now = ev.at;
            self.events += 1;
            if self.events > EVENT_BUDGET {
                return Err(RunError::EventBudgetExceeded {
                    events: self.events,
                    time_us: self.now.as_us(),
                });
            }
            match ev.kind {
                EvKind::Deliver { from, to, msg, scope, size } => {
                    self.deliver(from, to, msg, scope, size)
                }
                EvKind::Wake(m) => {
                    if self.crashed.contains(&m) {
                        continue;
                    }
                    self.wake_at.insert(m.clone(), SimTime::NEVER);
                    self.handle_machine(&m, Input::Wake);
                }
                EvKind::Fault(i) => self.apply_fault(i),
                EvKind::ClientStart(i) | EvKind::ClientRetry(i) => self.client_attempt(i),
            }
        }
        Ok(())
    }

    // --------------------------------------------------------------
    // Wire
    // --------------------------------------------------------------

    fn send(&mut self, from: &MachineId, to: Address, msg: Msg, scope: ScopeTag) {
        let key_hint = msg_key_hint(&msg);
        let size = msg.wire_size();
        let kind = msg.kind();
        // Node addresses resolve to the node's current facade machine at
        // send time (anycast-to-facade).
        let to_machine = match &to {
            Address::Machine(m) => Some(m.clone()),
            Address::Node(n) => {
                let all_down = self
                    .sc
                    .base_view
                    .machines_of(n)
                    .all(|m| self.crashed.contains(m));
                if all_down {
                    None
                } else {
                    self.facades.get(n).cloned()
                }
            }
        };
        self.metrics.count_sent(&scope.scope, kind, size);
        let Some(to_machine) = to_machine else {
            self.metrics.count_dropped(&scope.scope, kind);
            self.trace_row("drop", from.to_string(), to.to_string(), key_hint, kind, size, "node-down".into());
            return;
        };
        self.trace_row(
            "send",
            from.to_string(),
            to_machine.to_string(),
            key_hint.clone(),
            kind,
            size,
            String::new(),
        );
        let same_side = self.partition.is_empty()
            || self.partition.get(from) == self.partition.get(&to_machine);
        if !same_side {
            self.metrics.count_dropped(&scope.scope, kind);
            self.trace_row("drop", from.to_string(), to_machine.to_string(), key_hint, kind, size, "partition".into());
            return;
        }
        if self.loss_ppm > 0 && self.rng.random_range(0..1_000_000u32) < self.loss_ppm {
            self.metrics.count_dropped(&scope.scope, kind);
            self.trace_row("drop", from.to_string(), to_machine.to_string(), key_hint, kind, size, "loss".into());
            return;
        }
        let latency = self.sc.topology.latency_us(from, &to_machine);
        let at = self.now.plus_us(latency);
        self.push(at, EvKind::Deliver { from: from.clone(), to: to_machine, msg, scope, size });
    }

    fn deliver(&mut self, from: MachineId, to: MachineId, msg: Msg, scope: ScopeTag, size: u32) {
        let kind = msg.kind();
        let key_hint = msg_key_hint(&msg);
        if self.crashed.contains(&to) {
            self.metrics.count_dropped(&scope.scope, kind);
            self.trace_row("drop", from.to_string(), to.to_string(), key_hint, kind, size, "crashed".into());
            return;
        }
        // Scoping invariant, judged against the sender's view at send time:
        // no message for a scope may reach a node outside it.
        if !scope.allowed.is_empty() && !scope.allowed.contains(&to.node) {
            let detail = format!("{} -> {} ({} for {})", from, to, kind, scope.scope);
            self.ledger.scope_violations.push(detail.clone());
            self.trace_row("scope-violation", from.to_string(), to.to_string(), key_hint.clone(), kind, size, detail);
        }
        self.metrics.count_delivered(&scope.scope, kind);
        self.trace_row("deliver", from.to_string(), to.to_string(), key_hint, kind, size, String::new());
        let group = match &msg {
            Msg::Consensus { group, .. } => Some(group.clone()),
            _ => None,
        };
        self.handle_machine(&to, Input::Message { from, msg });
        if let Some(g) = group {
            self.check_log_matching(&g);
        }
    }

    // --------------------------------------------------------------
    // Machine stepping
    // --------------------------------------------------------------

    fn handle_machine(&mut self, m: &MachineId, input: Input) {
        let Some(coord) = self.coords.get_mut(m) else { return };
        let fx = coord.handle(self.now, input);
        self.process_effects(m, fx.list);
        self.schedule_wake(m, fx.next_wake);
    }

    fn schedule_wake(&mut self, m: &MachineId, at: SimTime) {
        if at == SimTime::NEVER {
            return;
        }
        let current = self.wake_at.get(m).copied().unwrap_or(SimTime::NEVER);
        if at < current {
            self.wake_at.insert(m.clone(), at);
            self.push(at.max(self.now), EvKind::Wake(m.clone()));
        }
    }

    fn process_effects(&mut self, m: &MachineId, effects: Vec<Effect>) {
        for e in effects {
            match e {
                Effect::Send { to, msg, scope } => self.send(m, to, msg, scope),
                Effect::Persist { owner, group, state } => {
                    self.stable.insert((owner, group), state);
                }
                Effect::OpDone { op_id, attempt: _, outcome } => {
                    self.client_done(op_id as usize, outcome, m.clone());
                }
                Effect::CacheChanged { key } => self.eventual_visibility(m, &key),
                Effect::AppliedStrict { group, key, index, term } => {
                    self.trace_row(
                        "apply",
                        m.to_string(),
                        String::new(),
                        key.to_string(),
                        "",
                        0,
                        format!("g={group};i={index};t={term}"),
                    );
                    self.strict_visibility(m, group, key, index);
                }
                Effect::CommitRecord { group, index, term, digest, quorum } => {
                    self.ledger
                        .committed
                        .entry((group.clone(), index))
                        .or_default()
                        .insert((term, digest));
                    if let Some(q) = quorum {
                        self.trace_row(
                            "commit",
                            m.to_string(),
                            String::new(),
                            String::new(),
                            "",
                            0,
                            format!("g={group};i={index};t={term};d={digest:016x};q={}", q.len()),
                        );
                        self.ledger.commit_quorums.push((
                            group,
                            index,
                            term,
                            q.iter().map(|p| p.to_string()).collect(),
                        ));
                    }
                }
                Effect::Leader { group, term } => {
                    let who = participant_label(&group, m);
                    self.ledger
                        .leaders
                        .entry((group.clone(), term))
                        .or_default()
                        .insert(who.clone());
                    self.trace_row(
                        "leader",
                        m.to_string(),
                        String::new(),
                        String::new(),
                        "",
                        0,
                        format!("g={group};t={term};as={who}"),
                    );
                }
                Effect::SteppedDown { group, term } => {
                    self.trace_row(
                        "stepdown",
                        m.to_string(),
                        String::new(),
                        String::new(),
                        "",
                        0,
                        format!("g={group};t={term}"),
                    );
                }
                Effect::FacadeClaim => {
                    if self.facades.get(&m.node) != Some(m) {
                        self.facades.insert(m.node.clone(), m.clone());
                        self.trace_row(
                            "facade",
                            m.to_string(),
                            String::new(),
                            String::new(),
                            "",
                            0,
                            format!("node={}", m.node),
                        );
                        // Hand over the node-owned stable records.
                        let owner = ParticipantId::Node(m.node.clone());
                        let persists: BTreeMap<GroupId, Persist> = self
                            .stable
                            .iter()
                            .filter(|((o, _), _)| *o == owner)
                            .map(|((_, g), p)| (g.clone(), p.clone()))
                            .collect();
                        self.handle_machine(&m.clone(), Input::AdoptFacade { persists });
                    }
                }
                Effect::ScopeViolation { scope, detail } => {
                    self.ledger.scope_violations.push(detail.clone());
                    self.trace_row(
                        "scope-violation",
                        m.to_string(),
                        String::new(),
                        String::new(),
                        "",
                        0,
                        format!("scope={scope};{detail}"),
                    );
                }
                Effect::ViewChanged { version, set, members } => {
                    let names: Vec<&str> = members.iter().map(|n| n.as_str()).collect();
                    self.trace_row(
                        "view",
                        m.to_string(),
                        String::new(),
                        String::new(),
                        "",
                        0,
                        format!("version={version};set={set};members={}", names.join("+")),
                    );
                }
            }
        }
    }

    // --------------------------------------------------------------
    // Faults
    // --------------------------------------------------------------

    fn apply_fault(&mut self, idx: usize) {
        let (_, kind) = &self.sc.faults[idx];
        self.trace_row("fault", String::new(), String::new(), String::new(), "", 0, kind.describe());
        match kind.clone() {
            FaultKind::Partition(groups) => {
                self.partition.clear();
                for (gi, group) in groups.iter().enumerate() {
                    for m in group {
                        self.partition.insert(m.clone(), gi as u32);
                    }
                }
            }
            FaultKind::Heal => self.partition.clear(),
            FaultKind::Crash(m) => {
                self.crashed.insert(m.clone());
                self.coords.remove(&m);
                self.wake_at.insert(m, SimTime::NEVER);
            }
            FaultKind::Restart(m) => {
                if self.crashed.remove(&m) {
                    let epoch = {
                        let e = self.restart_epochs.entry(m.clone()).or_insert(0);
                        *e += 1;
                        *e
                    };
                    self.spawn_coordinator(m, epoch);
                }
            }
            FaultKind::SetLoss { ppm } => self.loss_ppm = ppm,
        }
    }

    // --------------------------------------------------------------
    // Clients
    // --------------------------------------------------------------

    fn client_attempt(&mut self, idx: usize) {
        if self.clients[idx].outcome.is_some() {
            return;
        }
        let (node, op, deadline, submitted, attempts) = {
            let c = &self.clients[idx];
            (c.node.clone(), c.op.clone(), c.deadline, c.submitted, c.attempts)
        };
        if attempts == 0 {
            let value = match &op {
                ClientOp::Write { value, .. } => escape_bytes(value),
                _ => String::new(),
            };
            self.trace_row(
                "op-start",
                node.to_string(),
                String::new(),
                op.key().map(|k| k.to_string()).unwrap_or_default(),
                "",
                0,
                format!("op={idx};kind={};value={}", op.kind(), value),
            );
        }
        if self.now >= deadline {
            // The middleware gets the final word at the deadline (its
            // session reports NoQuorum); Timeout is reserved for ops the
            // facade never answered at all.
            if let Some(fm) = self.facades.get(&node).cloned() {
                if !self.crashed.contains(&fm) {
                    self.handle_machine(&fm, Input::Wake);
                }
            }
            if self.clients[idx].outcome.is_none() {
                self.client_done(idx, OpOutcome::Timeout, MachineId::new(node, 0));
            }
            return;
        }
        self.clients[idx].attempts = attempts + 1;
        let facade = self.facades.get(&node).cloned();
        if let Some(fm) = facade {
            if !self.crashed.contains(&fm) {
                self.handle_machine(
                    &fm,
                    Input::Client {
                        op_id: idx as u64,
                        attempt: attempts + 1,
                        op,
                        deadline,
                    },
                );
            }
        }
        if self.clients[idx].outcome.is_none() {
            let next = self.now.plus_us(self.sc.client_retry_us).min(deadline);
            self.push(next, EvKind::ClientRetry(idx));
        }
        let _ = submitted;
    }

    fn client_done(&mut self, idx: usize, outcome: OpOutcome, at_machine: MachineId) {
        if self.clients.get(idx).is_none_or(|c| c.outcome.is_some()) {
            return;
        }
        let (node, op, submitted) = {
            let c = &mut self.clients[idx];
            c.outcome = Some((self.now, outcome.clone()));
            (c.node.clone(), c.op.clone(), c.submitted)
        };
        let key = op.key().cloned();
        let value = match &outcome {
            OpOutcome::ReadValue(v) => Some(escape_bytes(v)),
            OpOutcome::ReadElements(es) => Some(
                es.iter().map(|e| escape_bytes(e)).collect::<Vec<_>>().join("+"),
            ),
            _ => None,
        };
        let strategy = match &op {
            ClientOp::Reconfigure { .. } => Some(Strategy::Strict),
            _ => key.as_ref().and_then(|k| {
                if k.namespace.starts_with(crate::membership::MEMBERSHIP_NAMESPACE) {
                    Some(Strategy::Strict)
                } else {
                    self.sc.registry.lookup(k).ok().map(|d| d.strategy)
                }
            }),
        };
        self.trace_row(
            "op-done",
            node.to_string(),
            String::new(),
            key.as_ref().map(|k| k.to_string()).unwrap_or_default(),
            "",
            0,
            format!(
                "op={idx};outcome={};value={}",
                outcome.label(),
                value.clone().unwrap_or_default()
            ),
        );
        self.metrics.ops.push(OpMetric {
            op_id: idx as u64,
            node: node.clone(),
            kind: op.kind(),
            key: key.clone(),
            strategy,
            submitted_us: submitted.as_us(),
            completed_us: self.now.as_us(),
            outcome: outcome.label().to_string(),
            ok: outcome.is_ok(),
            value,
        });
        // Eventual write: start a staleness watcher with the origin state
        // as the visibility threshold.
        if matches!(outcome, OpOutcome::WriteOk) && strategy == Some(Strategy::Eventual) {
            if let (Some(key), ClientOp::Write { .. }) = (key, &op) {
                let origin = at_machine.node.clone();
                if let Some(coord) = self.coords.get(&at_machine) {
                    if let Some(state) = coord.eventual_state(&key) {
                        let participants = coord
                            .group_participants_for_key(&key)
                            .unwrap_or_default();
                        let remaining: BTreeSet<NodeId> = participants
                            .iter()
                            .map(|p| p.node().clone())
                            .filter(|n| *n != origin)
                            .collect();
                        if !remaining.is_empty() {
                            self.ev_watchers.entry(key).or_default().push(EventualWatcher {
                                threshold: state.clone(),
                                written: self.now,
                                origin,
                                remaining,
                            });
                        }
                    }
                }
            }
        }
    }

    // --------------------------------------------------------------
    // Staleness accounting
    // --------------------------------------------------------------

    fn eventual_visibility(&mut self, m: &MachineId, key: &CoordinationKey) {
        let Some(watchers) = self.ev_watchers.get_mut(key) else { return };
        let Some(coord) = self.coords.get(m) else { return };
        let Some(state) = coord.eventual_state(key) else { return };
        let node = m.node.clone();
        let now = self.now;
        let mut samples = Vec::new();
        for w in watchers.iter_mut() {
            if w.remaining.contains(&node) && crdt::dominates(state, &w.threshold) {
                w.remaining.remove(&node);
                samples.push(StalenessSample {
                    key: key.clone(),
                    origin: w.origin.clone(),
                    participant: node.clone(),
                    written_us: w.written.as_us(),
                    visible_us: now.as_us(),
                });
            }
        }
        self.metrics.staleness.extend(samples);
    }

    fn strict_visibility(&mut self, m: &MachineId, group: GroupId, key: CoordinationKey, index: LogIndex) {
        let node = m.node.clone();
        match self.strict_watchers.get_mut(&(group.clone(), index)) {
            None => {
                // First applier is the committing leader: the origin.
                let participants = self
                    .coords
                    .get(m)
                    .and_then(|c| c.group_participants(&group))
                    .unwrap_or_default();
                let remaining: BTreeSet<NodeId> = participants
                    .iter()
                    .map(|p| p.node().clone())
                    .filter(|n| *n != node)
                    .collect();
                self.strict_watchers.insert(
                    (group, index),
                    StrictWatcher { key, written: self.now, origin: node, remaining },
                );
            }
            Some(w) => {
                if w.remaining.remove(&node) {
                    self.metrics.staleness.push(StalenessSample {
                        key: w.key.clone(),
                        origin: w.origin.clone(),
                        participant: node,
                        written_us: w.written.as_us(),
                        visible_us: self.now.as_us(),
                    });
                }
            }
        }
    }

    // --------------------------------------------------------------
    // Invariant checking
    // --------------------------------------------------------------

    /// Log matching: across all replicas of a group, entries with the same
    /// (index, term) imply identical prefixes up to that index.
    fn check_log_matching(&mut self, group: &GroupId) {
        let logs: Vec<(&MachineId, &[LogEntry])> = self
            .coords
            .iter()
            .filter_map(|(m, c)| c.replica_log(group).map(|l| (m, l)))
            .collect();
        for (i, (ma, la)) in logs.iter().enumerate() {
            for (mb, lb) in &logs[i + 1..] {
                let mut diverged = false;
                for (ea, eb) in la.iter().zip(lb.iter()) {
                    if ea.term == eb.term {
                        if diverged || ea.payload != eb.payload {
                            self.ledger.log_matching_violations.push(format!(
                                "{group}: {ma} and {mb} share a term but diverge earlier"
                            ));
                            break;
                        }
                    } else {
                        diverged = true;
                    }
                }
            }
        }
    }

    // --------------------------------------------------------------
    // Finish
    // --------------------------------------------------------------

    fn trace_row(
        &mut self,
        kind: &'static str,
        from: String,
        to: String,
        key: String,
        msg_kind: &str,
        size: u32,
        note: String,
    ) {
        self.trace.push(TraceRow {
            time_us: self.now.as_us(),
            kind,
            from,
            to,
            key,
            msg_kind: msg_kind.to_string(),
            size_bytes: size,
            note,
        });
    }

    fn finish(mut self) -> RunOutput {
        self.now = self.sc.end;
        // Unresolved clients report as timeouts so every op has an outcome.
        for i in 0..self.clients.len() {
            if self.clients[i].outcome.is_none() {
                let node = self.clients[i].node.clone();
                self.client_done(i, OpOutcome::Timeout, MachineId::new(node, 0));
            }
        }
        // Final-state digests make convergence re-checkable from the trace.
        let coords = std::mem::take(&mut self.coords);
        for (m, c) in &coords {
            for (key, state) in c.eventual_cache() {
                let digest = fnv1a64(&crdt::canonical_encode(state));
                self.trace_row(
                    "final-state",
                    m.to_string(),
                    String::new(),
                    key.to_string(),
                    "",
                    0,
                    format!("digest={digest:016x}"),
                );
            }
        }
        let boundaries: Vec<u64> = self
            .sc
            .faults
            .iter()
            .filter(|(_, k)| matches!(k, FaultKind::Partition(_) | FaultKind::Heal))
            .map(|(at, _)| at.as_us())
            .collect();
        self.metrics.compute_availability(&boundaries, self.sc.end.as_us());

        let mut end = EndStates {
            eventual: BTreeMap::new(),
            strict: BTreeMap::new(),
            views: BTreeMap::new(),
            facades: self.facades.clone(),
            alive: coords.keys().cloned().collect(),
        };
        for (m, c) in &coords {
            end.eventual.insert(m.clone(), c.eventual_cache().clone());
            end.views.insert(m.clone(), c.view().clone());
            let strict: BTreeMap<CoordinationKey, (Vec<u8>, Term, LogIndex)> =
                c.strict_applied_snapshot();
            end.strict.insert(m.clone(), strict);
        }
        RunOutput {
            seed: self.seed,
            trace: self.trace,
            metrics: self.metrics,
            end,
            safety: self.ledger,
        }
    }
}

fn msg_key_hint(msg: &Msg) -> String {
    match msg {
        Msg::Propose { payload: crate::consensus::EntryPayload::Put { key, .. }, .. } => {
            key.to_string()
        }
        Msg::ReadRequest { key, .. } => key.to_string(),
        Msg::Consensus {
            inner:
                crate::consensus::ConsensusMsg::ReadProbe {
                    probe: crate::consensus::ProbeKind::Quorum { key },
                    ..
                },
            ..
        } => key.to_string(),
        Msg::StateExchange { states, .. } if states.len() == 1 => states[0].0.to_string(),
        _ => String::new(),
    }
}

/// The consensus identity a machine plays in a group, for ledger labels.
fn participant_label(group: &GroupId, m: &MachineId) -> String {
    if group.as_str().contains("@node:") {
        m.to_string()
    } else {
        m.node.to_string()
    }
}
