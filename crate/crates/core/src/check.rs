//! Correctness checkers over run results and stored traces:
//! linearizability of strict histories, convergence of eventual state,
//! consensus commit safety, leader uniqueness, log matching, and message
//! scoping. All checkers are pure: the same trace always yields the same
//! verdict.

use std::collections::{BTreeMap, BTreeSet};

use crate::crdt;
use crate::membership::MEMBERSHIP_NAMESPACE;
use crate::scenario::Scenario;
use crate::simnet::RunOutput;
use crate::trace::TraceLog;
use crate::types::{CoordinationKey, MachineId, NodeId, ParticipantId, Strategy};
use crate::util::fnv1a64;

/// Exhaustive-checking cap: histories longer than this must be sharded.
pub const MAX_HISTORY: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HistKind {
    Write(String),
    Read,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HistResult {
    WriteOk,
    /// The write failed indeterminately (no quorum / timeout): it may or
    /// may not take effect, at any later point.
    WriteMaybe,
    ReadValue(String),
    ReadNotFound,
    /// Failed reads have no effect and impose no constraint.
    ReadFailed,
}

/// One strict operation in a per-key history. Values are in escaped form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistOp {
    pub op_id: u64,
    pub kind: HistKind,
    pub invoke_us: u64,
    pub return_us: u64,
    pub result: HistResult,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// The smallest completion-order prefix that already has no valid
    /// linearization, as op ids.
    Violation { witness: Vec<u64> },
    HistoryTooLarge { len: usize },
}

/// Exhaustive linearizability check of one per-key register history:
/// accepts iff some permutation of the ops, consistent with real-time
/// precedence, matches sequential register semantics. Indeterminately
/// failed writes may take effect at any point after invocation or never.
pub fn check_linearizable(history: &[HistOp]) -> Verdict {
    let effective: Vec<&HistOp> =
        history.iter().filter(|o| o.result != HistResult::ReadFailed).collect();
    if effective.len() > MAX_HISTORY {
        return Verdict::HistoryTooLarge { len: effective.len() };
    }
    if linearizable(&effective) {
        return Verdict::Pass;
    }
    // Minimal witness: the shortest completion-order prefix that fails.
    let mut sorted: Vec<&HistOp> = effective.clone();
    sorted.sort_by_key(|o| (o.return_us, o.invoke_us, o.op_id));
    for k in 1..=sorted.len() {
        if !linearizable(&sorted[..k]) {
            return Verdict::Violation {
                witness: sorted[..k].iter().map(|o| o.op_id).collect(),
            };
        }
    }
    Verdict::Violation { witness: sorted.iter().map(|o| o.op_id).collect() }
}

fn linearizable(ops: &[&HistOp]) -> bool {
    // DFS over linearization orders. State: which ops are placed (applied
    // or skipped) and the current register value (id of the op that wrote
    // it). Indeterminate writes may be skipped entirely and have no
    // real-time upper bound.
    let mut seen: BTreeSet<(u32, Option<usize>)> = BTreeSet::new();
    fn upper_bound(op: &HistOp) -> u64 {
        match op.result {
            HistResult::WriteMaybe => u64::MAX,
            _ => op.return_us,
        }
    }
    fn dfs(
        ops: &[&HistOp],
        placed: u32,
        value: Option<usize>,
        seen: &mut BTreeSet<(u32, Option<usize>)>,
    ) -> bool {
        let n = ops.len();
        if placed.count_ones() as usize == n {
            return true;
        }
        if !seen.insert((placed, value)) {
            return false;
        }
        for i in 0..n {
            if placed & (1 << i) != 0 {
                continue;
            }
            // Real-time order: an op may linearize next only if no other
            // unplaced op completed before this one was invoked.
            let blocked = (0..n).any(|j| {
                j != i && placed & (1 << j) == 0 && upper_bound(ops[j]) < ops[i].invoke_us
            });
            if blocked {
                continue;
            }
            let next = placed | (1 << i);
            match (&ops[i].kind, &ops[i].result) {
                (HistKind::Write(_), HistResult::WriteOk) => {
                    if dfs(ops, next, Some(i), seen) {
                        return true;
                    }
                }
                (HistKind::Write(_), HistResult::WriteMaybe) => {
                    // Either it took effect here, or never.
                    if dfs(ops, next, Some(i), seen) || dfs(ops, next, value, seen) {
                        return true;
                    }
                }
                (HistKind::Read, HistResult::ReadValue(v)) => {
                    let matches = match value {
                        Some(w) => matches!(&ops[w].kind, HistKind::Write(written) if written == v),
                        None => false,
                    };
                    if matches && dfs(ops, next, value, seen) {
                        return true;
                    }
                }
                (HistKind::Read, HistResult::ReadNotFound) => {
                    if value.is_none() && dfs(ops, next, value, seen) {
                        return true;
                    }
                }
                _ => {}
            }
        }
        false
    }
    dfs(ops, 0, None, &mut seen)
}

// ---------------------------------------------------------------------
// History extraction
// ---------------------------------------------------------------------

/// Per-key strict histories from a finished run.
pub fn strict_histories(sc: &Scenario, out: &RunOutput) -> BTreeMap<CoordinationKey, Vec<HistOp>> {
    let mut map: BTreeMap<CoordinationKey, Vec<HistOp>> = BTreeMap::new();
    for m in &out.metrics.ops {
        let Some(key) = &m.key else { continue };
        let strict = key.namespace.starts_with(MEMBERSHIP_NAMESPACE)
            || sc.registry.lookup(key).is_ok_and(|d| d.strategy == Strategy::Strict);
        if !strict {
            continue;
        }
        let (kind, result) = match (m.kind, m.outcome.as_str()) {
            ("write", "ok") => (
                HistKind::Write(written_value(sc, m.op_id).unwrap_or_default()),
                HistResult::WriteOk,
            ),
            ("write", "no-quorum") | ("write", "timeout") => (
                HistKind::Write(written_value(sc, m.op_id).unwrap_or_default()),
                HistResult::WriteMaybe,
            ),
            ("read", "ok") => {
                (HistKind::Read, HistResult::ReadValue(m.value.clone().unwrap_or_default()))
            }
            ("read", "not-found") => (HistKind::Read, HistResult::ReadNotFound),
            ("read", _) => (HistKind::Read, HistResult::ReadFailed),
            _ => continue,
        };
        map.entry(key.clone()).or_default().push(HistOp {
            op_id: m.op_id,
            kind,
            invoke_us: m.submitted_us,
            return_us: m.completed_us,
            result,
        });
    }
    map
}

fn written_value(sc: &Scenario, op_id: u64) -> Option<String> {
    sc.workload.get(op_id as usize).and_then(|w| match &w.op {
        crate::coordinator::ClientOp::Write { value, .. } => {
            Some(crate::util::escape_bytes(value))
        }
        _ => None,
    })
}

/// Per-key strict histories recovered from a stored trace.
pub fn strict_histories_from_trace(
    sc: &Scenario,
    trace: &TraceLog,
) -> BTreeMap<CoordinationKey, Vec<HistOp>> {
    #[derive(Default, Clone)]
    struct Partial {
        key: Option<CoordinationKey>,
        kind: String,
        written: String,
        invoke: u64,
        done: Option<(u64, String, String)>,
    }
    let mut ops: BTreeMap<u64, Partial> = BTreeMap::new();
    for r in trace.rows() {
        match r.kind {
            "op-start" => {
                let f = note_fields(&r.note);
                let id: u64 = f.get("op").and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                let p = ops.entry(id).or_default();
                p.key = CoordinationKey::parse(&r.key);
                p.kind = f.get("kind").cloned().unwrap_or_default();
                p.written = f.get("value").cloned().unwrap_or_default();
                p.invoke = r.time_us;
            }
            "op-done" => {
                let f = note_fields(&r.note);
                let id: u64 = f.get("op").and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                let p = ops.entry(id).or_default();
                p.done = Some((
                    r.time_us,
                    f.get("outcome").cloned().unwrap_or_default(),
                    f.get("value").cloned().unwrap_or_default(),
                ));
            }
            _ => {}
        }
    }
    let mut map: BTreeMap<CoordinationKey, Vec<HistOp>> = BTreeMap::new();
    for (op_id, p) in ops {
        let Some(key) = p.key else { continue };
        let Some((done_us, outcome, read_value)) = p.done else { continue };
        let strict = key.namespace.starts_with(MEMBERSHIP_NAMESPACE)
            || sc.registry.lookup(&key).is_ok_and(|d| d.strategy == Strategy::Strict);
        if !strict {
            continue;
        }
        let (kind, result) = match (p.kind.as_str(), outcome.as_str()) {
            ("write", "ok") => (HistKind::Write(p.written.clone()), HistResult::WriteOk),
            ("write", "no-quorum") | ("write", "timeout") => {
                (HistKind::Write(p.written.clone()), HistResult::WriteMaybe)
            }
            ("read", "ok") => (HistKind::Read, HistResult::ReadValue(read_value)),
            ("read", "not-found") => (HistKind::Read, HistResult::ReadNotFound),
            ("read", _) => (HistKind::Read, HistResult::ReadFailed),
            _ => continue,
        };
        map.entry(key).or_default().push(HistOp {
            op_id,
            kind,
            invoke_us: p.invoke,
            return_us: done_us,
            result,
        });
    }
    map
}

fn note_fields(note: &str) -> BTreeMap<String, String> {
    note.split(';')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

// ---------------------------------------------------------------------
// Convergence
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConvergenceVerdict {
    Pass,
    Divergence { key: CoordinationKey, details: Vec<String> },
    NotQuiescent { reason: String },
}

/// All participants of every eventual key must hold structurally equal
/// states at the end of the run. Precondition: at least 20 quiescent gossip
/// intervals after the last write and the last fault.
pub fn check_convergence(sc: &Scenario, out: &RunOutput) -> ConvergenceVerdict {
    if let Some(reason) = quiescence_gap(sc, out) {
        return ConvergenceVerdict::NotQuiescent { reason };
    }
    // Per-machine digests of every eventual key.
    let mut digests: BTreeMap<MachineId, BTreeMap<CoordinationKey, u64>> = BTreeMap::new();
    for (m, cache) in &out.end.eventual {
        let entry = digests.entry(m.clone()).or_default();
        for (k, v) in cache {
            entry.insert(k.clone(), fnv1a64(&crdt::canonical_encode(v)));
        }
    }
    compare_participants(sc, out, &digests)
}

/// Convergence re-checked purely from a stored trace, using the
/// `final-state` digest rows and `view` rows.
pub fn check_convergence_from_trace(sc: &Scenario, trace: &TraceLog) -> ConvergenceVerdict {
    let mut digests: BTreeMap<MachineId, BTreeMap<CoordinationKey, u64>> = BTreeMap::new();
    let mut last_write = 0;
    let mut last_fault = 0;
    let mut end = 0;
    for r in trace.rows() {
        end = end.max(r.time_us);
        match r.kind {
            "final-state" => {
                let (Some(m), Some(k)) =
                    (MachineId::parse(&r.from), CoordinationKey::parse(&r.key))
                else {
                    continue;
                };
                let f = note_fields(&r.note);
                if let Some(d) =
                    f.get("digest").and_then(|d| u64::from_str_radix(d, 16).ok())
                {
                    digests.entry(m).or_default().insert(k, d);
                }
            }
            "op-done" => {
                if note_fields(&r.note).get("outcome").map(|s| s.as_str()) == Some("ok") {
                    last_write = last_write.max(r.time_us);
                }
            }
            "fault" => last_fault = last_fault.max(r.time_us),
            _ => {}
        }
    }
    let window = 20 * sc.max_gossip_interval_us();
    let settled = last_write.max(last_fault);
    if window > 0 && end < settled + window {
        return ConvergenceVerdict::NotQuiescent {
            reason: format!(
                "trace ends {}us after last activity; {}us of quiescence required",
                end - settled,
                window
            ),
        };
    }
    // Participant resolution from the trace: base view plus replayed view
    // rows (replica-set changes) and facade rows for node representatives.
    let mut view = sc.base_view.clone();
    let mut facades: BTreeMap<NodeId, MachineId> = sc
        .base_view
        .node_machines
        .iter()
        .map(|(n, ms)| (n.clone(), ms.iter().next().unwrap().clone()))
        .collect();
    let mut crashed: BTreeSet<MachineId> = BTreeSet::new();
    for r in trace.rows() {
        match r.kind {
            "view" => {
                let f = note_fields(&r.note);
                if let (Some(set), Some(members)) = (f.get("set"), f.get("members")) {
                    let members: BTreeSet<NodeId> = members
                        .split('+')
                        .filter(|s| !s.is_empty())
                        .map(NodeId::new)
                        .collect();
                    view = view.apply_replica_set_change(
                        &crate::types::ReplicaSetId::new(set.clone()),
                        members,
                    );
                }
            }
            "facade" => {
                if let Some(m) = MachineId::parse(&r.from) {
                    facades.insert(m.node.clone(), m);
                }
            }
            "fault" => {
                if let Some(m) = r.note.strip_prefix("crash ").and_then(MachineId::parse) {
                    crashed.insert(m);
                }
                if let Some(m) = r.note.strip_prefix("restart ").and_then(MachineId::parse) {
                    crashed.remove(&m);
                }
            }
            _ => {}
        }
    }
    compare_with(sc, &view, &facades, &crashed, &digests)
}

fn quiescence_gap(sc: &Scenario, out: &RunOutput) -> Option<String> {
    let window = 20 * sc.max_gossip_interval_us();
    if window == 0 {
        return None;
    }
    let last_write = out
        .metrics
        .ops
        .iter()
        .filter(|o| o.kind != "read")
        .map(|o| o.completed_us)
        .max()
        .unwrap_or(0);
    let last_fault = sc.faults.iter().map(|(at, _)| at.as_us()).max().unwrap_or(0);
    let settled = last_write.max(last_fault);
    let end = sc.end.as_us();
    if end < settled + window {
        Some(format!(
            "only {}us of quiescence after last write/fault at {}us; need {}us (20 gossip intervals)",
            end.saturating_sub(settled),
            settled,
            window
        ))
    } else {
        None
    }
}

fn compare_participants(
    sc: &Scenario,
    out: &RunOutput,
    digests: &BTreeMap<MachineId, BTreeMap<CoordinationKey, u64>>,
) -> ConvergenceVerdict {
    // Use the most advanced end-of-run view for participant resolution.
    let view = out
        .end
        .views
        .values()
        .max_by_key(|v| v.version)
        .cloned()
        .unwrap_or_else(|| sc.base_view.clone());
    let crashed: BTreeSet<MachineId> = sc
        .topology
        .machines()
        .filter(|m| !out.end.alive.contains(*m))
        .cloned()
        .collect();
    compare_with(sc, &view, &out.end.facades, &crashed, digests)
}

fn compare_with(
    sc: &Scenario,
    view: &crate::membership::MembershipView,
    facades: &BTreeMap<NodeId, MachineId>,
    crashed: &BTreeSet<MachineId>,
    digests: &BTreeMap<MachineId, BTreeMap<CoordinationKey, u64>>,
) -> ConvergenceVerdict {
    for d in sc.registry.descriptors() {
        if d.strategy != Strategy::Eventual {
            continue;
        }
        let Ok(participants) = crate::membership::resolve_members(view, d) else { continue };
        // A participant's externally visible state lives on its facade
        // machine; participants whose machine is down are skipped (their
        // volatile cache died with them).
        let machines: Vec<MachineId> = participants
            .members
            .iter()
            .filter_map(|p| match p {
                ParticipantId::Node(n) => facades.get(n).cloned(),
                ParticipantId::Machine(m) => Some(m.clone()),
            })
            .filter(|m| !crashed.contains(m))
            .collect();
        if machines.len() < 2 {
            continue;
        }
        // Keys of this descriptor seen by any participant.
        let mut keys: BTreeSet<CoordinationKey> = BTreeSet::new();
        for m in &machines {
            for k in digests.get(m).map(|d| d.keys()).into_iter().flatten() {
                if sc.registry.lookup(k).is_ok_and(|kd| kd.namespace == d.namespace) {
                    keys.insert(k.clone());
                }
            }
        }
        for key in keys {
            let mut seen: BTreeMap<Option<u64>, Vec<String>> = BTreeMap::new();
            for m in &machines {
                let digest = digests.get(m).and_then(|d| d.get(&key)).copied();
                seen.entry(digest).or_default().push(m.to_string());
            }
            if seen.len() > 1 {
                let details = seen
                    .into_iter()
                    .map(|(d, who)| {
                        format!(
                            "digest {} at {}",
                            d.map(|d| format!("{d:016x}")).unwrap_or_else(|| "absent".into()),
                            who.join("+")
                        )
                    })
                    .collect();
                return ConvergenceVerdict::Divergence { key, details };
            }
        }
    }
    ConvergenceVerdict::Pass
}

// ---------------------------------------------------------------------
// Whole-run report
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub linearizability: Vec<(CoordinationKey, Verdict)>,
    pub convergence: ConvergenceVerdict,
    pub commit_safety: Vec<String>,
    pub leader_uniqueness: Vec<String>,
    pub log_matching: Vec<String>,
    pub scoping: Vec<String>,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.linearizability.iter().all(|(_, v)| *v == Verdict::Pass)
            && matches!(
                self.convergence,
                ConvergenceVerdict::Pass | ConvergenceVerdict::NotQuiescent { .. }
            )
            && self.commit_safety.is_empty()
            && self.leader_uniqueness.is_empty()
            && self.log_matching.is_empty()
            && self.scoping.is_empty()
    }

    pub fn summary(&self) -> String {
        let mut lines = Vec::new();
        for (key, v) in &self.linearizability {
            match v {
                Verdict::Pass => lines.push(format!("linearizable {key}: pass")),
                Verdict::Violation { witness } => {
                    lines.push(format!("linearizable {key}: VIOLATION witness ops {witness:?}"))
                }
                Verdict::HistoryTooLarge { len } => {
                    lines.push(format!("linearizable {key}: history too large ({len} ops)"))
                }
            }
        }
        match &self.convergence {
            ConvergenceVerdict::Pass => lines.push("convergence: pass".into()),
            ConvergenceVerdict::Divergence { key, details } => {
                lines.push(format!("convergence: DIVERGENCE at {key}: {}", details.join("; ")))
            }
            ConvergenceVerdict::NotQuiescent { reason } => {
                lines.push(format!("convergence: not checked ({reason})"))
            }
        }
        let mut section = |name: &str, items: &[String]| {
            if items.is_empty() {
                lines.push(format!("{name}: pass"));
            } else {
                for i in items {
                    lines.push(format!("{name}: VIOLATION {i}"));
                }
            }
        };
        section("commit-safety", &self.commit_safety);
        section("leader-uniqueness", &self.leader_uniqueness);
        section("log-matching", &self.log_matching);
        section("scoping", &self.scoping);
        lines.join("\n")
    }
}

/// Runs every checker against a finished run.
pub fn check_run(sc: &Scenario, out: &RunOutput) -> CheckReport {
    let linearizability = strict_histories(sc, out)
        .into_iter()
        .map(|(key, hist)| (key, check_linearizable(&hist)))
        .collect();
    CheckReport {
        linearizability,
        convergence: check_convergence(sc, out),
        commit_safety: out.safety.commit_violations(),
        leader_uniqueness: out.safety.leader_violations(),
        log_matching: out.safety.log_matching_violations.clone(),
        scoping: out.safety.scope_violations.clone(),
    }
}

/// Re-checks a stored trace without re-running: linearizability and
/// convergence are recomputed from rows; commit safety, leader uniqueness
/// and scoping come from the commit, leader and scope-violation rows. Log
/// matching is a live-run assertion and is not derivable from the trace.
pub fn check_trace(sc: &Scenario, trace: &TraceLog) -> CheckReport {
    let linearizability = strict_histories_from_trace(sc, trace)
        .into_iter()
        .map(|(key, hist)| (key, check_linearizable(&hist)))
        .collect();
    let mut committed: BTreeMap<(String, String), BTreeSet<(String, String)>> = BTreeMap::new();
    let mut scoping = Vec::new();
    let mut leaders: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for r in trace.rows() {
        match r.kind {
            "commit" => {
                let f = note_fields(&r.note);
                if let (Some(g), Some(i), Some(t), Some(d)) =
                    (f.get("g"), f.get("i"), f.get("t"), f.get("d"))
                {
                    committed
                        .entry((g.clone(), i.clone()))
                        .or_default()
                        .insert((t.clone(), d.clone()));
                }
            }
            "scope-violation" => scoping.push(r.note.clone()),
            "leader" => {
                let f = note_fields(&r.note);
                if let (Some(g), Some(t), Some(who)) = (f.get("g"), f.get("t"), f.get("as")) {
                    leaders.entry((g.clone(), t.clone())).or_default().insert(who.clone());
                }
            }
            _ => {}
        }
    }
    let commit_safety = committed
        .iter()
        .filter(|(_, set)| set.len() > 1)
        .map(|((g, i), set)| format!("{g} index {i}: {} distinct committed entries", set.len()))
        .collect();
    let leader_uniqueness = leaders
        .iter()
        .filter(|(_, who)| who.len() > 1)
        .map(|((g, t), who)| format!("{g} term {t}: leaders {who:?}"))
        .collect();
    CheckReport {
        linearizability,
        convergence: check_convergence_from_trace(sc, trace),
        commit_safety,
        leader_uniqueness,
        log_matching: Vec::new(),
        scoping,
    }
}
