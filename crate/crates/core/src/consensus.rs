//! Leader-based, log-replicated majority consensus for the strict strategy,
//! scoped to an arbitrary member set.
//!
//! The protocol is term-based with a single leader per term: elections
//! require a majority of votes, replication commits an entry once a majority
//! of the effective configuration has acknowledged it, and a leader only
//! advances the commit index over entries of its own term (earlier entries
//! commit transitively). Three leader modes cover the spectrum from
//! consensus to primary copy:
//!
//! * `Elected` — randomized election timeouts in `[T, 2T)`.
//! * `Ranked` — the lowest member id is the initial leader at term 1 and
//!   failover timeouts are staggered by member rank, so the next id takes
//!   over deterministically; used for node facades and leader-follower
//!   participation.
//! * `Pinned` — a fixed leader, elections disabled (primary copy).
//!
//! Membership changes are single-node deltas appended as config entries.
//! A config entry is committed through the majority of the configuration in
//! force before it and takes effect at commit; quorum evaluation walks the
//! log so each index is judged against the configuration effective below it.
//!
//! Replicas are single-threaded deterministic state machines advanced only
//! by messages and timer ticks; every side effect is returned as a
//! [`ReplicaOut`] value.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::time::SimTime;
use crate::types::{CoordinationKey, MachineId, ParticipantId};
use crate::util::fnv1a64;

/// Election/voting epoch. Monotonically non-decreasing at every participant.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Term(pub u64);

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Log position, 1-based; 0 means "nothing".
pub type LogIndex = u64;

/// One consensus group per (strict descriptor, resolved scope).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId(pub String);

impl GroupId {
    pub fn new(namespace: &str, scope_tag: &str) -> GroupId {
        GroupId(format!("{namespace}@{scope_tag}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for GroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// What a log entry does when applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryPayload {
    /// Committed by a fresh leader to learn the commit index of earlier
    /// terms; not visible to applications.
    Noop,
    /// A strict write.
    Put { key: CoordinationKey, value: Vec<u8> },
    /// A membership change (single-node delta from the previous config).
    Config { members: BTreeSet<ParticipantId> },
}

impl EntryPayload {
    /// Stable digest used by the safety ledger to compare committed values.
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::new();
        match self {
            EntryPayload::Noop => bytes.push(0),
            EntryPayload::Put { key, value } => {
                bytes.push(1);
                bytes.extend_from_slice(key.to_string().as_bytes());
                bytes.push(0);
                bytes.extend_from_slice(value);
            }
            EntryPayload::Config { members } => {
                bytes.push(2);
                for m in members {
                    bytes.extend_from_slice(m.to_string().as_bytes());
                    bytes.push(b',');
                }
            }
        }
        fnv1a64(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub term: Term,
    pub payload: EntryPayload,
}

/// How the group picks its leader.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeaderMode {
    Elected,
    Ranked,
    Pinned(ParticipantId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub id: GroupId,
    pub initial_members: BTreeSet<ParticipantId>,
    pub mode: LeaderMode,
    /// Election timeout base T; actual timeouts land in [T, 2T) (elected)
    /// or T * (1 + rank) (ranked).
    pub election_base_us: u64,
    /// Leader heartbeat interval (T/5 by default).
    pub heartbeat_us: u64,
}

/// State that survives crashes: the per-participant stable storage record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persist {
    pub current_term: Term,
    pub voted_for: Option<ParticipantId>,
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Leader,
    Follower,
    Candidate,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Leader => f.write_str("leader"),
            Role::Follower => f.write_str("follower"),
            Role::Candidate => f.write_str("candidate"),
        }
    }
}

/// Reference to the client op a proposal or read serves; echoed back so the
/// origin can match replies to attempts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClientRef {
    pub client: MachineId,
    pub op_id: u64,
    pub attempt: u32,
}

/// A (term, index, value) witness from a replica's log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueAt {
    pub term: Term,
    pub index: LogIndex,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    /// Leadership confirmation round for leader reads.
    Confirm,
    /// Quorum read: report log witnesses for a key.
    Quorum { key: CoordinationKey },
}

/// Simulated wire messages of the consensus protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsensusMsg {
    Append {
        term: Term,
        leader: ParticipantId,
        prev_index: LogIndex,
        prev_term: Term,
        entries: Vec<LogEntry>,
        commit_index: LogIndex,
    },
    AppendReply {
        term: Term,
        success: bool,
        match_index: LogIndex,
        /// Where the leader should retry from after a mismatch.
        hint_index: LogIndex,
    },
    VoteRequest {
        term: Term,
        candidate: ParticipantId,
        last_index: LogIndex,
        last_term: Term,
    },
    VoteReply {
        term: Term,
        granted: bool,
    },
    ReadProbe {
        term: Term,
        read_id: u64,
        probe: ProbeKind,
    },
    ReadReply {
        term: Term,
        read_id: u64,
        confirm: bool,
        ok: bool,
        logged: Option<ValueAt>,
        committed: Option<ValueAt>,
    },
}

impl ConsensusMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            ConsensusMsg::Append { .. } => "append",
            ConsensusMsg::AppendReply { .. } => "append-reply",
            ConsensusMsg::VoteRequest { .. } => "vote-req",
            ConsensusMsg::VoteReply { .. } => "vote-reply",
            ConsensusMsg::ReadProbe { .. } => "read-probe",
            ConsensusMsg::ReadReply { .. } => "read-reply",
        }
    }
}

/// Why a proposal or leader read could not be served.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reject {
    NotLeader(Option<ParticipantId>),
    NoQuorum,
    InvalidChange(String),
}

/// Everything a replica wants done after handling an event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplicaOut {
    Send { to: ParticipantId, msg: ConsensusMsg },
    /// The proposal was appended at the leader (client-visible ack).
    Accepted { client: ClientRef, index: LogIndex, term: Term },
    Committed { client: ClientRef, index: LogIndex, term: Term },
    Rejected { client: ClientRef, reason: Reject },
    /// Leadership confirmed; serve the read from the applied store.
    ServeRead { client: ClientRef, key: CoordinationKey },
    ReadFailed { client: ClientRef, reason: Reject },
    /// Emitted in order for every entry as the local commit index passes it.
    Apply { index: LogIndex, term: Term, payload: EntryPayload },
    /// Safety-ledger record: this replica now regards (index, term) as
    /// committed. `quorum` is the acknowledging set at the committing leader.
    CommitRecord {
        index: LogIndex,
        term: Term,
        digest: u64,
        quorum: Option<BTreeSet<ParticipantId>>,
    },
    BecameLeader { term: Term },
    SteppedDown { term: Term },
}

/// Quorum rule; `FloorHalf` is an intentionally broken mutant used to prove
/// the checkers can catch unsafe commits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QuorumRule {
    #[default]
    Majority,
    FloorHalf,
}

impl QuorumRule {
    pub fn quorum(self, members: usize) -> usize {
        match self {
            QuorumRule::Majority => members / 2 + 1,
            QuorumRule::FloorHalf => (members / 2).max(1),
        }
    }
}

#[derive(Debug, Clone)]
struct PendingProp {
    index: LogIndex,
    client: ClientRef,
    deadline: SimTime,
}

#[derive(Debug, Clone)]
struct PendingRead {
    read_id: u64,
    key: CoordinationKey,
    client: ClientRef,
    deadline: SimTime,
    term: Term,
    acks: BTreeSet<ParticipantId>,
}

/// One participant's consensus state machine for one group.
#[derive(Debug, Clone)]
pub struct Replica {
    pub cfg: GroupConfig,
    pub me: ParticipantId,
    persist: Persist,
    dirty: bool,
    role: Role,
    commit_index: LogIndex,
    applied: LogIndex,
    leader_hint: Option<ParticipantId>,
    next_index: BTreeMap<ParticipantId, LogIndex>,
    match_index: BTreeMap<ParticipantId, LogIndex>,
    votes: BTreeSet<ParticipantId>,
    election_deadline: SimTime,
    heartbeat_due: SimTime,
    pending_props: Vec<PendingProp>,
    pending_reads: Vec<PendingRead>,
    next_read_id: u64,
    quorum_rule: QuorumRule,
}

impl Replica {
    /// Creates (or revives, when `persist` is given) the local replica.
    /// Ranked and pinned groups start with their designated leader already
    /// leading at term 1, so no startup election traffic is needed.
    pub fn new(
        cfg: GroupConfig,
        me: ParticipantId,
        persist: Option<Persist>,
        now: SimTime,
        rng: &mut ChaCha12Rng,
        out: &mut Vec<ReplicaOut>,
    ) -> Replica {
        let fresh = persist.is_none();
        let mut persist = persist.unwrap_or_default();
        let designated = match &cfg.mode {
            LeaderMode::Elected => None,
            LeaderMode::Ranked => cfg.initial_members.iter().min().cloned(),
            LeaderMode::Pinned(p) => Some(p.clone()),
        };
        if fresh && designated.is_some() && persist.current_term == Term(0) {
            persist.current_term = Term(1);
        }
        let mut r = Replica {
            me,
            persist,
            dirty: fresh,
            role: Role::Follower,
            commit_index: 0,
            applied: 0,
            leader_hint: designated.clone(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            votes: BTreeSet::new(),
            election_deadline: SimTime::NEVER,
            heartbeat_due: SimTime::NEVER,
            pending_props: Vec::new(),
            pending_reads: Vec::new(),
            next_read_id: 0,
            quorum_rule: QuorumRule::Majority,
            cfg,
        };
        let lead_now = match &r.cfg.mode {
            LeaderMode::Pinned(p) => *p == r.me,
            LeaderMode::Ranked => fresh && designated.as_ref() == Some(&r.me),
            LeaderMode::Elected => false,
        };
        if lead_now {
            r.become_leader(now, out);
        } else {
            r.reset_election_deadline(now, rng);
        }
        r
    }

    /// Only for the checker mutant; see [`QuorumRule`].
    pub fn set_quorum_rule(&mut self, rule: QuorumRule) {
        self.quorum_rule = rule;
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn current_term(&self) -> Term {
        self.persist.current_term
    }

    pub fn commit_index(&self) -> LogIndex {
        self.commit_index
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.persist.log
    }

    pub fn leader_hint(&self) -> Option<&ParticipantId> {
        self.leader_hint.as_ref()
    }

    /// Clones the stable record if it changed since the last call.
    pub fn take_persist(&mut self) -> Option<Persist> {
        if self.dirty {
            self.dirty = false;
            Some(self.persist.clone())
        } else {
            None
        }
    }

    /// Membership in force for replication quorums: the last config entry at
    /// or below the commit index (changes take effect at commit).
    pub fn committed_config(&self) -> BTreeSet<ParticipantId> {
        self.config_at(self.commit_index)
    }

    /// Membership according to the whole log; used for elections so a node
    /// removed by a committed change stops being electable as soon as the
    /// entry reaches a voter's log.
    pub fn log_config(&self) -> BTreeSet<ParticipantId> {
        self.config_at(self.persist.log.len() as u64)
    }

    fn config_at(&self, index: LogIndex) -> BTreeSet<ParticipantId> {
        self.persist.log[..index as usize]
            .iter()
            .rev()
            .find_map(|e| match &e.payload {
                EntryPayload::Config { members } => Some(members.clone()),
                _ => None,
            })
            .unwrap_or_else(|| self.cfg.initial_members.clone())
    }

    fn last_log(&self) -> (Term, LogIndex) {
        let idx = self.persist.log.len() as u64;
        let term = self.persist.log.last().map_or(Term(0), |e| e.term);
        (term, idx)
    }

    fn entry_term(&self, index: LogIndex) -> Option<Term> {
        if index == 0 {
            return Some(Term(0));
        }
        self.persist.log.get(index as usize - 1).map(|e| e.term)
    }

    fn reset_election_deadline(&mut self, now: SimTime, rng: &mut ChaCha12Rng) {
        let base = self.cfg.election_base_us;
        self.election_deadline = match &self.cfg.mode {
            LeaderMode::Pinned(_) => SimTime::NEVER,
            LeaderMode::Ranked => {
                let members = self.log_config();
                let rank = members.iter().position(|m| *m == self.me).unwrap_or(0) as u64;
                now.plus_us(base * (1 + rank))
            }
            LeaderMode::Elected => now.plus_us(base + rng.random_range(0..base.max(1))),
        };
    }

    /// The earliest simulated time at which this replica wants a tick.
    pub fn next_wake(&self) -> SimTime {
        let mut at = SimTime::NEVER;
        if self.role == Role::Leader {
            at = at.min(self.heartbeat_due);
        } else {
            at = at.min(self.election_deadline);
        }
        for p in &self.pending_props {
            at = at.min(p.deadline);
        }
        for r in &self.pending_reads {
            at = at.min(r.deadline);
        }
        at
    }

    /// Fires any deadlines that have passed: election timeouts, heartbeats,
    /// and client-op deadlines.
    pub fn tick(&mut self, now: SimTime, rng: &mut ChaCha12Rng, out: &mut Vec<ReplicaOut>) {
        if self.role != Role::Leader && now >= self.election_deadline {
            self.start_election(now, rng, out);
        }
        if self.role == Role::Leader && now >= self.heartbeat_due {
            self.broadcast_append(out);
            // Re-probe unserved confirmation reads; probes may have raced a
            // lost reply.
            let probes: Vec<(u64, Term)> =
                self.pending_reads.iter().map(|r| (r.read_id, r.term)).collect();
            for (read_id, term) in probes {
                self.send_confirm_probes(read_id, term, out);
            }
            self.heartbeat_due = now.plus_us(self.cfg.heartbeat_us);
        }
        // Client deadlines: a proposal that did not commit in time reports
        // NoQuorum (the entry stays in the log and may still commit later).
        let due: Vec<PendingProp> = {
            let (expired, live): (Vec<_>, Vec<_>) =
                self.pending_props.drain(..).partition(|p| now >= p.deadline);
            self.pending_props = live;
            expired
        };
        for p in due {
            out.push(ReplicaOut::Rejected { client: p.client, reason: Reject::NoQuorum });
        }
        let due: Vec<PendingRead> = {
            let (expired, live): (Vec<_>, Vec<_>) =
                self.pending_reads.drain(..).partition(|r| now >= r.deadline);
            self.pending_reads = live;
            expired
        };
        for r in due {
            out.push(ReplicaOut::ReadFailed { client: r.client, reason: Reject::NoQuorum });
        }
    }

    fn start_election(&mut self, now: SimTime, rng: &mut ChaCha12Rng, out: &mut Vec<ReplicaOut>) {
        let members = self.log_config();
        if !members.contains(&self.me) {
            // Removed from the group: stay dormant.
            self.election_deadline = SimTime::NEVER;
            return;
        }
        self.role = Role::Candidate;
        self.persist.current_term.0 += 1;
        self.persist.voted_for = Some(self.me.clone());
        self.dirty = true;
        self.votes = [self.me.clone()].into();
        self.leader_hint = None;
        self.reset_election_deadline(now, rng);
        let (last_term, last_index) = self.last_log();
        for peer in members.iter().filter(|m| **m != self.me) {
            out.push(ReplicaOut::Send {
                to: peer.clone(),
                msg: ConsensusMsg::VoteRequest {
                    term: self.persist.current_term,
                    candidate: self.me.clone(),
                    last_index,
                    last_term,
                },
            });
        }
        self.maybe_win(now, out);
    }

    fn maybe_win(&mut self, now: SimTime, out: &mut Vec<ReplicaOut>) {
        let members = self.log_config();
        let need = QuorumRule::Majority.quorum(members.len());
        if self.role == Role::Candidate && self.votes.len() >= need {
            self.become_leader(now, out);
        }
    }

    fn become_leader(&mut self, now: SimTime, out: &mut Vec<ReplicaOut>) {
        self.role = Role::Leader;
        self.leader_hint = Some(self.me.clone());
        self.next_index.clear();
        self.match_index.clear();
        let (_, last_index) = self.last_log();
        for peer in self.log_config() {
            if peer != self.me {
                self.next_index.insert(peer.clone(), last_index + 1);
                self.match_index.insert(peer, 0);
            }
        }
        out.push(ReplicaOut::BecameLeader { term: self.persist.current_term });
        // A fresh leader with uncommitted tail entries cannot know their
        // commit status; committing a no-op of its own term resolves them.
        if last_index > self.commit_index {
            self.persist.log.push(LogEntry {
                term: self.persist.current_term,
                payload: EntryPayload::Noop,
            });
            self.dirty = true;
        }
        self.heartbeat_due = now.plus_us(self.cfg.heartbeat_us);
        self.broadcast_append(out);
        self.try_advance_commit(out);
    }

    fn become_follower(&mut self, term: Term, hint: Option<ParticipantId>, now: SimTime, rng: &mut ChaCha12Rng, out: &mut Vec<ReplicaOut>) {
        let was_leader = self.role == Role::Leader;
        if term > self.persist.current_term {
            self.persist.current_term = term;
            self.persist.voted_for = None;
            self.dirty = true;
        }
        self.role = Role::Follower;
        // A stale hint (possibly ourselves) must not survive a demotion.
        self.leader_hint = hint;
        self.votes.clear();
        self.reset_election_deadline(now, rng);
        if was_leader {
            out.push(ReplicaOut::SteppedDown { term: self.persist.current_term });
            for p in std::mem::take(&mut self.pending_props) {
                out.push(ReplicaOut::Rejected {
                    client: p.client,
                    reason: Reject::NotLeader(self.leader_hint.clone()),
                });
            }
            for r in std::mem::take(&mut self.pending_reads) {
                out.push(ReplicaOut::ReadFailed {
                    client: r.client,
                    reason: Reject::NotLeader(self.leader_hint.clone()),
                });
            }
        }
    }

    fn broadcast_append(&mut self, out: &mut Vec<ReplicaOut>) {
        let peers: Vec<ParticipantId> = self.replication_peers();
        for peer in peers {
            self.send_append(&peer, out);
        }
    }

    /// Peers the leader replicates to: everyone in the committed config plus
    /// anyone already added by a pending (uncommitted) config entry, so new
    /// members catch up before their change commits.
    fn replication_peers(&self) -> Vec<ParticipantId> {
        let mut set = self.committed_config();
        set.extend(self.log_config());
        set.into_iter().filter(|m| *m != self.me).collect()
    }

    fn send_append(&mut self, peer: &ParticipantId, out: &mut Vec<ReplicaOut>) {
        let next = *self.next_index.get(peer).unwrap_or(&(self.persist.log.len() as u64 + 1));
        let prev_index = next.saturating_sub(1);
        let prev_term = self.entry_term(prev_index).unwrap_or(Term(0));
        let entries: Vec<LogEntry> = self.persist.log[prev_index as usize..].to_vec();
        out.push(ReplicaOut::Send {
            to: peer.clone(),
            msg: ConsensusMsg::Append {
                term: self.persist.current_term,
                leader: self.me.clone(),
                prev_index,
                prev_term,
                entries,
                commit_index: self.commit_index,
            },
        });
    }

    /// Client-facing proposal entry point; call on the leader's replica.
    pub fn propose(
        &mut self,
        now: SimTime,
        payload: EntryPayload,
        client: ClientRef,
        deadline: SimTime,
        out: &mut Vec<ReplicaOut>,
    ) {
        if self.role != Role::Leader {
            out.push(ReplicaOut::Rejected {
                client,
                reason: Reject::NotLeader(self.leader_hint.clone()),
            });
            return;
        }
        if let EntryPayload::Config { members } = &payload {
            if let Err(reason) = self.validate_config_change(members) {
                out.push(ReplicaOut::Rejected { client, reason });
                return;
            }
        }
        self.persist.log.push(LogEntry { term: self.persist.current_term, payload });
        self.dirty = true;
        let index = self.persist.log.len() as u64;
        out.push(ReplicaOut::Accepted { client: client.clone(), index, term: self.persist.current_term });
        self.pending_props.push(PendingProp { index, client, deadline });
        let _ = now;
        self.broadcast_append(out);
        self.try_advance_commit(out);
    }

    fn validate_config_change(&self, new_members: &BTreeSet<ParticipantId>) -> Result<(), Reject> {
        let current = self.log_config();
        if self.has_uncommitted_config() {
            return Err(Reject::InvalidChange("a membership change is already in flight".into()));
        }
        let delta = current.symmetric_difference(new_members).count();
        if delta != 1 {
            return Err(Reject::InvalidChange(format!(
                "exactly one node may change per step, got {delta}"
            )));
        }
        if new_members.is_empty() {
            return Err(Reject::InvalidChange("group cannot become empty".into()));
        }
        Ok(())
    }

    fn has_uncommitted_config(&self) -> bool {
        self.persist.log[self.commit_index as usize..]
            .iter()
            .any(|e| matches!(e.payload, EntryPayload::Config { .. }))
    }

    /// Client-facing linearizable read at the leader: confirm leadership
    /// with a majority round, then serve from the applied store.
    pub fn leader_read(
        &mut self,
        now: SimTime,
        key: CoordinationKey,
        client: ClientRef,
        deadline: SimTime,
        out: &mut Vec<ReplicaOut>,
    ) {
        if self.role != Role::Leader {
            out.push(ReplicaOut::ReadFailed {
                client,
                reason: Reject::NotLeader(self.leader_hint.clone()),
            });
            return;
        }
        let read_id = self.next_read_id;
        self.next_read_id += 1;
        let term = self.persist.current_term;
        self.pending_reads.push(PendingRead {
            read_id,
            key,
            client,
            deadline,
            term,
            acks: BTreeSet::new(),
        });
        self.send_confirm_probes(read_id, term, out);
        self.maybe_serve_reads(now, out);
    }

    fn send_confirm_probes(&mut self, read_id: u64, term: Term, out: &mut Vec<ReplicaOut>) {
        for peer in self.replication_peers() {
            out.push(ReplicaOut::Send {
                to: peer,
                msg: ConsensusMsg::ReadProbe { term, read_id, probe: ProbeKind::Confirm },
            });
        }
    }

    /// Reads may only be served once the leader provably has the latest
    /// commit index: everything in its log is committed, or it committed an
    /// entry in its own term (the no-op guarantees this resolves).
    fn commit_index_is_current(&self) -> bool {
        let (_, last) = self.last_log();
        if self.commit_index >= last {
            return true;
        }
        self.entry_term(self.commit_index) == Some(self.persist.current_term)
    }

    fn maybe_serve_reads(&mut self, _now: SimTime, out: &mut Vec<ReplicaOut>) {
        if self.role != Role::Leader || !self.commit_index_is_current() {
            return;
        }
        let members = self.committed_config();
        let need = QuorumRule::Majority.quorum(members.len());
        let mut served = Vec::new();
        self.pending_reads.retain(|r| {
            let acks = 1 + r.acks.iter().filter(|a| members.contains(*a)).count();
            if r.term == self.persist.current_term && acks >= need {
                served.push(ReplicaOut::ServeRead { client: r.client.clone(), key: r.key.clone() });
                false
            } else {
                true
            }
        });
        out.extend(served);
    }

    /// Answers a quorum probe locally: the newest logged and newest
    /// committed entry for the key in this replica's log.
    pub fn local_probe(&self, key: &CoordinationKey) -> (Option<ValueAt>, Option<ValueAt>) {
        let find = |upto: usize| {
            self.persist.log[..upto]
                .iter()
                .enumerate()
                .rev()
                .find_map(|(i, e)| match &e.payload {
                    EntryPayload::Put { key: k, value } if k == key => Some(ValueAt {
                        term: e.term,
                        index: i as u64 + 1,
                        value: value.clone(),
                    }),
                    _ => None,
                })
        };
        let logged = find(self.persist.log.len());
        let committed = find(self.commit_index as usize);
        (logged, committed)
    }

    /// Handles one protocol message.
    pub fn handle(
        &mut self,
        now: SimTime,
        from: &ParticipantId,
        msg: ConsensusMsg,
        rng: &mut ChaCha12Rng,
        out: &mut Vec<ReplicaOut>,
    ) {
        match msg {
            ConsensusMsg::Append { term, leader, prev_index, prev_term, entries, commit_index } => {
                self.on_append(now, term, leader, prev_index, prev_term, entries, commit_index, rng, out);
            }
            ConsensusMsg::AppendReply { term, success, match_index, hint_index } => {
                self.on_append_reply(now, from, term, success, match_index, hint_index, rng, out);
            }
            ConsensusMsg::VoteRequest { term, candidate, last_index, last_term } => {
                self.on_vote_request(now, term, candidate, last_index, last_term, rng, out);
            }
            ConsensusMsg::VoteReply { term, granted } => {
                self.on_vote_reply(now, from, term, granted, rng, out);
            }
            ConsensusMsg::ReadProbe { term, read_id, probe } => {
                self.on_read_probe(now, from, term, read_id, probe, rng, out);
            }
            ConsensusMsg::ReadReply { term, read_id, confirm, ok, .. } => {
                if confirm {
                    self.on_confirm_reply(now, from, term, read_id, ok, rng, out);
                }
                // Quorum replies are consumed by the origin's read session,
                // not by the replica.
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_append(
        &mut self,
        now: SimTime,
        term: Term,
        leader: ParticipantId,
        prev_index: LogIndex,
        prev_term: Term,
        entries: Vec<LogEntry>,
        leader_commit: LogIndex,
        rng: &mut ChaCha12Rng,
        out: &mut Vec<ReplicaOut>,
    ) {
        if term < self.persist.current_term {
            out.push(ReplicaOut::Send {
                to: leader,
                msg: ConsensusMsg::AppendReply {
                    term: self.persist.current_term,
                    success: false,
                    match_index: 0,
                    hint_index: 0,
                },
            });
            return;
        }
        self.become_follower(term, Some(leader.clone()), now, rng, out);
        let len = self.persist.log.len() as u64;
        let prev_matches = prev_index <= len && self.entry_term(prev_index) == Some(prev_term);
        if !prev_matches {
            let hint = len.min(prev_index.saturating_sub(1)) + 1;
            out.push(ReplicaOut::Send {
                to: leader,
                msg: ConsensusMsg::AppendReply {
                    term: self.persist.current_term,
                    success: false,
                    match_index: 0,
                    hint_index: hint,
                },
            });
            return;
        }
        // Splice: skip entries already present, truncate on conflict.
        let mut idx = prev_index;
        for entry in entries {
            idx += 1;
            let pos = idx as usize - 1;
            match self.persist.log.get(pos) {
                Some(existing) if existing.term == entry.term => continue,
                Some(_) => {
                    self.persist.log.truncate(pos);
                    self.persist.log.push(entry);
                    self.dirty = true;
                }
                None => {
                    self.persist.log.push(entry);
                    self.dirty = true;
                }
            }
        }
        let match_index = idx;
        if leader_commit > self.commit_index {
            let target = leader_commit.min(self.persist.log.len() as u64);
            self.advance_commit_to(target, None, out);
        }
        out.push(ReplicaOut::Send {
            to: leader,
            msg: ConsensusMsg::AppendReply {
                term: self.persist.current_term,
                success: true,
                match_index,
                hint_index: 0,
            },
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn on_append_reply(
        &mut self,
        now: SimTime,
        from: &ParticipantId,
        term: Term,
        success: bool,
        match_index: LogIndex,
        hint_index: LogIndex,
        rng: &mut ChaCha12Rng,
        out: &mut Vec<ReplicaOut>,
    ) {
        if term > self.persist.current_term {
            self.become_follower(term, None, now, rng, out);
            return;
        }
        if self.role != Role::Leader || term < self.persist.current_term {
            return;
        }
        if success {
            let m = self.match_index.entry(from.clone()).or_insert(0);
            *m = (*m).max(match_index);
            self.next_index.insert(from.clone(), match_index + 1);
            self.try_advance_commit(out);
            self.maybe_serve_reads(now, out);
        } else {
            let next = self.next_index.entry(from.clone()).or_insert(1);
            *next = hint_index.clamp(1, self.persist.log.len() as u64 + 1);
            self.send_append(&from.clone(), out);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_vote_request(
        &mut self,
        now: SimTime,
        term: Term,
        candidate: ParticipantId,
        last_index: LogIndex,
        last_term: Term,
        rng: &mut ChaCha12Rng,
        out: &mut Vec<ReplicaOut>,
    ) {
        if matches!(self.cfg.mode, LeaderMode::Pinned(_)) {
            // Primary-copy groups never vote.
            return;
        }
        if term > self.persist.current_term {
            self.become_follower(term, None, now, rng, out);
        }
        let up_to_date = (last_term, last_index) >= self.last_log();
        let is_member = self.log_config().contains(&candidate);
        let granted = term == self.persist.current_term
            && up_to_date
            && is_member
            && self.persist.voted_for.as_ref().is_none_or(|v| *v == candidate);
        if granted {
            self.persist.voted_for = Some(candidate.clone());
            self.dirty = true;
            self.reset_election_deadline(now, rng);
        }
        out.push(ReplicaOut::Send {
            to: candidate,
            msg: ConsensusMsg::VoteReply { term: self.persist.current_term, granted },
        });
    }

    fn on_vote_reply(
        &mut self,
        now: SimTime,
        from: &ParticipantId,
        term: Term,
        granted: bool,
        rng: &mut ChaCha12Rng,
        out: &mut Vec<ReplicaOut>,
    ) {
        if term > self.persist.current_term {
            self.become_follower(term, None, now, rng, out);
            return;
        }
        if self.role != Role::Candidate || term != self.persist.current_term || !granted {
            return;
        }
        self.votes.insert(from.clone());
        self.maybe_win(now, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn on_read_probe(
        &mut self,
        now: SimTime,
        from: &ParticipantId,
        term: Term,
        read_id: u64,
        probe: ProbeKind,
        rng: &mut ChaCha12Rng,
        out: &mut Vec<ReplicaOut>,
    ) {
        match probe {
            ProbeKind::Confirm => {
                // Leadership heartbeat: ack iff the prober's term is current.
                if term > self.persist.current_term {
                    self.become_follower(term, Some(from.clone()), now, rng, out);
                }
                let ok = term == self.persist.current_term;
                if ok {
                    self.reset_election_deadline(now, rng);
                }
                out.push(ReplicaOut::Send {
                    to: from.clone(),
                    msg: ConsensusMsg::ReadReply {
                        term: self.persist.current_term,
                        read_id,
                        confirm: true,
                        ok,
                        logged: None,
                        committed: None,
                    },
                });
            }
            ProbeKind::Quorum { key } => {
                let (logged, committed) = self.local_probe(&key);
                out.push(ReplicaOut::Send {
                    to: from.clone(),
                    msg: ConsensusMsg::ReadReply {
                        term: self.persist.current_term,
                        read_id,
                        confirm: false,
                        ok: true,
                        logged,
                        committed,
                    },
                });
            }
        }
    }

    fn on_confirm_reply(
        &mut self,
        now: SimTime,
        from: &ParticipantId,
        term: Term,
        read_id: u64,
        ok: bool,
        rng: &mut ChaCha12Rng,
        out: &mut Vec<ReplicaOut>,
    ) {
        if term > self.persist.current_term {
            self.become_follower(term, None, now, rng, out);
            return;
        }
        if !ok || self.role != Role::Leader {
            return;
        }
        if let Some(r) = self.pending_reads.iter_mut().find(|r| r.read_id == read_id) {
            r.acks.insert(from.clone());
        }
        self.maybe_serve_reads(now, out);
    }

    /// Leader-side commit rule. Walks forward from the current commit index,
    /// requiring a quorum of the configuration effective below each index;
    /// only indices of the current term anchor the advance (earlier entries
    /// commit transitively).
    fn try_advance_commit(&mut self, out: &mut Vec<ReplicaOut>) {
        if self.role != Role::Leader {
            return;
        }
        let len = self.persist.log.len() as u64;
        let mut cfg = self.committed_config();
        let mut best: Option<LogIndex> = None;
        let mut quorums: BTreeMap<LogIndex, BTreeSet<ParticipantId>> = BTreeMap::new();
        for idx in self.commit_index + 1..=len {
            let mut acked: BTreeSet<ParticipantId> = cfg
                .iter()
                .filter(|m| self.match_index.get(*m).copied().unwrap_or(0) >= idx)
                .cloned()
                .collect();
            if cfg.contains(&self.me) {
                acked.insert(self.me.clone());
            }
            if acked.len() < self.quorum_rule.quorum(cfg.len()) {
                break;
            }
            quorums.insert(idx, acked);
            if let EntryPayload::Config { members } = &self.persist.log[idx as usize - 1].payload {
                cfg = members.clone();
            }
            if self.persist.log[idx as usize - 1].term == self.persist.current_term {
                best = Some(idx);
            }
        }
        if let Some(n) = best {
            self.advance_commit_to(n, Some(&quorums), out);
        }
    }

    fn advance_commit_to(
        &mut self,
        target: LogIndex,
        quorums: Option<&BTreeMap<LogIndex, BTreeSet<ParticipantId>>>,
        out: &mut Vec<ReplicaOut>,
    ) {
        if target <= self.commit_index {
            return;
        }
        self.commit_index = target;
        // Apply immediately at commit; staleness between leader apply and
        // follower apply is visible in the metrics, not hidden.
        while self.applied < self.commit_index {
            self.applied += 1;
            let entry = self.persist.log[self.applied as usize - 1].clone();
            out.push(ReplicaOut::CommitRecord {
                index: self.applied,
                term: entry.term,
                digest: entry.payload.digest(),
                quorum: quorums.and_then(|q| q.get(&self.applied).cloned()),
            });
            out.push(ReplicaOut::Apply {
                index: self.applied,
                term: entry.term,
                payload: entry.payload,
            });
        }
        // Completed proposals.
        let committed = self.commit_index;
        let term_of = |r: &Replica, i: LogIndex| r.entry_term(i).unwrap_or(Term(0));
        let mut done = Vec::new();
        self.pending_props.retain(|p| {
            if p.index <= committed {
                done.push((p.client.clone(), p.index));
                false
            } else {
                true
            }
        });
        for (client, index) in done {
            out.push(ReplicaOut::Committed { client, index, term: term_of(self, index) });
        }
        if self.role == Role::Leader {
            let cfg = self.committed_config();
            if !cfg.contains(&self.me) {
                // Our own removal committed: stop leading.
                self.role = Role::Follower;
                self.leader_hint = None;
                self.election_deadline = SimTime::NEVER;
                out.push(ReplicaOut::SteppedDown { term: self.persist.current_term });
                for p in std::mem::take(&mut self.pending_props) {
                    out.push(ReplicaOut::Rejected {
                        client: p.client,
                        reason: Reject::NotLeader(None),
                    });
                }
                for r in std::mem::take(&mut self.pending_reads) {
                    out.push(ReplicaOut::ReadFailed {
                        client: r.client,
                        reason: Reject::NotLeader(None),
                    });
                }
            } else {
                // Start replicating to members added by a just-committed
                // config entry.
                let (_, last) = self.last_log();
                for peer in cfg {
                    if peer != self.me {
                        self.next_index.entry(peer.clone()).or_insert(last + 1);
                        self.match_index.entry(peer).or_insert(0);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn node(n: &str) -> ParticipantId {
        ParticipantId::Node(crate::types::NodeId::new(n))
    }

    fn client(n: u64) -> ClientRef {
        ClientRef {
            client: MachineId::new(crate::types::NodeId::new("c"), 0),
            op_id: n,
            attempt: 0,
        }
    }

    fn group(members: &[&str], mode: LeaderMode) -> GroupConfig {
        GroupConfig {
            id: GroupId::new("test", "system"),
            initial_members: members.iter().map(|m| node(m)).collect(),
            mode,
            election_base_us: 100_000,
            heartbeat_us: 20_000,
        }
    }

    fn key(name: &str) -> CoordinationKey {
        CoordinationKey::new("test", name)
    }

    /// Synchronous message pump: delivers every Send to the destination
    /// replica until no messages remain. Timing-free, for protocol logic.
    struct Pump {
        replicas: BTreeMap<ParticipantId, Replica>,
        rng: ChaCha12Rng,
        outs: Vec<ReplicaOut>,
        down: BTreeSet<ParticipantId>,
    }

    impl Pump {
        fn new(members: &[&str], mode: LeaderMode) -> Pump {
            let cfg = group(members, mode);
            let mut rng = ChaCha12Rng::seed_from_u64(7);
            let mut outs = Vec::new();
            let replicas = members
                .iter()
                .map(|m| {
                    let r = Replica::new(cfg.clone(), node(m), None, SimTime::ZERO, &mut rng, &mut outs);
                    (node(m), r)
                })
                .collect();
            // A designated leader heartbeats at construction; those empty
            // appends are immaterial for the timing-free pump, so drop them.
            outs.retain(|o| !matches!(o, ReplicaOut::Send { .. }));
            Pump { replicas, rng, outs, down: BTreeSet::new() }
        }

        /// Runs f on one replica, then delivers all resulting traffic to
        /// completion (messages may cascade).
        fn step(&mut self, who: &ParticipantId, f: impl FnOnce(&mut Replica, &mut ChaCha12Rng, &mut Vec<ReplicaOut>)) {
            let mut out = Vec::new();
            f(self.replicas.get_mut(who).unwrap(), &mut self.rng, &mut out);
            let mut queue: Vec<(ParticipantId, ParticipantId, ConsensusMsg)> = Vec::new();
            Self::collect(who, &mut out, &mut queue, &mut self.outs);
            while let Some((from, to, msg)) = queue.first().cloned() {
                queue.remove(0);
                if self.down.contains(&to) {
                    continue;
                }
                let mut out = Vec::new();
                if let Some(r) = self.replicas.get_mut(&to) {
                    r.handle(SimTime::ZERO, &from, msg, &mut self.rng, &mut out);
                }
                Self::collect(&to, &mut out, &mut queue, &mut self.outs);
            }
        }

        fn collect(
            sender: &ParticipantId,
            out: &mut Vec<ReplicaOut>,
            queue: &mut Vec<(ParticipantId, ParticipantId, ConsensusMsg)>,
            keep: &mut Vec<ReplicaOut>,
        ) {
            for o in out.drain(..) {
                match o {
                    ReplicaOut::Send { to, msg } => queue.push((sender.clone(), to, msg)),
                    other => keep.push(other),
                }
            }
        }

        /// All client-visible commit confirmations seen so far.
        fn committed(&self) -> Vec<(LogIndex, Term)> {
            self.outs
                .iter()
                .filter_map(|o| match o {
                    ReplicaOut::Committed { index, term, .. } => Some((*index, *term)),
                    _ => None,
                })
                .collect()
        }
    }

    #[test]
    fn ranked_group_starts_with_designated_leader_and_no_votes() {
        let p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Ranked);
        assert_eq!(p.replicas[&node("n1")].role(), Role::Leader);
        assert_eq!(p.replicas[&node("n2")].role(), Role::Follower);
        assert_eq!(p.replicas[&node("n1")].current_term(), Term(1));
        assert!(!p.outs.iter().any(|o| matches!(o, ReplicaOut::Send { .. })));
    }

    #[test]
    fn propose_commits_at_index_1_term_1() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Ranked);
        p.step(&node("n1"), |r, _rng, out| {
            r.propose(
                SimTime::ZERO,
                EntryPayload::Put { key: key("k"), value: b"v".to_vec() },
                client(1),
                SimTime::NEVER,
                out,
            );
        });
        let commits = p.committed();
        assert_eq!(commits, vec![(1, Term(1))]);
        // All members hold the entry after the cascade.
        for m in ["n1", "n2", "n3"] {
            assert_eq!(p.replicas[&node(m)].log().len(), 1);
        }
    }

    #[test]
    fn five_members_commit_with_two_unreachable() {
        let mut p = Pump::new(&["n1", "n2", "n3", "n4", "n5"], LeaderMode::Ranked);
        p.down.insert(node("n4"));
        p.down.insert(node("n5"));
        p.step(&node("n1"), |r, _rng, out| {
            r.propose(
                SimTime::ZERO,
                EntryPayload::Put { key: key("k"), value: b"v".to_vec() },
                client(1),
                SimTime::NEVER,
                out,
            );
        });
        assert_eq!(p.committed(), vec![(1, Term(1))]);
    }

    #[test]
    fn minority_cannot_commit() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Ranked);
        p.down.insert(node("n2"));
        p.down.insert(node("n3"));
        p.step(&node("n1"), |r, _rng, out| {
            r.propose(
                SimTime::ZERO,
                EntryPayload::Put { key: key("k"), value: b"v".to_vec() },
                client(1),
                SimTime::NEVER,
                out,
            );
        });
        assert!(p.committed().is_empty());
        // The deadline fires NoQuorum.
        let mut out = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let r = p.replicas.get_mut(&node("n1")).unwrap();
        r.tick(SimTime::NEVER, &mut rng, &mut out);
        assert!(out
            .iter()
            .any(|o| matches!(o, ReplicaOut::Rejected { reason: Reject::NoQuorum, .. })));
    }

    #[test]
    fn election_timeout_elects_single_candidate() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Elected);
        assert!(p.replicas.values().all(|r| r.role() == Role::Follower));
        p.step(&node("n2"), |r, rng, out| r.tick(SimTime(1_000_000), rng, out));
        assert_eq!(p.replicas[&node("n2")].role(), Role::Leader);
        assert_eq!(p.replicas[&node("n2")].current_term(), Term(1));
        // Leader uniqueness: nobody else is leader in term 1.
        assert!(p
            .replicas
            .values()
            .filter(|r| r.role() == Role::Leader && r.current_term() == Term(1))
            .count()
            == 1);
    }

    #[test]
    fn pinned_group_never_emits_votes_and_keeps_leader() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Pinned(node("n2")));
        assert_eq!(p.replicas[&node("n2")].role(), Role::Leader);
        // Election deadlines never fire.
        p.step(&node("n1"), |r, rng, out| r.tick(SimTime(10_000_000_000), rng, out));
        assert_eq!(p.replicas[&node("n1")].role(), Role::Follower);
        assert_eq!(p.replicas[&node("n2")].role(), Role::Leader);
        assert_eq!(p.replicas[&node("n2")].current_term(), Term(1));
    }

    #[test]
    fn non_leader_propose_is_rejected_with_hint() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Ranked);
        let mut out = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let _ = &mut rng;
        p.replicas.get_mut(&node("n2")).unwrap().propose(
            SimTime::ZERO,
            EntryPayload::Put { key: key("k"), value: b"v".to_vec() },
            client(9),
            SimTime::NEVER,
            &mut out,
        );
        match &out[0] {
            ReplicaOut::Rejected { reason: Reject::NotLeader(hint), .. } => {
                assert_eq!(hint.as_ref(), Some(&node("n1")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_change_requires_single_delta() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Ranked);
        let mut out = Vec::new();
        let bad: BTreeSet<ParticipantId> = [node("n4"), node("n5")].into();
        p.replicas.get_mut(&node("n1")).unwrap().propose(
            SimTime::ZERO,
            EntryPayload::Config { members: bad },
            client(1),
            SimTime::NEVER,
            &mut out,
        );
        assert!(matches!(
            &out[0],
            ReplicaOut::Rejected { reason: Reject::InvalidChange(_), .. }
        ));
    }

    #[test]
    fn add_then_remove_runs_through_old_quorums() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Ranked);
        // Create the n4 replica lazily: in the pump it must exist up front.
        let cfg = group(&["n1", "n2", "n3"], LeaderMode::Ranked);
        let mut out = Vec::new();
        let n4 = Replica::new(cfg, node("n4"), None, SimTime::ZERO, &mut p.rng, &mut out);
        p.replicas.insert(node("n4"), n4);

        let add: BTreeSet<ParticipantId> = [node("n1"), node("n2"), node("n3"), node("n4")].into();
        p.step(&node("n1"), |r, _rng, out| {
            r.propose(SimTime::ZERO, EntryPayload::Config { members: add }, client(1), SimTime::NEVER, out);
        });
        assert_eq!(p.replicas[&node("n1")].committed_config().len(), 4);
        assert_eq!(p.replicas[&node("n4")].log().len(), 1);

        let remove: BTreeSet<ParticipantId> = [node("n1"), node("n2"), node("n4")].into();
        p.step(&node("n1"), |r, _rng, out| {
            r.propose(SimTime::ZERO, EntryPayload::Config { members: remove.clone() }, client(2), SimTime::NEVER, out);
        });
        assert_eq!(p.replicas[&node("n1")].committed_config(), remove);
        // Quorums recorded for the second change are majorities of the
        // four-member config.
        let quorum_sizes: Vec<usize> = p
            .outs
            .iter()
            .filter_map(|o| match o {
                ReplicaOut::CommitRecord { index: 2, quorum: Some(q), .. } => Some(q.len()),
                _ => None,
            })
            .collect();
        assert!(quorum_sizes.iter().all(|s| *s >= 3), "{quorum_sizes:?}");
    }

    #[test]
    fn removed_candidate_cannot_win_under_new_config() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Elected);
        p.step(&node("n1"), |r, rng, out| r.tick(SimTime(1_000_000), rng, out));
        assert_eq!(p.replicas[&node("n1")].role(), Role::Leader);
        let remove: BTreeSet<ParticipantId> = [node("n1"), node("n2")].into();
        p.step(&node("n1"), |r, _rng, out| {
            r.propose(SimTime::ZERO, EntryPayload::Config { members: remove }, client(1), SimTime::NEVER, out);
        });
        // n3 was removed; its own log carries the config entry, so it goes
        // dormant instead of campaigning.
        p.step(&node("n3"), |r, rng, out| r.tick(SimTime(10_000_000), rng, out));
        assert_ne!(p.replicas[&node("n3")].role(), Role::Leader);
        // And n1/n2 refuse to grant it votes even if it asked.
        let mut out = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        p.replicas.get_mut(&node("n2")).unwrap().handle(
            SimTime::ZERO,
            &node("n3"),
            ConsensusMsg::VoteRequest {
                term: Term(99),
                candidate: node("n3"),
                last_index: 99,
                last_term: Term(99),
            },
            &mut rng,
            &mut out,
        );
        assert!(out.iter().any(|o| matches!(
            o,
            ReplicaOut::Send { msg: ConsensusMsg::VoteReply { granted: false, .. }, .. }
        )));
    }

    #[test]
    fn quorum_probe_reports_logged_and_committed_witnesses() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Ranked);
        p.step(&node("n1"), |r, _rng, out| {
            r.propose(SimTime::ZERO, EntryPayload::Put { key: key("k"), value: b"v1".to_vec() }, client(1), SimTime::NEVER, out);
        });
        let (logged, committed) = p.replicas[&node("n2")].local_probe(&key("k"));
        assert_eq!(logged.as_ref().map(|v| v.value.clone()), Some(b"v1".to_vec()));
        // n2 may or may not have learned the commit yet depending on the
        // cascade; its leader has.
        let (_, committed_leader) = p.replicas[&node("n1")].local_probe(&key("k"));
        assert_eq!(committed_leader.map(|v| v.value), Some(b"v1".to_vec()));
        let _ = committed;
    }

    #[test]
    fn leader_read_confirms_with_majority() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Ranked);
        p.step(&node("n1"), |r, _rng, out| {
            r.leader_read(SimTime::ZERO, key("k"), client(5), SimTime::NEVER, out);
        });
        assert!(p
            .outs
            .iter()
            .any(|o| matches!(o, ReplicaOut::ServeRead { client: c, .. } if c.op_id == 5)));
    }

    #[test]
    fn stale_term_append_is_rejected() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Elected);
        p.step(&node("n1"), |r, rng, out| r.tick(SimTime(1_000_000), rng, out));
        let mut out = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        p.replicas.get_mut(&node("n1")).unwrap().handle(
            SimTime::ZERO,
            &node("n3"),
            ConsensusMsg::Append {
                term: Term(0),
                leader: node("n3"),
                prev_index: 0,
                prev_term: Term(0),
                entries: vec![],
                commit_index: 0,
            },
            &mut rng,
            &mut out,
        );
        match &out[0] {
            ReplicaOut::Send { msg: ConsensusMsg::AppendReply { success, term, .. }, .. } => {
                assert!(!success);
                assert_eq!(*term, Term(1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mutant_quorum_commits_without_majority() {
        let mut p = Pump::new(&["n1", "n2", "n3"], LeaderMode::Ranked);
        p.down.insert(node("n2"));
        p.down.insert(node("n3"));
        p.replicas
            .get_mut(&node("n1"))
            .unwrap()
            .set_quorum_rule(QuorumRule::FloorHalf);
        p.step(&node("n1"), |r, _rng, out| {
            r.propose(SimTime::ZERO, EntryPayload::Put { key: key("k"), value: b"v".to_vec() }, client(1), SimTime::NEVER, out);
        });
        // The broken rule lets a lone leader commit.
        assert_eq!(p.committed(), vec![(1, Term(1))]);
    }
}
