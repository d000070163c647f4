//! Run metrics: per-op latency and outcome, staleness samples, message and
//! byte counts per (scope, message kind), and availability per partition
//! epoch. Rendered as a single long-format CSV (schema
//! `fogcoord-metrics-v1`, `docs/formats.md`).

use std::collections::BTreeMap;

use crate::types::{CoordinationKey, NodeId, Strategy};

pub const METRICS_SCHEMA: &str = "fogcoord-metrics-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpMetric {
    pub op_id: u64,
    pub node: NodeId,
    pub kind: &'static str,
    pub key: Option<CoordinationKey>,
    pub strategy: Option<Strategy>,
    pub submitted_us: u64,
    pub completed_us: u64,
    pub outcome: String,
    pub ok: bool,
    /// Returned value for reads (escaped), for history checking.
    pub value: Option<String>,
}

impl OpMetric {
    pub fn latency_us(&self) -> u64 {
        self.completed_us.saturating_sub(self.submitted_us)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StalenessSample {
    pub key: CoordinationKey,
    pub origin: NodeId,
    pub participant: NodeId,
    pub written_us: u64,
    pub visible_us: u64,
}

impl StalenessSample {
    pub fn staleness_us(&self) -> u64 {
        self.visible_us.saturating_sub(self.written_us)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MsgCounter {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes_sent: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochAvailability {
    pub start_us: u64,
    pub end_us: u64,
    pub strategy: Strategy,
    pub ok: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub ops: Vec<OpMetric>,
    pub staleness: Vec<StalenessSample>,
    pub msgs: BTreeMap<(String, String), MsgCounter>,
    pub availability: Vec<EpochAvailability>,
}

impl Metrics {
    pub fn count_sent(&mut self, scope: &str, kind: &str, bytes: u32) {
        let c = self.msgs.entry((scope.to_string(), kind.to_string())).or_default();
        c.sent += 1;
        c.bytes_sent += bytes as u64;
    }

    pub fn count_delivered(&mut self, scope: &str, kind: &str) {
        self.msgs.entry((scope.to_string(), kind.to_string())).or_default().delivered += 1;
    }

    pub fn count_dropped(&mut self, scope: &str, kind: &str) {
        self.msgs.entry((scope.to_string(), kind.to_string())).or_default().dropped += 1;
    }

    /// Splits completed ops into partition epochs and tallies availability
    /// per strategy. `boundaries` are the partition/heal times.
    pub fn compute_availability(&mut self, boundaries: &[u64], end_us: u64) {
        let mut edges = vec![0u64];
        edges.extend_from_slice(boundaries);
        edges.push(end_us);
        edges.dedup();
        self.availability.clear();
        for w in edges.windows(2) {
            let (start, end) = (w[0], w[1]);
            for strategy in [Strategy::Eventual, Strategy::Strict] {
                let mut ok = 0;
                let mut total = 0;
                for op in &self.ops {
                    if op.strategy == Some(strategy)
                        && op.submitted_us >= start
                        && op.submitted_us < end
                    {
                        total += 1;
                        if op.ok {
                            ok += 1;
                        }
                    }
                }
                if total > 0 {
                    self.availability.push(EpochAvailability {
                        start_us: start,
                        end_us: end,
                        strategy,
                        ok,
                        total,
                    });
                }
            }
        }
    }

    /// Latencies (us) of successful ops matching the filter.
    pub fn latencies(
        &self,
        kind: &str,
        strategy: Option<Strategy>,
    ) -> Vec<u64> {
        let mut v: Vec<u64> = self
            .ops
            .iter()
            .filter(|o| o.kind == kind && o.ok && (strategy.is_none() || o.strategy == strategy))
            .map(|o| o.latency_us())
            .collect();
        v.sort_unstable();
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("#schema={METRICS_SCHEMA}\n"));
        out.push_str("record,op_id,node,op,key,strategy,outcome,ok,submitted_us,completed_us,latency_us,participant,written_us,visible_us,staleness_us,scope,msg_kind,sent,delivered,dropped,bytes_sent,epoch_start_us,epoch_end_us,ok_ops,total_ops,value\n");
        for o in &self.ops {
            out.push_str(&format!(
                "op,{},{},{},{},{},{},{},{},{},{},,,,,,,,,,,,,,,{}\n",
                o.op_id,
                o.node,
                o.kind,
                o.key.as_ref().map(|k| k.to_string()).unwrap_or_default(),
                o.strategy.map(|s| s.to_string()).unwrap_or_default(),
                o.outcome,
                o.ok,
                o.submitted_us,
                o.completed_us,
                o.latency_us(),
                o.value.clone().unwrap_or_default(),
            ));
        }
        for s in &self.staleness {
            out.push_str(&format!(
                "staleness,,,,{},,,,,,,{},{},{},{},,,,,,,,,,,\n",
                s.key,
                s.participant,
                s.written_us,
                s.visible_us,
                s.staleness_us(),
            ));
        }
        for ((scope, kind), c) in &self.msgs {
            out.push_str(&format!(
                "messages,,,,,,,,,,,,,,,{},{},{},{},{},{},,,,,\n",
                scope, kind, c.sent, c.delivered, c.dropped, c.bytes_sent,
            ));
        }
        for a in &self.availability {
            out.push_str(&format!(
                "availability,,,,,{},,,,,,,,,,,,,,,,{},{},{},{},\n",
                a.strategy, a.start_us, a.end_us, a.ok, a.total,
            ));
        }
        out
    }
}

/// Index of the p-th percentile in a sorted sample (nearest-rank).
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn median(sorted: &[u64]) -> Option<u64> {
    percentile(sorted, 50.0)
}
