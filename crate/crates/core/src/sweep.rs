//! Parameter sweeps: run the cross product of strategy, level, write
//! ratio, latency scale and seed over a template scenario, and summarise
//! each cell (latency percentiles, availability, message cost, staleness)
//! as one CSV row.
//!
//! The first declared data type in the template is the *subject*: the
//! strategy and level dimensions rewrite its descriptor, the write-ratio
//! dimension regenerates its workload, and the latency scale multiplies
//! the whole latency matrix. Cells share nothing and may run in parallel.

use std::collections::BTreeMap;

use crate::error::ScenarioError;
use crate::metrics::{median, percentile};
use crate::scenario::{Scenario, ScenarioFile, WorkloadFile};
use crate::simnet::{run_scenario, RunOptions, RunOutput};

pub const SUMMARY_SCHEMA: &str = "fogcoord-summary-v1";

/// Dimension lists; empty means "keep the template's setting".
#[derive(Debug, Clone, Default)]
pub struct Dims {
    pub strategy: Vec<String>,
    pub level: Vec<String>,
    pub write_ratio: Vec<f64>,
    pub latency_scale: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// One point of the cross product.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub strategy: Option<String>,
    pub level: Option<String>,
    pub write_ratio: Option<f64>,
    pub latency_scale: Option<f64>,
    pub seed: u64,
}

impl Cell {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(s) = &self.strategy {
            parts.push(format!("strategy={s}"));
        }
        if let Some(l) = &self.level {
            parts.push(format!("level={l}"));
        }
        if let Some(w) = self.write_ratio {
            parts.push(format!("write_ratio={w}"));
        }
        if let Some(l) = self.latency_scale {
            parts.push(format!("latency_scale={l}"));
        }
        parts.push(format!("seed={}", self.seed));
        parts.join(" ")
    }
}

/// Cross product of all dimension lists.
pub fn expand(dims: &Dims, default_seed: u64) -> Vec<Cell> {
    fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().cloned().map(Some).collect()
        }
    }
    let seeds = if dims.seeds.is_empty() { vec![default_seed] } else { dims.seeds.clone() };
    let mut cells = Vec::new();
    for strategy in axis(&dims.strategy) {
        for level in axis(&dims.level) {
            for write_ratio in axis(&dims.write_ratio) {
                for latency_scale in axis(&dims.latency_scale) {
                    for seed in &seeds {
                        cells.push(Cell {
                            strategy: strategy.clone(),
                            level: level.clone(),
                            write_ratio,
                            latency_scale,
                            seed: *seed,
                        });
                    }
                }
            }
        }
    }
    cells
}

/// A parsed template from which cells derive concrete scenarios.
#[derive(Debug, Clone)]
pub struct Template {
    file: ScenarioFile,
}

impl Template {
    pub fn parse(text: &str) -> Result<Template, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text)
            .map_err(|e| ScenarioError::new("toml", e.to_string().trim().replace('\n', "; ")))?;
        if file.data_types.is_empty() {
            return Err(ScenarioError::new("data_types", "sweep templates need a subject data type"));
        }
        // The template itself must be a valid scenario.
        Scenario::from_file(file.clone())?;
        Ok(Template { file })
    }

    pub fn default_seed(&self) -> u64 {
        self.file.seed
    }

    /// Materialises one cell into a runnable scenario.
    pub fn apply(&self, cell: &Cell) -> Result<Scenario, ScenarioError> {
        let mut file = self.file.clone();
        file.seed = cell.seed;
        let subject_ns = file.data_types[0].namespace.clone();
        if let Some(strategy) = &cell.strategy {
            let d = &mut file.data_types[0];
            d.strategy = strategy.clone();
            // Defaults re-derive per strategy.
            d.read_mode = None;
            d.crdt = None;
            d.pinned_leader = None;
        }
        if let Some(level) = &cell.level {
            file.data_types[0].level = level.clone();
        }
        if let Some(scale) = cell.latency_scale {
            file.topology.default_latency_ms *= scale;
            file.topology.intra_node_latency_ms *= scale;
            for l in &mut file.topology.links {
                l.latency_ms *= scale;
            }
        }
        if let Some(ratio) = cell.write_ratio {
            file.workload = generate_workload(&file, &subject_ns, ratio);
        } else {
            // Repoint existing subject ops in case the namespace moved.
            for w in &mut file.workload {
                if let Some(k) = &w.key {
                    if !k.starts_with(&format!("{subject_ns}/")) && !k.contains('/') {
                        w.key = Some(format!("{subject_ns}/{k}"));
                    }
                }
            }
        }
        // Give the run room for the slowest cells: ops must resolve and
        // gossip must quiesce within the end time.
        let max_lat = file
            .topology
            .links
            .iter()
            .map(|l| l.latency_ms)
            .fold(file.topology.default_latency_ms, f64::max);
        let last_at = file.workload.iter().map(|w| w.at_ms).fold(0.0, f64::max);
        let deadline = file
            .workload
            .iter()
            .filter_map(|w| w.deadline_ms)
            .fold(1_000.0, f64::max);
        let quiesce = 30.0 * (5.0 * max_lat).max(1.0);
        file.end_ms = file.end_ms.max(last_at + deadline + quiesce + 1_000.0);
        Scenario::from_file(file)
    }
}

/// Deterministic read/write mix over the subject namespace: three keys,
/// nodes round-robin, one op every 150 ms.
fn generate_workload(file: &ScenarioFile, subject_ns: &str, ratio: f64) -> Vec<WorkloadFile> {
    let nodes: Vec<String> = file.topology.nodes.iter().map(|n| n.name.clone()).collect();
    let count = file.workload.len().max(20);
    let mut ops = Vec::new();
    let mut writes = 0usize;
    for i in 0..count {
        let want_writes = (ratio * (i + 1) as f64).round() as usize;
        let is_write = writes < want_writes;
        let node = nodes[i % nodes.len()].clone();
        let key = format!("{subject_ns}/k{}", i % 3);
        let at_ms = 200.0 + i as f64 * 150.0;
        ops.push(WorkloadFile {
            at_ms,
            node,
            op: if is_write { "write" } else { "read" }.to_string(),
            key: Some(key),
            value: if is_write { Some(format!("v{i}")) } else { None },
            deadline_ms: Some(5_000.0),
            set: None,
            members: None,
        });
        if is_write {
            writes += 1;
        }
    }
    ops
}

/// One summary row per (cell, run).
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub cell: Cell,
    pub error: Option<String>,
    pub ops_total: u64,
    pub ops_ok: u64,
    pub write_median_us: Option<u64>,
    pub write_p99_us: Option<u64>,
    pub read_median_us: Option<u64>,
    pub read_p99_us: Option<u64>,
    pub staleness_median_us: Option<u64>,
    pub staleness_p99_us: Option<u64>,
    pub msgs_sent: u64,
    pub bytes_sent: u64,
}

pub fn summarize(cell: &Cell, out: &RunOutput) -> CellSummary {
    let writes = out.metrics.latencies("write", None);
    let reads = out.metrics.latencies("read", None);
    let mut staleness: Vec<u64> =
        out.metrics.staleness.iter().map(|s| s.staleness_us()).collect();
    staleness.sort_unstable();
    let (msgs_sent, bytes_sent) = out
        .metrics
        .msgs
        .values()
        .fold((0, 0), |(m, b), c| (m + c.sent, b + c.bytes_sent));
    CellSummary {
        cell: cell.clone(),
        error: None,
        ops_total: out.metrics.ops.len() as u64,
        ops_ok: out.metrics.ops.iter().filter(|o| o.ok).count() as u64,
        write_median_us: median(&writes),
        write_p99_us: percentile(&writes, 99.0),
        read_median_us: median(&reads),
        read_p99_us: percentile(&reads, 99.0),
        staleness_median_us: median(&staleness),
        staleness_p99_us: percentile(&staleness, 99.0),
        msgs_sent,
        bytes_sent,
    }
}

/// Runs one cell end to end. Failures land in the summary row; the sweep
/// continues.
pub fn run_cell(template: &Template, cell: &Cell) -> CellSummary {
    match template.apply(cell) {
        Err(e) => failed(cell, e.to_string()),
        Ok(sc) => match run_scenario(&sc, &RunOptions::default()) {
            Err(e) => failed(cell, e.to_string()),
            Ok(out) => summarize(cell, &out),
        },
    }
}

fn failed(cell: &Cell, error: String) -> CellSummary {
    CellSummary {
        cell: cell.clone(),
        error: Some(error),
        ops_total: 0,
        ops_ok: 0,
        write_median_us: None,
        write_p99_us: None,
        read_median_us: None,
        read_p99_us: None,
        staleness_median_us: None,
        staleness_p99_us: None,
        msgs_sent: 0,
        bytes_sent: 0,
    }
}

pub fn summary_csv(rows: &[CellSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!("#schema={SUMMARY_SCHEMA}\n"));
    out.push_str(
        "strategy,level,write_ratio,latency_scale,seed,error,ops_total,ops_ok,\
         write_median_us,write_p99_us,read_median_us,read_p99_us,\
         staleness_median_us,staleness_p99_us,msgs_sent,bytes_sent\n",
    );
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.cell.strategy.clone().unwrap_or_default(),
            r.cell.level.clone().unwrap_or_default(),
            r.cell.write_ratio.map(|x| x.to_string()).unwrap_or_default(),
            r.cell.latency_scale.map(|x| x.to_string()).unwrap_or_default(),
            r.cell.seed,
            r.error.clone().unwrap_or_default().replace(',', ";"),
            r.ops_total,
            r.ops_ok,
            opt(r.write_median_us),
            opt(r.write_p99_us),
            opt(r.read_median_us),
            opt(r.read_p99_us),
            opt(r.staleness_median_us),
            opt(r.staleness_p99_us),
            r.msgs_sent,
            r.bytes_sent,
        ));
    }
    out
}

/// Parses a summary CSV back into labelled numeric columns for plotting.
pub fn parse_summary_csv(text: &str) -> Result<Vec<BTreeMap<String, String>>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == format!("#schema={SUMMARY_SCHEMA}") => {}
        other => return Err(format!("unexpected summary schema line: {other:?}")),
    }
    let header: Vec<String> = lines
        .next()
        .ok_or("missing header")?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(format!("row has {} columns, header {}", cols.len(), header.len()));
        }
        rows.push(header.iter().cloned().zip(cols.iter().map(|c| c.to_string())).collect());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEMPLATE: &str = r#"
schema_version = 1
seed = 11
end_ms = 4000

[topology]
default_latency_ms = 10.0

[[topology.nodes]]
name = "a"
[[topology.nodes]]
name = "b"
[[topology.nodes]]
name = "c"

[replica_sets]
r1 = ["a", "b", "c"]

[[data_types]]
namespace = "data"
strategy = "eventual"
level = "system"

[[workload]]
at_ms = 100
node = "a"
op = "write"
key = "data/k0"
value = "v"
"#;

    #[test]
    fn expand_is_a_cross_product() {
        let dims = Dims {
            strategy: vec!["eventual".into(), "strict".into()],
            level: vec!["system".into(), "replica-set:r1".into()],
            write_ratio: vec![],
            latency_scale: vec![1.0, 4.0],
            seeds: vec![1, 2, 3],
        };
        assert_eq!(expand(&dims, 0).len(), 2 * 2 * 2 * 3);
    }

    #[test]
    fn strategy_dimension_rewrites_subject() {
        let t = Template::parse(TEMPLATE).unwrap();
        let cell = Cell {
            strategy: Some("strict".into()),
            level: None,
            write_ratio: None,
            latency_scale: None,
            seed: 5,
        };
        let sc = t.apply(&cell).unwrap();
        let d = sc
            .registry
            .lookup(&crate::types::CoordinationKey::new("data", "k0"))
            .unwrap();
        assert_eq!(d.strategy, crate::types::Strategy::Strict);
        assert_eq!(sc.seed, 5);
    }

    #[test]
    fn write_ratio_regenerates_workload() {
        let t = Template::parse(TEMPLATE).unwrap();
        let cell = Cell {
            strategy: None,
            level: None,
            write_ratio: Some(0.5),
            latency_scale: None,
            seed: 11,
        };
        let sc = t.apply(&cell).unwrap();
        let writes = sc
            .workload
            .iter()
            .filter(|w| matches!(w.op, crate::coordinator::ClientOp::Write { .. }))
            .count();
        assert_eq!(sc.workload.len(), 20);
        assert_eq!(writes, 10);
    }

    #[test]
    fn summary_csv_roundtrips() {
        let t = Template::parse(TEMPLATE).unwrap();
        let cells = expand(
            &Dims { strategy: vec!["eventual".into()], ..Default::default() },
            t.default_seed(),
        );
        let rows: Vec<CellSummary> = cells.iter().map(|c| run_cell(&t, c)).collect();
        assert!(rows[0].error.is_none(), "{:?}", rows[0].error);
        let csv = summary_csv(&rows);
        let parsed = parse_summary_csv(&csv).unwrap();
        assert_eq!(parsed.len(), rows.len());
        assert_eq!(parsed[0]["strategy"], "eventual");
    }
}
