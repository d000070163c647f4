//! The run trace: one CSV row per simulated event, byte-deterministic for a
//! given (scenario, seed).
//!
//! Columns (schema `fogcoord-trace-v1`, see `docs/formats.md`):
//! `time_us,seq,kind,from,to,key,msg_kind,size_bytes,note`

pub const TRACE_SCHEMA: &str = "fogcoord-trace-v1";

/// One trace row. All fields are already rendered; the writer only joins
/// them, which keeps byte determinism trivial to audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub time_us: u64,
    pub kind: &'static str,
    pub from: String,
    pub to: String,
    pub key: String,
    pub msg_kind: String,
    pub size_bytes: u32,
    pub note: String,
}

#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    rows: Vec<TraceRow>,
}

impl TraceLog {
    pub fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Renders the whole log. The `seq` column is the row ordinal.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 + self.rows.len() * 48);
        out.push_str(&format!("#schema={TRACE_SCHEMA}\n"));
        out.push_str("time_us,seq,kind,from,to,key,msg_kind,size_bytes,note\n");
        for (seq, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.time_us, seq, r.kind, r.from, r.to, r.key, r.msg_kind, r.size_bytes, r.note
            ));
        }
        out
    }

    /// Parses a stored trace. Tolerates only the exact schema this version
    /// writes; fields never contain commas (byte payloads are escaped).
    pub fn parse_csv(text: &str) -> Result<TraceLog, String> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l == format!("#schema={TRACE_SCHEMA}") => {}
            other => return Err(format!("unexpected trace schema line: {other:?}")),
        }
        match lines.next() {
            Some(l) if l.starts_with("time_us,") => {}
            other => return Err(format!("missing trace header: {other:?}")),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.splitn(9, ',').collect();
            if cols.len() != 9 {
                return Err(format!("trace line {} has {} columns", i + 3, cols.len()));
            }
            rows.push(TraceRow {
                time_us: cols[0].parse().map_err(|e| format!("line {}: {e}", i + 3))?,
                kind: intern_kind(cols[2]),
                from: cols[3].to_string(),
                to: cols[4].to_string(),
                key: cols[5].to_string(),
                msg_kind: cols[6].to_string(),
                size_bytes: cols[7].parse().map_err(|e| format!("line {}: {e}", i + 3))?,
                note: cols[8].to_string(),
            });
        }
        Ok(TraceLog { rows })
    }
}

/// Trace row kinds are a closed set.
fn intern_kind(s: &str) -> &'static str {
    const KINDS: &[&str] = &[
        "send",
        "deliver",
        "drop",
        "op-start",
        "op-done",
        "commit",
        "apply",
        "leader",
        "stepdown",
        "fault",
        "facade",
        "view",
        "scope-violation",
        "final-state",
    ];
    KINDS.iter().find(|k| **k == s).copied().unwrap_or("unknown")
}
