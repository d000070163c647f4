//! Coordination middleware for geo-distributed fog platforms, executed and
//! verified inside a deterministic simulated network.
//!
//! Each set of coordination data (a key namespace) is configured along two
//! axes: a *strategy* — eventually consistent CRDT dissemination or strictly
//! consistent consensus — and a *level* — the whole system, one replica set,
//! or the machines of a single fog node. The middleware routes writes and
//! reads accordingly, maintains local caches, runs gossip anti-entropy, and
//! stores replica-set membership as coordination data itself.
//!
//! The crate is organised around that flow:
//!
//! * [`types`] — identities, keys, and the descriptor registry.
//! * [`crdt`] — the state-based CRDT kernel (LWW register, OR-set).
//! * [`consensus`] — leader-based log-replicated majority consensus.
//! * [`membership`] — participant resolution and membership-as-data.
//! * [`coordinator`] — the per-machine middleware facade.
//! * [`simnet`] — the deterministic discrete-event network simulator.
//! * [`scenario`] — scenario files (topology, faults, workload).
//! * [`trace`] / [`metrics`] — run artifacts (CSV, fully deterministic).
//! * [`check`] — linearizability, convergence, safety and scoping checkers.
//! * [`sweep`] — parameter sweeps and aggregate summaries.
//!
//! Everything is pure computation over seeded randomness: a run is a
//! function of (scenario, seed), byte-for-byte.

pub mod check;
pub mod consensus;
pub mod coordinator;
pub mod crdt;
pub mod error;
pub mod membership;
pub mod metrics;
pub mod scenario;
pub mod simnet;
pub mod sweep;
pub mod time;
pub mod trace;
pub mod types;
pub mod util;

pub use error::{ConfigError, RunError, ScenarioError};
pub use scenario::Scenario;
pub use simnet::{run_scenario, RunOptions, RunOutput};

pub use time::SimTime;
