//! Error types shared across the crate.

use thiserror::Error;

use crate::types::{CoordinationKey, NodeId, ReplicaSetId};

/// Configuration and registry errors, surfaced during scenario setup.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("namespace {0:?} already registered")]
    DuplicateNamespace(String),
    #[error("invalid descriptor for {namespace:?}: field {field}: {reason}")]
    InvalidDescriptor {
        namespace: String,
        field: String,
        reason: String,
    },
    #[error("no descriptor matches key {0}")]
    NoDescriptor(CoordinationKey),
    #[error("unknown replica set {0}")]
    UnknownReplicaSet(ReplicaSetId),
    #[error("participation subset {predicate:?} selects no members in scope {scope}")]
    EmptySubset { predicate: String, scope: String },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// Scenario file problems: parse failures or invariant violations, with
/// enough location context to fix the file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid scenario at {location}: {reason}")]
pub struct ScenarioError {
    pub location: String,
    pub reason: String,
}

impl ScenarioError {
    pub fn new(location: impl Into<String>, reason: impl Into<String>) -> Self {
        ScenarioError {
            location: location.into(),
            reason: reason.into(),
        }
    }
}

/// Failures of a whole simulation run.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error(transparent)]
    InvalidScenario(#[from] ScenarioError),
    #[error("event budget exceeded after {events} events at t={time_us}us (runaway schedule?)")]
    EventBudgetExceeded { events: u64, time_us: u64 },
}
