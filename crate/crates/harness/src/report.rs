//! Machine-readable outcome of one scenario run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel: String,
    pub generated: u64,
    /// Data frames the cloud received, duplicates included.
    pub delivered: u64,
    pub stored: u64,
    pub lossless: bool,
    pub gap_free: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationLine {
    pub ts_ms: i64,
    pub rule_id: String,
    pub actuation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub name: String,
    pub node_id: String,
    pub lifecycle: String,
    pub queued_at_end: usize,
    pub dropped: u64,
    pub events: usize,
    pub actuations: Vec<ActuationLine>,
    pub flood_attempts: u64,
    pub refused_connects: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinSummary {
    pub node_id: String,
    pub converged: bool,
    pub desired_version: u64,
    pub ack_version: u64,
    pub matches_device: bool,
    /// Virtual time at which the twin last became converged after a
    /// desired-state change.
    pub converged_ms: Option<i64>,
    pub last_desired_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentSummary {
    pub incident_id: String,
    pub node_id: String,
    pub kind: String,
    pub opened_ms: i64,
    pub state: String,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageSummary {
    pub node_id: String,
    pub start_ms: i64,
    pub end_ms: i64,
    pub reconnect_ms: Option<i64>,
    pub drained_ms: Option<i64>,
    pub backlog_at_reconnect: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloodSummary {
    pub node_id: String,
    pub start_ms: i64,
    pub end_ms: i64,
    pub incident_id: Option<String>,
    pub incident_ms: Option<i64>,
    pub admitted_after_quarantine: u64,
    pub rejected_after_quarantine: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewaySummary {
    pub admitted: u64,
    pub rejected: BTreeMap<String, u64>,
    pub alerts: u64,
    pub acks_dropped: u64,
    pub duplicates_published: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub emissions: u64,
    pub late: u64,
    pub notifications: usize,
    pub windows_checked: u64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: i64,
    pub ticks: u64,
    pub nodes: Vec<NodeReport>,
    pub channels: Vec<ChannelReport>,
    pub twins: Vec<TwinSummary>,
    pub incidents: Vec<IncidentSummary>,
    pub outages: Vec<OutageSummary>,
    pub floods: Vec<FloodSummary>,
    pub gateway: GatewaySummary,
    pub stream: StreamSummary,
    pub assertions: Vec<AssertionResult>,
    pub passed: bool,
}

impl RunReport {
    pub fn total_generated(&self) -> u64 {
        self.channels.iter().map(|c| c.generated).sum()
    }

    pub fn total_stored(&self) -> u64 {
        self.channels.iter().map(|c| c.stored).sum()
    }

    pub fn assertion(&self, name: &str) -> Option<&AssertionResult> {
        self.assertions.iter().find(|a| a.name == name)
    }
}
