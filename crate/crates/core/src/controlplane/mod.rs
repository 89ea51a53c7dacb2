//! Node registry, lifecycle, traffic monitoring and incident handling.
//!
//! Every mutation is appended to a JSON-lines event log; replaying the log
//! rebuilds the registry and incident book. Credentials are never logged,
//! they are re-derived from the system secret.

mod monitor;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::Sha256;
use thiserror::Error;

pub use monitor::{Monitor, MonitorConfig, NodeMonitor, Verdict};

use crate::infomodel::ModelRegistry;
use crate::msgbus::{Authenticator, Broker, Qos, SessionId};
use crate::types::Timestamp;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("illegal transition {from} -> {to} for `{node}`")]
    IllegalTransition { node: String, from: Lifecycle, to: Lifecycle },
    #[error("node `{0}` is not active")]
    NotActive(String),
    #[error("unknown incident `{0}`")]
    UnknownIncident(String),
    #[error("incident `{0}` is already closed")]
    IncidentClosed(String),
    #[error("node `{0}` is not quarantined")]
    NodeNotQuarantined(String),
    #[error("malformed status report: {0}")]
    BadStatus(String),
    #[error("event log {path}: line {line}: {reason}")]
    BadLog { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Created,
    Commissioned,
    Active,
    Quarantined,
    Decommissioned,
}

impl Lifecycle {
    pub fn can_move_to(self, to: Lifecycle) -> bool {
        use Lifecycle::*;
        matches!(
            (self, to),
            (Created, Commissioned)
                | (Commissioned, Active)
                | (Active, Quarantined)
                | (Quarantined, Active)
                | (Active, Decommissioned)
                | (Quarantined, Decommissioned)
        )
    }

    pub fn parse(s: &str) -> Option<Lifecycle> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("lifecycle serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

/// Hex HMAC-SHA256 of `node_id ‖ key_epoch` (epoch as 8 big-endian bytes).
pub fn derive_credential(secret: &[u8], node_id: &str, key_epoch: u64) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("HMAC takes keys of any length");
    mac.update(node_id.as_bytes());
    mac.update(&key_epoch.to_be_bytes());
    hex::encode(mac.finalize().into_bytes().as_slice())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub broker: String,
    pub topics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub node_id: String,
    pub name: String,
    pub class_name: String,
    /// Absent once decommissioned.
    pub credential: Option<String>,
    pub key_epoch: u64,
    pub lifecycle: Lifecycle,
    pub endpoints: Endpoints,
    pub firmware_version: String,
    pub pending_update: Option<String>,
    pub created_ts: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentKind {
    TrafficFlood,
    AuthProbe,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentState {
    Open,
    Mitigated,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentAction {
    pub ts: Timestamp,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub incident_id: String,
    pub node_id: String,
    pub kind: IncidentKind,
    pub opened_ts: Timestamp,
    pub state: IncidentState,
    pub actions: Vec<IncidentAction>,
}

/// Registry event log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Commissioned {
        ts: Timestamp,
        node_id: String,
        name: String,
        class_name: String,
    },
    Transition {
        ts: Timestamp,
        node_id: String,
        from: Lifecycle,
        to: Lifecycle,
    },
    KeyRotated {
        ts: Timestamp,
        node_id: String,
        key_epoch: u64,
    },
    UpdatePushed {
        ts: Timestamp,
        node_id: String,
        version: String,
        digest: String,
    },
    Firmware {
        ts: Timestamp,
        node_id: String,
        version: String,
    },
    IncidentOpened {
        ts: Timestamp,
        incident_id: String,
        node_id: String,
        kind: IncidentKind,
    },
    IncidentAction {
        ts: Timestamp,
        incident_id: String,
        action: String,
    },
    IncidentState {
        ts: Timestamp,
        incident_id: String,
        state: IncidentState,
    },
}

#[derive(Debug, Clone)]
pub struct ControlConfig {
    pub secret: Vec<u8>,
    pub broker_addr: String,
    pub monitor: MonitorConfig,
    /// Refused CONNECT attempts per bucket that open an auth-probe incident.
    pub probe_threshold: u64,
}

impl ControlConfig {
    pub fn new(secret: &[u8]) -> Self {
        ControlConfig {
            secret: secret.to_vec(),
            broker_addr: "127.0.0.1:1883".into(),
            monitor: MonitorConfig::default(),
            probe_threshold: 10,
        }
    }
}

/// What a monitoring bucket did to a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub verdict: Verdict,
    pub incident: Option<String>,
}

pub struct ControlPlane {
    config: ControlConfig,
    entries: BTreeMap<String, RegistryEntry>,
    counter: u64,
    incidents: BTreeMap<String, Incident>,
    incident_counter: u64,
    monitor: Monitor,
    log_path: Option<PathBuf>,
    service: Option<SessionId>,
}

impl ControlPlane {
    pub fn new(config: ControlConfig) -> Self {
        ControlPlane {
            monitor: Monitor::new(config.monitor),
            config,
            entries: BTreeMap::new(),
            counter: 0,
            incidents: BTreeMap::new(),
            incident_counter: 0,
            log_path: None,
            service: None,
        }
    }

    /// Replays the event log at `path` (if present) and appends all further
    /// events to it.
    pub fn open(config: ControlConfig, path: &Path) -> Result<Self, ControlError> {
        let mut cp = ControlPlane::new(config);
        if path.exists() {
            let text = fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let ev: LogEvent = serde_json::from_str(line).map_err(|e| ControlError::BadLog {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                cp.apply(&ev);
            }
        }
        cp.log_path = Some(path.to_path_buf());
        Ok(cp)
    }

    fn apply(&mut self, ev: &LogEvent) {
        match ev {
            LogEvent::Commissioned {
                ts,
                node_id,
                name,
                class_name,
            } => {
                if let Some(n) = node_id.strip_prefix("n-").and_then(|s| s.parse::<u64>().ok()) {
                    self.counter = self.counter.max(n);
                }
                let entry = RegistryEntry {
                    node_id: node_id.clone(),
                    name: name.clone(),
                    class_name: class_name.clone(),
                    credential: Some(derive_credential(&self.config.secret, node_id, 0)),
                    key_epoch: 0,
                    lifecycle: Lifecycle::Commissioned,
                    endpoints: Endpoints {
                        broker: self.config.broker_addr.clone(),
                        topics: vec![
                            format!("data/{node_id}/#"),
                            format!("twin/{node_id}/reported"),
                            format!("twin/{node_id}/desired"),
                            format!("mgmt/{node_id}/status"),
                            format!("mgmt/{node_id}/update"),
                            format!("alerts/{node_id}"),
                        ],
                    },
                    firmware_version: "0.0.0".into(),
                    pending_update: None,
                    created_ts: *ts,
                };
                self.entries.insert(node_id.clone(), entry);
            }
            LogEvent::Transition { node_id, to, .. } => {
                if let Some(e) = self.entries.get_mut(node_id) {
                    e.lifecycle = *to;
                    if *to == Lifecycle::Decommissioned {
                        e.credential = None;
                    }
                }
            }
            LogEvent::KeyRotated { node_id, key_epoch, .. } => {
                if let Some(e) = self.entries.get_mut(node_id) {
                    e.key_epoch = *key_epoch;
                    if e.credential.is_some() {
                        e.credential = Some(derive_credential(&self.config.secret, node_id, *key_epoch));
                    }
                }
            }
            LogEvent::UpdatePushed { node_id, version, .. } => {
                if let Some(e) = self.entries.get_mut(node_id) {
                    e.pending_update = Some(version.clone());
                }
            }
            LogEvent::Firmware { node_id, version, .. } => {
                if let Some(e) = self.entries.get_mut(node_id) {
                    e.firmware_version = version.clone();
                    if e.pending_update.as_deref() == Some(version) {
                        e.pending_update = None;
                    }
                }
            }
            LogEvent::IncidentOpened {
                ts,
                incident_id,
                node_id,
                kind,
            } => {
                if let Some(n) = incident_id.strip_prefix("inc-").and_then(|s| s.parse::<u64>().ok()) {
                    self.incident_counter = self.incident_counter.max(n);
                }
                self.incidents.insert(
                    incident_id.clone(),
                    Incident {
                        incident_id: incident_id.clone(),
                        node_id: node_id.clone(),
                        kind: *kind,
                        opened_ts: *ts,
                        state: IncidentState::Open,
                        actions: Vec::new(),
                    },
                );
            }
            LogEvent::IncidentAction { ts, incident_id, action } => {
                if let Some(i) = self.incidents.get_mut(incident_id) {
                    i.actions.push(IncidentAction {
                        ts: *ts,
                        action: action.clone(),
                    });
                }
            }
            LogEvent::IncidentState { incident_id, state, .. } => {
                if let Some(i) = self.incidents.get_mut(incident_id) {
                    i.state = *state;
                }
            }
        }
    }

    fn record(&mut self, ev: LogEvent) -> Result<(), ControlError> {
        if let Some(path) = &self.log_path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_string(&ev).expect("event serializes");
            line.push('\n');
            f.write_all(line.as_bytes())?;
        }
        self.apply(&ev);
        Ok(())
    }

    pub fn config(&self) -> &ControlConfig {
        &self.config
    }

    pub fn commission(&mut self, name: &str, class_name: &str, models: &ModelRegistry, now: Timestamp) -> Result<RegistryEntry, ControlError> {
        if !models.has_class(class_name) {
            return Err(ControlError::UnknownClass(class_name.to_string()));
        }
        let node_id = format!("n-{:06}", self.counter + 1);
        self.record(LogEvent::Commissioned {
            ts: now,
            node_id: node_id.clone(),
            name: name.to_string(),
            class_name: class_name.to_string(),
        })?;
        Ok(self.entries[&node_id].clone())
    }

    pub fn entry(&self, node_id: &str) -> Option<&RegistryEntry> {
        self.entries.get(node_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    fn lookup(&self, node_id: &str) -> Result<&RegistryEntry, ControlError> {
        self.entries
            .get(node_id)
            .ok_or_else(|| ControlError::UnknownNode(node_id.to_string()))
    }

    /// Moves a node along the lifecycle graph. Leaving `active` closes the
    /// node's broker session, if one is open.
    pub fn transition(&mut self, node_id: &str, to: Lifecycle, now: Timestamp, broker: &mut Broker) -> Result<RegistryEntry, ControlError> {
        let from = self.lookup(node_id)?.lifecycle;
        if !from.can_move_to(to) {
            return Err(ControlError::IllegalTransition {
                node: node_id.to_string(),
                from,
                to,
            });
        }
        self.record(LogEvent::Transition {
            ts: now,
            node_id: node_id.to_string(),
            from,
            to,
        })?;
        if to != Lifecycle::Active {
            broker.close_node(node_id);
        }
        if to == Lifecycle::Decommissioned {
            self.monitor.forget(node_id);
        }
        Ok(self.entries[node_id].clone())
    }

    /// Issues a fresh credential under the next key epoch.
    pub fn rotate_credential(&mut self, node_id: &str, now: Timestamp) -> Result<RegistryEntry, ControlError> {
        let e = self.lookup(node_id)?;
        if e.lifecycle == Lifecycle::Decommissioned {
            return Err(ControlError::NotActive(node_id.to_string()));
        }
        let key_epoch = e.key_epoch + 1;
        self.record(LogEvent::KeyRotated {
            ts: now,
            node_id: node_id.to_string(),
            key_epoch,
        })?;
        Ok(self.entries[node_id].clone())
    }

    /// Passes iff the node is active and the credential is the current one.
    pub fn authenticate(&self, node_id: &str, credential: &str) -> bool {
        self.entries.get(node_id).is_some_and(|e| {
            e.lifecycle == Lifecycle::Active && e.credential.as_deref().is_some_and(|c| constant_time_eq(c, credential))
        })
    }

    fn service_session(&mut self, broker: &mut Broker) -> SessionId {
        match self.service {
            Some(s) if broker.is_connected(s) => s,
            _ => {
                let s = broker.connect_service("controlplane");
                self.service = Some(s);
                s
            }
        }
    }

    /// Publishes a retained update command for an active node.
    pub fn push_update(&mut self, node_id: &str, version: &str, digest: &str, now: Timestamp, broker: &mut Broker) -> Result<(), ControlError> {
        if self.lookup(node_id)?.lifecycle != Lifecycle::Active {
            return Err(ControlError::NotActive(node_id.to_string()));
        }
        let session = self.service_session(broker);
        let body = json!({"version": version, "digest": digest}).to_string();
        broker
            .publish(session, &format!("mgmt/{node_id}/update"), body, Qos::AtLeastOnce, true, now)
            .expect("service sessions may publish anywhere");
        self.record(LogEvent::UpdatePushed {
            ts: now,
            node_id: node_id.to_string(),
            version: version.to_string(),
            digest: digest.to_string(),
        })
    }

    /// Records a management agent's `mgmt/<node>/status` report.
    pub fn record_status(&mut self, node_id: &str, payload: &str, now: Timestamp) -> Result<(), ControlError> {
        self.lookup(node_id)?;
        let doc: serde_json::Value = serde_json::from_str(payload).map_err(|e| ControlError::BadStatus(e.to_string()))?;
        let version = doc
            .get("firmware_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| ControlError::BadStatus("missing firmware_version".into()))?;
        if self.entries[node_id].firmware_version == version {
            return Ok(());
        }
        self.record(LogEvent::Firmware {
            ts: now,
            node_id: node_id.to_string(),
            version: version.to_string(),
        })
    }

    /// Feeds one monitoring bucket for a node. On a sustained flood an
    /// incident opens and the node is quarantined.
    pub fn observe(&mut self, node_id: &str, bucket_count: u64, now: Timestamp, broker: &mut Broker) -> Result<Observation, ControlError> {
        let lifecycle = self.lookup(node_id)?.lifecycle;
        let verdict = self.monitor.observe(node_id, bucket_count);
        if verdict != Verdict::IncidentOpened {
            return Ok(Observation { verdict, incident: None });
        }
        let n = self.monitor.config().consecutive;
        let id = self.open_incident(node_id, IncidentKind::TrafficFlood, now)?;
        self.incident_action(&id, &format!("detected: {n} consecutive anomalous buckets, last {bucket_count}"), now)?;
        if lifecycle == Lifecycle::Active {
            self.transition(node_id, Lifecycle::Quarantined, now, broker)?;
            self.incident_action(&id, "quarantined node and closed its session", now)?;
            self.set_incident_state(&id, IncidentState::Mitigated, now)?;
        }
        Ok(Observation {
            verdict,
            incident: Some(id),
        })
    }

    /// Opens an auth-probe incident when a bucket saw too many refused
    /// CONNECT attempts for a node. Refusals already keep the prober out,
    /// so no quarantine follows.
    pub fn observe_refusals(&mut self, node_id: &str, refused: u64, now: Timestamp) -> Result<Option<String>, ControlError> {
        if refused < self.config.probe_threshold || !self.entries.contains_key(node_id) {
            return Ok(None);
        }
        let open = self
            .incidents
            .values()
            .any(|i| i.node_id == node_id && i.kind == IncidentKind::AuthProbe && i.state != IncidentState::Closed);
        if open {
            return Ok(None);
        }
        let id = self.open_incident(node_id, IncidentKind::AuthProbe, now)?;
        self.incident_action(&id, &format!("detected: {refused} refused connects in one bucket"), now)?;
        Ok(Some(id))
    }

    pub fn open_incident(&mut self, node_id: &str, kind: IncidentKind, now: Timestamp) -> Result<String, ControlError> {
        self.lookup(node_id)?;
        let id = format!("inc-{:04}", self.incident_counter + 1);
        self.record(LogEvent::IncidentOpened {
            ts: now,
            incident_id: id.clone(),
            node_id: node_id.to_string(),
            kind,
        })?;
        Ok(id)
    }

    fn incident_action(&mut self, id: &str, action: &str, now: Timestamp) -> Result<(), ControlError> {
        self.record(LogEvent::IncidentAction {
            ts: now,
            incident_id: id.to_string(),
            action: action.to_string(),
        })
    }

    fn set_incident_state(&mut self, id: &str, state: IncidentState, now: Timestamp) -> Result<(), ControlError> {
        self.record(LogEvent::IncidentState {
            ts: now,
            incident_id: id.to_string(),
            state,
        })
    }

    /// Brings a quarantined node back and closes the incident. The anomaly
    /// streak is cleared; the learned baseline is kept.
    pub fn remediate(&mut self, incident_id: &str, now: Timestamp, broker: &mut Broker) -> Result<Incident, ControlError> {
        let inc = self
            .incidents
            .get(incident_id)
            .ok_or_else(|| ControlError::UnknownIncident(incident_id.to_string()))?;
        if inc.state == IncidentState::Closed {
            return Err(ControlError::IncidentClosed(incident_id.to_string()));
        }
        let node_id = inc.node_id.clone();
        match self.lookup(&node_id)?.lifecycle {
            Lifecycle::Quarantined => {
                self.transition(&node_id, Lifecycle::Active, now, broker)?;
                self.incident_action(incident_id, "restored node to active", now)?;
            }
            _ if inc.kind == IncidentKind::AuthProbe => {}
            _ => return Err(ControlError::NodeNotQuarantined(node_id)),
        }
        self.monitor.reset_streak(&node_id);
        self.set_incident_state(incident_id, IncidentState::Closed, now)?;
        Ok(self.incidents[incident_id].clone())
    }

    pub fn incident(&self, id: &str) -> Option<&Incident> {
        self.incidents.get(id)
    }

    pub fn incidents(&self) -> impl Iterator<Item = &Incident> {
        self.incidents.values()
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }
}

impl Authenticator for ControlPlane {
    fn authenticate(&self, node_id: &str, credential: &str) -> bool {
        ControlPlane::authenticate(self, node_id, credential)
    }
}

fn constant_time_eq(a: &str, b: &str) -> bool {
    a.len() == b.len() && a.bytes().zip(b.bytes()).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
