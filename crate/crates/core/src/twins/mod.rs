//! Digital twins: cloud replicas of reported and desired device state.
//!
//! Reported state merges per key, last writer by report timestamp wins.
//! Desired state is versioned; each change is published as one retained
//! message on `twin/<node>/desired`, so a node that was away picks up only
//! the latest version when it reconnects.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::infomodel::codec::encode_doc;
use crate::infomodel::{ModelRegistry, PayloadMap};
use crate::msgbus::{Broker, Qos, SessionId};
use crate::types::Timestamp;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("document does not fit class `{class}`: {detail}")]
    SchemaInvalid { class: String, detail: String },
    #[error("property `{0}` is not writable")]
    NotWritable(String),
    #[error("desired patch is empty")]
    EmptyPatch,
    #[error("twin state file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Connected,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinRecord {
    pub node_id: String,
    pub class_name: String,
    pub reported: PayloadMap,
    /// Timestamp of the report that last set each reported key.
    pub reported_ts: BTreeMap<String, Timestamp>,
    pub desired: PayloadMap,
    pub desired_version: u64,
    pub ack_version: u64,
    pub last_seen: Option<Timestamp>,
    pub connectivity: Connectivity,
}

impl TwinRecord {
    fn new(node_id: &str, class_name: &str) -> Self {
        TwinRecord {
            node_id: node_id.to_string(),
            class_name: class_name.to_string(),
            reported: PayloadMap::new(),
            reported_ts: BTreeMap::new(),
            desired: PayloadMap::new(),
            desired_version: 0,
            ack_version: 0,
            last_seen: None,
            connectivity: Connectivity::Disconnected,
        }
    }

    pub fn converged(&self) -> bool {
        self.ack_version == self.desired_version && self.desired.iter().all(|(k, v)| self.reported.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesiredPatch {
    pub set: PayloadMap,
    pub origin: String,
    pub ts: Timestamp,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TwinService {
    twins: BTreeMap<String, TwinRecord>,
    /// Expected report period; a twin unseen for three periods counts as
    /// disconnected.
    report_period_ms: i64,
    #[serde(skip)]
    service: Option<SessionId>,
}

impl TwinService {
    pub fn new(report_period_ms: i64) -> Self {
        TwinService {
            twins: BTreeMap::new(),
            report_period_ms,
            service: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, TwinError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TwinError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Creates an empty twin for a node; existing twins are left alone.
    pub fn register(&mut self, node_id: &str, class_name: &str) {
        self.twins
            .entry(node_id.to_string())
            .or_insert_with(|| TwinRecord::new(node_id, class_name));
    }

    fn twin_mut(&mut self, node_id: &str) -> Result<&mut TwinRecord, TwinError> {
        self.twins
            .get_mut(node_id)
            .ok_or_else(|| TwinError::UnknownNode(node_id.to_string()))
    }

    pub fn apply_report(
        &mut self,
        node_id: &str,
        doc: &PayloadMap,
        ack_version: u64,
        ts: Timestamp,
        models: &ModelRegistry,
    ) -> Result<TwinRecord, TwinError> {
        let twin = self.twin_mut(node_id)?;
        let report = models
            .validate_partial(&twin.class_name, doc)
            .map_err(|e| TwinError::SchemaInvalid {
                class: twin.class_name.clone(),
                detail: e.to_string(),
            })?;
        if !report.is_ok() {
            return Err(TwinError::SchemaInvalid {
                class: twin.class_name.clone(),
                detail: format!("{:?}", report.violations),
            });
        }
        for (k, v) in doc {
            if twin.reported_ts.get(k).is_none_or(|prev| ts >= *prev) {
                twin.reported.insert(k.clone(), v.clone());
                twin.reported_ts.insert(k.clone(), ts);
            }
        }
        twin.last_seen = Some(twin.last_seen.map_or(ts, |l| l.max(ts)));
        // acks can only confirm versions that were issued
        twin.ack_version = twin.ack_version.max(ack_version.min(twin.desired_version));
        Ok(twin.clone())
    }

    /// Merges a patch into desired state and publishes the new desired
    /// document as a retained command.
    pub fn set_desired(&mut self, node_id: &str, patch: &DesiredPatch, models: &ModelRegistry, broker: &mut Broker) -> Result<u64, TwinError> {
        if patch.set.is_empty() {
            return Err(TwinError::EmptyPatch);
        }
        let class = self
            .twins
            .get(node_id)
            .ok_or_else(|| TwinError::UnknownNode(node_id.to_string()))?
            .class_name
            .clone();
        for (k, v) in &patch.set {
            let prop = models
                .property(&class, k)
                .map_err(|e| TwinError::SchemaInvalid {
                    class: class.clone(),
                    detail: e.to_string(),
                })?
                .filter(|p| p.writable)
                .ok_or_else(|| TwinError::NotWritable(k.clone()))?;
            if let Some(kind) = prop.check_value(v) {
                return Err(TwinError::SchemaInvalid {
                    class: class.clone(),
                    detail: format!("{k}: {kind:?}"),
                });
            }
        }
        let session = match self.service {
            Some(s) if broker.is_connected(s) => s,
            _ => {
                let s = broker.connect_service("twins");
                self.service = Some(s);
                s
            }
        };
        let twin = self.twin_mut(node_id)?;
        twin.desired.extend(patch.set.iter().map(|(k, v)| (k.clone(), v.clone())));
        twin.desired_version += 1;
        let body = json!({
            "desired": encode_doc(&twin.desired),
            "desired_version": twin.desired_version,
        });
        let version = twin.desired_version;
        broker
            .publish(session, &format!("twin/{node_id}/desired"), body.to_string(), Qos::AtLeastOnce, true, patch.ts)
            .expect("service sessions may publish anywhere");
        Ok(version)
    }

    /// Snapshot of the cloud-side state. Never contacts the device.
    pub fn get_twin(&self, node_id: &str) -> Result<TwinRecord, TwinError> {
        self.twins
            .get(node_id)
            .cloned()
            .ok_or_else(|| TwinError::UnknownNode(node_id.to_string()))
    }

    pub fn converged(&self, node_id: &str) -> Result<bool, TwinError> {
        self.twins
            .get(node_id)
            .map(TwinRecord::converged)
            .ok_or_else(|| TwinError::UnknownNode(node_id.to_string()))
    }

    /// Recomputes connectivity: a node counts as connected while it holds a
    /// broker session and has reported within three report periods.
    pub fn refresh_connectivity(&mut self, now: Timestamp, broker: &Broker) {
        let window = 3 * self.report_period_ms;
        for twin in self.twins.values_mut() {
            let fresh = twin.last_seen.is_some_and(|t| now.0 - t.0 <= window);
            twin.connectivity = if fresh && broker.node_session(&twin.node_id).is_some() {
                Connectivity::Connected
            } else {
                Connectivity::Disconnected
            };
        }
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.twins.keys().map(String::as_str)
    }
}
