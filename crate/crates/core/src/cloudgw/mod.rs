//! Cloud ingestion boundary.
//!
//! [`CloudGateway::admit`] checks the sender's registry state, decodes and
//! validates the payload against the information model, drops duplicate
//! readings, and tells the caller where each admitted item goes. Every call
//! leaves exactly one audit record.

mod dedup;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dedup::{Dedup, DedupState};

use crate::controlplane::{ControlPlane, Lifecycle};
use crate::infomodel::codec::{decode_doc, decode_report, decode_time, payload_fields};
use crate::infomodel::{ModelRegistry, PayloadMap};
use crate::msgbus::{Frame, TopicFilter};
use crate::types::{Reading, Timestamp};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("bad route selector: {0}")]
    BadSelector(String),
    #[error("routing rules: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Admit,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Ok,
    AuthFailed,
    NotActive,
    Quarantined,
    SchemaInvalid,
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngressDecision {
    pub verdict: Verdict,
    pub reason: Reason,
}

impl IngressDecision {
    pub const ADMIT: IngressDecision = IngressDecision {
        verdict: Verdict::Admit,
        reason: Reason::Ok,
    };

    pub fn reject(reason: Reason) -> Self {
        IngressDecision {
            verdict: Verdict::Reject,
            reason,
        }
    }

    pub fn admitted(&self) -> bool {
        self.verdict == Verdict::Admit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Streams,
    Tsdb,
    Twin,
}

/// Routing predicate. Every present field must match.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    /// Matches the channel's class or any subclass of it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    /// `key=value`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRule {
    pub selector: Selector,
    pub destinations: BTreeSet<Destination>,
}

impl RouteRule {
    pub fn new(topic: &str, destinations: &[Destination]) -> Self {
        RouteRule {
            selector: Selector {
                topic: Some(topic.to_string()),
                ..Selector::default()
            },
            destinations: destinations.iter().copied().collect(),
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if let Some(t) = &self.selector.topic {
            TopicFilter::parse(t).map_err(|e| GatewayError::BadSelector(e.to_string()))?;
        }
        if let Some(tag) = &self.selector.tag {
            if !tag.contains('=') {
                return Err(GatewayError::BadSelector(format!("tag `{tag}` is not key=value")));
            }
        }
        Ok(())
    }
}

/// What is being routed.
pub struct RouteInput<'a> {
    pub topic: &'a str,
    pub class: Option<&'a str>,
    pub reading: Option<&'a Reading>,
}

/// Union of the destinations of every matching rule; `{tsdb}` when none
/// matches.
pub fn route(input: &RouteInput<'_>, rules: &[RouteRule], models: &ModelRegistry) -> BTreeSet<Destination> {
    let mut out = BTreeSet::new();
    let mut matched = false;
    for rule in rules {
        let s = &rule.selector;
        let topic_ok = s
            .topic
            .as_deref()
            .is_none_or(|f| TopicFilter::parse(f).is_ok_and(|f| f.matches(input.topic)));
        let class_ok = s
            .class
            .as_deref()
            .is_none_or(|c| input.class.is_some_and(|ic| models.is_a(ic, c)));
        let tag_ok = s.tag.as_deref().is_none_or(|t| {
            let (k, v) = t.split_once('=').unwrap_or((t, ""));
            input.reading.is_some_and(|r| r.tags.get(k) == Some(v))
        });
        if topic_ok && class_ok && tag_ok {
            matched = true;
            out.extend(rule.destinations.iter().copied());
        }
    }
    if !matched {
        out.insert(Destination::Tsdb);
    }
    out
}

pub fn load_rules(path: &Path) -> Result<Vec<RouteRule>, GatewayError> {
    let rules: Vec<RouteRule> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    for r in &rules {
        r.validate()?;
    }
    Ok(rules)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub ts: Timestamp,
    pub node: String,
    pub topic: String,
    pub verdict: Verdict,
    pub reason: Reason,
}

/// An admitted, decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Admitted {
    Readings(Vec<(Reading, BTreeSet<Destination>)>),
    TwinReport {
        node: String,
        doc: PayloadMap,
        ack_version: u64,
        ts: Timestamp,
    },
    Status {
        node: String,
        payload: String,
    },
    Alert {
        node: String,
        payload: serde_json::Value,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaPolicy {
    Strict,
    LogOnly,
}

enum Inbound<'a> {
    Data { node: &'a str, sensor: &'a str },
    Reported { node: &'a str },
    Status { node: &'a str },
    Alert { node: &'a str },
    Other,
}

fn classify(topic: &str) -> Inbound<'_> {
    let parts: Vec<&str> = topic.split('/').collect();
    match parts.as_slice() {
        ["data", node, sensor] => Inbound::Data { node, sensor },
        ["twin", node, "reported"] => Inbound::Reported { node },
        ["mgmt", node, "status"] => Inbound::Status { node },
        ["alerts", node] => Inbound::Alert { node },
        _ => Inbound::Other,
    }
}

fn topic_node(topic: &str) -> &str {
    match classify(topic) {
        Inbound::Data { node, .. } | Inbound::Reported { node } | Inbound::Status { node } | Inbound::Alert { node } => node,
        Inbound::Other => "",
    }
}

pub struct CloudGateway {
    rules: Vec<RouteRule>,
    dedup: Dedup,
    policies: BTreeMap<String, SchemaPolicy>,
    audit: Vec<AuditEntry>,
    audit_path: Option<PathBuf>,
    schema_warnings: u64,
}

impl CloudGateway {
    pub fn new(rules: Vec<RouteRule>) -> Result<Self, GatewayError> {
        for r in &rules {
            r.validate()?;
        }
        Ok(CloudGateway {
            rules,
            dedup: Dedup::default(),
            policies: BTreeMap::new(),
            audit: Vec::new(),
            audit_path: None,
            schema_warnings: 0,
        })
    }

    /// Also appends audit records to a JSON-lines file.
    pub fn with_audit_file(mut self, path: &Path) -> Self {
        self.audit_path = Some(path.to_path_buf());
        self
    }

    pub fn rules(&self) -> &[RouteRule] {
        &self.rules
    }

    /// Classes without a policy are validated strictly.
    pub fn set_policy(&mut self, class: &str, policy: SchemaPolicy) {
        self.policies.insert(class.to_string(), policy);
    }

    fn strict(&self, class: &str) -> bool {
        self.policies.get(class).copied().unwrap_or(SchemaPolicy::Strict) == SchemaPolicy::Strict
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit
    }

    /// Payloads that failed validation but passed under a log-only policy.
    pub fn schema_warnings(&self) -> u64 {
        self.schema_warnings
    }

    pub fn dedup(&self) -> &Dedup {
        &self.dedup
    }

    fn log(&mut self, frame: &Frame, decision: IngressDecision) -> IngressDecision {
        let entry = AuditEntry {
            ts: frame.ts,
            node: topic_node(&frame.topic).to_string(),
            topic: frame.topic.clone(),
            verdict: decision.verdict,
            reason: decision.reason,
        };
        if let Some(path) = &self.audit_path {
            // the in-memory log stays authoritative if the file is unwritable
            if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
                let mut line = serde_json::to_string(&entry).expect("audit entry serializes");
                line.push('\n');
                let _ = f.write_all(line.as_bytes());
            }
        }
        self.audit.push(entry);
        decision
    }

    pub fn admit(&mut self, frame: &Frame, registry: &ControlPlane, models: &ModelRegistry) -> (IngressDecision, Option<Admitted>) {
        match self.check(frame, registry, models) {
            Ok(admitted) => (self.log(frame, IngressDecision::ADMIT), Some(admitted)),
            Err(reason) => (self.log(frame, IngressDecision::reject(reason)), None),
        }
    }

    fn check(&mut self, frame: &Frame, registry: &ControlPlane, models: &ModelRegistry) -> Result<Admitted, Reason> {
        let inbound = classify(&frame.topic);
        let node = topic_node(&frame.topic);
        if matches!(inbound, Inbound::Other) {
            return Err(Reason::SchemaInvalid);
        }
        if frame.msg_id.sender != node {
            return Err(Reason::AuthFailed);
        }
        let entry = registry.entry(node).ok_or(Reason::AuthFailed)?;
        match entry.lifecycle {
            Lifecycle::Active => {}
            Lifecycle::Quarantined => return Err(Reason::Quarantined),
            _ => return Err(Reason::NotActive),
        }
        let node_class = entry.class_name.clone();
        match inbound {
            Inbound::Data { node, sensor } => self.check_data(frame, node, sensor, models),
            Inbound::Reported { node } => {
                let doc: serde_json::Value = serde_json::from_str(&frame.payload).map_err(|_| Reason::SchemaInvalid)?;
                let reported = decode_doc(doc.get("reported").ok_or(Reason::SchemaInvalid)?).map_err(|_| Reason::SchemaInvalid)?;
                let ack_version = doc.get("ack_version").and_then(|v| v.as_u64()).ok_or(Reason::SchemaInvalid)?;
                let ts = match doc.get("DateTime").and_then(|v| v.as_str()) {
                    Some(t) => decode_time(t).map_err(|_| Reason::SchemaInvalid)?,
                    None => frame.ts,
                };
                let report = models.validate_partial(&node_class, &reported).map_err(|_| Reason::SchemaInvalid)?;
                self.enforce(&node_class, report.is_ok())?;
                Ok(Admitted::TwinReport {
                    node: node.to_string(),
                    doc: reported,
                    ack_version,
                    ts,
                })
            }
            Inbound::Status { node } => {
                let doc: serde_json::Value = serde_json::from_str(&frame.payload).map_err(|_| Reason::SchemaInvalid)?;
                if !doc.get("firmware_version").is_some_and(|v| v.is_string()) {
                    return Err(Reason::SchemaInvalid);
                }
                Ok(Admitted::Status {
                    node: node.to_string(),
                    payload: frame.payload.clone(),
                })
            }
            Inbound::Alert { node } => {
                let payload: serde_json::Value = serde_json::from_str(&frame.payload).map_err(|_| Reason::SchemaInvalid)?;
                if !payload.is_object() {
                    return Err(Reason::SchemaInvalid);
                }
                Ok(Admitted::Alert {
                    node: node.to_string(),
                    payload,
                })
            }
            Inbound::Other => unreachable!("rejected above"),
        }
    }

    fn enforce(&mut self, class: &str, valid: bool) -> Result<(), Reason> {
        if valid {
            return Ok(());
        }
        if self.strict(class) {
            return Err(Reason::SchemaInvalid);
        }
        self.schema_warnings += 1;
        Ok(())
    }

    fn check_data(&mut self, frame: &Frame, node: &str, sensor: &str, models: &ModelRegistry) -> Result<Admitted, Reason> {
        let (id, readings) = decode_report(&frame.payload).map_err(|_| Reason::SchemaInvalid)?;
        if id != node || readings.is_empty() || readings.iter().any(|r| r.channel.sensor != sensor) {
            return Err(Reason::SchemaInvalid);
        }
        let instance = models.instance(&format!("{node}/{sensor}")).ok_or(Reason::SchemaInvalid)?;
        let class = instance.class_name.clone();
        for r in &readings {
            let report = models
                .validate_payload(&class, &payload_fields(r))
                .map_err(|_| Reason::SchemaInvalid)?;
            self.enforce(&class, report.is_ok())?;
        }
        // dedup only after the frame is known good, so a rejected frame
        // cannot burn a seq
        let mut fresh = Vec::new();
        for mut r in readings {
            if r.seq == 0 || self.dedup.check(node, sensor, r.seq) {
                r.tags = instance.tags.iter().fold(r.tags, |t, (k, v)| {
                    if t.get(k).is_some() {
                        t
                    } else {
                        t.with(k, v)
                    }
                });
                let dest = route(
                    &RouteInput {
                        topic: &frame.topic,
                        class: Some(&class),
                        reading: Some(&r),
                    },
                    &self.rules,
                    models,
                );
                fresh.push((r, dest));
            }
        }
        if fresh.is_empty() {
            return Err(Reason::Duplicate);
        }
        Ok(Admitted::Readings(fresh))
    }
}

#[cfg(test)]
mod tests;
