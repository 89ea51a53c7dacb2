//! Edge gateway data plane.
//!
//! An [`EdgeNode`] samples its channels, keeps a local ring buffer per
//! channel, evaluates event/alert rules, runs local control, and queues
//! encoded reports for the uplink. Nothing here blocks on the network: the
//! caller drives time through `now` and flushes the queue whenever it holds
//! a live session.

mod buffer;
pub mod rtu;
mod rules;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use buffer::{flush_uplink, Disconnected, LocalStore, QueuedFrame, UplinkQueue, UplinkSession, DEFAULT_BUFFER_CAPACITY};
pub use rtu::{translate_frame, RtuError, RtuFrame, RtuFunction};
pub use rules::{run_local_control, Actuation, Condition, ControlRule, EdgeRule, Event, RuleEngine, Severity};

use crate::infomodel::codec::{decode_doc, encode_doc, encode_reading};
use crate::infomodel::ThingInstance;
use crate::msgbus::{Broker, BusError, Qos, SessionId};
use crate::types::{is_node_id, is_token, ChannelKey, Reading, TagSet, Timestamp, TypedScalar};

pub const MIN_SAMPLE_PERIOD_MS: u64 = 10;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("raw sample is not finite")]
    NonFiniteRaw,
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("range start is after range end")]
    BadRange,
    #[error("condition references unknown channel `{0}`")]
    UnknownChannelInCondition(String),
    #[error("invalid node config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Rtu(#[from] RtuError),
    #[error("no channel reads address {addr} register {register}")]
    UnmappedFrame { addr: u8, register: u16 },
    #[error("malformed command: {0}")]
    BadCommand(String),
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { scale: 1.0, offset: 0.0 }
    }
}

impl Calibration {
    pub fn apply(&self, raw: f64) -> f64 {
        self.scale * raw + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelSource {
    Simulated,
    LegacyFrame { addr: u8, register: u16 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub sensor_name: String,
    pub class_name: String,
    pub sample_period_ms: u64,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default = "simulated")]
    pub source: ChannelSource,
    #[serde(default)]
    pub unit: String,
}

fn simulated() -> ChannelSource {
    ChannelSource::Simulated
}

impl ChannelConfig {
    pub fn new(sensor: &str, class_name: &str, period_ms: u64, unit: &str) -> Self {
        ChannelConfig {
            sensor_name: sensor.to_string(),
            class_name: class_name.to_string(),
            sample_period_ms: period_ms,
            calibration: Calibration::default(),
            source: ChannelSource::Simulated,
            unit: unit.to_string(),
        }
    }

    pub fn calibrated(mut self, scale: f64, offset: f64) -> Self {
        self.calibration = Calibration { scale, offset };
        self
    }

    pub fn legacy(mut self, addr: u8, register: u16) -> Self {
        self.source = ChannelSource::LegacyFrame { addr, register };
        self
    }

    pub fn validate(&self) -> Result<(), EdgeError> {
        let bad = |m: String| Err(EdgeError::InvalidConfig(m));
        if !is_token(&self.sensor_name) {
            return bad(format!("sensor name `{}` is not a token", self.sensor_name));
        }
        if self.sample_period_ms < MIN_SAMPLE_PERIOD_MS {
            return bad(format!("{}: sample period below {MIN_SAMPLE_PERIOD_MS} ms", self.sensor_name));
        }
        let c = self.calibration;
        if c.scale == 0.0 || !c.scale.is_finite() || !c.offset.is_finite() {
            return bad(format!("{}: calibration must be finite with nonzero scale", self.sensor_name));
        }
        if let ChannelSource::LegacyFrame { addr, .. } = self.source {
            if !(1..=247).contains(&addr) {
                return bad(format!("{}: legacy address {addr} outside 1..=247", self.sensor_name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UplinkConfig {
    pub broker: String,
    pub credential: String,
    /// Drop-oldest bound on the offline queue; unbounded when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_capacity: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    #[serde(default)]
    pub instances: Vec<ThingInstance>,
    pub channels: Vec<ChannelConfig>,
    #[serde(default)]
    pub edge_rules: Vec<EdgeRule>,
    #[serde(default)]
    pub control_rules: Vec<ControlRule>,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    pub uplink: UplinkConfig,
}

fn default_capacity() -> usize {
    DEFAULT_BUFFER_CAPACITY
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self, EdgeError> {
        let text = std::fs::read_to_string(path)?;
        let config: NodeConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), EdgeError> {
        let bad = |m: String| Err(EdgeError::InvalidConfig(m));
        if !is_node_id(&self.node_id) {
            return bad(format!("node id `{}` is malformed", self.node_id));
        }
        if self.buffer_capacity == 0 {
            return bad("buffer capacity must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for ch in &self.channels {
            ch.validate()?;
            if !seen.insert(ch.sensor_name.as_str()) {
                return bad(format!("duplicate channel `{}`", ch.sensor_name));
            }
        }
        for r in &self.edge_rules {
            if r.debounce_count == 0 {
                return bad(format!("rule {} has debounce 0", r.rule_id));
            }
            if r.channel != "*" && !seen.contains(r.channel.as_str()) {
                return bad(format!("rule {} selects unknown channel `{}`", r.rule_id, r.channel));
            }
        }
        for r in &self.control_rules {
            if let Some(c) = r.condition.channels().into_iter().find(|c| !seen.contains(c)) {
                return Err(EdgeError::UnknownChannelInCondition(c.to_string()));
            }
        }
        Ok(())
    }

    pub fn channel(&self, sensor: &str) -> Option<&ChannelConfig> {
        self.channels.iter().find(|c| c.sensor_name == sensor)
    }
}

/// An actuation that changed local device state.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuationRecord {
    pub ts: Timestamp,
    pub rule_id: String,
    pub actuation: Actuation,
}

/// What one reading triggered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    pub reading: Option<Reading>,
    pub events: Vec<Event>,
    pub actuations: Vec<ActuationRecord>,
}

/// One edge gateway.
#[derive(Debug, Clone)]
pub struct EdgeNode {
    config: NodeConfig,
    tags: TagSet,
    seq: BTreeMap<String, u64>,
    last_ts: BTreeMap<String, Timestamp>,
    store: LocalStore,
    rules: RuleEngine,
    latest: BTreeMap<String, f64>,
    device_state: BTreeMap<String, TypedScalar>,
    uplink: UplinkQueue,
    actuations: Vec<ActuationRecord>,
    events: Vec<Event>,
    desired_version: u64,
    firmware_version: Option<String>,
}

impl EdgeNode {
    pub fn new(config: NodeConfig) -> Result<Self, EdgeError> {
        config.validate()?;
        let tags = config
            .instances
            .iter()
            .find(|i| i.instance_id == config.node_id)
            .map(|i| i.tags.clone())
            .unwrap_or_default();
        let mut store = LocalStore::new(config.buffer_capacity);
        for ch in &config.channels {
            store.add_channel(&ch.sensor_name);
        }
        Ok(EdgeNode {
            rules: RuleEngine::new(config.edge_rules.clone())?,
            uplink: UplinkQueue::new(config.uplink.queue_capacity),
            tags,
            seq: BTreeMap::new(),
            last_ts: BTreeMap::new(),
            store,
            latest: BTreeMap::new(),
            device_state: BTreeMap::new(),
            actuations: Vec::new(),
            events: Vec::new(),
            desired_version: 0,
            firmware_version: None,
            config,
        })
    }

    pub fn node_id(&self) -> &str {
        &self.config.node_id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    /// Continues sequence numbering from persisted counters.
    pub fn restore_seq(&mut self, counters: BTreeMap<String, u64>) {
        self.seq = counters;
    }

    pub fn seq_counters(&self) -> &BTreeMap<String, u64> {
        &self.seq
    }

    /// Calibrates a raw sample into a reading. Does not buffer or queue it.
    pub fn acquire_sample(&mut self, sensor: &str, raw: f64, now: Timestamp) -> Result<Reading, EdgeError> {
        let ch = self
            .config
            .channel(sensor)
            .ok_or_else(|| EdgeError::UnknownChannel(sensor.to_string()))?;
        if !raw.is_finite() {
            return Err(EdgeError::NonFiniteRaw);
        }
        let value = ch.calibration.apply(raw);
        if !value.is_finite() {
            return Err(EdgeError::NonFiniteRaw);
        }
        let seq = self.seq.entry(sensor.to_string()).or_default();
        *seq += 1;
        let last = self.last_ts.entry(sensor.to_string()).or_insert(now);
        *last = (*last).max(now);
        Ok(Reading {
            channel: ChannelKey::new(self.config.node_id.as_str(), sensor)
                .map_err(|e| EdgeError::InvalidConfig(e.to_string()))?,
            value: TypedScalar::Number(value),
            unit: ch.unit.clone(),
            ts: *last,
            seq: *seq,
            tags: self.tags.clone(),
        })
    }

    /// Acquires, buffers, evaluates and queues one sample.
    pub fn sample(&mut self, sensor: &str, raw: f64, now: Timestamp) -> Result<StepOutcome, EdgeError> {
        let reading = self.acquire_sample(sensor, raw, now)?;
        Ok(self.record(reading))
    }

    /// Decodes a legacy report frame and records it as a sample of the
    /// channel mapped to its address and register.
    pub fn ingest_frame(&mut self, bytes: &[u8], now: Timestamp) -> Result<StepOutcome, EdgeError> {
        let frame = translate_frame(bytes)?;
        if frame.func != RtuFunction::Report {
            return Err(EdgeError::BadCommand("write frames flow toward devices only".into()));
        }
        let source = ChannelSource::LegacyFrame {
            addr: frame.addr,
            register: frame.register,
        };
        let sensor = self
            .config
            .channels
            .iter()
            .find(|c| c.source == source)
            .map(|c| c.sensor_name.clone())
            .ok_or(EdgeError::UnmappedFrame {
                addr: frame.addr,
                register: frame.register,
            })?;
        self.sample(&sensor, frame.engineering_value(), now)
    }

    /// Encodes a write of `value` to a legacy channel's register.
    pub fn write_frame(&self, sensor: &str, value: f64) -> Result<[u8; rtu::FRAME_LEN], EdgeError> {
        let ch = self
            .config
            .channel(sensor)
            .ok_or_else(|| EdgeError::UnknownChannel(sensor.to_string()))?;
        match ch.source {
            ChannelSource::LegacyFrame { addr, register } => {
                Ok(RtuFrame::from_engineering(addr, RtuFunction::Write, register, value)?.encode())
            }
            ChannelSource::Simulated => Err(EdgeError::BadCommand(format!("{sensor} is not a legacy channel"))),
        }
    }

    fn record(&mut self, reading: Reading) -> StepOutcome {
        let sensor = reading.channel.sensor.clone();
        self.store.push(reading.clone());
        if let Some(v) = reading.value.as_f64() {
            self.latest.insert(sensor, v);
        }
        let events = self.rules.evaluate(&reading);
        for ev in &events {
            self.queue_alert(ev);
        }
        self.events.extend(events.iter().cloned());
        let actuations = self.control(reading.ts);
        self.uplink.push(QueuedFrame {
            topic: format!("data/{}/{}", self.config.node_id, reading.channel.sensor),
            payload: encode_reading(&self.config.node_id, &reading),
            qos: Qos::AtLeastOnce,
            retain: false,
            origin: Some((reading.channel.sensor.clone(), reading.seq)),
        });
        StepOutcome {
            reading: Some(reading),
            events,
            actuations,
        }
    }

    fn queue_alert(&mut self, ev: &Event) {
        let body = json!({
            "rule_id": ev.rule_id,
            "severity": ev.severity,
            "channel": ev.reading.channel.to_string(),
            "value": ev.reading.value.encode(),
            "seq": ev.reading.seq,
            "DateTime": TypedScalar::Time(ev.reading.ts).encode(),
        });
        self.uplink.push(QueuedFrame {
            topic: format!("alerts/{}", self.config.node_id),
            payload: body.to_string(),
            qos: Qos::AtLeastOnce,
            retain: false,
            origin: None,
        });
    }

    /// Runs every control rule whose channels all have a value, applying
    /// actuations that change device state.
    fn control(&mut self, now: Timestamp) -> Vec<ActuationRecord> {
        let ready: Vec<ControlRule> = self
            .config
            .control_rules
            .iter()
            .filter(|r| r.condition.channels().iter().all(|c| self.latest.contains_key(*c)))
            .cloned()
            .collect();
        let mut ordered = ready;
        ordered.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
        let mut changed = Vec::new();
        for rule in &ordered {
            // readiness was checked above, so evaluation cannot fail
            let Ok(true) = rule.condition.eval(&self.latest) else {
                continue;
            };
            let key = rule.action.state_key();
            if self.device_state.get(&key) == Some(&rule.action.value) {
                continue;
            }
            self.device_state.insert(key, rule.action.value.clone());
            let record = ActuationRecord {
                ts: now,
                rule_id: rule.rule_id.clone(),
                actuation: rule.action.clone(),
            };
            self.actuations.push(record.clone());
            changed.push(record);
        }
        changed
    }

    /// Applies a `twin/<node>/desired` document and queues the matching
    /// reported state. Stale versions are ignored.
    pub fn apply_desired(&mut self, payload: &str, now: Timestamp) -> Result<bool, EdgeError> {
        let doc: serde_json::Value =
            serde_json::from_str(payload).map_err(|e| EdgeError::BadCommand(e.to_string()))?;
        let version = doc
            .get("desired_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| EdgeError::BadCommand("missing desired_version".into()))?;
        let desired = decode_doc(doc.get("desired").unwrap_or(&serde_json::Value::Null))
            .map_err(|e| EdgeError::BadCommand(e.to_string()))?;
        if version <= self.desired_version {
            return Ok(false);
        }
        for (key, value) in desired {
            let period = key
                .strip_suffix("_period_ms")
                .filter(|s| self.config.channel(s).is_some())
                .map(str::to_string);
            match (period, value.as_f64()) {
                (Some(sensor), Some(ms)) if ms >= MIN_SAMPLE_PERIOD_MS as f64 => {
                    self.set_sample_period(&sensor, ms as u64)?;
                    self.device_state.insert(key, value);
                }
                (Some(_), _) => {}
                (None, _) => {
                    self.device_state.insert(key, value);
                }
            }
        }
        self.desired_version = version;
        self.queue_reported(now);
        Ok(true)
    }

    /// Changes a channel's sample period. Any configuration change clears
    /// rule debounce state.
    pub fn set_sample_period(&mut self, sensor: &str, period_ms: u64) -> Result<(), EdgeError> {
        let idx = self
            .config
            .channels
            .iter()
            .position(|c| c.sensor_name == sensor)
            .ok_or_else(|| EdgeError::UnknownChannel(sensor.to_string()))?;
        let mut updated = self.config.channels[idx].clone();
        updated.sample_period_ms = period_ms;
        updated.validate()?;
        self.config.channels[idx] = updated;
        self.rules.reset();
        Ok(())
    }

    /// Replaces the edge rule set at runtime.
    pub fn replace_rules(&mut self, rules: Vec<EdgeRule>) -> Result<(), EdgeError> {
        let mut candidate = self.config.clone();
        candidate.edge_rules = rules;
        candidate.validate()?;
        self.rules = RuleEngine::new(candidate.edge_rules.clone())?;
        self.config = candidate;
        Ok(())
    }

    pub fn queue_reported(&mut self, now: Timestamp) {
        let body = json!({
            "reported": encode_doc(&self.device_state),
            "ack_version": self.desired_version,
            "DateTime": TypedScalar::Time(now).encode(),
        });
        self.uplink.push(QueuedFrame {
            topic: format!("twin/{}/reported", self.config.node_id),
            payload: body.to_string(),
            qos: Qos::AtLeastOnce,
            retain: false,
            origin: None,
        });
    }

    /// Applies a `mgmt/<node>/update` command and queues a status report.
    pub fn apply_update(&mut self, payload: &str, now: Timestamp) -> Result<(), EdgeError> {
        let doc: serde_json::Value =
            serde_json::from_str(payload).map_err(|e| EdgeError::BadCommand(e.to_string()))?;
        let version = doc
            .get("version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| EdgeError::BadCommand("missing version".into()))?;
        self.firmware_version = Some(version.to_string());
        let body = json!({
            "firmware_version": version,
            "DateTime": TypedScalar::Time(now).encode(),
        });
        self.uplink.push(QueuedFrame {
            topic: format!("mgmt/{}/status", self.config.node_id),
            payload: body.to_string(),
            qos: Qos::AtLeastOnce,
            retain: false,
            origin: None,
        });
        Ok(())
    }

    /// Routes an inbound command frame by topic.
    pub fn handle_command(&mut self, topic: &str, payload: &str, now: Timestamp) -> Result<(), EdgeError> {
        let node = &self.config.node_id;
        if topic == format!("twin/{node}/desired") {
            self.apply_desired(payload, now).map(|_| ())
        } else if topic == format!("mgmt/{node}/update") {
            self.apply_update(payload, now)
        } else {
            Err(EdgeError::BadCommand(format!("unexpected topic {topic}")))
        }
    }

    pub fn command_filters(&self) -> [String; 2] {
        let node = &self.config.node_id;
        [format!("twin/{node}/desired"), format!("mgmt/{node}/update")]
    }

    pub fn query_local(&self, sensor: &str, from: Timestamp, to: Timestamp) -> Result<Vec<Reading>, EdgeError> {
        self.store.query(sensor, from, to)
    }

    pub fn store(&self) -> &LocalStore {
        &self.store
    }

    pub fn uplink(&self) -> &UplinkQueue {
        &self.uplink
    }

    pub fn flush(&mut self, session: &mut dyn UplinkSession) -> usize {
        flush_uplink(&mut self.uplink, session)
    }

    pub fn latest(&self) -> &BTreeMap<String, f64> {
        &self.latest
    }

    pub fn device_state(&self) -> &BTreeMap<String, TypedScalar> {
        &self.device_state
    }

    pub fn actuation_log(&self) -> &[ActuationRecord] {
        &self.actuations
    }

    pub fn event_log(&self) -> &[Event] {
        &self.events
    }

    pub fn desired_version(&self) -> u64 {
        self.desired_version
    }

    pub fn firmware_version(&self) -> Option<&str> {
        self.firmware_version.as_deref()
    }
}

/// Uplink over an in-process broker session.
pub struct BrokerUplink<'a> {
    pub broker: &'a mut Broker,
    pub session: SessionId,
    pub now: Timestamp,
}

impl UplinkSession for BrokerUplink<'_> {
    fn is_connected(&self) -> bool {
        self.broker.is_connected(self.session)
    }

    fn send(&mut self, frame: &QueuedFrame) -> Result<(), Disconnected> {
        match self.broker.publish(self.session, &frame.topic, frame.payload.as_str(), frame.qos, frame.retain, self.now) {
            Ok(_) => Ok(()),
            Err(BusError::NotConnected) => Err(Disconnected),
            // refused by the ACL or malformed: the broker discards it
            Err(_) => Ok(()),
        }
    }
}
