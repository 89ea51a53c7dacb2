//! Scenario files: the simulated fleet, its fault schedule and the checks
//! to run afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use iotra_core::cloudgw::{Destination, RouteRule};
use iotra_core::edge::{Calibration, ControlRule, EdgeRule};
use iotra_core::infomodel::{Datatype, ModelRegistry, ObjectClass, PayloadMap, PropertyDef};
use iotra_core::streams::PipelineSpec;
use iotra_core::TypedScalar;
use serde::{Deserialize, Serialize};

use crate::waveform::WaveformSpec;
use crate::HarnessError;

pub const TICK_MS: i64 = 100;
pub const NODE_CLASS: &str = "sim_node";
pub const SENSOR_ROOT: &str = "sensor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub sensor: String,
    #[serde(default)]
    pub unit: String,
    pub period_ms: u64,
    pub waveform: WaveformSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimNodeSpec {
    pub name: String,
    /// Number of identical nodes; more than one names them `<name>-1`...
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub edge_rules: Vec<EdgeRule>,
    #[serde(default)]
    pub control_rules: Vec<ControlRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_capacity: Option<usize>,
}

fn one() -> usize {
    1
}

impl SimNodeSpec {
    pub fn names(&self) -> Vec<String> {
        if self.replicas == 1 {
            vec![self.name.clone()]
        } else {
            (1..=self.replicas).map(|i| format!("{}-{i}", self.name)).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// The node's uplink is cut; it buffers and reconnects afterwards.
    UplinkOutage,
    /// The node republishes its latest data frame `factor` times its
    /// normal per-tick frame rate.
    Flood,
    /// Each publish is duplicated, and each cloud ack dropped, with
    /// `probability`.
    DuplicateReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    /// Targets; `duplicate_replay` with no targets hits every node.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<String>,
    pub start_ms: i64,
    pub end_ms: i64,
    #[serde(default = "default_probability")]
    pub probability: f64,
    #[serde(default = "default_factor")]
    pub factor: u32,
}

fn default_probability() -> f64 {
    0.2
}

fn default_factor() -> u32 {
    100
}

impl FaultSpec {
    pub fn new(kind: FaultKind, nodes: &[&str], start_ms: i64, end_ms: i64) -> Self {
        FaultSpec {
            kind,
            node: None,
            nodes: nodes.iter().map(|n| n.to_string()).collect(),
            start_ms,
            end_ms,
            probability: default_probability(),
            factor: default_factor(),
        }
    }

    pub fn targets(&self) -> Vec<&str> {
        self.node.iter().chain(&self.nodes).map(String::as_str).collect()
    }

    pub fn active(&self, now_ms: i64) -> bool {
        now_ms >= self.start_ms && now_ms < self.end_ms
    }

    pub fn hits(&self, name: &str) -> bool {
        let targets = self.targets();
        (targets.is_empty() && self.kind == FaultKind::DuplicateReplay) || targets.contains(&name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    SetDesired { set: PayloadMap },
    PushUpdate { version: String, digest: String },
    /// Closes every open incident of the node.
    Remediate,
    Decommission,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub at_ms: i64,
    pub node: String,
    #[serde(flatten)]
    pub action: ActionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub duration_ms: i64,
    /// Quiet time after generation stops, for flushes and redelivery.
    #[serde(default = "default_drain")]
    pub drain_ms: i64,
    #[serde(default = "default_bucket")]
    pub bucket_ms: i64,
    #[serde(default = "default_report_period")]
    pub report_period_ms: i64,
    pub nodes: Vec<SimNodeSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub actions: Vec<ActionSpec>,
    #[serde(default)]
    pub pipelines: Vec<PipelineSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routes: Option<Vec<RouteRule>>,
    #[serde(default)]
    pub assertions: Vec<String>,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_drain() -> i64 {
    5_000
}

fn default_bucket() -> i64 {
    1_000
}

fn default_report_period() -> i64 {
    10_000
}

pub const ASSERTIONS: &[&str] = &[
    "lossless",
    "gap_free",
    "twins_converged",
    "incident_opened",
    "no_collateral",
    "quarantine_enforced",
    "lambda_consistent",
    "outage_flushed",
];

impl ScenarioSpec {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let spec: ScenarioSpec = serde_json::from_str(&text).map_err(|e| HarnessError::BadScenario(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn node_names(&self) -> Vec<String> {
        self.nodes.iter().flat_map(SimNodeSpec::names).collect()
    }

    pub fn routes(&self) -> Vec<RouteRule> {
        self.routes.clone().unwrap_or_else(|| {
            vec![
                RouteRule::new("data/#", &[Destination::Streams, Destination::Tsdb]),
                RouteRule::new("twin/+/reported", &[Destination::Twin]),
            ]
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::BadScenario(m));
        if self.duration_ms <= 0 || self.duration_ms % TICK_MS != 0 {
            return bad(format!("duration_ms must be a positive multiple of {TICK_MS}"));
        }
        if self.drain_ms < 0 || self.bucket_ms <= 0 || self.bucket_ms % TICK_MS != 0 || self.report_period_ms <= 0 {
            return bad("drain_ms, bucket_ms and report_period_ms out of range".into());
        }
        let names = self.node_names();
        let known: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        if known.len() != names.len() {
            return bad("node names must be unique".into());
        }
        for n in &self.nodes {
            if n.replicas == 0 || n.channels.is_empty() {
                return bad(format!("node {} needs replicas and channels", n.name));
            }
            for c in &n.channels {
                c.waveform.validate()?;
            }
        }
        for f in &self.faults {
            if f.start_ms < 0 || f.start_ms >= f.end_ms || f.end_ms > self.duration_ms {
                return bad(format!("{:?} fault window must lie within the duration", f.kind));
            }
            if !(0.0..=1.0).contains(&f.probability) {
                return bad("fault probability must be within [0, 1]".into());
            }
            if f.kind != FaultKind::DuplicateReplay && f.targets().is_empty() {
                return bad(format!("{:?} fault needs target nodes", f.kind));
            }
            if let Some(t) = f.targets().into_iter().find(|t| !known.contains(t)) {
                return bad(format!("fault targets unknown node {t}"));
            }
        }
        for a in &self.actions {
            if !known.contains(a.node.as_str()) {
                return bad(format!("action targets unknown node {}", a.node));
            }
            if a.at_ms < 0 || a.at_ms > self.duration_ms + self.drain_ms {
                return bad(format!("action at {} ms is outside the run", a.at_ms));
            }
        }
        if let Some(a) = self.assertions.iter().find(|a| !ASSERTIONS.contains(&a.as_str())) {
            return bad(format!("unknown assertion {a}"));
        }
        Ok(())
    }

    /// Class registry for the scenario: one class per sensor name under a
    /// common root, and a node class declaring every state key the nodes
    /// can report.
    pub fn models(&self) -> Result<ModelRegistry, HarnessError> {
        let mut reg = ModelRegistry::new();
        let boot = |e: iotra_core::infomodel::InfoModelError| HarnessError::BootFailure(e.to_string());
        reg.register_class(ObjectClass::new(SENSOR_ROOT)).map_err(boot)?;
        let mut units: BTreeMap<&str, &str> = BTreeMap::new();
        for c in self.nodes.iter().flat_map(|n| &n.channels) {
            if let Some(prev) = units.insert(&c.sensor, &c.unit) {
                if prev != c.unit {
                    return Err(HarnessError::BadScenario(format!("sensor {} has two units", c.sensor)));
                }
            }
        }
        let mut node_class = ObjectClass::new(NODE_CLASS);
        for (sensor, unit) in &units {
            let mut prop = PropertyDef::new(sensor, Datatype::Number).required();
            if !unit.is_empty() {
                prop = prop.unit(unit);
            }
            reg.register_class(ObjectClass::new(&sensor_class(sensor)).parent(SENSOR_ROOT).property(prop))
                .map_err(boot)?;
            node_class = node_class.property(PropertyDef::new(&format!("{sensor}_period_ms"), Datatype::Number).writable());
        }
        let mut state: BTreeMap<String, Datatype> = BTreeMap::new();
        for n in &self.nodes {
            for r in &n.control_rules {
                state.insert(r.action.state_key(), datatype_of(&r.action.value));
            }
        }
        for a in &self.actions {
            if let ActionKind::SetDesired { set } = &a.action {
                for (k, v) in set {
                    state.entry(k.clone()).or_insert(datatype_of(v));
                }
            }
        }
        for (key, dt) in state {
            if !units.contains_key(key.strip_suffix("_period_ms").unwrap_or("")) {
                node_class = node_class.property(PropertyDef::new(&key, dt).writable());
            }
        }
        reg.register_class(node_class).map_err(boot)?;
        Ok(reg)
    }
}

pub fn sensor_class(sensor: &str) -> String {
    format!("{sensor}_sensor")
}

fn datatype_of(v: &TypedScalar) -> Datatype {
    match v {
        TypedScalar::Number(_) => Datatype::Number,
        TypedScalar::Str(_) => Datatype::String,
        TypedScalar::Bool(_) => Datatype::Boolean,
        TypedScalar::Time(_) => Datatype::Timestamp,
    }
}

/// `nodes × sensors` fleet sampling every channel at `hz` with smooth
/// signals; the shape used by the throughput and fault scenarios.
pub fn uniform_fleet(name: &str, seed: u64, nodes: usize, sensors: &[&str], hz: u64, duration_ms: i64) -> ScenarioSpec {
    let period_ms = 1000 / hz;
    let channels = sensors
        .iter()
        .enumerate()
        .map(|(i, s)| ChannelSpec {
            sensor: s.to_string(),
            unit: String::new(),
            period_ms,
            waveform: if i % 2 == 0 {
                WaveformSpec::sine(50.0 + i as f64, 10.0, 60_000)
            } else {
                WaveformSpec::random_walk(20.0, 0.25, seed.wrapping_add(i as u64))
            },
            calibration: None,
        })
        .collect();
    ScenarioSpec {
        name: name.to_string(),
        seed,
        duration_ms,
        drain_ms: default_drain(),
        bucket_ms: default_bucket(),
        report_period_ms: default_report_period(),
        nodes: vec![SimNodeSpec {
            name: "node".into(),
            replicas: nodes,
            tags: BTreeMap::new(),
            channels,
            edge_rules: Vec::new(),
            control_rules: Vec::new(),
            queue_capacity: None,
        }],
        faults: Vec::new(),
        actions: Vec::new(),
        pipelines: Vec::new(),
        routes: None,
        assertions: Vec::new(),
    }
}
