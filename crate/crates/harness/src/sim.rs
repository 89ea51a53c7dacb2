//! In-process scenario runner on a virtual clock.
//!
//! One broker, the cloud services and every simulated edge node share a
//! single thread. Each 100 ms tick runs, in order: scheduled actions, the
//! monitoring bucket (on bucket boundaries), cloud ingestion of everything
//! published during the previous tick, then each node (connect, sample,
//! commands, uplink flush, fault traffic).

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Duration;

use iotra_core::cloudgw::{Admitted, CloudGateway, Destination};
use iotra_core::controlplane::{ControlConfig, ControlPlane, IncidentKind, IncidentState, Lifecycle};
use iotra_core::edge::{ChannelConfig, EdgeNode, NodeConfig, QueuedFrame, UplinkConfig, UplinkSession, Disconnected, DEFAULT_BUFFER_CAPACITY};
use iotra_core::infomodel::codec::encode_reading;
use iotra_core::infomodel::{ModelRegistry, ThingInstance};
use iotra_core::msgbus::{Broker, BrokerConfig, BusError, Frame, Qos, SessionId};
use iotra_core::streams::{Emission, Pipeline, ReplayStore, StreamProcessor, Target};
use iotra_core::tsdb::{Agg, Tsdb};
use iotra_core::twins::{DesiredPatch, TwinService};
use iotra_core::{ChannelKey, Reading, Timestamp, TypedScalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::report::*;
use crate::scenario::{sensor_class, ActionKind, FaultKind, ScenarioSpec, NODE_CLASS, TICK_MS};
use crate::state::StateDir;
use crate::waveform::Waveform;
use crate::HarnessError;

pub const CLOUD_SERVICE: &str = "cloud";
pub const CLOUD_FILTERS: [&str; 4] = ["data/#", "twin/+/reported", "mgmt/+/status", "alerts/#"];
pub const LAMBDA_TOLERANCE: f64 = 1e-9;
pub const FLUSH_DEADLINE_MS: i64 = 5_000;
pub const DETECTION_BUCKETS: i64 = 3;
const RECONNECT_BACKOFF_MS: i64 = 1_000;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub secret: Vec<u8>,
    /// Persist registry, twins, time series and retained commands here.
    pub state_dir: Option<PathBuf>,
    /// Sleep one tick of wall time per virtual tick.
    pub realtime: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            secret: b"iotra-dev-secret".to_vec(),
            state_dir: None,
            realtime: false,
        }
    }
}

struct Channel {
    sensor: String,
    wave: Waveform,
    next_due: i64,
}

struct SimNode {
    name: String,
    node_id: String,
    credential: String,
    edge: EdgeNode,
    channels: Vec<Channel>,
    session: Option<SessionId>,
    next_connect: i64,
    last_data: Option<QueuedFrame>,
    frames_per_tick: u64,
    flood_attempts: u64,
    ledger: BTreeMap<String, Vec<Reading>>,
}

struct OutageTrack {
    node: usize,
    start: i64,
    end: i64,
    cut: bool,
    reconnect: Option<i64>,
    drained: Option<i64>,
    backlog: usize,
}

struct FloodTrack {
    node: usize,
    start: i64,
    end: i64,
    incident: Option<(String, i64)>,
    admitted_after: u64,
    rejected_after: u64,
}

struct WindowCheck {
    agg: Agg,
    channel: ChannelKey,
    start: Timestamp,
    end: Timestamp,
    value: f64,
}

/// A booted scenario. [`Simulation::run`] drives it to completion; the
/// accessors expose the final state for independent checks.
pub struct Simulation {
    spec: ScenarioSpec,
    opts: RunOptions,
    models: ModelRegistry,
    broker: Broker,
    cp: ControlPlane,
    gw: CloudGateway,
    twins: TwinService,
    streams: StreamProcessor,
    tsdb: Tsdb,
    cloud: SessionId,
    nodes: Vec<SimNode>,
    by_id: BTreeMap<String, usize>,
    rng: ChaCha8Rng,
    outages: Vec<OutageTrack>,
    floods: Vec<FloodTrack>,
    delivered: BTreeMap<ChannelKey, u64>,
    gateway: GatewaySummary,
    emissions: u64,
    window_aggs: BTreeMap<String, Option<Agg>>,
    windows: Vec<WindowCheck>,
    refused_seen: BTreeMap<String, u64>,
    last_desired: BTreeMap<String, i64>,
    converged_at: BTreeMap<String, i64>,
    ticks: u64,
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Aggregate checked by the lambda comparison: pipelines whose only
/// transform is a single window, so emissions are comparable with stored
/// raw data.
fn comparable_window(spec: &iotra_core::streams::PipelineSpec) -> Option<Agg> {
    let windows: Vec<_> = spec.nodes.iter().filter(|n| n.kind == "window").collect();
    let transforms = spec.nodes.iter().any(|n| n.kind == "map" || n.kind == "filter");
    match windows.as_slice() {
        [w] if !transforms => w.params.get("agg")?.as_str()?.parse().ok(),
        _ => None,
    }
}

impl Simulation {
    pub fn new(spec: ScenarioSpec, opts: RunOptions) -> Result<Self, HarnessError> {
        spec.validate()?;
        let boot = |e: &dyn std::fmt::Display| HarnessError::BootFailure(e.to_string());
        let mut models = spec.models()?;
        let mut broker = Broker::new(BrokerConfig::default());
        let state = opts.state_dir.as_deref().map(StateDir::new);
        let config = ControlConfig::new(&opts.secret);
        let (mut cp, tsdb, mut twins, mut gw, mut streams) = match &state {
            Some(s) => {
                s.create()?;
                s.save_models(&models)?;
                for f in s.load_retained()? {
                    broker.restore_retained(f);
                }
                let twins = match s.load_twins()? {
                    Some(t) => t,
                    None => TwinService::new(spec.report_period_ms),
                };
                (
                    ControlPlane::open(config, &s.registry_path()).map_err(|e| boot(&e))?,
                    Tsdb::open(s.root()).map_err(|e| boot(&e))?,
                    twins,
                    CloudGateway::new(spec.routes()).map_err(|e| boot(&e))?.with_audit_file(&s.audit_path()),
                    StreamProcessor::new(ReplayStore::default()).with_notify_log(&s.notify_path()),
                )
            }
            None => (
                ControlPlane::new(config),
                Tsdb::in_memory(),
                TwinService::new(spec.report_period_ms),
                CloudGateway::new(spec.routes()).map_err(|e| boot(&e))?,
                StreamProcessor::new(ReplayStore::default()),
            ),
        };
        gw.set_policy(NODE_CLASS, iotra_core::cloudgw::SchemaPolicy::Strict);
        let mut window_aggs = BTreeMap::new();
        for p in &spec.pipelines {
            window_aggs.insert(p.name.clone(), comparable_window(p));
            streams.deploy(Pipeline::new(p.clone()).map_err(|e| boot(&e))?);
        }

        let cloud = broker.connect_service(CLOUD_SERVICE);
        for f in CLOUD_FILTERS {
            broker.subscribe(cloud, f, Timestamp(0)).map_err(|e| boot(&e))?;
        }

        let t0 = Timestamp(0);
        let mut nodes = Vec::new();
        let mut by_id = BTreeMap::new();
        let mut by_name = BTreeMap::new();
        for ns in &spec.nodes {
            for name in ns.names() {
                let entry = cp.commission(&name, NODE_CLASS, &models, t0).map_err(|e| boot(&e))?;
                let entry = cp.transition(&entry.node_id, Lifecycle::Active, t0, &mut broker).map_err(|e| boot(&e))?;
                let node_id = entry.node_id.clone();
                let credential = entry.credential.clone().ok_or_else(|| boot(&"active node without credential"))?;
                let tag = |mut inst: ThingInstance| {
                    for (k, v) in &ns.tags {
                        inst = inst.tag(k, v);
                    }
                    inst
                };
                let node_inst = tag(ThingInstance::new(&node_id, NODE_CLASS));
                models.register_instance(node_inst.clone()).map_err(|e| boot(&e))?;
                let mut channels = Vec::new();
                let mut configs = Vec::new();
                let mut frames_per_tick = 0.0;
                for c in &ns.channels {
                    let class = sensor_class(&c.sensor);
                    models
                        .register_instance(tag(ThingInstance::new(&format!("{node_id}/{}", c.sensor), &class)))
                        .map_err(|e| boot(&e))?;
                    let mut cfg = ChannelConfig::new(&c.sensor, &class, c.period_ms, &c.unit);
                    if let Some(cal) = c.calibration {
                        cfg.calibration = cal;
                    }
                    configs.push(cfg);
                    channels.push(Channel {
                        sensor: c.sensor.clone(),
                        wave: Waveform::new(c.waveform.clone())?,
                        next_due: 0,
                    });
                    frames_per_tick += TICK_MS as f64 / c.period_ms as f64;
                }
                let edge = EdgeNode::new(NodeConfig {
                    node_id: node_id.clone(),
                    instances: vec![node_inst],
                    channels: configs,
                    edge_rules: ns.edge_rules.clone(),
                    control_rules: ns.control_rules.clone(),
                    buffer_capacity: DEFAULT_BUFFER_CAPACITY,
                    uplink: UplinkConfig {
                        broker: cp.config().broker_addr.clone(),
                        credential: credential.clone(),
                        queue_capacity: ns.queue_capacity,
                    },
                })
                .map_err(|e| boot(&e))?;
                twins.register(&node_id, NODE_CLASS);
                by_id.insert(node_id.clone(), nodes.len());
                by_name.insert(name.clone(), nodes.len());
                nodes.push(SimNode {
                    name,
                    node_id,
                    credential,
                    edge,
                    channels,
                    session: None,
                    next_connect: 0,
                    last_data: None,
                    frames_per_tick: frames_per_tick.ceil().max(1.0) as u64,
                    flood_attempts: 0,
                    ledger: BTreeMap::new(),
                });
            }
        }

        let mut outages = Vec::new();
        let mut floods = Vec::new();
        for f in &spec.faults {
            for t in f.targets() {
                let node = by_name[t];
                match f.kind {
                    FaultKind::UplinkOutage => outages.push(OutageTrack {
                        node,
                        start: f.start_ms,
                        end: f.end_ms,
                        cut: false,
                        reconnect: None,
                        drained: None,
                        backlog: 0,
                    }),
                    FaultKind::Flood => floods.push(FloodTrack {
                        node,
                        start: f.start_ms,
                        end: f.end_ms,
                        incident: None,
                        admitted_after: 0,
                        rejected_after: 0,
                    }),
                    FaultKind::DuplicateReplay => {}
                }
            }
        }

        Ok(Simulation {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            opts,
            models,
            broker,
            cp,
            gw,
            twins,
            streams,
            tsdb,
            cloud,
            nodes,
            by_id,
            outages,
            floods,
            delivered: BTreeMap::new(),
            gateway: GatewaySummary::default(),
            emissions: 0,
            window_aggs,
            windows: Vec::new(),
            refused_seen: BTreeMap::new(),
            last_desired: BTreeMap::new(),
            converged_at: BTreeMap::new(),
            ticks: 0,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn tsdb(&self) -> &Tsdb {
        &self.tsdb
    }

    pub fn twins(&self) -> &TwinService {
        &self.twins
    }

    pub fn control_plane(&self) -> &ControlPlane {
        &self.cp
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn gateway(&self) -> &CloudGateway {
        &self.gw
    }

    pub fn streams(&self) -> &StreamProcessor {
        &self.streams
    }

    pub fn models(&self) -> &ModelRegistry {
        &self.models
    }

    /// Node id assigned to a scenario node name.
    pub fn node_id(&self, name: &str) -> Option<&str> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.node_id.as_str())
    }

    pub fn edge(&self, name: &str) -> Option<&EdgeNode> {
        self.nodes.iter().find(|n| n.name == name).map(|n| &n.edge)
    }

    /// Every reading the named node generated, per sensor, in order.
    pub fn ledger(&self, name: &str) -> Option<&BTreeMap<String, Vec<Reading>>> {
        self.nodes.iter().find(|n| n.name == name).map(|n| &n.ledger)
    }

    pub fn run(&mut self) -> Result<RunReport, HarnessError> {
        let total = (self.spec.duration_ms + self.spec.drain_ms) / TICK_MS;
        for tick in 0..=total {
            self.step(tick * TICK_MS)?;
            if self.opts.realtime {
                std::thread::sleep(Duration::from_millis(TICK_MS as u64));
            }
        }
        let out = self.streams.flush(Timestamp(self.spec.duration_ms))?;
        self.emit(out, Timestamp(self.spec.duration_ms))?;
        self.persist()?;
        Ok(self.report())
    }

    fn step(&mut self, now_ms: i64) -> Result<(), HarnessError> {
        let now = Timestamp(now_ms);
        self.ticks += 1;
        self.run_actions(now_ms)?;
        if now_ms > 0 && now_ms % self.spec.bucket_ms == 0 {
            self.monitor(now)?;
        }
        self.ingest(now)?;
        self.broker.redeliver_pending(now);
        for i in 0..self.nodes.len() {
            self.step_node(i, now_ms)?;
        }
        Ok(())
    }

    fn run_actions(&mut self, now_ms: i64) -> Result<(), HarnessError> {
        let due: Vec<_> = self
            .spec
            .actions
            .iter()
            .filter(|a| a.at_ms >= now_ms && a.at_ms < now_ms + TICK_MS)
            .cloned()
            .collect();
        let now = Timestamp(now_ms);
        for a in due {
            let Some(node_id) = self.node_id(&a.node).map(str::to_string) else {
                continue;
            };
            match a.action {
                ActionKind::SetDesired { set } => {
                    let patch = DesiredPatch {
                        set,
                        origin: "scenario".into(),
                        ts: now,
                    };
                    self.twins.set_desired(&node_id, &patch, &self.models, &mut self.broker)?;
                    self.last_desired.insert(node_id.clone(), now_ms);
                    self.converged_at.remove(&node_id);
                }
                ActionKind::PushUpdate { version, digest } => {
                    self.cp.push_update(&node_id, &version, &digest, now, &mut self.broker)?;
                }
                ActionKind::Remediate => {
                    let open: Vec<String> = self
                        .cp
                        .incidents()
                        .filter(|i| i.node_id == node_id && i.state != IncidentState::Closed)
                        .map(|i| i.incident_id.clone())
                        .collect();
                    for id in open {
                        self.cp.remediate(&id, now, &mut self.broker)?;
                    }
                }
                ActionKind::Decommission => {
                    self.cp.transition(&node_id, Lifecycle::Decommissioned, now, &mut self.broker)?;
                }
            }
        }
        Ok(())
    }

    /// Closes one monitoring bucket. Only nodes holding a session are
    /// sampled, so an offline node does not drag its baseline to zero.
    fn monitor(&mut self, now: Timestamp) -> Result<(), HarnessError> {
        let counts = self.broker.take_publish_counts();
        let active: Vec<String> = self
            .cp
            .entries()
            .filter(|e| e.lifecycle == Lifecycle::Active)
            .map(|e| e.node_id.clone())
            .collect();
        for node_id in active {
            if self.broker.node_session(&node_id).is_none() && !counts.contains_key(&node_id) {
                continue;
            }
            let count = counts.get(&node_id).copied().unwrap_or(0);
            let obs = self.cp.observe(&node_id, count, now, &mut self.broker)?;
            if let Some(id) = obs.incident {
                let idx = self.by_id[&node_id];
                if let Some(f) = self
                    .floods
                    .iter_mut()
                    .find(|f| f.node == idx && f.incident.is_none() && f.start <= now.0)
                {
                    f.incident = Some((id, now.0));
                }
            }
        }
        for n in &self.nodes {
            let total = self.broker.refused_connects(&n.node_id);
            let seen = self.refused_seen.insert(n.node_id.clone(), total).unwrap_or(0);
            self.cp.observe_refusals(&n.node_id, total - seen, now)?;
        }
        self.twins.refresh_connectivity(now, &self.broker);
        Ok(())
    }

    fn dup_probability(&self, name: &str, now_ms: i64) -> Option<f64> {
        self.spec
            .faults
            .iter()
            .filter(|f| f.kind == FaultKind::DuplicateReplay && f.active(now_ms) && f.hits(name))
            .map(|f| f.probability)
            .reduce(f64::max)
    }

    fn ingest(&mut self, now: Timestamp) -> Result<(), HarnessError> {
        let frames = self.broker.poll(self.cloud);
        for frame in frames {
            let sender = self.by_id.get(&frame.msg_id.sender).copied();
            if let Some(ch) = data_channel(&frame.topic) {
                *self.delivered.entry(ch).or_default() += 1;
            }
            let (decision, admitted) = self.gw.admit(&frame, &self.cp, &self.models);
            if decision.admitted() {
                self.gateway.admitted += 1;
            } else {
                *self.gateway.rejected.entry(label(&decision.reason)).or_default() += 1;
            }
            if let Some(idx) = sender {
                for f in self.floods.iter_mut().filter(|f| f.node == idx) {
                    if f.incident.as_ref().is_some_and(|(_, t)| *t <= now.0) {
                        if decision.admitted() {
                            f.admitted_after += 1;
                        } else {
                            f.rejected_after += 1;
                        }
                    }
                }
            }
            let drop_ack = sender
                .and_then(|i| self.dup_probability(&self.nodes[i].name, now.0))
                .is_some_and(|p| self.rng.random::<f64>() < p);
            if drop_ack {
                self.gateway.acks_dropped += 1;
            } else {
                self.broker.ack(self.cloud, &frame.msg_id);
            }
            if let Some(a) = admitted {
                self.deliver(a, &frame, now)?;
            }
        }
        Ok(())
    }

    fn deliver(&mut self, admitted: Admitted, frame: &Frame, now: Timestamp) -> Result<(), HarnessError> {
        match admitted {
            Admitted::Readings(rs) => {
                for (r, dest) in rs {
                    if dest.contains(&Destination::Streams) {
                        let out = self.streams.process(&r)?;
                        self.emit(out, now)?;
                    }
                    if dest.contains(&Destination::Tsdb) {
                        self.tsdb.append(r)?;
                    }
                }
            }
            Admitted::TwinReport { node, doc, ack_version, ts } => {
                let twin = self.twins.apply_report(&node, &doc, ack_version, ts, &self.models)?;
                if twin.converged() && self.last_desired.contains_key(&node) {
                    self.converged_at.entry(node).or_insert(now.0);
                }
            }
            Admitted::Status { node, payload } => self.cp.record_status(&node, &payload, frame.ts)?,
            Admitted::Alert { .. } => self.gateway.alerts += 1,
        }
        Ok(())
    }

    fn emit(&mut self, out: Vec<Emission>, now: Timestamp) -> Result<(), HarnessError> {
        for e in out {
            self.emissions += 1;
            if let (Some(Some(agg)), Some((start, end))) = (self.window_aggs.get(&e.pipeline), e.item.window) {
                if let Some(value) = e.item.value.as_f64() {
                    self.windows.push(WindowCheck {
                        agg: *agg,
                        channel: e.item.channel.clone(),
                        start,
                        end,
                        value,
                    });
                }
            }
            match e.target {
                Target::Tsdb(channel) => {
                    let mut r = e.item.to_reading();
                    r.channel = channel;
                    r.seq = 0;
                    self.tsdb.append(r)?;
                }
                Target::Topic(topic) => {
                    let body = encode_reading(&e.item.channel.node_id, &e.item.to_reading());
                    // derived topics may collide with node subtrees; the
                    // gateway rejects those on sender mismatch
                    let _ = self.broker.publish(self.cloud, &topic, body, Qos::AtMostOnce, false, now);
                }
                Target::TwinDesired { node_id, property } => {
                    let patch = DesiredPatch {
                        set: [(property, e.item.value.clone())].into(),
                        origin: e.pipeline.clone(),
                        ts: now,
                    };
                    if self.twins.set_desired(&node_id, &patch, &self.models, &mut self.broker).is_ok() {
                        self.last_desired.insert(node_id.clone(), now.0);
                        self.converged_at.remove(&node_id);
                    }
                }
                Target::Notify { .. } => {}
            }
        }
        Ok(())
    }

    fn step_node(&mut self, i: usize, now_ms: i64) -> Result<(), HarnessError> {
        let now = Timestamp(now_ms);
        let generating = now_ms < self.spec.duration_ms;

        let mut in_outage = false;
        for o in self.outages.iter_mut().filter(|o| o.node == i) {
            if now_ms >= o.start && now_ms < o.end {
                in_outage = true;
                if !o.cut {
                    o.cut = true;
                    self.broker.close_node(&self.nodes[i].node_id);
                }
            }
        }

        let node = &mut self.nodes[i];
        if node.session.is_some_and(|s| !self.broker.is_connected(s)) {
            node.session = None;
        }
        if node.session.is_none() && !in_outage && now_ms >= node.next_connect {
            match self.broker.connect_node(&node.node_id, &node.credential, &self.cp) {
                Ok(s) => {
                    for f in node.edge.command_filters() {
                        self.broker.subscribe(s, &f, now)?;
                    }
                    node.session = Some(s);
                    for o in self.outages.iter_mut().filter(|o| o.node == i && o.cut && o.reconnect.is_none()) {
                        o.reconnect = Some(now_ms);
                        o.backlog = node.edge.uplink().len();
                    }
                }
                Err(BusError::AuthRefused(_)) => node.next_connect = now_ms + RECONNECT_BACKOFF_MS,
                Err(e) => return Err(e.into()),
            }
        }

        if generating {
            for c in &mut node.channels {
                if c.next_due > now_ms {
                    continue;
                }
                let raw = c.wave.at(now_ms)?;
                let out = node.edge.sample(&c.sensor, raw, now)?;
                if let Some(r) = out.reading {
                    node.ledger.entry(c.sensor.clone()).or_default().push(r);
                }
                if !out.actuations.is_empty() {
                    node.edge.queue_reported(now);
                }
                let period = node.edge.config().channel(&c.sensor).map_or(TICK_MS as u64, |cfg| cfg.sample_period_ms);
                c.next_due = now_ms + period as i64;
            }
        }
        if now_ms % self.spec.report_period_ms == 0 {
            node.edge.queue_reported(now);
        }

        if let Some(s) = node.session {
            for f in self.broker.poll(s) {
                // malformed commands are dropped, like on a real device
                let _ = node.edge.handle_command(&f.topic, &f.payload, now);
                if f.qos == Qos::AtLeastOnce {
                    self.broker.ack(s, &f.msg_id);
                }
            }
            let dup = self
                .spec
                .faults
                .iter()
                .filter(|f| f.kind == FaultKind::DuplicateReplay && f.active(now_ms) && f.hits(&node.name))
                .map(|f| f.probability)
                .reduce(f64::max);
            let mut link = SimUplink {
                broker: &mut self.broker,
                session: s,
                now,
                dup,
                rng: &mut self.rng,
                last_data: &mut node.last_data,
                duplicates: 0,
            };
            node.edge.flush(&mut link);
            self.gateway.duplicates_published += link.duplicates;
            for o in self.outages.iter_mut().filter(|o| o.node == i && o.reconnect.is_some() && o.drained.is_none()) {
                if node.edge.uplink().is_empty() {
                    o.drained = Some(now_ms);
                }
            }
        }

        let flooding = self
            .spec
            .faults
            .iter()
            .filter(|f| f.kind == FaultKind::Flood && f.active(now_ms) && f.hits(&node.name))
            .map(|f| f.factor as u64)
            .max();
        if let (Some(factor), Some(frame)) = (flooding, node.last_data.clone()) {
            let copies = factor * node.frames_per_tick;
            for _ in 0..copies {
                node.flood_attempts += 1;
                let Some(s) = node.session else { break };
                if self
                    .broker
                    .publish(s, &frame.topic, frame.payload.as_str(), frame.qos, false, now)
                    .is_err()
                {
                    break;
                }
            }
        }
        Ok(())
    }

    fn persist(&mut self) -> Result<(), HarnessError> {
        if let Some(dir) = &self.opts.state_dir {
            let s = StateDir::new(dir);
            s.save_twins(&self.twins)?;
            s.save_retained(self.broker.retained_frames())?;
        }
        Ok(())
    }

    fn check_windows(&self) -> (u64, f64) {
        let mut max = 0.0f64;
        let mut n = 0;
        for w in &self.windows {
            let size = w.end.0 - w.start.0;
            let stored = if w.start.0.rem_euclid(size) == 0 {
                self.tsdb
                    .downsample(&w.channel, w.start, w.end, size, w.agg)
                    .ok()
                    .and_then(|b| b.first().map(|(_, v)| *v))
            } else {
                self.tsdb.query_range(&w.channel, w.start, w.end).ok().and_then(|rs| {
                    let vals: Vec<f64> = rs.iter().filter_map(|r| r.value.as_f64()).collect();
                    w.agg.apply(&vals)
                })
            };
            let stored = match (stored, w.agg) {
                (None, Agg::Count) => Some(0.0),
                (s, _) => s,
            };
            n += 1;
            max = max.max(stored.map_or(f64::INFINITY, |s| (s - w.value).abs()));
        }
        (n, max)
    }

    pub fn report(&self) -> RunReport {
        let mut channels = Vec::new();
        let mut lossless_by_node: BTreeMap<usize, bool> = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let mut ok = true;
            for (sensor, ledger) in &n.ledger {
                let key = ChannelKey::new(n.node_id.as_str(), sensor.as_str()).expect("ledger channels are valid");
                let stored = self.tsdb.query_all(&key).unwrap_or_default();
                let lossless = same_readings(&stored, ledger);
                let gap_free = stored.iter().enumerate().all(|(k, r)| r.seq == k as u64 + 1);
                ok &= lossless && gap_free;
                channels.push(ChannelReport {
                    channel: key.to_string(),
                    generated: ledger.len() as u64,
                    delivered: self.delivered.get(&key).copied().unwrap_or(0),
                    stored: stored.len() as u64,
                    lossless,
                    gap_free,
                });
            }
            lossless_by_node.insert(i, ok);
        }

        let nodes: Vec<NodeReport> = self
            .nodes
            .iter()
            .map(|n| NodeReport {
                name: n.name.clone(),
                node_id: n.node_id.clone(),
                lifecycle: self.cp.entry(&n.node_id).map(|e| e.lifecycle.to_string()).unwrap_or_default(),
                queued_at_end: n.edge.uplink().len(),
                dropped: n.edge.uplink().dropped(),
                events: n.edge.event_log().len(),
                actuations: n
                    .edge
                    .actuation_log()
                    .iter()
                    .map(|a| ActuationLine {
                        ts_ms: a.ts.0,
                        rule_id: a.rule_id.clone(),
                        actuation: a.actuation.to_string(),
                    })
                    .collect(),
                flood_attempts: n.flood_attempts,
                refused_connects: self.broker.refused_connects(&n.node_id),
            })
            .collect();

        let twins: Vec<TwinSummary> = self
            .nodes
            .iter()
            .filter_map(|n| {
                let t = self.twins.get_twin(&n.node_id).ok()?;
                Some(TwinSummary {
                    node_id: n.node_id.clone(),
                    converged: t.converged(),
                    desired_version: t.desired_version,
                    ack_version: t.ack_version,
                    matches_device: &t.reported == n.edge.device_state(),
                    converged_ms: self.converged_at.get(&n.node_id).copied(),
                    last_desired_ms: self.last_desired.get(&n.node_id).copied(),
                })
            })
            .collect();

        let incidents: Vec<IncidentSummary> = self
            .cp
            .incidents()
            .map(|i| IncidentSummary {
                incident_id: i.incident_id.clone(),
                node_id: i.node_id.clone(),
                kind: label(&i.kind),
                opened_ms: i.opened_ts.0,
                state: label(&i.state),
                actions: i.actions.iter().map(|a| a.action.clone()).collect(),
            })
            .collect();

        let outages: Vec<OutageSummary> = self
            .outages
            .iter()
            .map(|o| OutageSummary {
                node_id: self.nodes[o.node].node_id.clone(),
                start_ms: o.start,
                end_ms: o.end,
                reconnect_ms: o.reconnect,
                drained_ms: o.drained,
                backlog_at_reconnect: o.backlog,
            })
            .collect();

        let floods: Vec<FloodSummary> = self
            .floods
            .iter()
            .map(|f| FloodSummary {
                node_id: self.nodes[f.node].node_id.clone(),
                start_ms: f.start,
                end_ms: f.end,
                incident_id: f.incident.as_ref().map(|(id, _)| id.clone()),
                incident_ms: f.incident.as_ref().map(|(_, t)| *t),
                admitted_after_quarantine: f.admitted_after,
                rejected_after_quarantine: f.rejected_after,
            })
            .collect();

        let (windows_checked, max_abs_diff) = self.check_windows();
        let stream = StreamSummary {
            emissions: self.emissions,
            late: self.streams.late_count(),
            notifications: self.streams.notifications().len(),
            windows_checked,
            max_abs_diff,
        };

        let flooded: BTreeSet<usize> = self.floods.iter().map(|f| f.node).collect();
        let excluded = |i: usize| {
            flooded.contains(&i)
                || self
                    .cp
                    .entry(&self.nodes[i].node_id)
                    .is_some_and(|e| e.lifecycle == Lifecycle::Decommissioned)
        };
        let mut assertions = Vec::new();
        for name in &self.spec.assertions {
            let (passed, detail) = match name.as_str() {
                "lossless" | "no_collateral" => {
                    if name == "no_collateral" && flooded.is_empty() {
                        (false, "no flood fault in scenario".to_string())
                    } else {
                        let bad: Vec<&str> = channels
                            .iter()
                            .filter(|c| !c.lossless)
                            .filter(|c| {
                                let node = c.channel.split('/').next().unwrap_or_default();
                                !excluded(self.by_id[node])
                            })
                            .map(|c| c.channel.as_str())
                            .collect();
                        (bad.is_empty(), format!("{} lossy channels {:?}", bad.len(), bad))
                    }
                }
                "gap_free" => {
                    let bad = lossless_by_node
                        .iter()
                        .filter(|(i, _)| !excluded(**i))
                        .flat_map(|(i, _)| channels.iter().filter(move |c| c.channel.starts_with(&format!("{}/", self.nodes[*i].node_id))))
                        .filter(|c| !c.gap_free)
                        .count();
                    (bad == 0, format!("{bad} channels with seq gaps"))
                }
                "twins_converged" => {
                    let bad: Vec<&str> = twins
                        .iter()
                        .filter(|t| !excluded(self.by_id[&t.node_id]))
                        .filter(|t| !(t.converged && t.matches_device))
                        .map(|t| t.node_id.as_str())
                        .collect();
                    (bad.is_empty(), format!("unconverged {bad:?}"))
                }
                "incident_opened" => {
                    let limit = DETECTION_BUCKETS * self.spec.bucket_ms;
                    let ok = !floods.is_empty()
                        && floods
                            .iter()
                            .all(|f| f.incident_ms.is_some_and(|t| t - f.start_ms <= limit));
                    let lags: Vec<Option<i64>> = floods.iter().map(|f| f.incident_ms.map(|t| t - f.start_ms)).collect();
                    (ok, format!("detection lag ms {lags:?}, limit {limit}"))
                }
                "quarantine_enforced" => {
                    let ok = !floods.is_empty()
                        && floods.iter().all(|f| {
                            f.incident_id.is_some()
                                && f.admitted_after_quarantine == 0
                                && self
                                    .cp
                                    .incidents()
                                    .any(|i| Some(&i.incident_id) == f.incident_id.as_ref() && i.kind == IncidentKind::TrafficFlood)
                        });
                    let after: Vec<u64> = floods.iter().map(|f| f.admitted_after_quarantine).collect();
                    (ok, format!("admitted after quarantine {after:?}"))
                }
                "lambda_consistent" => (
                    windows_checked > 0 && max_abs_diff <= LAMBDA_TOLERANCE,
                    format!("{windows_checked} windows, max |diff| {max_abs_diff:e}"),
                ),
                "outage_flushed" => {
                    let ok = !outages.is_empty()
                        && outages.iter().all(|o| {
                            matches!((o.reconnect_ms, o.drained_ms), (Some(r), Some(d)) if d - r <= FLUSH_DEADLINE_MS)
                        });
                    let lags: Vec<Option<i64>> = outages
                        .iter()
                        .map(|o| o.reconnect_ms.zip(o.drained_ms).map(|(r, d)| d - r))
                        .collect();
                    (ok, format!("flush ms {lags:?}"))
                }
                other => (false, format!("unknown assertion {other}")),
            };
            assertions.push(AssertionResult {
                name: name.clone(),
                passed,
                detail,
            });
        }

        RunReport {
            scenario: self.spec.name.clone(),
            seed: self.spec.seed,
            duration_ms: self.spec.duration_ms,
            ticks: self.ticks,
            passed: assertions.iter().all(|a| a.passed),
            nodes,
            channels,
            twins,
            incidents,
            outages,
            floods,
            gateway: self.gateway.clone(),
            stream,
            assertions,
        }
    }
}

/// Boots and runs a scenario in memory.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<RunReport, HarnessError> {
    Simulation::new(spec.clone(), RunOptions::default())?.run()
}

pub fn run_scenario_with(spec: &ScenarioSpec, opts: RunOptions) -> Result<RunReport, HarnessError> {
    Simulation::new(spec.clone(), opts)?.run()
}

fn data_channel(topic: &str) -> Option<ChannelKey> {
    let mut parts = topic.split('/');
    match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some("data"), Some(node), Some(sensor), None) => ChannelKey::new(node, sensor).ok(),
        _ => None,
    }
}

fn same_readings(stored: &[Reading], ledger: &[Reading]) -> bool {
    stored.len() == ledger.len()
        && stored.iter().zip(ledger).all(|(s, l)| {
            s.seq == l.seq
                && s.ts == l.ts
                && s.unit == l.unit
                && match (&s.value, &l.value) {
                    (TypedScalar::Number(a), TypedScalar::Number(b)) => a.to_bits() == b.to_bits(),
                    (a, b) => a == b,
                }
        })
}

/// Uplink that publishes through the broker and, under a duplicate-replay
/// fault, republishes some frames a second time.
struct SimUplink<'a> {
    broker: &'a mut Broker,
    session: SessionId,
    now: Timestamp,
    dup: Option<f64>,
    rng: &'a mut ChaCha8Rng,
    last_data: &'a mut Option<QueuedFrame>,
    duplicates: u64,
}

impl UplinkSession for SimUplink<'_> {
    fn is_connected(&self) -> bool {
        self.broker.is_connected(self.session)
    }

    fn send(&mut self, frame: &QueuedFrame) -> Result<(), Disconnected> {
        let publish = |b: &mut Broker| b.publish(self.session, &frame.topic, frame.payload.as_str(), frame.qos, frame.retain, self.now);
        match publish(self.broker) {
            Err(BusError::NotConnected) => return Err(Disconnected),
            Err(_) => return Ok(()),
            Ok(_) => {}
        }
        if frame.topic.starts_with("data/") {
            *self.last_data = Some(frame.clone());
        }
        if self.dup.is_some_and(|p| self.rng.random::<f64>() < p) && publish(self.broker).is_ok() {
            self.duplicates += 1;
        }
        Ok(())
    }
}
