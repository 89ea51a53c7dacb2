//! Stream processing over admitted readings.
//!
//! A pipeline is a small dataflow graph (source, filter, map, window, merge,
//! sink) declared in JSON. Every reading handed to [`StreamProcessor`] runs
//! through each deployed pipeline in topological order, and whatever reaches
//! a sink comes back as an [`Emission`]. Recent readings and emitted events
//! are kept in a bounded [`ReplayStore`].

mod replay;
mod window;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tsdb::Agg;
use crate::types::{ChannelKey, CmpOp, Reading, TagSet, Timestamp, TypedScalar};

pub use replay::{ReplayEntry, ReplayStore, DEFAULT_REPLAY_CAPACITY, DEFAULT_REPLAY_SPAN_MS};
pub use window::WindowState;

pub const DEFAULT_LATENESS_MS: i64 = 1_000;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("range start after end")]
    BadRange,
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("edge references unknown node {0}")]
    UnknownNode(String),
    #[error("pipeline graph has a cycle through {0}")]
    Cycle(String),
    #[error("node {node}: {detail}")]
    ArityMismatch { node: String, detail: String },
    #[error("node {0} is not reachable from any source")]
    Unreachable(String),
    #[error("unknown node kind {0}")]
    UnknownKind(String),
    #[error("node {node}: bad params: {detail}")]
    BadParams { node: String, detail: String },
    #[error("bad channel pattern {0}")]
    BadPattern(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `node/sensor` selector where a segment of `*` or `+` matches anything.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPattern {
    node: Option<String>,
    sensor: Option<String>,
}

impl ChannelPattern {
    pub fn matches(&self, channel: &ChannelKey) -> bool {
        self.node.as_ref().is_none_or(|n| *n == channel.node_id)
            && self.sensor.as_ref().is_none_or(|s| *s == channel.sensor)
    }
}

impl FromStr for ChannelPattern {
    type Err = StreamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (node, sensor) = s
            .split_once('/')
            .filter(|(n, s)| !n.is_empty() && !s.is_empty() && !s.contains('/'))
            .ok_or_else(|| StreamError::BadPattern(s.to_string()))?;
        let seg = |x: &str| (x != "*" && x != "+").then(|| x.to_string());
        Ok(ChannelPattern {
            node: seg(node),
            sensor: seg(sensor),
        })
    }
}

impl fmt::Display for ChannelPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let node = self.node.as_deref().unwrap_or("*");
        let sensor = self.sensor.as_deref().unwrap_or("*");
        write!(f, "{node}/{sensor}")
    }
}

/// A value travelling through a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub channel: ChannelKey,
    pub ts: Timestamp,
    pub seq: u64,
    pub value: TypedScalar,
    pub unit: String,
    pub tags: TagSet,
    /// Upstream node recorded by a merge.
    pub source: Option<String>,
    /// Half-open `[start, end)` for window aggregates.
    pub window: Option<(Timestamp, Timestamp)>,
}

impl Item {
    pub fn from_reading(r: &Reading) -> Self {
        Item {
            channel: r.channel.clone(),
            ts: r.ts,
            seq: r.seq,
            value: r.value.clone(),
            unit: r.unit.clone(),
            tags: r.tags.clone(),
            source: None,
            window: None,
        }
    }

    pub fn to_reading(&self) -> Reading {
        Reading {
            channel: self.channel.clone(),
            value: self.value.clone(),
            unit: self.unit.clone(),
            ts: self.ts,
            seq: self.seq,
            tags: self.tags.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Topic(String),
    Tsdb(ChannelKey),
    TwinDesired { node_id: String, property: String },
    Notify { rule: String, severity: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub pipeline: String,
    pub sink: String,
    pub target: Target,
    pub item: Item,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_id: String,
    pub kind: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

impl PipelineSpec {
    pub fn load(path: &Path) -> Result<Self, StreamError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceParams {
    channel: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterParams {
    op: CmpOp,
    value: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapParams {
    scale: Option<f64>,
    offset: Option<f64>,
    convert: Option<String>,
    unit: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowParams {
    size_ms: i64,
    slide_ms: Option<i64>,
    agg: String,
    lateness_ms: Option<i64>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum SinkParams {
    Topic { template: String },
    Tsdb { sensor: Option<String> },
    TwinDesired { property: String },
    Notify { rule: String, severity: String },
}

#[derive(Debug, Clone)]
enum Op {
    Source(ChannelPattern),
    Filter(CmpOp, f64),
    Map { scale: f64, offset: f64, unit: Option<String> },
    Window { size_ms: i64, slide_ms: i64, agg: Agg, lateness_ms: i64 },
    Merge,
    Topic(String),
    Tsdb(Option<String>),
    TwinDesired(String),
    Notify(String, String),
}

impl Op {
    fn is_source(&self) -> bool {
        matches!(self, Op::Source(_))
    }

    fn is_sink(&self) -> bool {
        matches!(self, Op::Topic(_) | Op::Tsdb(_) | Op::TwinDesired(_) | Op::Notify(..))
    }

    fn compile(spec: &NodeSpec) -> Result<Op, StreamError> {
        let bad = |detail: String| StreamError::BadParams {
            node: spec.node_id.clone(),
            detail,
        };
        fn parse<T: for<'de> Deserialize<'de>>(v: &Value) -> Result<T, String> {
            serde_json::from_value(v.clone()).map_err(|e| e.to_string())
        }
        Ok(match spec.kind.as_str() {
            "source" => {
                let p: SourceParams = parse(&spec.params).map_err(bad)?;
                Op::Source(p.channel.parse().map_err(|e: StreamError| bad(e.to_string()))?)
            }
            "filter" => {
                let p: FilterParams = parse(&spec.params).map_err(bad)?;
                Op::Filter(p.op, p.value)
            }
            "map" => {
                let p: MapParams = parse(&spec.params).map_err(bad)?;
                let (scale, offset, unit) = match p.convert.as_deref() {
                    None => (p.scale.unwrap_or(1.0), p.offset.unwrap_or(0.0), p.unit),
                    Some(_) if p.scale.is_some() || p.offset.is_some() => {
                        return Err(bad("convert excludes scale and offset".into()))
                    }
                    Some("f_to_c") => (5.0 / 9.0, -32.0 * 5.0 / 9.0, p.unit.or(Some("Cel".into()))),
                    Some("c_to_f") => (9.0 / 5.0, 32.0, p.unit.or(Some("degF".into()))),
                    Some(other) => return Err(bad(format!("unknown conversion {other}"))),
                };
                if !scale.is_finite() || !offset.is_finite() {
                    return Err(bad("scale and offset must be finite".into()));
                }
                Op::Map { scale, offset, unit }
            }
            "window" => {
                let p: WindowParams = parse(&spec.params).map_err(bad)?;
                let slide_ms = p.slide_ms.unwrap_or(p.size_ms);
                let lateness_ms = p.lateness_ms.unwrap_or(DEFAULT_LATENESS_MS);
                if p.size_ms <= 0 || slide_ms <= 0 || lateness_ms < 0 {
                    return Err(bad("size_ms and slide_ms must be positive".into()));
                }
                let agg = p.agg.parse::<Agg>().map_err(|e| bad(e.to_string()))?;
                Op::Window { size_ms: p.size_ms, slide_ms, agg, lateness_ms }
            }
            "merge" => Op::Merge,
            "sink" => match parse::<SinkParams>(&spec.params).map_err(bad)? {
                SinkParams::Topic { template } => Op::Topic(template),
                SinkParams::Tsdb { sensor } => Op::Tsdb(sensor),
                SinkParams::TwinDesired { property } => Op::TwinDesired(property),
                SinkParams::Notify { rule, severity } => Op::Notify(rule, severity),
            },
            other => return Err(StreamError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug, Clone)]
struct Node {
    id: String,
    op: Op,
    successors: Vec<usize>,
}

/// A validated, deployable pipeline and its window state.
#[derive(Debug, Clone)]
pub struct Pipeline {
    name: String,
    nodes: Vec<Node>,
    order: Vec<usize>,
    windows: HashMap<usize, BTreeMap<ChannelKey, WindowState>>,
}

impl Pipeline {
    pub fn new(spec: PipelineSpec) -> Result<Self, StreamError> {
        let mut index = HashMap::new();
        let mut nodes = Vec::with_capacity(spec.nodes.len());
        for (i, n) in spec.nodes.iter().enumerate() {
            if index.insert(n.node_id.clone(), i).is_some() {
                return Err(StreamError::DuplicateNode(n.node_id.clone()));
            }
            nodes.push(Node {
                id: n.node_id.clone(),
                op: Op::compile(n)?,
                successors: Vec::new(),
            });
        }
        let mut indeg = vec![0usize; nodes.len()];
        let mut seen_edges = BTreeSet::new();
        for (from, to) in &spec.edges {
            let f = *index.get(from).ok_or_else(|| StreamError::UnknownNode(from.clone()))?;
            let t = *index.get(to).ok_or_else(|| StreamError::UnknownNode(to.clone()))?;
            if !seen_edges.insert((f, t)) {
                continue;
            }
            nodes[f].successors.push(t);
            indeg[t] += 1;
        }
        for n in &mut nodes {
            n.successors.sort_by(|a, b| spec.nodes[*a].node_id.cmp(&spec.nodes[*b].node_id));
        }
        for (i, n) in nodes.iter().enumerate() {
            let arity = |detail: &str| StreamError::ArityMismatch {
                node: n.id.clone(),
                detail: detail.to_string(),
            };
            if n.op.is_source() && indeg[i] > 0 {
                return Err(arity("source has inputs"));
            }
            if n.op.is_sink() && !n.successors.is_empty() {
                return Err(arity("sink has outputs"));
            }
            if !matches!(n.op, Op::Merge) && indeg[i] > 1 {
                return Err(arity("only merge accepts several inputs"));
            }
        }

        // Kahn, always taking the smallest ready id
        let mut remaining = indeg.clone();
        let mut ready: BTreeSet<(String, usize)> = (0..nodes.len())
            .filter(|i| remaining[*i] == 0)
            .map(|i| (nodes[i].id.clone(), i))
            .collect();
        let mut order = Vec::with_capacity(nodes.len());
        while let Some((_, i)) = ready.pop_first() {
            order.push(i);
            for &s in &nodes[i].successors {
                remaining[s] -= 1;
                if remaining[s] == 0 {
                    ready.insert((nodes[s].id.clone(), s));
                }
            }
        }
        if order.len() < nodes.len() {
            let stuck = (0..nodes.len())
                .filter(|i| remaining[*i] > 0)
                .map(|i| nodes[i].id.clone())
                .min()
                .unwrap_or_default();
            return Err(StreamError::Cycle(stuck));
        }

        let mut reached = vec![false; nodes.len()];
        for &i in &order {
            if nodes[i].op.is_source() {
                reached[i] = true;
            }
            if reached[i] {
                for &s in &nodes[i].successors {
                    reached[s] = true;
                }
            }
        }
        if let Some(i) = (0..nodes.len()).find(|i| !reached[*i]) {
            return Err(StreamError::Unreachable(nodes[i].id.clone()));
        }

        Ok(Pipeline {
            name: spec.name,
            nodes,
            order,
            windows: HashMap::new(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, StreamError> {
        Pipeline::new(serde_json::from_str(text)?)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Node ids in execution order.
    pub fn topo_order(&self) -> Vec<&str> {
        self.order.iter().map(|i| self.nodes[*i].id.as_str()).collect()
    }

    /// Readings dropped by windows for arriving behind the watermark.
    pub fn late_count(&self) -> u64 {
        self.windows.values().flat_map(|m| m.values()).map(|w| w.late).sum()
    }

    pub fn process(&mut self, item: &Item) -> Vec<Emission> {
        let mut inbox: Vec<Vec<Item>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Source(p) = &n.op {
                if p.matches(&item.channel) {
                    inbox[i].push(item.clone());
                }
            }
        }
        self.run(inbox, None)
    }

    /// Moves every window's watermark up to `watermark`.
    pub fn flush(&mut self, watermark: Timestamp) -> Vec<Emission> {
        self.run(vec![Vec::new(); self.nodes.len()], Some(watermark))
    }

    fn run(&mut self, mut inbox: Vec<Vec<Item>>, flush: Option<Timestamp>) -> Vec<Emission> {
        let mut out = Vec::new();
        for pos in 0..self.order.len() {
            let i = self.order[pos];
            let items = std::mem::take(&mut inbox[i]);
            let mut produced = Vec::new();
            let node = &self.nodes[i];
            match &node.op {
                Op::Source(_) => produced = items,
                Op::Filter(op, threshold) => {
                    produced = items
                        .into_iter()
                        .filter(|it| it.value.as_f64().is_some_and(|v| op.eval(v, *threshold)))
                        .collect()
                }
                Op::Map { scale, offset, unit } => {
                    for mut it in items {
                        if let Some(v) = it.value.as_f64() {
                            it.value = TypedScalar::Number(v * scale + offset);
                            if let Some(u) = unit {
                                it.unit = u.clone();
                            }
                            produced.push(it);
                        }
                    }
                }
                Op::Window { size_ms, slide_ms, agg, lateness_ms } => {
                    let states = self.windows.entry(i).or_default();
                    for it in &items {
                        produced.extend(
                            states
                                .entry(it.channel.clone())
                                .or_insert_with(|| WindowState::new(*size_ms, *slide_ms, *agg, *lateness_ms))
                                .push(it),
                        );
                    }
                    if let Some(wm) = flush {
                        for state in states.values_mut() {
                            produced.extend(state.flush(wm));
                        }
                    }
                }
                Op::Merge => produced = items,
                sink => {
                    for it in items {
                        let target = match sink {
                            Op::Topic(template) => Target::Topic(
                                template
                                    .replace("{node}", &it.channel.node_id)
                                    .replace("{sensor}", &it.channel.sensor),
                            ),
                            Op::Tsdb(rename) => Target::Tsdb(ChannelKey {
                                node_id: it.channel.node_id.clone(),
                                sensor: rename.clone().unwrap_or_else(|| it.channel.sensor.clone()),
                            }),
                            Op::TwinDesired(property) => Target::TwinDesired {
                                node_id: it.channel.node_id.clone(),
                                property: property.clone(),
                            },
                            Op::Notify(rule, severity) => Target::Notify {
                                rule: rule.clone(),
                                severity: severity.clone(),
                            },
                            _ => unreachable!("non-sink ops handled above"),
                        };
                        out.push(Emission {
                            pipeline: self.name.clone(),
                            sink: node.id.clone(),
                            target,
                            item: it,
                        });
                    }
                    continue;
                }
            }
            let node = &self.nodes[i];
            for &s in &node.successors {
                let into_merge = matches!(self.nodes[s].op, Op::Merge);
                inbox[s].extend(produced.iter().cloned().map(|mut it| {
                    if into_merge && it.source.is_none() {
                        it.source = Some(node.id.clone());
                    }
                    it
                }));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub ts: Timestamp,
    pub rule: String,
    pub severity: String,
    pub channel: ChannelKey,
    pub value: TypedScalar,
}

/// Runs the deployed pipelines and keeps the replay buffer.
#[derive(Debug, Default)]
pub struct StreamProcessor {
    pipelines: Vec<Pipeline>,
    replay: ReplayStore,
    notify_path: Option<PathBuf>,
    notify_file: Option<File>,
    notifications: Vec<Notification>,
}

impl StreamProcessor {
    pub fn new(replay: ReplayStore) -> Self {
        StreamProcessor {
            replay,
            ..StreamProcessor::default()
        }
    }

    /// Appends notifications as JSON lines to `path`.
    pub fn with_notify_log(mut self, path: &Path) -> Self {
        self.notify_path = Some(path.to_path_buf());
        self.notify_file = None;
        self
    }

    pub fn deploy(&mut self, pipeline: Pipeline) {
        self.pipelines.retain(|p| p.name != pipeline.name || p.name.is_empty());
        self.pipelines.push(pipeline);
    }

    pub fn pipelines(&self) -> &[Pipeline] {
        &self.pipelines
    }

    pub fn replay_store(&self) -> &ReplayStore {
        &self.replay
    }

    pub fn notifications(&self) -> &[Notification] {
        &self.notifications
    }

    pub fn late_count(&self) -> u64 {
        self.pipelines.iter().map(Pipeline::late_count).sum()
    }

    pub fn replay(&self, from: Timestamp, to: Timestamp, selector: Option<&ChannelPattern>) -> Result<Vec<ReplayEntry>, StreamError> {
        self.replay.replay(from, to, selector)
    }

    pub fn process(&mut self, reading: &Reading) -> Result<Vec<Emission>, StreamError> {
        let item = Item::from_reading(reading);
        self.replay.push(ReplayEntry::Reading(item.clone()));
        let mut out = Vec::new();
        for p in &mut self.pipelines {
            out.extend(p.process(&item));
        }
        self.record(&out)?;
        Ok(out)
    }

    pub fn flush(&mut self, watermark: Timestamp) -> Result<Vec<Emission>, StreamError> {
        let mut out = Vec::new();
        for p in &mut self.pipelines {
            out.extend(p.flush(watermark));
        }
        self.record(&out)?;
        Ok(out)
    }

    fn record(&mut self, emissions: &[Emission]) -> Result<(), StreamError> {
        for e in emissions {
            match &e.target {
                Target::Topic(_) => self.replay.push(ReplayEntry::Event(e.clone())),
                Target::Notify { rule, severity } => {
                    self.replay.push(ReplayEntry::Event(e.clone()));
                    let n = Notification {
                        ts: e.item.ts,
                        rule: rule.clone(),
                        severity: severity.clone(),
                        channel: e.item.channel.clone(),
                        value: e.item.value.clone(),
                    };
                    if let Some(path) = &self.notify_path {
                        if self.notify_file.is_none() {
                            self.notify_file = Some(OpenOptions::new().create(true).append(true).open(path)?);
                        }
                        let file = self.notify_file.as_mut().expect("opened above");
                        writeln!(file, "{}", serde_json::to_string(&n)?)?;
                    }
                    self.notifications.push(n);
                }
                Target::Tsdb(_) | Target::TwinDesired { .. } => {}
            }
        }
        Ok(())
    }
}
