//! `iotra` operator commands over a state directory.
//!
//! Exit status: 0 on success, 1 when the operation fails, 2 on a usage
//! error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use iotra_core::controlplane::{ControlConfig, ControlPlane, Lifecycle, RegistryEntry};
use iotra_core::msgbus::{Broker, BrokerConfig};
use iotra_core::streams::ChannelPattern;
use iotra_core::tsdb::{Agg, Tsdb};
use iotra_core::twins::{DesiredPatch, TwinService};
use iotra_core::{ChannelKey, Reading, Timestamp, TypedScalar};
use serde_json::{json, Value};

use crate::scenario::{FaultKind, FaultSpec, ScenarioSpec, NODE_CLASS};
use crate::sim::{run_scenario_with, RunOptions};
use crate::state::StateDir;
use crate::HarnessError;

pub const DEFAULT_SECRET: &str = "iotra-dev-secret";

#[derive(Debug, Parser)]
#[command(name = "iotra", version, about = "Operate an iotra deployment and run simulated scenarios")]
pub struct Cli {
    /// State directory holding registry, twins and time series.
    #[arg(long, global = true, env = "IOTRA_STATE", default_value = "iotra-state")]
    pub state: PathBuf,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a new node and issue its identity.
    Commission {
        name: String,
        #[arg(long, default_value = NODE_CLASS)]
        class: String,
    },
    /// Move a commissioned node to active.
    Activate { node: String },
    Decommission { node: String },
    ListNodes,
    /// Merge `key=value` pairs into a node's desired state.
    SetDesired {
        node: String,
        #[arg(required = true)]
        pairs: Vec<String>,
    },
    GetTwin { node: String },
    /// Stored readings of `node/sensor` in `[t1, t2)`.
    Query {
        channel: String,
        t1: String,
        t2: String,
        /// Bucket interval and aggregate, e.g. `--downsample 10s avg`.
        #[arg(long, num_args = 2, value_names = ["INTERVAL", "AGG"])]
        downsample: Option<Vec<String>>,
    },
    /// Latest stored readings of every channel matching `node/sensor`,
    /// where `*` matches any segment.
    Tail {
        filter: String,
        #[arg(short = 'n', long, default_value_t = 10)]
        lines: usize,
    },
    /// Add a fault to a scenario file.
    Inject {
        #[arg(value_enum)]
        fault: FaultArg,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long = "node")]
        nodes: Vec<String>,
        #[arg(long)]
        start: String,
        #[arg(long)]
        end: String,
        #[arg(long)]
        probability: Option<f64>,
        #[arg(long)]
        factor: Option<u32>,
    },
    /// Incidents with their state and actions taken.
    Incidents,
    /// Close an incident and restore its node.
    Remediate { incident: String },
    /// Run a scenario; exits 1 if any assertion fails.
    Run {
        scenario: PathBuf,
        /// Also write the run report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Keep everything in memory instead of the state directory.
        #[arg(long)]
        ephemeral: bool,
        /// Pace the virtual clock at wall-clock speed.
        #[arg(long)]
        realtime: bool,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum FaultArg {
    UplinkOutage,
    Flood,
    DuplicateReplay,
}

impl From<FaultArg> for FaultKind {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::UplinkOutage => FaultKind::UplinkOutage,
            FaultArg::Flood => FaultKind::Flood,
            FaultArg::DuplicateReplay => FaultKind::DuplicateReplay,
        }
    }
}

/// `500ms`, `10s`, `2m`, `1h` or a bare millisecond count.
pub fn parse_duration_ms(text: &str) -> Result<i64, HarnessError> {
    let bad = || HarnessError::BadScenario(format!("bad duration `{text}`"));
    let split = text.find(|c: char| !c.is_ascii_digit()).unwrap_or(text.len());
    let (num, unit) = text.split_at(split);
    let n: i64 = num.parse().map_err(|_| bad())?;
    let scale = match unit {
        "" | "ms" => 1,
        "s" => 1_000,
        "m" => 60_000,
        "h" => 3_600_000,
        _ => return Err(bad()),
    };
    n.checked_mul(scale).ok_or_else(bad)
}

/// RFC 3339, or an offset from the epoch such as `1500` or `10s`.
pub fn parse_time(text: &str) -> Result<Timestamp, HarnessError> {
    if let Ok(ms) = parse_duration_ms(text) {
        return Ok(Timestamp(ms));
    }
    Timestamp::parse(text).map_err(|e| HarnessError::State(format!("bad time `{text}`: {e}")))
}

/// `72` is a number, `true`/`false` booleans, `n:`/`s:`/`b:`/`t:` prefixed
/// values decode as typed, anything else is a string.
pub fn parse_value(text: &str) -> TypedScalar {
    if let Ok(v) = TypedScalar::decode(text) {
        return v;
    }
    if let Ok(n) = text.parse::<f64>() {
        if n.is_finite() {
            return TypedScalar::Number(n);
        }
    }
    match text {
        "true" => TypedScalar::Bool(true),
        "false" => TypedScalar::Bool(false),
        _ => TypedScalar::Str(text.to_string()),
    }
}

struct Ctx {
    state: StateDir,
    secret: Vec<u8>,
}

impl Ctx {
    fn control(&self) -> Result<ControlPlane, HarnessError> {
        self.state.create()?;
        Ok(ControlPlane::open(ControlConfig::new(&self.secret), &self.state.registry_path())?)
    }

    fn broker(&self) -> Result<Broker, HarnessError> {
        let mut b = Broker::new(BrokerConfig::default());
        for f in self.state.load_retained()? {
            b.restore_retained(f);
        }
        Ok(b)
    }

    fn twins(&self) -> Result<TwinService, HarnessError> {
        Ok(self.state.load_twins()?.unwrap_or_else(|| TwinService::new(10_000)))
    }

    fn tsdb(&self) -> Result<Tsdb, HarnessError> {
        Ok(Tsdb::open(self.state.root())?)
    }
}

fn entry_json(e: &RegistryEntry) -> Value {
    serde_json::to_value(e).unwrap_or(Value::Null)
}

fn reading_json(r: &Reading) -> Value {
    json!({
        "channel": r.channel.to_string(),
        "ts": r.ts,
        "seq": r.seq,
        "value": r.value,
        "unit": r.unit,
    })
}

fn reading_line(r: &Reading) -> String {
    format!("{}  {}  seq={}  {} {}", r.ts, r.channel, r.seq, r.value.text(), r.unit)
}

/// Output of one command: JSON for `--json`, text otherwise.
struct Out {
    json: Value,
    text: String,
    ok: bool,
}

impl Out {
    fn new(json: Value, text: String) -> Self {
        Out { json, text, ok: true }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let secret = std::env::var("IOTRA_SECRET").unwrap_or_else(|_| DEFAULT_SECRET.to_string());
    let ctx = Ctx {
        state: StateDir::new(&cli.state),
        secret: secret.into_bytes(),
    };
    match execute(&ctx, cli.command) {
        Ok(o) => {
            let _ = if cli.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&o.json).unwrap_or_default())
            } else {
                writeln!(out, "{}", o.text.trim_end())
            };
            if o.ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let _ = if cli.json {
                writeln!(err, "{}", json!({ "error": e.to_string() }))
            } else {
                writeln!(err, "error: {e}")
            };
            1
        }
    }
}

fn transition(ctx: &Ctx, node: &str, to: Lifecycle) -> Result<Out, HarnessError> {
    let mut cp = ctx.control()?;
    let mut broker = ctx.broker()?;
    let e = cp.transition(node, to, Timestamp::now(), &mut broker)?;
    Ok(Out::new(entry_json(&e), format!("{} {}", e.node_id, e.lifecycle)))
}

fn execute(ctx: &Ctx, cmd: Command) -> Result<Out, HarnessError> {
    match cmd {
        Command::Commission { name, class } => {
            let mut cp = ctx.control()?;
            let models = ctx.state.load_models()?;
            let e = cp.commission(&name, &class, &models, Timestamp::now())?;
            let mut twins = ctx.twins()?;
            twins.register(&e.node_id, &class);
            ctx.state.save_twins(&twins)?;
            Ok(Out::new(entry_json(&e), format!("{} {} ({})", e.node_id, e.lifecycle, e.name)))
        }
        Command::Activate { node } => transition(ctx, &node, Lifecycle::Active),
        Command::Decommission { node } => transition(ctx, &node, Lifecycle::Decommissioned),
        Command::ListNodes => {
            let cp = ctx.control()?;
            let entries: Vec<&RegistryEntry> = cp.entries().collect();
            let text = entries
                .iter()
                .map(|e| format!("{}  {:<14} {:<12} {}", e.node_id, e.lifecycle.to_string(), e.class_name, e.name))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Out::new(Value::Array(entries.into_iter().map(entry_json).collect()), text))
        }
        Command::SetDesired { node, pairs } => {
            let mut set = iotra_core::infomodel::PayloadMap::new();
            for p in &pairs {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| HarnessError::State(format!("`{p}` is not key=value")))?;
                set.insert(k.to_string(), parse_value(v));
            }
            let models = ctx.state.load_models()?;
            let mut twins = ctx.twins()?;
            let mut broker = ctx.broker()?;
            let patch = DesiredPatch {
                set,
                origin: "cli".into(),
                ts: Timestamp::now(),
            };
            let version = twins.set_desired(&node, &patch, &models, &mut broker)?;
            ctx.state.save_twins(&twins)?;
            ctx.state.save_retained(broker.retained_frames())?;
            Ok(Out::new(json!({ "node_id": node, "desired_version": version }), version.to_string()))
        }
        Command::GetTwin { node } => {
            let t = ctx.twins()?.get_twin(&node)?;
            let mut text = format!(
                "{} class={} desired_version={} ack_version={} converged={} {:?}\n",
                t.node_id,
                t.class_name,
                t.desired_version,
                t.ack_version,
                t.converged(),
                t.connectivity
            );
            for (k, v) in &t.reported {
                text.push_str(&format!("  reported {k} = {}\n", v.text()));
            }
            for (k, v) in &t.desired {
                text.push_str(&format!("  desired  {k} = {}\n", v.text()));
            }
            Ok(Out::new(serde_json::to_value(&t)?, text))
        }
        Command::Query { channel, t1, t2, downsample } => {
            let key: ChannelKey = channel
                .parse()
                .map_err(|e| HarnessError::State(format!("bad channel `{channel}`: {e}")))?;
            let (t1, t2) = (parse_time(&t1)?, parse_time(&t2)?);
            let db = ctx.tsdb()?;
            match downsample {
                Some(ds) => {
                    let interval = parse_duration_ms(&ds[0])?;
                    let agg: Agg = ds[1].parse()?;
                    let buckets = db.downsample(&key, t1, t2, interval, agg)?;
                    let text = buckets
                        .iter()
                        .map(|(t, v)| format!("{t}  {v}"))
                        .collect::<Vec<_>>()
                        .join("\n");
                    let js = buckets.iter().map(|(t, v)| json!({ "ts": t, "value": v })).collect();
                    Ok(Out::new(Value::Array(js), text))
                }
                None => {
                    let rs = db.query_range(&key, t1, t2)?;
                    let text = rs.iter().map(reading_line).collect::<Vec<_>>().join("\n");
                    Ok(Out::new(Value::Array(rs.iter().map(reading_json).collect()), text))
                }
            }
        }
        Command::Tail { filter, lines } => {
            let pattern: ChannelPattern = filter.parse()?;
            let db = ctx.tsdb()?;
            let mut latest: Vec<Reading> = Vec::new();
            let channels: Vec<ChannelKey> = db.channels().filter(|c| pattern.matches(c)).cloned().collect();
            for c in channels {
                let rs = db.query_all(&c)?;
                latest.extend(rs.into_iter().rev().take(lines));
            }
            latest.sort_by(|a, b| (a.ts, &a.channel, a.seq).cmp(&(b.ts, &b.channel, b.seq)));
            let start = latest.len().saturating_sub(lines);
            let latest = &latest[start..];
            let text = latest.iter().map(reading_line).collect::<Vec<_>>().join("\n");
            Ok(Out::new(Value::Array(latest.iter().map(reading_json).collect()), text))
        }
        Command::Inject {
            fault,
            scenario,
            nodes,
            start,
            end,
            probability,
            factor,
        } => {
            let mut spec = ScenarioSpec::load(&scenario)?;
            let refs: Vec<&str> = nodes.iter().map(String::as_str).collect();
            let mut f = FaultSpec::new(fault.into(), &refs, parse_duration_ms(&start)?, parse_duration_ms(&end)?);
            if let Some(p) = probability {
                f.probability = p;
            }
            if let Some(x) = factor {
                f.factor = x;
            }
            spec.faults.push(f.clone());
            spec.validate()?;
            spec.save(&scenario)?;
            Ok(Out::new(
                serde_json::to_value(&f)?,
                format!("added {:?} fault to {} ({} faults)", f.kind, scenario.display(), spec.faults.len()),
            ))
        }
        Command::Incidents => {
            let cp = ctx.control()?;
            let incs: Vec<_> = cp.incidents().collect();
            let text = incs
                .iter()
                .map(|i| format!("{}  {}  {:?}  {:?}  opened {}", i.incident_id, i.node_id, i.kind, i.state, i.opened_ts))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Out::new(serde_json::to_value(&incs)?, text))
        }
        Command::Remediate { incident } => {
            let mut cp = ctx.control()?;
            let mut broker = ctx.broker()?;
            let inc = cp.remediate(&incident, Timestamp::now(), &mut broker)?;
            Ok(Out::new(serde_json::to_value(&inc)?, format!("{} closed, {} restored", inc.incident_id, inc.node_id)))
        }
        Command::Run {
            scenario,
            report,
            ephemeral,
            realtime,
        } => {
            let spec = ScenarioSpec::load(&scenario)?;
            let opts = RunOptions {
                secret: ctx.secret.clone(),
                state_dir: (!ephemeral).then(|| ctx.state.root().to_path_buf()),
                realtime,
            };
            let r = run_scenario_with(&spec, opts)?;
            if let Some(path) = report {
                write_report(&path, &r)?;
            }
            let mut text = format!(
                "{}: {} readings generated, {} stored, {} incidents\n",
                r.scenario,
                r.total_generated(),
                r.total_stored(),
                r.incidents.len()
            );
            for a in &r.assertions {
                text.push_str(&format!("  {} {}: {}\n", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail));
            }
            let mut o = Out::new(serde_json::to_value(&r)?, text);
            o.ok = r.passed;
            Ok(o)
        }
    }
}

fn write_report(path: &Path, r: &crate::RunReport) -> Result<(), HarnessError> {
    std::fs::write(path, serde_json::to_string_pretty(r)?)?;
    Ok(())
}
