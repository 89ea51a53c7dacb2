use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::EdgeError;
use crate::types::{CmpOp, Reading, TypedScalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Event,
    Alert,
}

/// Threshold rule with debounce, evaluated on each new reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRule {
    pub rule_id: String,
    /// Sensor name, or `*` for every local channel.
    pub channel: String,
    pub op: CmpOp,
    pub threshold: f64,
    #[serde(default = "one")]
    pub debounce_count: u32,
    pub severity: Severity,
}

fn one() -> u32 {
    1
}

impl EdgeRule {
    pub fn selects(&self, sensor: &str) -> bool {
        self.channel == "*" || self.channel == sensor
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub rule_id: String,
    pub severity: Severity,
    pub reading: Reading,
}

/// Debounce counters for a rule set. A rule fires once its predicate held
/// on `debounce_count` consecutive readings of a selected channel, then
/// starts counting again from zero.
#[derive(Debug, Clone, Default)]
pub struct RuleEngine {
    rules: Vec<EdgeRule>,
    streaks: HashMap<(String, String), u32>,
}

impl RuleEngine {
    pub fn new(rules: Vec<EdgeRule>) -> Result<Self, EdgeError> {
        for r in &rules {
            if r.debounce_count == 0 {
                return Err(EdgeError::InvalidConfig(format!("rule {} has debounce 0", r.rule_id)));
            }
        }
        Ok(RuleEngine {
            rules,
            streaks: HashMap::new(),
        })
    }

    pub fn rules(&self) -> &[EdgeRule] {
        &self.rules
    }

    pub fn evaluate(&mut self, reading: &Reading) -> Vec<Event> {
        let sensor = reading.channel.sensor.as_str();
        let mut events = Vec::new();
        for rule in self.rules.iter().filter(|r| r.selects(sensor)) {
            let held = reading
                .value
                .as_f64()
                .is_some_and(|v| rule.op.eval(v, rule.threshold));
            // a wildcard rule debounces each channel separately
            let streak = self
                .streaks
                .entry((rule.rule_id.clone(), sensor.to_string()))
                .or_default();
            if !held {
                *streak = 0;
                continue;
            }
            *streak += 1;
            if *streak >= rule.debounce_count {
                *streak = 0;
                events.push(Event {
                    rule_id: rule.rule_id.clone(),
                    severity: rule.severity,
                    reading: reading.clone(),
                });
            }
        }
        events
    }

    /// Clears every debounce streak.
    pub fn reset(&mut self) {
        self.streaks.clear();
    }
}

/// Boolean condition over the latest local channel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Condition {
    All { all: Vec<Condition> },
    Any { any: Vec<Condition> },
    Cmp { channel: String, op: CmpOp, value: f64 },
}

impl Condition {
    pub fn cmp(channel: &str, op: CmpOp, value: f64) -> Self {
        Condition::Cmp {
            channel: channel.to_string(),
            op,
            value,
        }
    }

    pub fn channels(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_channels(&mut out);
        out
    }

    fn collect_channels<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Condition::All { all: c } | Condition::Any { any: c } => {
                c.iter().for_each(|x| x.collect_channels(out))
            }
            Condition::Cmp { channel, .. } => {
                out.insert(channel);
            }
        }
    }

    pub fn eval(&self, snapshot: &BTreeMap<String, f64>) -> Result<bool, EdgeError> {
        match self {
            Condition::Cmp { channel, op, value } => snapshot
                .get(channel)
                .map(|v| op.eval(*v, *value))
                .ok_or_else(|| EdgeError::UnknownChannelInCondition(channel.clone())),
            Condition::All { all } => {
                let mut result = true;
                for c in all {
                    result &= c.eval(snapshot)?;
                }
                Ok(result)
            }
            Condition::Any { any } => {
                let mut result = false;
                for c in any {
                    result |= c.eval(snapshot)?;
                }
                Ok(result)
            }
        }
    }
}

/// `actuator.property := value`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actuation {
    pub actuator: String,
    pub property: String,
    pub value: TypedScalar,
}

impl Actuation {
    pub fn new(actuator: &str, property: &str, value: TypedScalar) -> Self {
        Actuation {
            actuator: actuator.to_string(),
            property: property.to_string(),
            value,
        }
    }

    /// Key of the device property this actuation drives, e.g. `fan_power`.
    pub fn state_key(&self) -> String {
        format!("{}_{}", self.actuator, self.property)
    }
}

impl fmt::Display for Actuation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{} := {}", self.actuator, self.property, self.value.text())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRule {
    pub rule_id: String,
    pub condition: Condition,
    pub action: Actuation,
}

/// Evaluates every rule against the snapshot, in `rule_id` order. Depends
/// on nothing but its arguments, so it behaves the same with the uplink
/// down.
pub fn run_local_control(rules: &[ControlRule], latest: &BTreeMap<String, f64>) -> Result<Vec<Actuation>, EdgeError> {
    let mut ordered: Vec<&ControlRule> = rules.iter().collect();
    ordered.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
    let mut out = Vec::new();
    for rule in ordered {
        if rule.condition.eval(latest)? {
            out.push(rule.action.clone());
        }
    }
    Ok(out)
}
